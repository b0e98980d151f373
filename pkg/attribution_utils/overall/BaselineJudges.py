import logging
import re
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from ..benchmarks.GenerationRunner import EvalTask
from ..core.Citations import Response
from ..core.Errors import AttributionError, VerdictParseError
from ..core.JudgeGateway import JudgeConfig, JudgeGateway, json_object

LOGGER = logging.getLogger(__name__)

Triple = Tuple[Optional[float], Optional[float], Optional[float]]

_SCORE_RE = re.compile(r"(?<![\d.])([1-5])(?!\d|\.\d)")
HOLISTIC_NUDGE = "Output only a single integer from 1 to 5."
DISENTANGLED_NUDGE = 'Return only the JSON object {"coverage": number, "recall": number, "precision": number}.'


def parse_holistic_score(raw: str) -> int:
    """First standalone digit 1-5 ("score: 3/5" reads as 3)."""
    match = _SCORE_RE.search(raw)
    if not match:
        raise VerdictParseError(raw, "No 1-5 score in holistic judge output")
    return int(match.group(1))


def parse_disentangled_scores(raw: str) -> Triple:
    obj = json_object(raw)
    if obj is None:
        raise VerdictParseError(raw, "No JSON object in disentangled judge output")
    try:
        values = tuple(min(1.0, max(0.0, float(obj[key]))) for key in ("coverage", "recall", "precision"))
    except (KeyError, TypeError, ValueError) as e:
        raise VerdictParseError(raw, f"Missing or non-numeric score: {e}")
    return values


def _mean(values: Sequence[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def combined_score(coverage: Optional[float], recall: Optional[float], precision: Optional[float]) -> Optional[float]:
    """Coverage times the F1 of a baseline's recall and precision."""
    if coverage is None or recall is None or precision is None:
        return None
    f1 = 0.0 if recall == 0 or precision == 0 else 2 * recall * precision / (recall + precision)
    return coverage * f1


class BaselineJudge:
    """Direct LLM-judge scorers used as correlation baselines."""

    def __init__(self, gateway: JudgeGateway):
        self.gateway = gateway

    def _scored(self, task_kind: str, prompt: str, cfg: JudgeConfig, parse, nudge: str):
        raw = self.gateway.complete(task_kind, prompt, cfg)
        try:
            return parse(raw)
        except VerdictParseError:
            LOGGER.debug("Unparseable %s output, retrying with nudge", task_kind)
        return parse(self.gateway.complete(task_kind, f"{prompt}\n\n{nudge}", cfg))

    def holistic_judge(self, response: Response, task: EvalTask, cfg: JudgeConfig) -> int:
        prompt = self.gateway.render("holistic", question=task.question, options=task.options_block(),
                                     response=response.raw)
        return self._scored("holistic", prompt, cfg, parse_holistic_score, HOLISTIC_NUDGE)

    def disentangled_judge(self, response: Response, task: EvalTask, cfg: JudgeConfig,
                           granularity: str = "response") -> Triple:
        """(coverage, attribution recall, attribution precision)."""
        fields = dict(question=task.question, options=task.options_block(), response=response.raw)
        if granularity == "response":
            prompt = self.gateway.render("disentangled_response", **fields)
            return self._scored("disentangled", prompt, cfg, parse_disentangled_scores, DISENTANGLED_NUDGE)
        if granularity != "sentence":
            raise ValueError(f"Unknown granularity: {granularity}")
        if not response.sentences:
            return None, None, None
        triples = []
        for s in response.sentences:
            prompt = self.gateway.render("disentangled_sentence", sentence=s.raw_text, **fields)
            triples.append(self._scored("disentangled", prompt, cfg, parse_disentangled_scores,
                                        DISENTANGLED_NUDGE))
        return tuple(_mean([t[i] for t in triples]) for i in range(3))

    def score_response(self, response: Response, task: EvalTask, cfg: JudgeConfig) -> List[Dict[str, object]]:
        """Score lines for the three baseline scorers; a failing scorer yields an error line."""
        lines: List[Dict[str, object]] = []
        qid = response.question_id
        try:
            score = self.holistic_judge(response, task, cfg)
            lines.append({"question_id": qid, "scorer": "holistic", "holistic": score,
                          "grounding_score": (score - 1) / 4})
        except AttributionError as e:
            lines.append({"question_id": qid, "scorer": "holistic", "error": str(e)})
        for scorer, granularity in (("disentangled", "response"), ("disentangled_sentence", "sentence")):
            try:
                coverage, recall, precision = self.disentangled_judge(response, task, cfg, granularity)
                lines.append({"question_id": qid, "scorer": scorer, "coverage": coverage, "recall": recall,
                              "precision": precision,
                              "grounding_score": combined_score(coverage, recall, precision)})
            except AttributionError as e:
                lines.append({"question_id": qid, "scorer": scorer, "error": str(e)})
        return lines

    def score_all(self, pairs: Sequence[Tuple[Response, EvalTask]], cfg: JudgeConfig, width: int = 1,
                  show_progress: bool = False) -> List[Dict[str, object]]:
        with ThreadPoolExecutor(max_workers=max(1, width)) as pool:
            futures = pool.map(lambda pair: self.score_response(pair[0], pair[1], cfg), pairs)
            scored = list(tqdm(futures, total=len(pairs), desc="baselines", disable=not show_progress))
        return [line for lines in scored for line in lines]


def scores_by_scorer(lines: Sequence[Dict[str, object]]) -> Dict[str, Dict[str, Dict[str, Optional[float]]]]:
    """Reshape score lines into scorer -> question_id -> metric -> value."""
    table: Dict[str, Dict[str, Dict[str, Optional[float]]]] = {}
    for line in lines:
        if line.get("error"):
            continue
        table.setdefault(str(line["scorer"]), {})[str(line["question_id"])] = {
            key: line.get(key) for key in ("coverage", "precision", "recall", "grounding_score")
        }
    return table
