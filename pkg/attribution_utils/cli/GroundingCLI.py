"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 backend outage
(every item of a run failed at the transport layer).
"""

import argparse
import json
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from ..benchmarks.GenerationRunner import EvalTask, GenerationRunner, GenerationVariant
from ..benchmarks.Metrics import aggregate
from ..benchmarks.ResultsProcessor import ResultsProcessor
from ..config.RunConfig import RunConfig
from ..core.Citations import parse_response
from ..core.Errors import AttributionError, BackendError, ConfigError, ManifestError, MetaEvalError, \
    UnknownQuestionError
from ..core.EvalPipeline import DECOMPOSITION_VARIANTS, EvalPipeline, EvalRecord
from ..core.JudgeBackends import build_backends
from ..core.JudgeGateway import JudgeGateway, PromptLibrary
from ..core.MediaStore import MediaStore, load_manifest
from ..core.ResponseCache import ResponseCache
from ..overall.Annotations import agreement, load_gold_labels, merge_annotations_union
from ..overall.BaselineJudges import BaselineJudge, scores_by_scorer
from ..overall.MetaEvaluator import MetaEvaluator, correlation_report
from ..programs.ProgramExecutor import ProgramExecutor
from ..programs.ProgramParser import GROUNDINGS, PARADIGMS
from ..programs.Retrieval import build_retriever
from .RunArtifacts import (ResponseLine, RunManifest, ScoreLine, TaskLine, read_jsonl, write_json_atomic,
                           write_jsonl_atomic)

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_OUTAGE = 3

META_EVAL_MODES = ("verifiability-bacc", "decomposition-f1", "propagation", "entailment", "correlate", "baselines")
EFFORT_LEVELS = ("minimal", "low", "medium", "high")
MAX_LISTED_ORPHANS = 20


class Session:
    """Config, gateway and (optionally) media shared by one command."""

    def __init__(self, args: argparse.Namespace, command: str, argv: Sequence[str]):
        overrides = {"concurrency": args.concurrency,
                     "cache_dir": str(args.cache_dir) if args.cache_dir else None}
        self.config = RunConfig(args.config, overrides=overrides)
        if args.mock is not None:
            if not Path(args.mock).is_file():
                raise ConfigError(f"Mock script not found: {args.mock}")
            self.config.use_mock(args.mock)
        self.prompts = self.config.check_assets(PromptLibrary(self.config.get_property("template_dir")))
        self.width = int(self.config.get_property("concurrency") or 1)
        self.show_progress = not args.quiet
        self.manifest = RunManifest(command, argv, self.config.digest())
        self._mock_delay_s = args.mock_delay
        self._gateway: Optional[JudgeGateway] = None

    @property
    def gateway(self) -> JudgeGateway:
        if self._gateway is None:
            backends = build_backends(self.config.get_property("mock_script"), self._mock_delay_s)
            self._gateway = JudgeGateway(backends, ResponseCache(self.config.cache_dir), self.prompts)
        return self._gateway

    def media(self, manifest_path: Path) -> MediaStore:
        self.manifest.add_input(manifest_path)
        return MediaStore(load_manifest(manifest_path), self.config.cache_dir,
                          self.config.get_property("extractor"), int(self.config.get_property("segment_padding_s")))

    def read(self, path: Path, model=None) -> List[Any]:
        rows = read_jsonl(path, model)
        self.manifest.add_input(path)
        return rows

    def write_lines(self, path: Path, rows) -> Path:
        self.manifest.add_output(write_jsonl_atomic(path, rows))
        return path

    def write_document(self, path: Path, document: Any) -> Path:
        self.manifest.add_output(write_json_atomic(path, document))
        return path

    def finish(self, out_dir: Path, extra: Optional[Dict[str, Any]] = None) -> None:
        counts = self._gateway.counts() if self._gateway is not None else {}
        self.manifest.write(out_dir, counts, extra)


def _tasks(session: Session, path: Path) -> List[EvalTask]:
    tasks = []
    for line in session.read(path, TaskLine):
        try:
            tasks.append(line.to_task())
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e
    return tasks


def _safe_name(question_id: str) -> str:
    return re.sub(r"[^\w.-]", "_", question_id)


# --- commands ----------------------------------------------------------------

def cmd_generate(args: argparse.Namespace, session: Session) -> int:
    tasks = _tasks(session, args.tasks)
    media = session.media(args.manifest)
    variant = GenerationVariant.parse(args.variant)
    runner = GenerationRunner(session.gateway, media, session.width,
                              posthoc_source=session.config.flag("posthoc_source"),
                              show_progress=session.show_progress)
    levels: List[Optional[str]] = [None]
    if args.effort_level:
        levels = [level.strip() for level in args.effort_level.split(",") if level.strip()]
        unknown = [level for level in levels if level not in EFFORT_LEVELS]
        if unknown:
            raise ConfigError(f"Unknown effort levels {unknown} (expected {', '.join(EFFORT_LEVELS)})")

    outages = []
    summary = {}
    for level in levels:
        run = runner.run_generation(tasks, variant, session.config.judge("generation"), effort_level=level)
        suffix = f"{variant.value}_{level}" if level else variant.value
        session.write_lines(args.out / f"responses_{suffix}.jsonl", [r.to_line() for r in run.responses])
        if run.failures:
            session.write_lines(args.out / f"failures_{suffix}.jsonl", [r.to_line() for r in run.failures])
        summary[suffix] = {"responses": len(run.responses), "failures": len(run.failures)}
        outages.append(run.outage)
        LOGGER.info("%s: %d responses, %d failures", suffix, len(run.responses), len(run.failures))
    session.finish(args.out, {"runs": summary})
    print(json.dumps(summary, indent=2))
    return EXIT_OUTAGE if all(outages) else EXIT_OK


def _evaluate_one(pipeline: EvalPipeline, line: ResponseLine, gold: Dict[str, Optional[str]]
                  ) -> Tuple[Optional[EvalRecord], Optional[str], bool]:
    response = parse_response(line.raw, line.question_id)
    try:
        return pipeline.evaluate_response(response, gold.get(line.question_id)), None, False
    except UnknownQuestionError as e:
        return None, f"{line.question_id}: skipped, {e}", False
    except AttributionError as e:
        return None, f"{line.question_id}: evaluation failed, {type(e).__name__}: {e}", isinstance(e, BackendError)


def cmd_evaluate(args: argparse.Namespace, session: Session) -> int:
    lines = session.read(args.responses, ResponseLine)
    media = session.media(args.manifest)
    gold = {t.question_id: t.gold_answer for t in _tasks(session, args.tasks)} if args.tasks else {}
    pipeline = EvalPipeline(session.gateway, media, session.config.judges, session.width,
                            atomic_verifiability=session.config.flag("atomic_verifiability"),
                            decomposition_variant=args.decomposition_variant)
    with ThreadPoolExecutor(max_workers=session.width) as pool:
        futures = pool.map(lambda line: _evaluate_one(pipeline, line, gold), lines)
        outcomes = list(tqdm(futures, total=len(lines), desc="evaluate", disable=not session.show_progress))

    records = [record for record, _, _ in outcomes if record is not None]
    skipped = [message for _, message, _ in outcomes if message is not None]
    for message in skipped:
        LOGGER.warning(message)
    report = aggregate(records, skipped=len(skipped))

    session.write_lines(args.out / "eval.jsonl", records)
    session.write_document(args.out / "report.json", {**report.to_dict(), "skipped_responses": skipped})
    run_id = args.run_id or args.responses.stem
    processor = ResultsProcessor(run_id, session.config.get_property("run_title") or run_id)
    warnings = [w for record in records for w in record.warnings] + skipped
    table = processor.generate_table(report, warnings)
    session.manifest.add_output(processor.save_table(args.out))
    if args.plot:
        plot = processor.generate_plot(table, args.out, session.config.get_property("plot_color") or "#673147")
        if plot is not None:
            session.manifest.add_output(plot)
    session.finish(args.out, {"responses": len(lines), "evaluated": len(records), "skipped": len(skipped)})
    print(processor.render())
    outage = bool(outcomes) and all(failed for _, _, failed in outcomes)
    return EXIT_OUTAGE if outage else EXIT_OK


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{name.replace('_', '-')}" for name in names if getattr(args, name) is None]
    if missing:
        raise ConfigError(f"meta-eval {args.mode} needs {', '.join(missing)}")


def cmd_meta_eval(args: argparse.Namespace, session: Session) -> int:
    mode = args.mode
    records = session.read(args.eval) if args.eval is not None else []
    evaluator = MetaEvaluator(records)
    gold = None
    if args.gold is not None:
        session.manifest.add_input(args.gold)
        gold = load_gold_labels(args.gold)

    if mode == "verifiability-bacc":
        _require(args, "eval", "gold")
        report = evaluator.verifiability_report(gold)
    elif mode == "decomposition-f1":
        _require(args, "eval", "gold")
        report = evaluator.decomposition_report(gold)
    elif mode == "propagation":
        _require(args, "eval")
        report = evaluator.propagation_report()
    elif mode == "entailment":
        _require(args, "eval", "gold")
        report = evaluator.entailment_report(gold)
    elif mode == "correlate":
        _require(args, "eval", "gold")
        scorers = {"ours": evaluator.ours_scores()}
        for path in args.scores or []:
            lines = [line.model_dump() for line in session.read(path, ScoreLine)]
            scorers.update(scores_by_scorer(lines))
        report = correlation_report(scorers, gold)
    else:
        _require(args, "responses", "tasks", "manifest")
        tasks = {t.question_id: t for t in _tasks(session, args.tasks)}
        media = session.media(args.manifest)
        pairs = []
        for line in session.read(args.responses, ResponseLine):
            if line.question_id not in tasks or line.question_id not in media.manifest:
                LOGGER.warning("%s: no task or media, skipped by the baseline judges", line.question_id)
                continue
            pairs.append((parse_response(line.raw, line.question_id), tasks[line.question_id]))
        judge = BaselineJudge(session.gateway)
        lines = judge.score_all(pairs, session.config.judge(args.judge_slot), session.width, session.show_progress)
        session.write_lines(args.out / "baseline_scores.jsonl", lines)
        report = {"mode": "baselines", "scored": len(pairs),
                  "errors": sum(1 for line in lines if line.get("error"))}
        if gold is not None:
            scorers = scores_by_scorer(lines)
            if records:
                scorers["ours"] = evaluator.ours_scores()
            report["correlation"] = correlation_report(scorers, gold)

    session.write_document(args.out / f"meta_eval_{mode}.json", report)
    session.finish(args.out, {"mode": mode})
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_run_program(args: argparse.Namespace, session: Session) -> int:
    tasks = _tasks(session, args.tasks)
    media = session.media(args.manifest)
    settings = session.config.get_property("retrieval")
    retriever = build_retriever(settings, session.gateway, media, session.config.judge("retrieval"), session.width)
    executor = ProgramExecutor(session.gateway, media, retriever, session.config.judges, settings,
                               refinement=session.config.flag("refinement"),
                               refine_synthesize=session.config.flag("refine_synthesize"),
                               tag_untagged_with_judge=session.config.flag("tag_untagged_with_judge"),
                               width=session.width, show_progress=session.show_progress)
    results = executor.run_all(tasks, args.paradigm, args.grounding)

    out_dir = args.out / f"{args.paradigm}_{args.grounding}"
    for result in results:
        if result.trace is not None:
            session.write_document(out_dir / "traces" / f"{_safe_name(result.question_id)}.json", result.trace)
    session.write_lines(out_dir / "responses.jsonl", [r.to_line() for r in results if r.ok])
    failures = [r.to_line() for r in results if not r.ok]
    if failures:
        session.write_lines(out_dir / "failures.jsonl", failures)
    summary = {"variant": f"{args.paradigm}_{args.grounding}", "responses": len(results) - len(failures),
               "failures": len(failures),
               "retrieval_calls": sum(r.trace.retrieval_calls for r in results if r.trace is not None)}
    session.finish(out_dir, summary)
    print(json.dumps(summary, indent=2))
    outage = bool(results) and all(r.backend_failure for r in results)
    return EXIT_OUTAGE if outage else EXIT_OK


def cmd_annotations(args: argparse.Namespace, session: Session) -> int:
    first, second = load_gold_labels(args.first), load_gold_labels(args.second)
    session.manifest.add_input(args.first)
    session.manifest.add_input(args.second)
    if args.action == "merge":
        if args.out is None:
            raise ConfigError("annotations merge needs --out FILE")
        merged = merge_annotations_union(first, second)
        session.write_lines(args.out, merged.to_lines())
        session.finish(args.out.parent, {"action": "merge", "units": len(merged.items)})
        print(f"Merged {len(merged.items)} units into {args.out}")
    else:
        value = agreement(first, second)
        out_dir = args.out or Path(".")
        session.finish(out_dir, {"action": "agreement", "agreement": value})
        print(json.dumps({"agreement": value}))
    return EXIT_OK


def cmd_cache(args: argparse.Namespace, session: Session) -> int:
    cache = ResponseCache(session.config.cache_dir)
    if args.action == "clear":
        result: Dict[str, Any] = {"removed": cache.clear()}
    else:
        result = cache.inspect()
    if session.config.cache_dir is not None:
        session.finish(session.config.cache_dir, {"action": args.action, **result})
    print(json.dumps(result, indent=2))
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attribution-utils",
                                     description="Multimodal attribution evaluation and grounding programs")
    parser.add_argument("--config", type=Path, default=None, help="Config JSON file or directory")
    parser.add_argument("--concurrency", type=int, default=None, help="Override the worker width")
    parser.add_argument("--cache-dir", type=Path, default=None, help="Override the cache directory")
    parser.add_argument("--mock", type=Path, default=None, help="Scripted-response file for the mock judge")
    parser.add_argument("--mock-delay", type=float, default=0.0, help=argparse.SUPPRESS)
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG")
    parser.add_argument("--quiet", action="store_true", help="Only warnings; no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Generate candidate responses")
    gen.add_argument("tasks", type=Path)
    gen.add_argument("--manifest", type=Path, required=True)
    gen.add_argument("--variant", choices=[v.value for v in GenerationVariant], default="citation")
    gen.add_argument("--effort-level", default=None, help="One level or a comma list (effort sweep)")
    gen.add_argument("--out", type=Path, default=Path("runs/generate"))
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", help="Score responses: verifiability, decomposition, attribution")
    ev.add_argument("responses", type=Path)
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--tasks", type=Path, default=None, help="Task file with gold answers")
    ev.add_argument("--decomposition-variant", choices=DECOMPOSITION_VARIANTS, default="full")
    ev.add_argument("--run-id", default=None)
    ev.add_argument("--plot", action="store_true")
    ev.add_argument("--out", type=Path, default=Path("runs/evaluate"))
    ev.set_defaults(func=cmd_evaluate)

    meta = sub.add_parser("meta-eval", help="Compare pipeline judgments with human labels")
    meta.add_argument("mode", choices=META_EVAL_MODES)
    meta.add_argument("--eval", type=Path, default=None, help="eval.jsonl from the evaluate command")
    meta.add_argument("--gold", type=Path, default=None)
    meta.add_argument("--scores", type=Path, nargs="*", default=None, help="Baseline score files (correlate)")
    meta.add_argument("--responses", type=Path, default=None)
    meta.add_argument("--tasks", type=Path, default=None)
    meta.add_argument("--manifest", type=Path, default=None)
    meta.add_argument("--judge-slot", default="verifiability")
    meta.add_argument("--out", type=Path, default=Path("runs/meta_eval"))
    meta.set_defaults(func=cmd_meta_eval)

    prog = sub.add_parser("run-program", help="Plan and execute grounding programs")
    prog.add_argument("tasks", type=Path)
    prog.add_argument("--manifest", type=Path, required=True)
    prog.add_argument("--paradigm", choices=PARADIGMS, required=True)
    prog.add_argument("--grounding", choices=GROUNDINGS, required=True)
    prog.add_argument("--out", type=Path, default=Path("runs/programs"))
    prog.set_defaults(func=cmd_run_program)

    ann = sub.add_parser("annotations", help="Merge annotator label files or measure their agreement")
    ann.add_argument("action", choices=("merge", "agreement"))
    ann.add_argument("first", type=Path)
    ann.add_argument("second", type=Path)
    ann.add_argument("--out", type=Path, default=None)
    ann.set_defaults(func=cmd_annotations)

    cache = sub.add_parser("cache", help="Inspect or clear the judge response cache")
    cache.add_argument("action", choices=("inspect", "clear"))
    cache.set_defaults(func=cmd_cache)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        session = Session(args, args.command, argv)
        return args.func(args, session)
    except MetaEvalError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.orphans:
            shown = e.orphans[:MAX_LISTED_ORPHANS]
            more = len(e.orphans) - len(shown)
            print("orphan units: " + ", ".join(shown) + (f" (+{more} more)" if more > 0 else ""), file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as e:
        print(f"error: judge backend unavailable: {e}", file=sys.stderr)
        return EXIT_OUTAGE


if __name__ == "__main__":
    sys.exit(main())
