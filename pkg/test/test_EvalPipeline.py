from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

import pytest

from attribution_utils.cli.RunArtifacts import write_jsonl_atomic
from attribution_utils.core.Citations import Citation, Modality, TimeSpan, parse_response
from attribution_utils.core.EvalPipeline import (EvalPipeline, EvalRecord, FactJudgment, SentenceMark,
                                                 VerifiabilityMarks)
from attribution_utils.core.Errors import UnknownQuestionError
from attribution_utils.core.JudgeBackends import MockJudgeBackend
from conftest import make_gateway

CITED = ("Reasoning: A trumpet plays a high note (audio, 0:03-0:05; visual, 0:03). "
         "The player wears a red hat (visual, 0:10). Therefore the answer is B.\nAnswer: B")

SCRIPT = {"rules": [
    {"task": "verifiability", "contains": "Sentence: Therefore", "response": "NO"},
    {"task": "entailment", "contains": "Segment 1: (visual, 0:03)\nAtomic", "response": "NO"},
]}


def pipeline(media, judges, script=SCRIPT, **options):
    backend = MockJudgeBackend(script, delay_s=options.pop("delay_s", 0.0), seed=options.pop("seed", 0))
    return EvalPipeline(make_gateway(backend), media, judges, **options), backend


def test_full_evaluation(media, judges):
    evaluator, _ = pipeline(media, judges)
    record = evaluator.evaluate_response(parse_response(CITED, "q1"), gold_answer="B")
    assert [(m.verifiable, m.cited) for m in record.marks.marks] == [(True, True), (True, True), (False, False)]
    assert [f.text for f in record.facts] == ["A trumpet plays a high note.", "The player wears a red hat."]
    assert [j.relevant for j in record.judgments.facts] == [(True, False), (True,)]
    m = record.metrics
    assert (m.coverage, m.precision, m.recall, m.f1) == (Fraction(1), Fraction(2, 3), Fraction(1), Fraction(4, 5))
    assert m.grounding_score == Fraction(4, 5)
    assert m.over_citation_rate == 0
    assert m.per_modality_precision == {"visual": Fraction(1, 2), "audio": Fraction(1)}
    assert m.answer_correct is True
    assert record.call_counts == {"verifiability": 3, "decontextualize": 1, "decompose": 2, "entailment": 4}


def test_call_budget_matches_structure(media, judges):
    evaluator, _ = pipeline(media, judges)
    record = evaluator.evaluate_response(parse_response(CITED, "q1"))
    multi = sum(len(j.citations) for j in record.judgments.facts if j.supported and len(j.citations) > 1)
    expected = len(record.sentences) + len(record.facts) + multi
    assert record.call_counts["verifiability"] + record.call_counts["entailment"] == expected


def test_atomic_verifiability_decomposes_every_sentence(media, judges):
    evaluator, _ = pipeline(media, judges, atomic_verifiability=True)
    record = evaluator.evaluate_response(parse_response(CITED, "q1"))
    assert record.call_counts["decompose"] == 5
    assert record.call_counts["verifiability"] == 3
    assert [m.verifiable for m in record.marks.marks] == [True, True, False]


def test_no_decontext_variant_skips_rewrite(media, judges):
    evaluator, _ = pipeline(media, judges, decomposition_variant="no_decontext")
    record = evaluator.evaluate_response(parse_response(CITED, "q1"))
    assert "decontextualize" not in record.call_counts
    assert record.metrics.f1 == Fraction(4, 5)


def test_single_pass_decomposition(media, judges):
    script = {"rules": SCRIPT["rules"] + [{"task": "decompose", "contains": "[S1] A trumpet", "response":
                                           "- [S1] A trumpet plays (audio, 0:03-0:05).\n- [S1] The note is high.\n"
                                           "- [S2] The player wears a hat (visual, 0:10).\n- [S3] The answer is B."}]}
    evaluator, _ = pipeline(media, judges, script, decomposition_variant="single_pass")
    record = evaluator.evaluate_response(parse_response(CITED, "q1"))
    assert [f.text for f in record.facts] == ["A trumpet plays.", "The note is high.", "The player wears a hat."]
    assert [len(f.citations) for f in record.facts] == [1, 2, 1]
    assert [f.parent_index for f in record.facts] == [0, 0, 1]
    assert record.call_counts["decompose"] == 1
    assert record.call_counts["entailment"] == 5


def test_unknown_variant(media, judges):
    with pytest.raises(ValueError):
        EvalPipeline(make_gateway(MockJudgeBackend()), media, judges, decomposition_variant="greedy")


def test_decontextualized_text_reaches_decomposition(media, judges):
    script = {"rules": [{"task": "decontextualize", "response":
                         "Jeff enters (visual, 0:01). Jeff waves (visual, 0:03)."}]}
    evaluator, _ = pipeline(media, judges, script)
    record = evaluator.evaluate_response(parse_response("Reasoning: Jeff enters (visual, 0:01). "
                                                        "He waves (visual, 0:03).\nAnswer: A", "q1"))
    assert [f.text for f in record.facts] == ["Jeff enters.", "Jeff waves."]
    assert record.facts[1].citations == record.sentences[1].citations


def test_uncited_response_has_zero_coverage(media, judges):
    evaluator, _ = pipeline(media, judges)
    record = evaluator.evaluate_response(parse_response("Reasoning: A trumpet plays a high note.\nAnswer: B", "q1"))
    assert record.metrics.coverage == 0
    assert record.metrics.f1 is None
    assert record.metrics.grounding_score == 0
    assert "decompose" not in record.call_counts and "entailment" not in record.call_counts


def test_missing_modality_scores_not_relevant(media, judges):
    evaluator, _ = pipeline(media, judges)
    record = evaluator.evaluate_response(parse_response(
        "Reasoning: A horn sounds (audio, 0:02). A man waves (visual, 0:04).\nAnswer: A", "q2"))
    assert [j.supported for j in record.judgments.facts] == [False, True]
    assert any("modality-missing" in w for w in record.warnings)
    assert record.call_counts["entailment"] == 1


def test_judge_failures_degrade(media, judges):
    script = {"rules": [{"task": "verifiability", "contains": "Sentence: The player", "error": True},
                        {"task": "entailment", "error": True}]}
    evaluator, _ = pipeline(media, judges, script)
    record = evaluator.evaluate_response(parse_response(CITED, "q1"))
    assert [m.verifiable for m in record.marks.marks] == [True, False, True]
    assert all(not j.supported for j in record.judgments.facts)
    assert record.metrics.recall == 0
    assert any("verifiability judge failed" in w for w in record.warnings)
    assert any("entailment judge failed" in w for w in record.warnings)


def test_unknown_question(media, judges):
    evaluator, _ = pipeline(media, judges)
    with pytest.raises(UnknownQuestionError):
        evaluator.evaluate_response(parse_response(CITED, "q404"))


def test_parallel_runs_are_deterministic(media, judges):
    outputs = []
    for seed in range(3):
        evaluator, _ = pipeline(media, judges, width=4, delay_s=0.01, seed=seed)
        outputs.append(evaluator.evaluate_response(parse_response(CITED, "q1"), gold_answer="B").to_dict())
    assert outputs[0] == outputs[1] == outputs[2]


OVERRUN = "Reasoning: A drum rolls (visual, 1:30). The crowd cheers (audio, 0:20; visual, 1:30).\nAnswer: C"


def _eval_file(media, judges, texts, path, width):
    evaluator, _ = pipeline(media, judges, width=width, delay_s=0.01 if width > 1 else 0.0, seed=width)
    responses = [parse_response(text, "q1") for text in texts]
    if width == 1:
        records = [evaluator.evaluate_response(r, "B") for r in responses]
    else:
        with ThreadPoolExecutor(max_workers=width) as pool:
            records = list(pool.map(lambda r: evaluator.evaluate_response(r, "B"), responses))
    return write_jsonl_atomic(path, records).read_bytes()


def test_concurrent_records_match_sequential_bytes(media, judges, tmp_path):
    texts = [CITED, OVERRUN, CITED, OVERRUN]
    sequential = _eval_file(media, judges, texts, tmp_path / "sequential.jsonl", width=1)
    parallel = _eval_file(media, judges, texts, tmp_path / "parallel.jsonl", width=4)
    assert parallel == sequential


def test_call_counts_belong_to_their_record(media, judges):
    evaluator, _ = pipeline(media, judges, width=4, delay_s=0.01, seed=1)
    alone = evaluator.evaluate_response(parse_response(CITED, "q1")).call_counts
    with ThreadPoolExecutor(max_workers=4) as pool:
        records = list(pool.map(lambda text: evaluator.evaluate_response(parse_response(text, "q1")),
                                [CITED] * 4))
    assert [r.call_counts for r in records] == [alone] * 4


def test_every_record_reports_its_clamped_citation(media, judges):
    evaluator, _ = pipeline(media, judges, width=2, delay_s=0.01, seed=3)
    with ThreadPoolExecutor(max_workers=2) as pool:
        records = list(pool.map(lambda text: evaluator.evaluate_response(parse_response(text, "q1")),
                                [OVERRUN, OVERRUN]))
    assert all(any("clamped" in w for w in r.warnings) for r in records)


def test_record_serialization(media, judges):
    evaluator, _ = pipeline(media, judges)
    record = evaluator.evaluate_response(parse_response(CITED, "q1"), gold_answer="B")
    restored = EvalRecord.from_dict(record.to_dict())
    assert restored == record
    assert restored.call_counts == record.call_counts


def test_judgment_invariants():
    c = Citation(Modality.VISUAL, TimeSpan(1, 1))
    with pytest.raises(ValueError):
        FactJudgment((c,), False, (True,))
    with pytest.raises(ValueError):
        FactJudgment((c,), True, (False,))
    with pytest.raises(ValueError):
        FactJudgment((c, c), True, (True,))
    with pytest.raises(ValueError):
        VerifiabilityMarks((SentenceMark(1, True, True),))
