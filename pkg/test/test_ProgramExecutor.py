import random

import pytest

from attribution_utils.core.Citations import Citation, Modality, TimeSpan
from attribution_utils.core.EvalPipeline import EvalPipeline
from attribution_utils.core.JudgeBackends import MockJudgeBackend
from attribution_utils.core.Errors import ProgramParseError
from attribution_utils.programs.ProgramExecutor import (INSUFFICIENT_EVIDENCE, Evidence, ProgramExecutor,
                                                        Refinement)
from attribution_utils.programs.ProgramParser import parse_program
from attribution_utils.programs.Retrieval import WindowedRetriever
from conftest import MOCK_SCRIPT, make_gateway, make_judges, program_text

VERIFIABILITY = {"task": "verifiability", "contains": "Sentence: Therefore", "response": "NO"}


class FixedRetriever:
    """Returns the same spans for every query."""

    def __init__(self, spans):
        self.spans = list(spans)
        self.calls = 0

    def find(self, question_id, query, modality, warnings=None):
        self.calls += 1
        return list(self.spans)


def executor(media, backend=None, retriever=None, **options):
    backend = backend or MockJudgeBackend.from_file(MOCK_SCRIPT)
    gateway = make_gateway(backend)
    judges = make_judges()
    retriever = retriever or WindowedRetriever(gateway, media, judges["retrieval"], window_s=10, stride_s=5)
    return ProgramExecutor(gateway, media, retriever, judges, **options), backend


def audio(start, end):
    return Citation(Modality.AUDIO, TimeSpan(start, end))


def test_narrative_declarative_run(media, task_q1):
    runner, backend = executor(media)
    trace, response = runner.execute(parse_program(program_text("narrative_declarative"), "narrative"), task_q1)

    assert [s.op for s in trace.steps] == ["describe", "describe", "describe", "synthesize"]
    assert [s.evidence_label for s in trace.steps] == ["E1", "E2", "E3", None]
    assert trace.steps[2].output == "The player wears a red hat."
    assert all(s.refinement.passed for s in trace.steps[:3])
    assert trace.terminal_error is None

    assert response.answer_letter == "B"
    assert [s.citations for s in response.sentences] == [(audio(3, 5),), (audio(19, 21),), ()]
    assert backend.calls["describe"] == 3 and backend.calls["refine"] == 3
    assert [call.media_labels for call in backend.calls_for("synthesize")] == [()]


def test_each_hit_gets_its_own_describe_step(media, task_q1):
    retriever = FixedRetriever(TimeSpan(i * 10, i * 10 + 2) for i in range(5))
    runner, backend = executor(media, retriever=retriever)
    trace, response = runner.execute(parse_program(program_text("logic_imperative"), "logic"), task_q1)

    described = [s for s in trace.steps if s.op == "describe"]
    assert len(described) == 5
    assert [s.item for s in described] == [0, 1, 2, 3, 4]
    assert [s.evidence_label for s in described] == ["E1", "E2", "E3", "E4", "E5"]
    assert [s.segments_used for s in described] == [(audio(i * 10, i * 10 + 2),) for i in range(5)]
    assert trace.retrieval_calls == 1 and retriever.calls == 1
    assert response.sentences[0].citations == (audio(0, 2),)
    assert response.sentences[1].citations == (audio(10, 12),)


def test_no_hits_gives_degenerate_response(media, task_q1):
    runner, backend = executor(media, retriever=FixedRetriever([]))
    trace, response = runner.execute(parse_program(program_text("logic_imperative"), "logic"), task_q1)
    assert response.answer_letter is None
    assert INSUFFICIENT_EVIDENCE in response.raw
    assert backend.calls["synthesize"] == 0 and backend.calls["describe"] == 0
    assert trace.terminal_error is None
    assert any("no usable evidence" in w for w in trace.warnings)


def random_program(rng):
    lines = []
    for _ in range(rng.randint(1, 3)):
        start = rng.randint(0, 50)
        end = start + rng.randint(0, 5)
        stamp = f"00:{start:02d}" if end == start else f"00:{start:02d}-00:{end:02d}"
        modality = rng.choice(["visual", "audio", None])
        suffix = f", modality='{modality}'" if modality else ""
        lines.append(f"- describe('{stamp}'{suffix}, instruction='What happens?')")
    lines.append("- synthesize(instruction='Answer')")
    return "\n".join(lines)


def random_synthesis(rng):
    pool = ["A note rings [E{a}].", "The hat is red [E{a}][E{b}].", "Therefore the answer is B.",
            "Something happens (visual, 0:59).", "The crowd cheers [E9].", "Music plays.", "It ends [E{a}, E{b}]."]
    picks = [rng.choice(pool).format(a=rng.randint(1, 4), b=rng.randint(1, 4)) for _ in range(rng.randint(1, 5))]
    return f"Reasoning: {' '.join(picks)}\nAnswer: {rng.choice('ABCD')}"


def test_citations_only_point_at_described_segments(media, task_q1):
    rng = random.Random(11)
    for _ in range(100):
        backend = MockJudgeBackend({"rules": [
            {"task": "synthesize", "response": random_synthesis(rng)}, VERIFIABILITY]})
        runner, _ = executor(media, backend=backend)
        trace, response = runner.execute(parse_program(random_program(rng), "narrative"), task_q1)

        cited = {c for s in response.sentences for c in s.citations}
        assert cited <= trace.segments_used()
        assert all(call.media_labels == () for call in backend.calls_for("synthesize"))

        record = EvalPipeline(runner.gateway, media, runner.judges).evaluate_response(response)
        assert record.metrics.coverage in (1, None)


def test_refine_step_passes(media):
    runner, backend = executor(media, backend=MockJudgeBackend())
    text, refinement = runner.refine_step("q1", "A trumpet plays.", (audio(3, 5),), "Describe")
    assert (text, refinement) == ("A trumpet plays.", Refinement(checked=True, passed=True))
    assert backend.calls["describe"] == 0


def test_refine_step_retries_once(media):
    backend = MockJudgeBackend({"rules": [
        {"task": "refine", "responses": ["NO", "YES"], "per_prompt": False},
        {"task": "describe", "contains": "Leave out anything", "response": "A trumpet is heard."}]})
    runner, _ = executor(media, backend=backend)
    text, refinement = runner.refine_step("q1", "A trumpet plays.", (audio(3, 5),), "Describe")
    assert text == "A trumpet is heard."
    assert refinement == Refinement(checked=True, passed=True, retried=True)
    assert backend.calls["refine"] == 2 and backend.calls["describe"] == 1


def test_refine_step_keeps_unverified_text(media):
    backend = MockJudgeBackend({"rules": [
        {"task": "refine", "response": "NO"},
        {"task": "describe", "response": "A trumpet is heard."}]})
    runner, _ = executor(media, backend=backend)
    warnings = []
    text, refinement = runner.refine_step("q1", "A trumpet plays.", (audio(3, 5),), "Describe", warnings)
    assert text == "A trumpet is heard."
    assert refinement.unverified and refinement.retried
    assert "kept unverified" in warnings[0]
    assert runner.refine_step("q1", "  ", (audio(3, 5),), "Describe") == ("  ", Refinement())


def test_refinement_can_be_switched_off(media, task_q1):
    runner, backend = executor(media, refinement=False)
    trace, _ = runner.execute(parse_program(program_text("narrative_declarative"), "narrative"), task_q1)
    assert backend.calls["refine"] == 0
    assert not any(s.refinement.checked for s in trace.steps)


EVIDENCE = [Evidence("E1", "A note rings.", (Citation(Modality.VISUAL, TimeSpan(3, 3)),)),
            Evidence("E2", "Music plays.", (audio(5, 5),))]
SYNTHESIS = "Reasoning: A note rings [E1, E2]. Music plays. The hat is red (visual, 0:09) [E7].\nAnswer: C"


@pytest.mark.parametrize("judge_untagged, expected", [
    (True, [2, 2, 2]),
    (False, [2, 0, 0]),
])
def test_assemble_maps_tags_to_citations(media, judge_untagged, expected):
    runner, _ = executor(media, backend=MockJudgeBackend(), tag_untagged_with_judge=judge_untagged)
    warnings = []
    response = runner.assemble(SYNTHESIS, EVIDENCE, "q1", warnings)
    assert [s.text for s in response.sentences] == ["A note rings.", "Music plays.", "The hat is red."]
    assert [len(s.citations) for s in response.sentences] == expected
    assert response.sentences[0].citations == (EVIDENCE[0].citations[0], EVIDENCE[1].citations[0])
    assert response.answer_letter == "C"
    assert any("dropped citations written by the synthesizer" in w for w in warnings)
    assert any("unknown evidence tags ['E7']" in w for w in warnings)


def test_describe_failure_is_recorded(media, tasks):
    program = parse_program("- describe('00:03', modality='visual')\n- describe('00:05', modality='audio')\n"
                            "- synthesize()", "narrative")
    runner, _ = executor(media)
    trace, response = runner.execute(program, tasks["q3"])
    assert trace.steps[0].error.startswith("ModalityMissingError")
    assert trace.steps[1].evidence_label == "E1"
    assert response.sentences[0].citations == (audio(5, 5),)
    assert trace.terminal_error is None


def test_plan_gets_one_repair(media, task_q1):
    good = "- describe('00:03', modality='audio')\n- synthesize()"
    backend = MockJudgeBackend({"rules": [{"task": "plan", "responses": ["I would look at the video.", good],
                                           "per_prompt": False}]})
    runner, _ = executor(media, backend=backend)
    program = runner.plan(task_q1, "narrative", "declarative")
    assert [s.op for s in program.steps] == ["describe", "synthesize"]
    assert backend.calls["plan"] == 2

    broken = MockJudgeBackend({"rules": [{"task": "plan", "response": "No program today."}]})
    runner, _ = executor(media, backend=broken)
    with pytest.raises(ProgramParseError):
        runner.plan(task_q1, "narrative", "declarative")
    result = runner.run_task(task_q1, "narrative", "declarative")
    assert not result.ok and result.error.startswith("ProgramParseError")
    assert not result.backend_failure


def test_run_task_and_run_all(media, tasks):
    runner, _ = executor(media, width=2)
    result = runner.run_task(tasks["q1"], "narrative", "declarative")
    assert result.ok and result.variant == "narrative_declarative"
    assert result.to_line()["model_name"] == "mock-generation"
    assert [s.citations for s in result.response.sentences][:2] == [
        (audio(3, 5),), (Citation(Modality.VISUAL, TimeSpan(10, 10)),)]

    results = runner.run_all([tasks["q2"], tasks["q1"]], "logic", "imperative")
    assert [r.question_id for r in results] == ["q2", "q1"]
    q2, q1 = results
    assert q1.ok and q1.trace.retrieval_calls == 1
    assert [s.segments_used for s in q1.trace.steps if s.op == "describe"] == [(audio(0, 10),)]
    assert q2.ok and q2.response.answer_letter is None
    assert q2.trace.steps[0].error.startswith("ModalityMissingError")
    assert any("find_event failed" in w for w in q2.trace.warnings)


def test_synthesize_failure_is_terminal(media, task_q1):
    plan = "- describe('00:03-00:05', modality='audio')\n- synthesize(instruction='Pick the option')"
    backend = MockJudgeBackend({"rules": [{"task": "plan", "response": plan}, {"task": "synthesize", "error": True}]})
    runner, _ = executor(media, backend=backend)
    result = runner.run_task(task_q1, "narrative", "declarative")
    assert not result.ok and result.backend_failure
    assert result.response.answer_letter is None
    assert result.trace.to_dict()["steps"][-1]["error"].startswith("BackendError")


def test_refine_synthesize_checks_answer_sentences(media, task_q1):
    backend = MockJudgeBackend({"rules": [{"task": "refine", "contains": "Atomic Fact: The player", "response": "NO"},
                                          {"task": "synthesize", "response": "Reasoning: A note rings [E1]. "
                                           "The player wears a red hat [E1].\nAnswer: B"}]})
    runner, _ = executor(media, backend=backend, refinement=False, refine_synthesize=True)
    trace, _ = runner.execute(parse_program("- describe('00:03', modality='audio')\n- synthesize()", "narrative"),
                              task_q1)
    assert trace.steps[-1].refinement == Refinement(checked=True, passed=False)
    assert any("answer sentence 1 is not supported" in w for w in trace.warnings)
