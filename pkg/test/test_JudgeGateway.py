import json
from types import SimpleNamespace

import pytest

from attribution_utils.core.Citations import Sentence, segment_sentences
from attribution_utils.core.Errors import BackendError, ConfigError, TransientBackendError, VerdictParseError
from attribution_utils.core.JudgeBackends import MockJudgeBackend
from attribution_utils.core.JudgeGateway import (JudgeCacheKey, MediaAttachment, PromptLibrary, parse_fact_lines,
                                                 parse_verdict)
from attribution_utils.core.ResponseCache import ResponseCache
from conftest import judge_config, make_gateway


@pytest.mark.parametrize("raw, style, label", [
    ("YES", "simple", True),
    ("no.", "simple", False),
    ("yes, the hat is red... but NO", "simple", False),
    ("Reasoning: The frame is dark.\nAnswer: NO", "cot", False),
    ('{"label": "YES", "reasoning": "A red hat is visible"}', "json", True),
    ('```json\n{"label": false}\n```', "json", False),
    ("I would say YES", "json", True),
])
def test_parse_verdict(raw, style, label):
    assert parse_verdict(raw, style).label is label


def test_verdict_rationale():
    assert parse_verdict("Reasoning: The frame is dark.\nAnswer: NO", "cot").rationale == "The frame is dark."
    verdict = parse_verdict('{"label": "NO", "evidence_description": "Blank frame"}', "json")
    assert verdict.rationale == "Blank frame"
    assert verdict.to_dict()["label"] is False


def test_unparseable_verdict():
    with pytest.raises(VerdictParseError):
        parse_verdict("maybe", "simple")


def test_parse_fact_lines():
    assert parse_fact_lines("Facts:\n- A man waves.\n* He smiles.\n2) A dog barks.\nnoise") == \
        ["A man waves.", "He smiles.", "A dog barks."]


def test_cache_key_fields():
    base = judge_config()
    key = JudgeCacheKey.build(base, "prompt")
    assert key == JudgeCacheKey.build(judge_config(max_retries=5), "prompt")
    assert key != JudgeCacheKey.build(judge_config(effort_level="high"), "prompt")
    assert key != JudgeCacheKey.build(judge_config(prompt_style="cot"), "prompt")
    assert key != JudgeCacheKey.build(base, "prompt", [MediaAttachment(None, "visual", "clip", "abc")])


def test_requests_are_counted_before_the_cache():
    backend = MockJudgeBackend()
    gateway = make_gateway(backend)
    cfg = judge_config()
    assert gateway.complete("holistic", "Rate this.", cfg) == "3"
    assert gateway.complete("holistic", "Rate this.", cfg) == "3"
    assert backend.calls["holistic"] == 1
    assert gateway.counts() == {"requests": {"holistic": 2}, "transport": {"holistic": 1}, "cache_hits": 1}


def test_transient_failures_are_retried():
    attempts = []

    def flaky(request):
        attempts.append(request.task)
        return TransientBackendError("rate limited") if len(attempts) < 3 else "YES"

    gateway = make_gateway(MockJudgeBackend(responder=flaky))
    assert gateway.complete("find", "Is it there?", judge_config(max_retries=2)) == "YES"
    assert len(attempts) == 3


def test_retry_budget_exhausted():
    gateway = make_gateway(MockJudgeBackend(responder=lambda request: TransientBackendError("down")))
    with pytest.raises(BackendError) as info:
        gateway.complete("find", "Is it there?", judge_config(max_retries=1))
    assert info.value.attempts == 2


def test_permanent_failure_is_not_retried():
    backend = MockJudgeBackend(responder=lambda request: ValueError("bad request"))
    with pytest.raises(BackendError) as info:
        make_gateway(backend).complete("find", "Is it there?", judge_config(max_retries=3))
    assert info.value.attempts == 1
    assert backend.calls["find"] == 1


def test_unknown_backend():
    gateway = make_gateway(MockJudgeBackend())
    with pytest.raises(ConfigError):
        gateway.complete("find", "Is it there?", judge_config(backend_id="elsewhere"))


def test_verdict_retries_once_with_nudge():
    backend = MockJudgeBackend({"rules": [{"task": "verifiability", "responses": ["hmm", "YES"],
                                           "per_prompt": False}]})
    gateway = make_gateway(backend)
    verdict = gateway.judge_verifiable(Sentence(0, "A cat sits.", "A cat sits."), judge_config())
    assert verdict.label is True
    assert gateway.counts()["requests"] == {"verifiability": 2}


def test_empty_sentence_is_rejected():
    with pytest.raises(ValueError):
        make_gateway(MockJudgeBackend()).judge_verifiable(Sentence(0, " ", " "), judge_config())


def test_entailment_prompt_lists_segments(tmp_path):
    clip = tmp_path / "clip.mp4"
    clip.write_text("frames", encoding="utf-8")
    segment = SimpleNamespace(as_attachment=lambda: MediaAttachment(clip, "visual", "(visual, 0:03)", "d1"))
    backend = MockJudgeBackend({"rules": [{"task": "entailment", "contains": "Segment 1: (visual, 0:03)\nAtomic",
                                           "response": "NO"}]})
    fact = SimpleNamespace(text="A man waves.")
    assert make_gateway(backend).judge_entailment(fact, [segment], judge_config()).label is False
    assert backend.calls_for("entailment")[0].media_labels == ("(visual, 0:03)",)


def test_entailment_rejects_empty_clip(tmp_path):
    clip = tmp_path / "empty.mp4"
    clip.touch()
    segment = SimpleNamespace(as_attachment=lambda: MediaAttachment(clip, "visual", "(visual, 0:03)", "d1"))
    gateway = make_gateway(MockJudgeBackend())
    with pytest.raises(BackendError):
        gateway.judge_entailment(SimpleNamespace(text="A man waves."), [segment], judge_config())
    with pytest.raises(ValueError):
        gateway.judge_entailment(SimpleNamespace(text="A man waves."), [], judge_config())


def test_decontextualize_accepts_resolved_text():
    backend = MockJudgeBackend({"rules": [{"task": "decontextualize",
                                           "response": "```\nOutput: Jeff enters (visual, 0:01). Jeff waves (visual, 0:03).\n```"}]})
    warnings = []
    text = make_gateway(backend).decontextualize("Jeff enters (visual, 0:01). He waves (visual, 0:03).",
                                                 judge_config(), warnings)
    assert text == "Jeff enters (visual, 0:01). Jeff waves (visual, 0:03)."
    assert warnings == []


def test_decontextualize_keeps_original_when_citations_change():
    backend = MockJudgeBackend({"rules": [{"task": "decontextualize", "response": "The man waves (visual, 0:04)."}]})
    warnings = []
    original = "He waves (visual, 0:03)."
    assert make_gateway(backend).decontextualize(original, judge_config(), warnings) == original
    assert len(warnings) == 1


def test_decontextualize_rejects_moved_citations():
    backend = MockJudgeBackend({"rules": [{"task": "decontextualize",
                                           "response": "Jeff enters (visual, 0:03). Jeff waves (visual, 0:01)."}]})
    warnings = []
    original = "Jeff enters (visual, 0:01). He waves (visual, 0:03)."
    assert make_gateway(backend).decontextualize(original, judge_config(), warnings) == original
    assert len(warnings) == 1 and "moved" in warnings[0]


def test_decompose_validates_citations():
    sentence = segment_sentences("A trumpet plays a high note (audio, 0:03-0:05; visual, 0:03).")[0]
    backend = MockJudgeBackend({"rules": [{"task": "decompose", "response":
                                           "- A trumpet plays (audio, 0:03-0:05).\n- The note is high.\n"
                                           "- A hat is red (visual, 0:09)."}]})
    warnings = []
    facts = make_gateway(backend).decompose_sentence(sentence, judge_config(), warnings)
    assert [f.text for f in facts] == ["A trumpet plays.", "The note is high.", "A hat is red."]
    assert [len(f.citations) for f in facts] == [1, 2, 2]
    assert facts[0].citations[0].modality.value == "audio"
    assert all(f.parent_index == 0 for f in facts)
    assert any("dropped citation (visual, 0:09)" in w for w in warnings)


def test_empty_decomposition_falls_back_to_sentence():
    sentence = segment_sentences("A dog barks (audio, 0:02).")[0]
    backend = MockJudgeBackend({"rules": [{"task": "decompose", "response": "I cannot split this."}]})
    gateway = make_gateway(backend)
    warnings = []
    facts = gateway.decompose_sentence(sentence, judge_config(), warnings)
    assert [(f.text, f.citations) for f in facts] == [("A dog barks.", sentence.citations)]
    assert gateway.counts()["requests"] == {"decompose": 2}
    assert "empty decomposition" in warnings[0]


def test_prompt_library(tmp_path):
    library = PromptLibrary()
    assert library.missing() == []
    assert library.placeholders("entailment_simple") == ["context", "fact"]
    with pytest.raises(ConfigError):
        library.render("entailment_simple", fact="A man waves.")
    with pytest.raises(ConfigError):
        library.load("no_such_template")
    (tmp_path / "templates.json").write_text(json.dumps({"extra": {"version": 1}}), encoding="utf-8")
    assert PromptLibrary(tmp_path).missing() == ["extra"]


def test_disk_cache_is_shared_between_gateways(tmp_path):
    first, second = MockJudgeBackend(), MockJudgeBackend()
    cfg = judge_config()
    make_gateway(first, ResponseCache(tmp_path)).complete("holistic", "Rate this.", cfg)
    cache = ResponseCache(tmp_path)
    assert make_gateway(second, cache).complete("holistic", "Rate this.", cfg) == "3"
    assert second.calls["holistic"] == 0
    assert cache.inspect()["per_task"] == {"holistic": 1}
    assert cache.clear() == 1
    assert cache.inspect()["entries"] == 0
