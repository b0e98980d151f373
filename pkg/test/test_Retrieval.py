import pytest

from attribution_utils.core.Citations import Modality, TimeSpan
from attribution_utils.core.Errors import ConfigError, ModalityMissingError
from attribution_utils.core.JudgeBackends import MockJudgeBackend
from attribution_utils.programs.Retrieval import (ListingRetriever, WindowedRetriever, build_retriever, merge_spans,
                                                  parse_timestamp_list, sliding_windows)
from conftest import judge_config, make_gateway


def spans(*pairs):
    return [TimeSpan(a, b) for a, b in pairs]


def test_merge_spans():
    assert merge_spans(spans((10, 15), (0, 5), (5, 8), (20, 25), (12, 14))) == spans((0, 8), (10, 15), (20, 25))
    assert merge_spans([]) == []


def test_sliding_windows():
    assert sliding_windows(30, 10, 5) == spans((0, 10), (5, 15), (10, 20), (15, 25), (20, 30))
    assert sliding_windows(7, 10, 5) == spans((0, 7))
    assert len(sliding_windows(60, 10, 5)) == 11
    with pytest.raises(ConfigError):
        sliding_windows(30, 0, 5)


def test_parse_timestamp_list():
    warnings = []
    raw = 'The note occurs at ["00:19-00:21", "00:03", "soon", "01:10", "00:59", "00:55-01:05", "00:03"]'
    assert parse_timestamp_list(raw, 60, warnings) == spans((3, 4), (19, 21), (55, 60), (59, 60))
    assert len(warnings) == 2
    assert parse_timestamp_list("[]", 60) == []
    with pytest.raises(ValueError):
        parse_timestamp_list("The note occurs twice.", 60)


def windowed(media, script, **options):
    backend = MockJudgeBackend(script)
    cfg = judge_config(max_retries=0)
    return WindowedRetriever(make_gateway(backend), media, cfg, **options), backend


def test_windowed_hits_are_merged(media):
    script = {"rules": [{"task": "find", "media_contains": "(audio, 0:00-0:10)", "response": "YES"},
                        {"task": "find", "media_contains": "(audio, 0:05-0:15)", "response": "YES"},
                        {"task": "find", "media_contains": "(audio, 0:40-0:50)", "response": "YES"}],
              "defaults": {"find": "NO"}}
    retriever, backend = windowed(media, script, window_s=10, stride_s=5, width=4)
    assert retriever.find("q1", "high note", Modality.AUDIO) == spans((0, 15), (40, 50))
    assert backend.calls["find"] == 11
    assert media.extractions == 11


def test_windowed_probe_failure_is_no_match(media):
    script = {"rules": [{"task": "find", "media_contains": "(visual, 0:10-0:20)", "error": True}],
              "defaults": {"find": "YES"}}
    retriever, _ = windowed(media, script, window_s=10, stride_s=10)
    warnings = []
    assert retriever.find("q2", "hat", Modality.VISUAL, warnings) == spans((0, 10), (20, 30))
    assert len(warnings) == 1 and "treated as no match" in warnings[0]


def test_windowed_requires_track(media):
    retriever, _ = windowed(media, {})
    with pytest.raises(ModalityMissingError):
        retriever.find("q2", "horn", Modality.AUDIO)
    with pytest.raises(ConfigError):
        WindowedRetriever(retriever.gateway, media, judge_config(), window_s=0)


def listing(media, script):
    backend = MockJudgeBackend(script)
    return ListingRetriever(make_gateway(backend), media, judge_config(max_retries=0)), backend


def test_listing_parses_hits(media):
    retriever, backend = listing(media, {"rules": [{"task": "find", "response": '["00:03", "00:19-00:21"]'}]})
    assert retriever.find("q3", "high note", Modality.AUDIO) == spans((3, 4), (19, 21))
    assert backend.calls_for("find")[0].media_labels == ("audio source",)


def test_listing_retries_once_with_nudge(media):
    retriever, backend = listing(media, {"rules": [{"task": "find", "responses": ["It happens twice.", '["00:42"]'],
                                                    "per_prompt": False}]})
    assert retriever.find("q1", "high note", Modality.AUDIO) == spans((42, 43))
    assert backend.calls["find"] == 2


def test_listing_failure_is_no_match(media):
    retriever, _ = listing(media, {"rules": [{"task": "find", "error": True}]})
    warnings = []
    assert retriever.find("q1", "high note", Modality.VISUAL, warnings) == []
    assert "failed" in warnings[0]


def test_build_retriever(media):
    gateway = make_gateway(MockJudgeBackend())
    assert isinstance(build_retriever({"mode": "listing"}, gateway, media, judge_config()), ListingRetriever)
    windowed_retriever = build_retriever({"mode": "windowed", "window_s": 6, "stride_s": 3}, gateway, media,
                                         judge_config())
    assert (windowed_retriever.window_s, windowed_retriever.stride_s) == (6, 3)
    with pytest.raises(ConfigError):
        build_retriever({"mode": "oracle"}, gateway, media, judge_config())
