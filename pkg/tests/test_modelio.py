from __future__ import annotations

import itertools
import json
from random import Random

import pytest
import requests

from assocbench.builder import StepCandidates, make_round, candidate_step
from assocbench.memory import new_memory
from assocbench.modelio import (
    BackendRefusal,
    CapabilityError,
    DeadlineExceeded,
    EnsembleClient,
    OracleConfig,
    RateLimited,
    RemoteChatClient,
    ScriptedOracle,
    StaticClient,
    TokenBucket,
    TransportError,
    complete,
    load_backends,
    moe_vote,
)
from assocbench.prompt import (
    OPTION1,
    OPTION2,
    UNPARSEABLE,
    render_association_prompt,
    render_deduction_prompt,
)

from conftest import GOLDEN_DIR, build_two_group_corpus

REFS = ("images/q.jpg", "images/o1.jpg", "images/o2.jpg")


def association_parts():
    return render_association_prompt(new_memory("NoM"), "attribute", *REFS)


def cands(correct=1):
    return StepCandidates(0, "m0", "m1", "f0", correct=correct)


# -- scripted oracle ---------------------------------------------------------

def test_oracle_perfect_answers_every_step():
    corpus = build_two_group_corpus()
    oracle = ScriptedOracle(corpus, OracleConfig(p_assoc=1.0, p_deduct=1.0, seed=1))
    oracle.prime_association(cands(correct=2))
    assert oracle.complete(association_parts()) == "Image2"
    oracle.prime_deduction("m0", "m1", frozenset({"metal"}))
    parts = render_deduction_prompt("attribute", corpus.vocabulary, "q.jpg", "s.jpg")
    assert oracle.complete(parts) == "metal"


def test_oracle_p_zero_always_wrong():
    corpus = build_two_group_corpus()
    oracle = ScriptedOracle(corpus, OracleConfig(p_assoc=0.0, seed=1))
    oracle.prime_association(cands(correct=1))
    assert oracle.complete(association_parts()) == "Image2"


def test_oracle_wrong_deduction_names_a_non_shared_concept():
    corpus = build_two_group_corpus()
    oracle = ScriptedOracle(corpus, OracleConfig(p_deduct=0.0, seed=1))
    oracle.prime_deduction("m0", "m1", frozenset({"metal"}))
    parts = render_deduction_prompt("attribute", corpus.vocabulary, "q.jpg", "s.jpg")
    assert oracle.complete(parts) == "furry"


def test_oracle_replay_identical_answer_stream():
    corpus = build_two_group_corpus()

    def stream():
        oracle = ScriptedOracle(corpus, OracleConfig(p_assoc=0.5, seed="replay"))
        answers = []
        for t in range(50):
            oracle.prime_association(StepCandidates(t, f"m{t % 6}", "m1", "f0", 1))
            answers.append(oracle.complete(association_parts()))
        return answers

    assert stream() == stream()


def test_oracle_probabilities_validated():
    with pytest.raises(ValueError):
        OracleConfig(p_assoc=1.5)


# -- capability gate ---------------------------------------------------------

def test_capability_error_raised_before_any_call():
    calls = []
    client = StaticClient("tiny", fn=lambda parts: calls.append(1) or "Image1")
    client.max_images = 2
    with pytest.raises(CapabilityError):
        complete(client, association_parts())
    assert calls == []


# -- majority vote -----------------------------------------------------------

def static_voters(tokens):
    return [StaticClient(f"c{i}", fn=lambda _, t=t: t) for i, t in enumerate(tokens)]


def test_moe_vote_majority():
    verdict = moe_vote(static_voters(["Image1", "Image1", "Image2"]), association_parts())
    assert verdict.choice == OPTION1


def test_moe_vote_tie_breaks_to_earliest_parseable():
    verdict = moe_vote(static_voters(["Image1", "Image2", "mumble"]), association_parts())
    assert verdict.choice == OPTION1
    verdict = moe_vote(static_voters(["mumble", "Image2", "Image1"]), association_parts())
    assert verdict.choice == OPTION2


def test_moe_vote_all_unparseable():
    verdict = moe_vote(static_voters(["huh", "hmm", "???"]), association_parts())
    assert verdict.choice == UNPARSEABLE


def test_moe_vote_all_eight_binary_patterns_match_enumerated_majority():
    for pattern in itertools.product(["Image1", "Image2"], repeat=3):
        verdict = moe_vote(static_voters(list(pattern)), association_parts())
        ones = pattern.count("Image1")
        expected = OPTION1 if ones >= 2 else OPTION2
        assert verdict.choice == expected, pattern


def test_moe_vote_errors_propagate_only_when_all_fail():
    class Boom(StaticClient):
        def complete(self, parts, deadline=None):
            raise TransportError("down")

    ok = StaticClient("ok", fn=lambda _: "Image2")
    assert moe_vote([Boom("b1"), ok], association_parts()).choice == OPTION2
    with pytest.raises(TransportError):
        moe_vote([Boom("b1"), Boom("b2")], association_parts())


def test_moe_vote_odd_parseable_voters_equal_arithmetic_majority():
    for pattern in itertools.product(["Image1", "Image2"], repeat=3):
        verdict = moe_vote(static_voters(list(pattern)), association_parts())
        majority = OPTION1 if pattern.count("Image1") > 1 else OPTION2
        assert verdict.choice == majority


# -- ensemble ----------------------------------------------------------------

def test_ensemble_vote_then_majority_deduction_union():
    corpus = build_two_group_corpus()

    def assoc_then_deduct(answer, concepts):
        def fn(parts):
            return answer if len(parts.images) == 3 else concepts

        return fn

    clients = [
        StaticClient("a", fn=assoc_then_deduct("Image1", "metal")),
        StaticClient("b", fn=assoc_then_deduct("Image1", "furry")),
        StaticClient("c", fn=assoc_then_deduct("Image2", "metal, furry")),
    ]
    ensemble = EnsembleClient("moe", clients, corpus.vocabulary)
    assert ensemble.complete(association_parts()) == "Image1"
    deduct = render_deduction_prompt("attribute", corpus.vocabulary, "q.jpg", "s.jpg")
    # only the two majority voters contribute concepts
    assert ensemble.complete(deduct) == "furry, metal"


def test_ensemble_forwards_oracle_priming():
    corpus = build_two_group_corpus()
    members = [
        ScriptedOracle(corpus, OracleConfig(seed=i), id=f"o{i}") for i in range(3)
    ]
    ensemble = EnsembleClient("moe", members, corpus.vocabulary)
    ensemble.prime_association(cands(correct=2))
    assert ensemble.complete(association_parts()) == "Image2"


# -- remote client -----------------------------------------------------------

class FakeResponse:
    def __init__(self, status_code=200, payload=None, headers=None):
        self.status_code = status_code
        self._payload = payload or {}
        self.headers = headers or {}

    def json(self):
        return self._payload


def ok_payload(text="Image1"):
    return {"choices": [{"message": {"content": text}, "finish_reason": "stop"}]}


def remote(**kwargs):
    kwargs.setdefault("id", "remote")
    kwargs.setdefault("endpoint", "https://api.example.com/v1/chat/completions")
    kwargs.setdefault("model", "test-model")
    kwargs.setdefault("backoff_base", 0.0)
    kwargs.setdefault("sleep", lambda s: None)
    return RemoteChatClient(**kwargs)


def url_parts():
    return render_association_prompt(
        new_memory("NoM"),
        "attribute",
        "https://example.com/q.jpg",
        "https://example.com/o1.jpg",
        "https://example.com/o2.jpg",
    )


def test_request_body_matches_golden():
    body = remote().request_body(url_parts())
    golden = (GOLDEN_DIR / "request_body.json").read_bytes()
    assert json.dumps(body, indent=2, sort_keys=True).encode("utf-8") + b"\n" == golden


def test_request_body_interleaves_images_in_placeholder_order():
    body = remote().request_body(url_parts())
    content = body["messages"][0]["content"]
    urls = [p["image_url"]["url"] for p in content if p["type"] == "image_url"]
    assert urls == [
        "https://example.com/q.jpg",
        "https://example.com/o1.jpg",
        "https://example.com/o2.jpg",
    ]


def test_request_body_inlines_local_files_as_data_uris(tmp_path):
    img = tmp_path / "pic.png"
    img.write_bytes(b"not-really-a-png")
    parts = render_deduction_prompt(
        "attribute",
        build_two_group_corpus().vocabulary,
        str(img),
        "https://example.com/s.jpg",
    )
    body = remote().request_body(parts)
    first_image = next(
        p for p in body["messages"][0]["content"] if p["type"] == "image_url"
    )
    assert first_image["image_url"]["url"].startswith("data:image/png;base64,")


def test_remote_rate_limit_honors_retry_after():
    sleeps = []
    client = remote(sleep=sleeps.append, max_retries=2)
    responses = iter(
        [
            FakeResponse(429, headers={"Retry-After": "7"}),
            FakeResponse(200, ok_payload("Image2")),
        ]
    )
    client._post = lambda *a, **k: next(responses)
    assert client.complete(url_parts()) == "Image2"
    assert sleeps == [7.0]


def test_remote_retries_server_errors_then_fails():
    client = remote(max_retries=2)
    attempts = []
    client._post = lambda *a, **k: attempts.append(1) or FakeResponse(503)
    with pytest.raises(TransportError):
        client.complete(url_parts())
    assert len(attempts) == 3  # initial + 2 retries


def test_remote_refusal_is_not_retried():
    client = remote(max_retries=3)
    attempts = []
    client._post = lambda *a, **k: attempts.append(1) or FakeResponse(403)
    with pytest.raises(BackendRefusal):
        client.complete(url_parts())
    assert len(attempts) == 1


def test_remote_timeout_becomes_deadline_error():
    client = remote(max_retries=0)

    def post(*a, **k):
        raise requests.Timeout("slow")

    client._post = post
    with pytest.raises(DeadlineExceeded):
        client.complete(url_parts())


def test_remote_auth_header_from_environment(monkeypatch):
    client = remote(auth_env="FAKE_TOKEN_VAR")
    captured = {}

    def post(url, json=None, headers=None, timeout=None):
        captured.update(headers)
        return FakeResponse(200, ok_payload())

    client._post = post
    monkeypatch.setenv("FAKE_TOKEN_VAR", "sk-123")
    client.complete(url_parts())
    assert captured["Authorization"] == "Bearer sk-123"


def test_remote_malformed_payload_is_transport_error():
    client = remote(max_retries=0)
    client._post = lambda *a, **k: FakeResponse(200, {"unexpected": True})
    with pytest.raises(TransportError):
        client.complete(url_parts())


# -- token bucket ------------------------------------------------------------

def test_token_bucket_spaces_requests():
    now = [0.0]
    naps = []

    def clock():
        return now[0]

    def sleep(s):
        naps.append(s)
        now[0] += s

    bucket = TokenBucket(rate_per_sec=2.0, burst=1, clock=clock, sleep=sleep)
    bucket.acquire()  # burst token
    bucket.acquire()  # must wait 0.5s
    assert naps == [pytest.approx(0.5)]


# -- backend config ----------------------------------------------------------

def test_load_backends_from_config():
    corpus = build_two_group_corpus()
    clients = load_backends(
        [
            {"id": "o1", "kind": "oracle", "p_assoc": 1.0, "seed": 1},
            {"id": "o2", "kind": "oracle", "p_assoc": 0.5, "seed": 2},
            {"id": "down", "kind": "failing"},
            {"id": "moe", "kind": "ensemble", "members": ["o1", "o2"]},
            {
                "id": "api",
                "kind": "remote",
                "endpoint": "https://api.example.com/v1",
                "model": "m",
                "rate_per_sec": 5,
            },
        ],
        corpus,
    )
    assert set(clients) == {"o1", "o2", "down", "moe", "api"}
    assert isinstance(clients["moe"], EnsembleClient)
    with pytest.raises(ValueError, match="unknown backend kind"):
        load_backends([{"id": "x", "kind": "mystery"}], corpus)
