from __future__ import annotations

import json

import pytest
from fastapi.testclient import TestClient

from assocbench.builder import make_round
from assocbench.modelio import OracleConfig, ScriptedOracle
from assocbench.refine import import_review_decisions
from assocbench.runner import TERMINAL_CAP_REACHED, run_chain
from assocbench.server import create_app


@pytest.fixture
def app_client(attr_corpus, tmp_path):
    app = create_app(attr_corpus, tmp_path, default_cap=20, default_example_count=3)
    return TestClient(app), attr_corpus, tmp_path


def start_session(client, **overrides):
    body = {"kind": "synchronous", "concepts": ["metal"], "seed": 4242}
    body.update(overrides)
    resp = client.post("/sessions", json=body)
    assert resp.status_code == 201, resp.text
    return resp.json()


def ground_truth_choice(corpus, payload) -> str:
    """A tester with perfect knowledge: the positive shares a label with the query."""
    query_labels = corpus.sample(payload["query"]["id"]).labels
    first = corpus.sample(payload["options"][0]["id"]).labels
    return "Image1" if (first & query_labels) else "Image2"


# -- creation ----------------------------------------------------------------

def test_create_returns_preview_of_default_example_count(app_client):
    client, corpus, _ = app_client
    created = start_session(client)
    assert len(created["preview"]) == 3
    for item in created["preview"]:
        anchor = corpus.sample(item["anchor"]["id"]).labels
        positive = corpus.sample(item["positive"]["id"]).labels
        assert frozenset(item["shared_concepts"]) == anchor & positive


def test_create_unknown_concept_is_400(app_client):
    client, _, _ = app_client
    resp = client.post("/sessions", json={"concepts": ["wooden"]})
    assert resp.status_code == 400


def test_create_without_seed_returns_generated_seed(app_client):
    client, _, _ = app_client
    created = start_session(client, seed=None)
    assert created["seed"] is not None
    # the returned seed reproduces the session stream
    again = start_session(client, seed=created["seed"])
    assert again["preview"] == created["preview"]


# -- question flow -----------------------------------------------------------

def test_fresh_session_serves_step_zero(app_client):
    client, _, _ = app_client
    created = start_session(client)
    resp = client.get(f"/sessions/{created['session_id']}/next")
    assert resp.status_code == 200
    payload = resp.json()
    assert payload["t"] == 0
    assert len(payload["options"]) == 2


def test_next_payload_never_contains_correct_option(app_client):
    client, _, _ = app_client
    created = start_session(client)
    payload = client.get(f"/sessions/{created['session_id']}/next").json()
    assert set(payload.keys()) == {"t", "query", "options"}
    for option in payload["options"]:
        assert set(option.keys()) == {"id", "url"}
    blob = json.dumps(created) + json.dumps(payload)
    assert "correct" not in blob


def test_next_is_idempotent_until_answered(app_client):
    client, _, _ = app_client
    sid = start_session(client)["session_id"]
    first = client.get(f"/sessions/{sid}/next").json()
    second = client.get(f"/sessions/{sid}/next").json()
    assert first == second


def test_correct_answer_increments_and_serves_next(app_client):
    client, corpus, _ = app_client
    sid = start_session(client)["session_id"]
    payload = client.get(f"/sessions/{sid}/next").json()
    verdict = client.post(
        f"/sessions/{sid}/answer",
        json={"choice": ground_truth_choice(corpus, payload)},
    ).json()
    assert verdict == {"correct": True, "step_count": 1}
    assert client.get(f"/sessions/{sid}/next").json()["t"] == 1


def test_wrong_answer_terminates_session(app_client):
    client, corpus, _ = app_client
    sid = start_session(client)["session_id"]
    payload = client.get(f"/sessions/{sid}/next").json()
    wrong = (
        "Image2"
        if ground_truth_choice(corpus, payload) == "Image1"
        else "Image1"
    )
    verdict = client.post(f"/sessions/{sid}/answer", json={"choice": wrong}).json()
    assert verdict == {"correct": False, "step_count": 0}
    resp = client.get(f"/sessions/{sid}/next")
    assert resp.status_code == 409
    assert resp.json()["detail"]["terminal"] == "wrong_answer"


def test_duplicate_answer_is_409(app_client):
    client, corpus, _ = app_client
    sid = start_session(client)["session_id"]
    payload = client.get(f"/sessions/{sid}/next").json()
    choice = ground_truth_choice(corpus, payload)
    assert client.post(f"/sessions/{sid}/answer", json={"choice": choice}).status_code == 200
    resp = client.post(f"/sessions/{sid}/answer", json={"choice": choice})
    assert resp.status_code == 409


def test_answer_without_pending_question_is_409(app_client):
    client, _, _ = app_client
    sid = start_session(client)["session_id"]
    resp = client.post(f"/sessions/{sid}/answer", json={"choice": "Image1"})
    assert resp.status_code == 409


def test_invalid_choice_token_is_400(app_client):
    client, _, _ = app_client
    sid = start_session(client)["session_id"]
    client.get(f"/sessions/{sid}/next")
    resp = client.post(f"/sessions/{sid}/answer", json={"choice": "Image3"})
    assert resp.status_code == 400


def test_unknown_session_is_404(app_client):
    client, _, _ = app_client
    assert client.get("/sessions/ghost/next").status_code == 404
    assert client.get("/sessions/ghost/summary").status_code == 404
    assert client.post("/sessions/ghost/report", json={"category": "privacy"}).status_code == 404


def test_cap_reached_closes_session(app_client):
    client, corpus, _ = app_client
    sid = start_session(client, cap=3)["session_id"]
    for _ in range(3):
        payload = client.get(f"/sessions/{sid}/next").json()
        client.post(
            f"/sessions/{sid}/answer",
            json={"choice": ground_truth_choice(corpus, payload)},
        )
    resp = client.get(f"/sessions/{sid}/next")
    assert resp.status_code == 409
    assert resp.json()["detail"]["terminal"] == TERMINAL_CAP_REACHED


# -- summary -----------------------------------------------------------------

def test_summary_hides_pending_step(app_client):
    client, corpus, _ = app_client
    sid = start_session(client)["session_id"]
    client.get(f"/sessions/{sid}/next")
    summary = client.get(f"/sessions/{sid}/summary").json()
    assert summary["steps"] == []
    assert summary["phase"] == "main"

    payload = client.get(f"/sessions/{sid}/next").json()
    client.post(
        f"/sessions/{sid}/answer",
        json={"choice": ground_truth_choice(corpus, payload), "evidence": "both metal"},
    )
    summary = client.get(f"/sessions/{sid}/summary").json()
    assert len(summary["steps"]) == 1
    assert summary["final_step_count"] == 1
    assert summary["evidence"] == [{"t": 0, "text": "both metal"}]


# -- ethic reports -----------------------------------------------------------

def test_ethic_report_flows_into_review_queue(app_client):
    client, corpus, tmp_path = app_client
    sid = start_session(client)["session_id"]
    shown = client.get(f"/sessions/{sid}/next").json()
    resp = client.post(
        f"/sessions/{sid}/report",
        json={"category": "privacy", "note": "face visible"},
    )
    assert resp.status_code == 204
    queue = tmp_path / "review_queue.jsonl"
    records = [json.loads(l) for l in queue.read_text().splitlines()]
    flagged_ids = {r["id"] for r in records}
    assert shown["query"]["id"] in flagged_ids
    assert all(r["ethic_flag"] == "privacy" for r in records)
    # and the queue round-trips through the refinement importer
    decisions, diagnostics = import_review_decisions(queue, {s.id for s in corpus})
    assert not diagnostics
    assert {d.sample_id for d in decisions} == flagged_ids


def test_empty_category_is_400(app_client):
    client, _, _ = app_client
    sid = start_session(client)["session_id"]
    resp = client.post(f"/sessions/{sid}/report", json={"category": " ", "note": ""})
    assert resp.status_code == 400


def test_report_accepted_after_session_done(app_client):
    client, corpus, _ = app_client
    sid = start_session(client)["session_id"]
    payload = client.get(f"/sessions/{sid}/next").json()
    wrong = "Image2" if ground_truth_choice(corpus, payload) == "Image1" else "Image1"
    client.post(f"/sessions/{sid}/answer", json={"choice": wrong})
    resp = client.post(f"/sessions/{sid}/report", json={"category": "bias", "note": ""})
    assert resp.status_code == 204


# -- protocol parity ---------------------------------------------------------

def test_scripted_ground_truth_session_matches_perfect_oracle_run(app_client):
    client, corpus, _ = app_client
    seed, cap = 1717, 15
    sid = start_session(client, seed=seed, cap=cap)["session_id"]
    while True:
        resp = client.get(f"/sessions/{sid}/next")
        if resp.status_code == 409:
            break
        payload = resp.json()
        client.post(
            f"/sessions/{sid}/answer",
            json={"choice": ground_truth_choice(corpus, payload)},
        )
    summary = client.get(f"/sessions/{sid}/summary").json()

    plan = make_round(corpus, "synchronous", ["metal"], cap=cap, seed=seed, example_count=3)
    oracle = ScriptedOracle(corpus, OracleConfig(p_assoc=1.0, p_deduct=1.0, seed=0))
    reference = run_chain(corpus, plan, oracle, "NoM")

    assert summary["plan"] == plan.as_dict()
    assert summary["terminal"] == reference.terminal == TERMINAL_CAP_REACHED
    assert summary["final_step_count"] == reference.final_step_count == cap
    got = [
        (s["t"], s["query"], s["option1"], s["option2"], s["correct_option"], s["association_correct"])
        for s in summary["steps"]
    ]
    want = [
        (r.t, r.query, r.option1, r.option2, r.correct_option, r.association_correct)
        for r in reference.steps
    ]
    assert got == want


def test_session_event_log_is_append_only_record(app_client):
    client, corpus, tmp_path = app_client
    sid = start_session(client)["session_id"]
    payload = client.get(f"/sessions/{sid}/next").json()
    client.post(
        f"/sessions/{sid}/answer",
        json={"choice": ground_truth_choice(corpus, payload)},
    )
    events = [
        json.loads(l)
        for l in (tmp_path / "sessions" / f"{sid}.jsonl").read_text().splitlines()
    ]
    assert [e["event"] for e in events] == ["created", "answered"]
    assert events[1]["correct"] is True
