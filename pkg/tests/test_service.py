import time

import pytest
from fastapi.testclient import TestClient

from cleanloop.data import dataset_to_jsonl, load_dataset, perturb_labels, write_dataset
from cleanloop.loop import ActiveLoop, AnnotatorAnswer, StopConfig
from cleanloop.scoring import EnsembleConfig
from cleanloop.service import create_app
from cleanloop.synth import two_cluster_classification
from cleanloop.trainer import TrainerConfig

DIM = 2**10

SESSION_BODY = {
    "k": 6,
    "folds": 3,
    "trainer": {"epochs": 2, "seed": 0},
    "stop": {"max_iterations": 40},
}


def make_dataset_file(tmp_path, n=30, gold=False, seed=4):
    ds = two_cluster_classification(n, seed=seed, dim=DIM)
    if gold:
        ds = perturb_labels(ds, 0.1, seed=1)
    path = tmp_path / "served.jsonl"
    write_dataset(ds, path)
    return path


def wait_for_phase(client, sid, phase, timeout=20.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        status = client.get(f"/sessions/{sid}/status").json()
        if status["phase"] == phase:
            return status
        if status["phase"] == "stopped" and phase != "stopped":
            raise AssertionError(f"session stopped early: {status}")
        time.sleep(0.02)
    raise AssertionError(f"timed out waiting for phase {phase}")


def create_session(client, path, **overrides):
    body = {**SESSION_BODY, "dataset_ref": str(path), **overrides}
    response = client.post("/sessions", json=body)
    assert response.status_code == 202, response.text
    return response.json()["session_id"]


@pytest.fixture()
def client(tmp_path):
    app = create_app()
    with TestClient(app) as test_client:
        yield test_client


class TestHealth:
    def test_healthz(self, client):
        response = client.get("/healthz")
        assert response.status_code == 200
        payload = response.json()
        assert payload["v"] == 1
        assert payload["version"]


class TestCreate:
    def test_valid_body_gives_202(self, client, tmp_path):
        sid = create_session(client, make_dataset_file(tmp_path))
        assert sid
        status = client.get(f"/sessions/{sid}/status").json()
        assert status["total"] == 30

    def test_zero_k_gives_400(self, client, tmp_path):
        path = make_dataset_file(tmp_path)
        response = client.post("/sessions", json={"dataset_ref": str(path), "k": 0})
        assert response.status_code == 400

    def test_missing_dataset_gives_404(self, client, tmp_path):
        response = client.post("/sessions", json={"dataset_ref": str(tmp_path / "no.jsonl")})
        assert response.status_code == 404

    def test_fresh_session_status(self, client, tmp_path):
        sid = create_session(client, make_dataset_file(tmp_path))
        status = client.get(f"/sessions/{sid}/status").json()
        assert status["iteration"] == 0
        assert status["phase"] in ("scoring", "awaiting_annotations")

    def test_unknown_session_404(self, client):
        assert client.get("/sessions/zzz/status").status_code == 404


class TestBatchFlow:
    def test_full_round(self, client, tmp_path):
        path = make_dataset_file(tmp_path)
        sid = create_session(client, path)
        wait_for_phase(client, sid, "awaiting_annotations")

        batch = client.get(f"/sessions/{sid}/batch")
        assert batch.status_code == 200
        payload = batch.json()
        assert len(payload["items"]) == 6
        assert payload["iteration"] == 1
        assert payload["label_space"] == ["neg", "pos"]
        ranks = [item["rank"] for item in payload["items"]]
        assert ranks == sorted(ranks)

        # repeated GET is identical
        again = client.get(f"/sessions/{sid}/batch")
        assert again.json() == payload

        # flip 2 labels, confirm the rest
        decisions = {}
        for i, item in enumerate(payload["items"]):
            if i < 2:
                flipped = "pos" if item["label"] == "neg" else "neg"
                decisions[item["id"]] = {"label": flipped}
            else:
                decisions[item["id"]] = {"confirm": True}
        response = client.post(f"/sessions/{sid}/corrections", json={"v": 1, "decisions": decisions})
        assert response.status_code == 200
        body = response.json()
        assert body["iteration"] == 1
        assert body["batch_error_fraction"] == pytest.approx(2 / 6)

        # compute phases reject batch fetches with progress info
        blocked = client.get(f"/sessions/{sid}/batch")
        if blocked.status_code == 409:
            assert "progress" in blocked.json()

        wait_for_phase(client, sid, "awaiting_annotations")
        second = client.get(f"/sessions/{sid}/batch").json()
        first_ids = {item["id"] for item in payload["items"]}
        second_ids = {item["id"] for item in second["items"]}
        assert not first_ids & second_ids

    def test_resubmission_rejected(self, client, tmp_path):
        # threshold stops the session at the first all-confirmed batch, so the
        # duplicate POST lands deterministically outside awaiting_annotations
        path = make_dataset_file(tmp_path)
        sid = create_session(
            client, path, stop={"max_iterations": 40, "error_fraction_threshold": 0.99}
        )
        wait_for_phase(client, sid, "awaiting_annotations")
        payload = client.get(f"/sessions/{sid}/batch").json()
        decisions = {item["id"]: {"confirm": True} for item in payload["items"]}
        assert client.post(f"/sessions/{sid}/corrections", json={"decisions": decisions}).status_code == 200
        again = client.post(f"/sessions/{sid}/corrections", json={"decisions": decisions})
        assert again.status_code == 409

    def test_partial_batch_is_atomic_422(self, client, tmp_path):
        path = make_dataset_file(tmp_path)
        sid = create_session(client, path)
        wait_for_phase(client, sid, "awaiting_annotations")
        payload = client.get(f"/sessions/{sid}/batch").json()
        before = client.get(f"/sessions/{sid}/status").json()
        decisions = {item["id"]: {"confirm": True} for item in payload["items"][:-1]}
        response = client.post(f"/sessions/{sid}/corrections", json={"decisions": decisions})
        assert response.status_code == 422
        after = client.get(f"/sessions/{sid}/status").json()
        assert after == before
        assert client.get(f"/sessions/{sid}/batch").json() == payload

    def test_sequence_batch_and_token_corrections(self, client, tmp_path):
        from cleanloop.synth import token_tag_sequences

        ds = token_tag_sequences(20, seed=6, dim=DIM)
        path = tmp_path / "seq.jsonl"
        write_dataset(ds, path)
        sid = create_session(client, path, k=4)
        wait_for_phase(client, sid, "awaiting_annotations")
        payload = client.get(f"/sessions/{sid}/batch").json()
        assert payload["task_kind"] == "sequence"
        assert payload["label_space"] == ["O", "ENT"]
        item = payload["items"][0]
        assert len(item["tokens"]) == len(item["labels"])

        decisions = {it["id"]: {"confirm": True} for it in payload["items"]}
        fixed = list(item["labels"])
        fixed[0] = "ENT" if fixed[0] == "O" else "O"
        decisions[item["id"]] = {"labels": fixed}
        response = client.post(f"/sessions/{sid}/corrections", json={"decisions": decisions})
        assert response.status_code == 200
        assert response.json()["batch_error_fraction"] == pytest.approx(1 / 4)

        # wrong arity is rejected atomically
        wait_for_phase(client, sid, "awaiting_annotations")
        second = client.get(f"/sessions/{sid}/batch").json()
        bad = {it["id"]: {"confirm": True} for it in second["items"]}
        bad[second["items"][0]["id"]] = {"labels": ["O"]}
        assert client.post(f"/sessions/{sid}/corrections", json={"decisions": bad}).status_code == 422

    def test_unknown_label_is_422(self, client, tmp_path):
        path = make_dataset_file(tmp_path)
        sid = create_session(client, path)
        wait_for_phase(client, sid, "awaiting_annotations")
        payload = client.get(f"/sessions/{sid}/batch").json()
        decisions = {item["id"]: {"confirm": True} for item in payload["items"]}
        decisions[payload["items"][0]["id"]] = {"label": "purple"}
        response = client.post(f"/sessions/{sid}/corrections", json={"decisions": decisions})
        assert response.status_code == 422


class TestStopAndReport:
    def test_report_requires_stop(self, client, tmp_path):
        sid = create_session(client, make_dataset_file(tmp_path))
        wait_for_phase(client, sid, "awaiting_annotations")
        assert client.get(f"/sessions/{sid}/report").status_code == 409

    def test_manual_stop_and_report(self, client, tmp_path):
        path = make_dataset_file(tmp_path)
        sid = create_session(client, path)
        wait_for_phase(client, sid, "awaiting_annotations")
        payload = client.get(f"/sessions/{sid}/batch").json()
        decisions = {item["id"]: {"confirm": True} for item in payload["items"]}
        client.post(f"/sessions/{sid}/corrections", json={"decisions": decisions})
        wait_for_phase(client, sid, "awaiting_annotations")

        stop = client.post(f"/sessions/{sid}/stop")
        assert stop.status_code == 200
        assert stop.json()["stopped"] is True
        # idempotent
        again = client.post(f"/sessions/{sid}/stop")
        assert again.json()["already_stopped"] is True

        gone = client.get(f"/sessions/{sid}/batch")
        assert gone.status_code == 410
        assert gone.json()["stop_reason"] == "manual"

        report = client.get(f"/sessions/{sid}/report").json()
        assert report["stop_reason"] == "manual"
        assert [it["answered"] for it in report["iterations"]] == [True, False]
        assert report["corrected_count"] == 6

    def test_simulation_report_has_ap(self, client, tmp_path):
        path = make_dataset_file(tmp_path, gold=True)
        sid = create_session(client, path)
        wait_for_phase(client, sid, "awaiting_annotations")
        client.post(f"/sessions/{sid}/stop")
        report = client.get(f"/sessions/{sid}/report").json()
        assert report["mode"] == "simulation"
        assert 0.0 <= report["ap"] <= 1.0
        assert report["pr_curve"][-1][0] == 1.0

    def test_threshold_stop_reason_in_status(self, client, tmp_path):
        path = make_dataset_file(tmp_path, gold=True)
        sid = create_session(
            client, path, stop={"max_iterations": 40, "error_fraction_threshold": 0.99}
        )
        wait_for_phase(client, sid, "awaiting_annotations")
        payload = client.get(f"/sessions/{sid}/batch").json()
        decisions = {item["id"]: {"confirm": True} for item in payload["items"]}
        client.post(f"/sessions/{sid}/corrections", json={"decisions": decisions})
        status = wait_for_phase(client, sid, "stopped")
        assert status["stop_reason"] == "error_fraction"


class TestReplayEquivalence:
    def test_api_session_matches_in_process_loop(self, client, tmp_path):
        path = make_dataset_file(tmp_path, n=24)
        sid = create_session(client, path)
        wait_for_phase(client, sid, "awaiting_annotations")
        payload = client.get(f"/sessions/{sid}/batch").json()
        flipped = {}
        decisions = {}
        for i, item in enumerate(payload["items"]):
            if i < 3:
                flipped[item["id"]] = "pos" if item["label"] == "neg" else "neg"
                decisions[item["id"]] = {"label": flipped[item["id"]]}
            else:
                decisions[item["id"]] = {"confirm": True}
        client.post(f"/sessions/{sid}/corrections", json={"decisions": decisions})
        wait_for_phase(client, sid, "awaiting_annotations")
        client.post(f"/sessions/{sid}/stop")
        download = client.get(f"/sessions/{sid}/dataset")
        assert download.status_code == 200

        # replay the identical session in process
        dataset = load_dataset(path)
        loop = ActiveLoop(
            dataset,
            fold_count=SESSION_BODY["folds"],
            trainer_config=TrainerConfig(epochs=2, seed=0),
            ensemble_config=EnsembleConfig(),
            k=SESSION_BODY["k"],
            stop_config=StopConfig(max_iterations=40),
        )
        loop.compute_scores()
        batch = loop.next_batch()
        assert batch == [item["id"] for item in payload["items"]]
        space = dataset.label_space
        answer = AnnotatorAnswer(
            {
                iid: ((space.index(flipped[iid]),) if iid in flipped else None)
                for iid in batch
            }
        )
        loop.submit(batch, answer)
        assert dataset_to_jsonl(loop.state.dataset) == download.text


class TestAuth:
    def test_token_required_when_set(self, client, tmp_path):
        path = make_dataset_file(tmp_path)
        sid = create_session(client, path, token="hunter2")
        denied = client.get(f"/sessions/{sid}/status")
        assert denied.status_code == 401
        allowed = client.get(
            f"/sessions/{sid}/status", headers={"Authorization": "Bearer hunter2"}
        )
        assert allowed.status_code == 200


class TestCheckpointResume:
    def test_restart_resumes_same_iteration(self, tmp_path):
        path = make_dataset_file(tmp_path)
        ckpt = tmp_path / "ckpts"
        app = create_app(checkpoint_dir=ckpt)
        with TestClient(app) as client:
            sid = create_session(client, path)
            wait_for_phase(client, sid, "awaiting_annotations")
            payload = client.get(f"/sessions/{sid}/batch").json()
            decisions = {item["id"]: {"confirm": True} for item in payload["items"]}
            client.post(f"/sessions/{sid}/corrections", json={"decisions": decisions})
            wait_for_phase(client, sid, "awaiting_annotations")
            second_batch = client.get(f"/sessions/{sid}/batch").json()

        # "restart" the server on the same checkpoint dir
        app2 = create_app(checkpoint_dir=ckpt)
        with TestClient(app2) as client:
            status = client.get(f"/sessions/{sid}/status").json()
            assert status["iteration"] == 1
            assert status["corrected_count"] == 6
            resumed = wait_for_phase(client, sid, "awaiting_annotations")
            assert resumed["iteration"] == 1
            batch = client.get(f"/sessions/{sid}/batch").json()
            assert batch["items"] == second_batch["items"]
            # loop continues normally after resume
            decisions = {item["id"]: {"confirm": True} for item in batch["items"]}
            response = client.post(f"/sessions/{sid}/corrections", json={"decisions": decisions})
            assert response.status_code == 200
            assert response.json()["iteration"] == 2

    def test_corrupt_checkpoint_refuses_start(self, tmp_path):
        ckpt = tmp_path / "ckpts"
        ckpt.mkdir()
        bad = ckpt / "deadbeef.json"
        bad.write_text("{broken")
        from cleanloop.service import ServiceStartupError

        with pytest.raises(ServiceStartupError, match="deadbeef.json"):
            create_app(checkpoint_dir=ckpt)


class TestUiMount:
    def test_ui_served_when_dir_given(self, tmp_path):
        ui = tmp_path / "ui"
        ui.mkdir()
        (ui / "index.html").write_text("<html><body>annotator</body></html>")
        with TestClient(create_app(ui_dir=ui)) as client:
            response = client.get("/ui/")
            assert response.status_code == 200
            assert "annotator" in response.text

    def test_no_mount_without_dir(self):
        with TestClient(create_app()) as client:
            assert client.get("/ui/").status_code == 404
