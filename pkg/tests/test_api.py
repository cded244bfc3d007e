"""HTTP surface."""
import pytest
from fastapi.testclient import TestClient

from varprop.api import app, get_db, get_engine
from varprop.config import Config


@pytest.fixture
def client(db_session):
    app.dependency_overrides[get_db] = lambda: db_session
    with TestClient(app) as test_client:
        yield test_client
    app.dependency_overrides.clear()


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"ok": True}


def test_run_lifecycle(client, tmp_path):
    body = {"command": "theory", "depth": 3, "out": str(tmp_path / "out")}
    created = client.post("/runs", json=body).json()
    assert created["status"] == "succeeded"
    assert created["reproduced"] is None
    assert [f.rsplit("/", 1)[-1] for f in created["files"]] == ["theory.csv", "theory.svg"]

    again = client.post("/runs", json=body).json()
    assert again["reproduced"] is True

    detail = client.get(f"/runs/{created['run_id']}").json()
    assert detail["command"] == "theory"
    assert detail["files_written"] == 2
    assert detail["config"]["depth"] == 3

    listed = client.get("/runs").json()
    assert [run["run_id"] for run in listed] == [again["run_id"], created["run_id"]]


def test_failed_run(client, tmp_path):
    body = {"command": "finite-width", "networks": 1, "out": str(tmp_path / "out")}
    result = client.post("/runs", json=body).json()
    assert result["status"] == "failed"
    assert result["error_category"] == "configuration"
    detail = client.get(f"/runs/{result['run_id']}").json()
    assert detail["status"] == "failed"
    assert detail["error_category"] == "configuration"


def test_invalid_body(client):
    assert client.post("/runs", json={"command": "train"}).status_code == 422


def test_unknown_run(client):
    assert client.get("/runs/does-not-exist").status_code == 404


def test_preview(client):
    result = client.post("/preview", json={"depth": 2}).json()
    assert [row["layer"] for row in result["layers"]] == [1, 2]
    assert result["batchnorm"]["slope"] == pytest.approx(-0.383, abs=1e-3)
    assert result["layers"][0]["m"] ** 2 == pytest.approx(2.0 / 3.141592653589793, abs=1e-12)


def test_preview_validation(client):
    assert client.post("/preview", json={"depth": 0}).status_code == 422
    assert client.post("/preview", json={"depth": 3, "nodes": 4}).status_code == 422


def test_fresh_output_directory(monkeypatch, tmp_path):
    out = tmp_path / "results"
    monkeypatch.setattr(Config, "OUT_DIR", str(out))
    monkeypatch.setattr(Config, "DATABASE_URL", None)
    get_engine.cache_clear()
    try:
        with TestClient(app) as test_client:
            assert test_client.post("/preview", json={"depth": 3}).status_code == 200
            assert test_client.get("/runs").json() == []
            assert test_client.get("/runs/missing").status_code == 404
    finally:
        get_engine.cache_clear()
    assert (out / "runs.db").exists()
