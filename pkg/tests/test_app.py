# tests/test_app.py
import pytest
from fastapi.testclient import TestClient

from app import MAX_HTTP_REPLICAS, app

G00 = 1.516386059151978


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def test_health(client):
    response = client.get("/")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "online"
    assert set(body["environment"]) == {"OCCUPATION_LAB_SEED", "OCCUPATION_LAB_WORKERS", "OCCUPATION_LAB_LOG_LEVEL"}


def test_green(client):
    response = client.post("/green", json={"x": [0, 0, 0], "y": [0, 0, 0], "accuracy": 1e-3})
    assert response.status_code == 200
    assert response.json()["value"] == pytest.approx(G00, rel=3e-3)


def test_capacity_of_a_point(client):
    response = client.post("/capacity", json={"sites": "{0}", "accuracy": 1e-3})
    assert response.status_code == 200
    body = response.json()
    assert body["capacity"] == pytest.approx(1.0 / G00, rel=3e-3)
    assert list(body["equilibrium_measure"]) == ["(0,0,0)"]


def test_capacity_bad_site_set(client):
    response = client.post("/capacity", json={"sites": "B(0"})
    assert response.status_code == 422


def test_hit_probability_on_the_set_is_one(client):
    response = client.post("/hit-probability", json={"points": [[0, 0, 0], [5, 0, 0]], "sites": "{0}",
                                                      "accuracy": 1e-3})
    assert response.status_code == 200
    first, far = response.json()["probabilities"]
    assert first == pytest.approx(1.0, abs=5e-3)
    assert 0.0 < far < 0.5


def test_theta_closed_form_only(client):
    response = client.post("/theta", json={"functional": "F2", "levels": [0.0, 1.0]})
    assert response.status_code == 200
    body = response.json()
    assert body["closed_form"][0] == 0.0
    assert 0.0 < body["closed_form"][1] < 1.0
    assert body["estimates"] is None


def test_theta_without_closed_form_needs_replicas(client):
    response = client.post("/theta", json={"functional": "F3:r=1", "levels": [1.0]})
    assert response.status_code == 400


def test_theta_replica_cap(client):
    response = client.post("/theta", json={"levels": [1.0], "replicas": MAX_HTTP_REPLICAS + 1})
    assert response.status_code == 422


def test_theta_estimate(client):
    response = client.post("/theta", json={"functional": "F2", "levels": [0.5], "replicas": 500, "seed": 2})
    assert response.status_code == 200
    body = response.json()
    assert len(body["estimates"]) == len(body["half_widths"]) == len(body["closed_form"])


def test_scaffold_validation(client):
    ok = client.post("/scaffold/validate", json={"x0": [0, 0, 0], "N": 200, "delta_tilde": 30.0,
                                                 "radii": [2, 4, 6, 8, 10]})
    assert ok.status_code == 200
    assert ok.json()["valid"] is True
    assert ok.json()["scaffold"]["radii"][-1] == 60

    bad = client.post("/scaffold/validate", json={"x0": [0, 0, 0], "N": 200, "delta_tilde": 30.0,
                                                  "radii": [2, 4, 6, 8, 70]})
    assert bad.status_code == 200
    assert bad.json()["valid"] is False
    assert "A5" in bad.json()["reason"]


def test_solve_rejects_unknown_theta(client):
    response = client.post("/solve", json={"theta": "F7", "nu": 0.2})
    assert response.status_code == 400


def test_solve_rejects_infeasible_level(client):
    response = client.post("/solve", json={"theta": "F2", "nu": 2.0})
    assert response.status_code == 422


def test_solve_linear_theta(client):
    response = client.post("/solve", json={"theta": "F1", "nu": 0.2})
    assert response.status_code == 200
    summary = response.json()["summary"]
    assert summary["energy"] > 0
    assert summary["constraint"] == pytest.approx(0.2, rel=1e-4)
