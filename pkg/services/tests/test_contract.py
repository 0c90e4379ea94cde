"""Wire contract: flat JSON in and out, 400 on malformed input, delay honored."""

import time

import pytest
from fastapi.testclient import TestClient

from example_services import ALL_SERVICES, build_app


@pytest.fixture()
def client():
    return TestClient(build_app())


def test_gate_round_trip(client):
    response = client.post("/gate", json={"position": "down"})
    assert response.status_code == 200
    assert response.json() == {"ok": True, "position": "down"}


def test_light_round_trip(client):
    response = client.post("/light", json={"on": True})
    assert response.status_code == 200
    assert response.json() == {"ok": True, "on": True}


def test_detect_defaults_to_always_seen(client):
    for _ in range(3):
        assert client.post("/detect", json={}).json() == {"ok": True, "seen": True}


def test_detect_follows_script():
    client = TestClient(build_app(detect_script=(True, False, False)))
    seen = [client.post("/detect", json={}).json()["seen"] for _ in range(6)]
    assert seen == [True, False, False, True, False, False]


def test_detect_request_override_beats_script():
    client = TestClient(build_app(detect_script=(False,)))
    assert client.post("/detect", json={"seen": True}).json()["seen"] is True


def test_healthz_lists_services(client):
    response = client.get("/healthz")
    assert response.status_code == 200
    assert response.json() == {"ok": True, "services": list(ALL_SERVICES)}


def test_malformed_body_gives_400_error_json(client):
    response = client.post("/gate", content=b"{not json", headers={"Content-Type": "application/json"})
    assert response.status_code == 400
    assert "error" in response.json()


def test_non_object_body_gives_400(client):
    response = client.post("/light", json=[1, 2, 3])
    assert response.status_code == 400
    assert "error" in response.json()


def test_missing_required_key_gives_400(client):
    response = client.post("/gate", json={"direction": "down"})
    assert response.status_code == 400
    assert "position" in response.json()["error"]


def test_empty_body_treated_as_empty_object(client):
    response = client.post("/detect")
    assert response.status_code == 200
    assert response.json()["seen"] is True


def test_only_requested_services_mounted():
    client = TestClient(build_app(("gate",)))
    assert client.post("/gate", json={"position": "up"}).status_code == 200
    assert client.post("/light", json={"on": True}).status_code == 404


def test_unknown_service_name_rejected():
    with pytest.raises(ValueError):
        build_app(("gate", "camera"))


def test_delay_is_honored():
    client = TestClient(build_app(delay_ms=30))
    started = time.perf_counter()
    assert client.post("/gate", json={"position": "down"}).status_code == 200
    elapsed_ms = (time.perf_counter() - started) * 1000
    assert elapsed_ms >= 30


def test_responses_deterministic_for_same_input(client):
    first = client.post("/gate", json={"position": "down"}).json()
    second = client.post("/gate", json={"position": "down"}).json()
    assert first == second
