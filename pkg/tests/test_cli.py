"""Command-line behavior: exit codes, output shapes, process wiring."""

import json
import signal
import subprocess
import sys
import time
import urllib.request

import pytest

from csm.broker import BrokerServer
from csm.coordinator import CoordinatorClient, CoordinatorServer

VALID = {
    "name": "demo",
    "memoryMode": "distributed",
    "stateMachines": [
        {
            "name": "m",
            "states": [
                {"name": "a", "initial": True, "always": [{"target": "b"}]},
                {"name": "b", "terminal": True},
            ],
        }
    ],
}

TWO_INITIALS = {
    "name": "demo",
    "memoryMode": "distributed",
    "stateMachines": [
        {
            "name": "m",
            "states": [
                {"name": "a", "initial": True},
                {"name": "b", "initial": True, "terminal": True},
            ],
        }
    ],
}

COUNTER = {
    "name": "counter",
    "memoryMode": "distributed",
    "stateMachines": [
        {
            "name": "m",
            "localData": [{"name": "count", "value": "0"}],
            "states": [
                {
                    "name": "wait",
                    "initial": True,
                    "on": [
                        {
                            "target": "wait",
                            "event": "tick",
                            "actions": [
                                {"type": "assign", "variable": {"name": "count"}, "value": "count + 1"}
                            ],
                        },
                        {"target": "done", "event": "stop"},
                    ],
                },
                {"name": "done", "terminal": True},
            ],
        }
    ],
}


def cli(*argv, timeout=60):
    return subprocess.run(
        [sys.executable, "-m", "csm.cli", *argv],
        capture_output=True,
        text=True,
        timeout=timeout,
    )


def write(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return str(path)


# --- validate ---------------------------------------------------------------


def test_validate_ok(tmp_path):
    result = cli("validate", write(tmp_path, "d.json", VALID))
    assert result.returncode == 0
    assert "ok: demo" in result.stdout


def test_validate_invalid_exits_1(tmp_path):
    result = cli("validate", write(tmp_path, "d.json", TWO_INITIALS))
    assert result.returncode == 1
    assert "initial" in result.stdout


def test_validate_malformed_exits_2(tmp_path):
    result = cli("validate", write(tmp_path, "d.json", "{not json"))
    assert result.returncode == 2
    assert "malformed" in result.stderr


def test_validate_missing_file_exits_2(tmp_path):
    result = cli("validate", str(tmp_path / "absent.json"))
    assert result.returncode == 2


# --- run --------------------------------------------------------------------


def test_run_trivial_terminates(tmp_path):
    result = cli("run", write(tmp_path, "d.json", VALID))
    assert result.returncode == 0, result.stderr
    summary = json.loads(result.stdout)
    assert summary["m"]["terminated"] is True
    assert summary["m"]["state"] == "b"
    assert summary["m"]["stateEntries"] == {"a": 1, "b": 1}


def test_run_unknown_machine_exits_1(tmp_path):
    result = cli("run", write(tmp_path, "d.json", VALID), "--machine", "nope")
    assert result.returncode == 1


def test_run_scripted_events(tmp_path):
    script = [
        {"at": 0.0, "name": "tick", "target": "m"},
        {"at": 0.05, "name": "tick", "target": "m"},
        {"at": 0.1, "name": "stop", "target": "m"},
    ]
    result = cli(
        "run",
        write(tmp_path, "d.json", COUNTER),
        "--inject",
        write(tmp_path, "events.json", script),
        "--max-seconds",
        "10",
    )
    assert result.returncode == 0, result.stderr
    summary = json.loads(result.stdout)
    assert summary["m"]["terminated"] is True
    assert summary["m"]["eventsHandled"] == 3


# --- submit and runtime -----------------------------------------------------


@pytest.fixture()
def servers():
    coordinator = CoordinatorServer().start()
    broker = BrokerServer().start()
    yield coordinator, broker
    broker.shutdown()
    broker.server_close()
    coordinator.stop()


def spawn_runtime(coordinator, broker, tmp_path, node_id="n1"):
    proc = subprocess.Popen(
        [
            sys.executable,
            "-m",
            "csm.cli",
            "runtime",
            "--node-id",
            node_id,
            "--coordinator",
            f"{coordinator.address[0]}:{coordinator.address[1]}",
            "--broker",
            f"{broker.address[0]}:{broker.address[1]}",
            "--store",
            "memory",
            "--metrics-out",
            str(tmp_path / f"{node_id}.jsonl"),
        ],
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
    )
    banner = proc.stdout.readline()
    assert f"runtime {node_id} up" in banner, banner
    return proc, banner


def job_file(tmp_path):
    job = {
        "description": COUNTER,
        "stateMachineName": "m",
        "instanceData": {"count": 10},
        "bindings": [],
        "serviceImplementations": [],
        "eligibility": [],
    }
    return write(tmp_path, "job.json", job)


def test_submit_places_on_runtime(tmp_path, servers):
    coordinator, broker = servers
    proc, banner = spawn_runtime(coordinator, broker, tmp_path)
    try:
        result = cli(
            "submit",
            job_file(tmp_path),
            "--coordinator",
            f"{coordinator.address[0]}:{coordinator.address[1]}",
        )
        assert result.returncode == 0, result.stdout + result.stderr
        receipt = json.loads(result.stdout)
        assert receipt["nodeId"] == "n1"
        assert receipt["instances"] == ["m"]

        # the runtime announces a peripheral event door; drive it
        address = banner.split("events http://")[1].split("/events")[0]
        body = json.dumps({"name": "tick", "data": {}, "target": "m"}).encode()
        request = urllib.request.Request(
            f"http://{address}/events", data=body, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(request, timeout=5) as response:
            assert json.loads(response.read()) == {"ok": True, "delivered": 1}
    finally:
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == 0


def test_submit_without_runtimes_exits_1(tmp_path, servers):
    coordinator, _ = servers
    result = cli(
        "submit",
        job_file(tmp_path),
        "--coordinator",
        f"{coordinator.address[0]}:{coordinator.address[1]}",
    )
    assert result.returncode == 1
    assert "no eligible runtime" in result.stderr


def registered_nodes(coordinator):
    client = CoordinatorClient(*coordinator.address)
    try:
        return client.counts()
    finally:
        client.close()


def test_runtime_shuts_down_cleanly_on_sigterm(tmp_path, servers):
    coordinator, broker = servers
    proc, _ = spawn_runtime(coordinator, broker, tmp_path, node_id="n2")
    deadline = time.monotonic() + 5
    while "n2" not in registered_nodes(coordinator) and time.monotonic() < deadline:
        time.sleep(0.05)
    proc.send_signal(signal.SIGTERM)
    assert proc.wait(timeout=10) == 0
