"""Railway-crossing description builders and their end-to-end behavior."""

import json
import time

import pytest

from csm.data import InMemoryStore
from csm.events import EventBus
from csm.metrics import MemoryEmitter
from csm.parsing import parse_description
from csm.railway import (
    CONFIGURATIONS,
    SENSOR_EVENTS,
    controller_machine,
    payload_string,
    railway_description,
    railway_job,
)
from csm.runtime import LocalTransport, RuntimeHost, RuntimeNode
from csm.services import StubServiceServer, stub_catalog
from csm.validation import validate


def wait_until(predicate, timeout=5.0, interval=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False


@pytest.mark.parametrize("configuration", CONFIGURATIONS)
def test_description_is_valid(configuration):
    desc = parse_description(json.dumps(railway_description(0, configuration)))
    report = validate(desc)
    assert report.ok, [e.message for e in report.errors]
    machine = desc.machine("controller0")
    assert machine is not None
    assert {m.name for m in machine.nested} == {"gate", "light"}


def test_unknown_configuration_rejected():
    with pytest.raises(ValueError):
        controller_machine("c", configuration="remoteLocal")


def test_every_state_absorbs_both_sensor_events():
    # each injected event must fire exactly one transition, so the
    # handled/generated ratio stays meaningful
    machine = controller_machine("c", configuration="localLocal")
    plain_states = [s for s in machine["states"] if "states" not in s]
    assert len(plain_states) == 4
    for state in plain_states:
        events = [t["event"] for t in state["on"]]
        assert sorted(events) == sorted(SENSOR_EVENTS), state["name"]


def test_stress_workload_counts_follow_arguments():
    machine = controller_machine("c", configuration="localLocal", invocations=3, writes=2)
    for state in machine["states"]:
        if "states" in state:
            continue
        for transition in state["on"]:
            kinds = [a["type"] for a in transition["actions"]]
            assert kinds.count("invoke") == 3
            assert kinds.count("assign") == 2


def test_log_variable_placement_differs_by_configuration():
    local = controller_machine("c", configuration="localLocal")
    remote = controller_machine("c", configuration="remotePersistent")
    assert any(d["name"] == "log_c" for d in local["localData"])
    assert "persistentData" not in local
    assert any(d["name"] == "log_c" for d in remote["persistentData"])
    assert all(d["name"] != "log_c" for d in remote["localData"])


def test_payload_string_sizes():
    assert payload_string(64) == "x" * 64
    assert len(payload_string(16384)) == 16384


@pytest.fixture()
def stub():
    server = StubServiceServer().start()
    yield server
    server.stop()


def run_cycle(configuration, stub, store):
    catalog = stub_catalog(stub, local=(configuration == "localLocal"))
    job = railway_job(0, configuration, payload_string(64), catalog)
    host = RuntimeHost(
        RuntimeNode("n1", {}),
        LocalTransport(EventBus()),
        store=store,
        metrics=MemoryEmitter(),
    )
    try:
        host.start_job(job)
        controller = host.core("controller0")
        gate = host.core("controller0.gate")
        light = host.core("controller0.light")
        assert controller and gate and light
        for name in ("seen", "seen", "notSeen", "notSeen"):
            host.transport.inject(name, {}, target="controller0")
        assert wait_until(lambda: controller.events_handled == 4)
        assert wait_until(lambda: gate.events_handled == 2 and light.events_handled == 2)
        assert controller.state_name == "idle"
        assert controller.state_entries == {"idle": 2, "approaching": 1, "crossing": 1, "departing": 1}
        assert gate.state_entries == {"open": 2, "closed": 1}
        assert light.state_entries == {"off": 2, "on": 1}
    finally:
        host.stop()
    return host


def test_full_cycle_local(stub):
    store = InMemoryStore()
    host = run_cycle("localLocal", stub, store)
    # controller invokes gate+light per event, nested machines once per phase
    counts = stub.counts()
    assert counts["/gate"] == 4 + 2
    assert counts["/light"] == 4 + 2
    # the log write stayed in machine memory
    found, _ = store.lookup("log_controller0")
    assert not found
    assert host.core("controller0").machine_ctx.entries["log_controller0"] == payload_string(64)


def test_full_cycle_remote_writes_through_store(stub):
    store = InMemoryStore()
    run_cycle("remotePersistent", stub, store)
    found, value = store.lookup("log_controller0")
    assert found
    assert value == payload_string(64)


def test_instance_payload_overrides_declared_value(stub):
    catalog = stub_catalog(stub, local=True)
    job = railway_job(1, "localLocal", payload_string(1024), catalog)
    host = RuntimeHost(RuntimeNode("n1", {}), LocalTransport(EventBus()), metrics=MemoryEmitter())
    try:
        host.start_job(job)
        core = host.core("controller1")
        assert core.machine_ctx.entries["payload"] == payload_string(1024)
    finally:
        host.stop()
