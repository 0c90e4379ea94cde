"""Railway-crossing descriptions: a controller with nested gate and light.

The controller tracks a train through idle, approaching, crossing, and
departing, driven by seen / notSeen sensor events. Every state also absorbs
the out-of-phase sensor event with a self-transition, so each injected event
fires exactly one transition; that keeps the benchmark's ratio of handled to
generated events meaningful. Each transition performs the stress workload:
a configurable number of service invocations plus log writes.

Phase boundaries raise external approaching / leaving events. The nested
gate and light machines subscribe to the controller (explicit bindings in
the job) and invoke their services on those events.

Two configurations: localLocal invokes local implementations and writes the
log into machine-local data; remotePersistent invokes remote implementations
and writes the log through the persistent store.
"""

from __future__ import annotations

import json

from .parsing import parse_description
from .runtime import Binding, Job
from .services import ServiceImplementationDescription

CONFIGURATIONS = ("localLocal", "remotePersistent")

SENSOR_EVENTS = ("seen", "notSeen")

# state, sensor event, target, gate position, lights on, phase event raised
_CONTROLLER_TRANSITIONS = (
    ("idle", "seen", "approaching", "down", True, "approaching"),
    ("idle", "notSeen", "idle", "up", False, None),
    ("approaching", "seen", "crossing", "down", True, None),
    ("approaching", "notSeen", "approaching", "down", True, None),
    ("crossing", "seen", "crossing", "down", True, None),
    ("crossing", "notSeen", "departing", "down", True, None),
    ("departing", "seen", "departing", "down", True, None),
    ("departing", "notSeen", "idle", "up", False, "leaving"),
)

_STATE_ORDER = ("idle", "approaching", "crossing", "departing")


def payload_string(size: int) -> str:
    return "x" * size


def _invoke(service_type: str, inputs: dict[str, str], local: bool) -> dict:
    action = {
        "type": "invoke",
        "serviceType": service_type,
        "input": [{"name": name, "value": value} for name, value in inputs.items()],
    }
    if local:
        action["local"] = True
    return action


def _stress_actions(position: str, lights_on: bool, *, log_var: str, local: bool, invocations: int, writes: int) -> list:
    actions = []
    pair = (
        _invoke("gate", {"position": f"'{position}'"}, local),
        _invoke("light", {"on": "true" if lights_on else "false"}, local),
    )
    for i in range(invocations):
        actions.append(pair[i % 2])
    for _ in range(writes):
        actions.append({"type": "assign", "variable": {"name": log_var}, "value": "payload"})
    return actions


def controller_machine(
    name: str,
    *,
    configuration: str,
    invocations: int = 2,
    writes: int = 1,
) -> dict:
    if configuration not in CONFIGURATIONS:
        raise ValueError(f"unknown configuration {configuration!r}")
    local = configuration == "localLocal"
    log_var = f"log_{name}"
    states = []
    for state_name in _STATE_ORDER:
        transitions = []
        for source, event, target, position, lights_on, phase_event in _CONTROLLER_TRANSITIONS:
            if source != state_name:
                continue
            actions = _stress_actions(
                position, lights_on, log_var=log_var, local=local, invocations=invocations, writes=writes
            )
            if phase_event is not None:
                actions.append({"type": "raiseEvent", "event": {"name": phase_event, "channel": "external"}})
            transitions.append({"target": target, "event": event, "actions": actions})
        state = {"name": state_name, "on": transitions}
        if state_name == "idle":
            state["initial"] = True
        states.append(state)
    states.append(_gate_machine(local))
    states.append(_light_machine(local))
    machine = {
        "name": name,
        "localData": [{"name": "payload", "value": "''"}],
        "states": states,
    }
    if local:
        machine["localData"].append({"name": log_var, "value": "''"})
    else:
        machine["persistentData"] = [{"name": log_var, "value": "''"}]
    return machine


def _gate_machine(local: bool) -> dict:
    return {
        "name": "gate",
        "states": [
            {
                "name": "open",
                "initial": True,
                "on": [
                    {
                        "target": "closed",
                        "event": "approaching",
                        "actions": [_invoke("gate", {"position": "'down'"}, local)],
                    }
                ],
            },
            {
                "name": "closed",
                "on": [
                    {
                        "target": "open",
                        "event": "leaving",
                        "actions": [_invoke("gate", {"position": "'up'"}, local)],
                    }
                ],
            },
        ],
    }


def _light_machine(local: bool) -> dict:
    return {
        "name": "light",
        "states": [
            {
                "name": "off",
                "initial": True,
                "on": [
                    {
                        "target": "on",
                        "event": "approaching",
                        "actions": [_invoke("light", {"on": "true"}, local)],
                    }
                ],
            },
            {
                "name": "on",
                "on": [
                    {
                        "target": "off",
                        "event": "leaving",
                        "actions": [_invoke("light", {"on": "false"}, local)],
                    }
                ],
            },
        ],
    }


def railway_description(index: int, configuration: str, *, invocations: int = 2, writes: int = 1) -> dict:
    return {
        "name": f"railway{index}",
        "memoryMode": "distributed",
        "stateMachines": [
            controller_machine(
                f"controller{index}",
                configuration=configuration,
                invocations=invocations,
                writes=writes,
            )
        ],
    }


def railway_job(
    index: int,
    configuration: str,
    payload: str,
    catalog: tuple[ServiceImplementationDescription, ...],
    *,
    invocations: int = 2,
    writes: int = 1,
) -> Job:
    controller = f"controller{index}"
    description = parse_description(
        json.dumps(railway_description(index, configuration, invocations=invocations, writes=writes))
    )
    return Job(
        description=description,
        stateMachineName=controller,
        serviceImplementations=catalog,
        instanceData={"payload": payload},
        bindings=(
            Binding(source=controller, subscriber=f"{controller}.gate"),
            Binding(source=controller, subscriber=f"{controller}.light"),
        ),
    )
