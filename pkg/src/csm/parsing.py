"""Strict JSON description parser.

Fails fast on the first problem found, with a JSON-pointer-style path to
the offending location. Unknown keywords are errors: a typo like "trget"
must not silently disable a transition.

Structural rules enforced here (everything checkable without cross-entity
lookups): required keywords present, value shapes correct, channel and
action type tags drawn from the known sets, at least one state machine
declared. Cross-reference checks (targets exist, names unique, exactly one
initial state, ...) live in validation.py so they can be collected into a
report instead of stopping at the first one.

A nested state machine is written inside its parent's "states" array and
is recognized by carrying a "states" keyword of its own.
"""

from __future__ import annotations

import json
from typing import Any, Optional

from .model import (
    AssignAction,
    CreateAction,
    CsmDescription,
    DeleteAction,
    EventChannel,
    EventDef,
    GuardDef,
    InvokeAction,
    MatchAction,
    MatchCase,
    MemoryMode,
    PropertyDef,
    RaiseAction,
    ResetTimeoutAction,
    StateDef,
    StateMachineDef,
    TimeoutAction,
    TransitionDef,
    VariableDecl,
)


class DescriptionError(Exception):
    """Base for description parse failures. Carries the path to the fault."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.reason = message


class JsonSyntaxError(DescriptionError):
    pass


class UnknownKeywordError(DescriptionError):
    def __init__(self, keyword: str, path: str):
        super().__init__(f"unknown keyword {keyword!r}", path)
        self.keyword = keyword


class MissingKeywordError(DescriptionError):
    def __init__(self, keyword: str, path: str):
        super().__init__(f"missing required keyword {keyword!r}", path)
        self.keyword = keyword


class WrongTypeError(DescriptionError):
    def __init__(self, expected: str, got: Any, path: str):
        super().__init__(f"expected {expected}, got {type(got).__name__}", path)
        self.expected = expected


class BadValueError(DescriptionError):
    def __init__(self, message: str, path: str):
        super().__init__(message, path)


def _require(obj: dict, key: str, path: str) -> Any:
    if key not in obj:
        raise MissingKeywordError(key, path)
    return obj[key]


def _check_keys(obj: dict, allowed: frozenset, path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise UnknownKeywordError(key, path)


def _as_obj(value: Any, path: str) -> dict:
    if not isinstance(value, dict):
        raise WrongTypeError("object", value, path)
    return value


def _as_list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise WrongTypeError("array", value, path)
    return value


def _as_str(value: Any, path: str) -> str:
    if not isinstance(value, str):
        raise WrongTypeError("string", value, path)
    return value


def _as_bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise WrongTypeError("boolean", value, path)
    return value


_VAR_KEYS = frozenset({"name", "value"})


def _parse_var(value: Any, path: str) -> VariableDecl:
    obj = _as_obj(value, path)
    _check_keys(obj, _VAR_KEYS, path)
    return VariableDecl(
        name=_as_str(_require(obj, "name", path), f"{path}.name"),
        value=_as_str(_require(obj, "value", path), f"{path}.value"),
    )


def _parse_vars(value: Any, path: str) -> tuple[VariableDecl, ...]:
    return tuple(_parse_var(v, f"{path}[{i}]") for i, v in enumerate(_as_list(value, path)))


_GUARD_KEYS = frozenset({"name", "expression"})


def _parse_guard(value: Any, path: str, named: bool = False):
    if isinstance(value, str) and not named:
        return value  # reference to a named guard
    obj = _as_obj(value, path)
    _check_keys(obj, _GUARD_KEYS, path)
    name = obj.get("name")
    if name is not None:
        name = _as_str(name, f"{path}.name")
    if named and name is None:
        raise MissingKeywordError("name", path)
    return GuardDef(expression=_as_str(_require(obj, "expression", path), f"{path}.expression"), name=name)


_EVENT_KEYS = frozenset({"name", "channel", "data"})


def _parse_event(value: Any, path: str) -> EventDef:
    obj = _as_obj(value, path)
    _check_keys(obj, _EVENT_KEYS, path)
    channel = _as_str(_require(obj, "channel", path), f"{path}.channel")
    try:
        chan = EventChannel(channel)
    except ValueError:
        raise BadValueError(f"unknown channel {channel!r}", f"{path}.channel")
    if chan is EventChannel.PERIPHERAL:
        raise BadValueError("peripheral events cannot be raised from a description", f"{path}.channel")
    return EventDef(
        name=_as_str(_require(obj, "name", path), f"{path}.name"),
        channel=chan,
        data=_parse_vars(obj["data"], f"{path}.data") if "data" in obj else (),
    )


_ACTION_KEYS = {
    "invoke": frozenset({"type", "name", "serviceType", "local", "input", "done", "properties"}),
    "create": frozenset({"type", "name", "variable", "persistent"}),
    "assign": frozenset({"type", "name", "variable", "value"}),
    "delete": frozenset({"type", "name", "variable"}),
    "raiseEvent": frozenset({"type", "name", "event"}),
    "timeout": frozenset({"type", "name", "delay", "actions"}),
    "resetTimeout": frozenset({"type", "name", "action"}),
    "match": frozenset({"type", "name", "value", "cases"}),
}

_PROPERTY_KEYS = frozenset({"name", "value"})
_CASE_KEYS = frozenset({"case", "action"})


def _parse_property(value: Any, path: str) -> PropertyDef:
    obj = _as_obj(value, path)
    _check_keys(obj, _PROPERTY_KEYS, path)
    return PropertyDef(
        name=_as_str(_require(obj, "name", path), f"{path}.name"),
        value=_require(obj, "value", path),
    )


def _parse_varname(value: Any, path: str) -> str:
    # assign/delete address an existing variable: {"name": ...} with no value
    obj = _as_obj(value, path)
    _check_keys(obj, frozenset({"name"}), path)
    return _as_str(_require(obj, "name", path), f"{path}.name")


def _parse_action(value: Any, path: str, named: bool = False):
    if isinstance(value, str) and not named:
        return value  # reference to a named action
    obj = _as_obj(value, path)
    tag = _as_str(_require(obj, "type", path), f"{path}.type")
    if tag not in _ACTION_KEYS:
        raise BadValueError(f"unknown action type {tag!r}", f"{path}.type")
    _check_keys(obj, _ACTION_KEYS[tag], path)
    name: Optional[str] = obj.get("name")
    if name is not None:
        name = _as_str(name, f"{path}.name")
    if named and name is None:
        raise MissingKeywordError("name", path)

    if tag == "invoke":
        local = obj.get("local")
        if local is not None:
            local = _as_bool(local, f"{path}.local")
        return InvokeAction(
            serviceType=_as_str(_require(obj, "serviceType", path), f"{path}.serviceType"),
            name=name,
            local=local,
            input=_parse_vars(obj["input"], f"{path}.input") if "input" in obj else (),
            done=tuple(
                _parse_event(e, f"{path}.done[{i}]")
                for i, e in enumerate(_as_list(obj["done"], f"{path}.done"))
            )
            if "done" in obj
            else (),
            properties=tuple(
                _parse_property(p, f"{path}.properties[{i}]")
                for i, p in enumerate(_as_list(obj["properties"], f"{path}.properties"))
            )
            if "properties" in obj
            else (),
        )
    if tag == "create":
        persistent = obj.get("persistent")
        if persistent is not None:
            persistent = _as_bool(persistent, f"{path}.persistent")
        return CreateAction(
            variable=_parse_var(_require(obj, "variable", path), f"{path}.variable"),
            persistent=persistent,
            name=name,
        )
    if tag == "assign":
        return AssignAction(
            variable=_parse_varname(_require(obj, "variable", path), f"{path}.variable"),
            value=_as_str(_require(obj, "value", path), f"{path}.value"),
            name=name,
        )
    if tag == "delete":
        return DeleteAction(
            variable=_parse_varname(_require(obj, "variable", path), f"{path}.variable"),
            name=name,
        )
    if tag == "raiseEvent":
        return RaiseAction(event=_parse_event(_require(obj, "event", path), f"{path}.event"), name=name)
    if tag == "timeout":
        if name is None:
            raise MissingKeywordError("name", path)
        return TimeoutAction(
            name=name,
            delay=_as_str(_require(obj, "delay", path), f"{path}.delay"),
            actions=_parse_actions(_require(obj, "actions", path), f"{path}.actions"),
        )
    if tag == "resetTimeout":
        return ResetTimeoutAction(action=_as_str(_require(obj, "action", path), f"{path}.action"), name=name)
    # match
    cases = []
    for i, c in enumerate(_as_list(_require(obj, "cases", path), f"{path}.cases")):
        cpath = f"{path}.cases[{i}]"
        cobj = _as_obj(c, cpath)
        _check_keys(cobj, _CASE_KEYS, cpath)
        cases.append(
            MatchCase(
                case=_as_str(_require(cobj, "case", cpath), f"{cpath}.case"),
                action=_parse_action(_require(cobj, "action", cpath), f"{cpath}.action"),
            )
        )
    return MatchAction(value=_as_str(_require(obj, "value", path), f"{path}.value"), cases=tuple(cases), name=name)


def _parse_actions(value: Any, path: str) -> tuple:
    return tuple(_parse_action(a, f"{path}[{i}]") for i, a in enumerate(_as_list(value, path)))


_TRANSITION_KEYS = frozenset({"target", "event", "guards", "actions"})


def _parse_transition(value: Any, path: str, kind: str) -> TransitionDef:
    obj = _as_obj(value, path)
    _check_keys(obj, _TRANSITION_KEYS, path)
    target = obj.get("target")
    if target is not None:
        target = _as_str(target, f"{path}.target")
    event = obj.get("event")
    if event is not None:
        event = _as_str(event, f"{path}.event")
    if kind == "on" and event is None:
        raise MissingKeywordError("event", path)
    if kind == "always" and event is not None:
        raise BadValueError("always transitions cannot name an event", f"{path}.event")
    return TransitionDef(
        target=target,
        event=event,
        guards=tuple(
            _parse_guard(g, f"{path}.guards[{i}]")
            for i, g in enumerate(_as_list(obj["guards"], f"{path}.guards"))
        )
        if "guards" in obj
        else (),
        actions=_parse_actions(obj["actions"], f"{path}.actions") if "actions" in obj else (),
    )


_STATE_KEYS = frozenset(
    {
        "name",
        "initial",
        "terminal",
        "entry",
        "exit",
        "while",
        "after",
        "on",
        "always",
        "staticData",
        "localData",
        "persistentData",
    }
)


def _parse_state(obj: dict, path: str) -> StateDef:
    _check_keys(obj, _STATE_KEYS, path)
    return StateDef(
        name=_as_str(_require(obj, "name", path), f"{path}.name"),
        initial=_as_bool(obj["initial"], f"{path}.initial") if "initial" in obj else False,
        terminal=_as_bool(obj["terminal"], f"{path}.terminal") if "terminal" in obj else False,
        entry=_parse_actions(obj["entry"], f"{path}.entry") if "entry" in obj else (),
        exit=_parse_actions(obj["exit"], f"{path}.exit") if "exit" in obj else (),
        while_=_parse_actions(obj["while"], f"{path}.while") if "while" in obj else (),
        after=_parse_actions(obj["after"], f"{path}.after") if "after" in obj else (),
        on=tuple(
            _parse_transition(t, f"{path}.on[{i}]", "on")
            for i, t in enumerate(_as_list(obj["on"], f"{path}.on"))
        )
        if "on" in obj
        else (),
        always=tuple(
            _parse_transition(t, f"{path}.always[{i}]", "always")
            for i, t in enumerate(_as_list(obj["always"], f"{path}.always"))
        )
        if "always" in obj
        else (),
        staticData=_parse_vars(obj["staticData"], f"{path}.staticData") if "staticData" in obj else (),
        localData=_parse_vars(obj["localData"], f"{path}.localData") if "localData" in obj else (),
        persistentData=_parse_vars(obj["persistentData"], f"{path}.persistentData")
        if "persistentData" in obj
        else (),
    )


_MACHINE_KEYS = frozenset({"name", "states", "guards", "actions", "localData", "persistentData"})


def _parse_machine(obj: dict, path: str) -> StateMachineDef:
    _check_keys(obj, _MACHINE_KEYS, path)
    states: list[StateDef] = []
    nested: list[StateMachineDef] = []
    for i, entry in enumerate(_as_list(_require(obj, "states", path), f"{path}.states")):
        epath = f"{path}.states[{i}]"
        eobj = _as_obj(entry, epath)
        if "states" in eobj:
            nested.append(_parse_machine(eobj, epath))
        else:
            states.append(_parse_state(eobj, epath))
    return StateMachineDef(
        name=_as_str(_require(obj, "name", path), f"{path}.name"),
        states=tuple(states),
        nested=tuple(nested),
        guards=tuple(
            _parse_guard(g, f"{path}.guards[{i}]", named=True)
            for i, g in enumerate(_as_list(obj["guards"], f"{path}.guards"))
        )
        if "guards" in obj
        else (),
        actions=tuple(
            _parse_action(a, f"{path}.actions[{i}]", named=True)
            for i, a in enumerate(_as_list(obj["actions"], f"{path}.actions"))
        )
        if "actions" in obj
        else (),
        localData=_parse_vars(obj["localData"], f"{path}.localData") if "localData" in obj else (),
        persistentData=_parse_vars(obj["persistentData"], f"{path}.persistentData")
        if "persistentData" in obj
        else (),
    )


_TOP_KEYS = frozenset({"name", "memoryMode", "stateMachines", "localData", "persistentData"})


def parse_description(text: str) -> CsmDescription:
    """Parse a JSON description document into an object tree.

    Raises a DescriptionError subclass on the first structural fault."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise JsonSyntaxError(f"invalid JSON: {e.msg}", f"$ (line {e.lineno}, column {e.colno})") from e
    obj = _as_obj(doc, "$")
    _check_keys(obj, _TOP_KEYS, "$")
    mode = _as_str(_require(obj, "memoryMode", "$"), "$.memoryMode")
    try:
        memory_mode = MemoryMode(mode)
    except ValueError:
        raise BadValueError(f"unknown memory mode {mode!r}", "$.memoryMode")
    machines = tuple(
        _parse_machine(_as_obj(m, f"$.stateMachines[{i}]"), f"$.stateMachines[{i}]")
        for i, m in enumerate(_as_list(_require(obj, "stateMachines", "$"), "$.stateMachines"))
    )
    if not machines:
        raise BadValueError("a description needs at least one state machine", "$.stateMachines")
    return CsmDescription(
        name=_as_str(_require(obj, "name", "$"), "$.name"),
        memoryMode=memory_mode,
        stateMachines=machines,
        localData=_parse_vars(obj["localData"], "$.localData") if "localData" in obj else (),
        persistentData=_parse_vars(obj["persistentData"], "$.persistentData")
        if "persistentData" in obj
        else (),
    )


def load_description(path: str) -> CsmDescription:
    with open(path, "r", encoding="utf-8") as f:
        return parse_description(f.read())
