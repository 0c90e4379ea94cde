"""Object model for machine descriptions.

Frozen dataclasses mirroring the JSON description format: a collaborative
state machine tree of state machines, states, transitions, guards, actions,
and data declarations. Everything is immutable after construction and safe
to share across threads. Expression fields keep their source text; parsing
to ASTs happens at evaluation sites.

Guard and action positions may hold either an inline definition or a plain
string naming a declaration on an enclosing machine; resolve_named (in
validation.py) rewrites references to inline definitions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union


class MemoryMode(str, Enum):
    DISTRIBUTED = "distributed"
    SHARED = "shared"


class EventChannel(str, Enum):
    INTERNAL = "internal"
    EXTERNAL = "external"
    GLOBAL = "global"
    PERIPHERAL = "peripheral"  # injected from outside, never declared in descriptions


RAISED_CHANNELS = (EventChannel.INTERNAL, EventChannel.EXTERNAL, EventChannel.GLOBAL)


@dataclass(frozen=True)
class VariableDecl:
    name: str
    value: str  # expression source


@dataclass(frozen=True)
class GuardDef:
    expression: str
    name: Optional[str] = None


@dataclass(frozen=True)
class EventDef:
    name: str
    channel: EventChannel
    data: tuple[VariableDecl, ...] = ()


@dataclass(frozen=True)
class PropertyDef:
    """Free-form hint passed to the runtime with invoke actions."""

    name: str
    value: object  # plain JSON scalar


@dataclass(frozen=True)
class InvokeAction:
    serviceType: str
    name: Optional[str] = None
    local: Optional[bool] = None
    input: tuple[VariableDecl, ...] = ()
    done: tuple[EventDef, ...] = ()
    properties: tuple[PropertyDef, ...] = ()


@dataclass(frozen=True)
class CreateAction:
    variable: VariableDecl
    persistent: Optional[bool] = None
    name: Optional[str] = None


@dataclass(frozen=True)
class AssignAction:
    variable: str  # name reference
    value: str  # expression source
    name: Optional[str] = None


@dataclass(frozen=True)
class DeleteAction:
    variable: str
    name: Optional[str] = None


@dataclass(frozen=True)
class RaiseAction:
    event: EventDef
    name: Optional[str] = None


@dataclass(frozen=True)
class TimeoutAction:
    name: str  # required so reset actions can address the timer
    delay: str  # expression source, milliseconds
    actions: tuple["ActionOrRef", ...] = ()  # must resolve to raise actions


@dataclass(frozen=True)
class ResetTimeoutAction:
    action: str  # name of the timeout to cancel
    name: Optional[str] = None


@dataclass(frozen=True)
class MatchCase:
    case: str  # expression source
    action: "ActionOrRef" = None


@dataclass(frozen=True)
class MatchAction:
    value: str  # expression source
    cases: tuple[MatchCase, ...] = ()
    name: Optional[str] = None


ActionDef = Union[
    InvokeAction,
    CreateAction,
    AssignAction,
    DeleteAction,
    RaiseAction,
    TimeoutAction,
    ResetTimeoutAction,
    MatchAction,
]
ActionOrRef = Union[ActionDef, str]
GuardOrRef = Union[GuardDef, str]

ACTION_TYPE_TAGS = {
    InvokeAction: "invoke",
    CreateAction: "create",
    AssignAction: "assign",
    DeleteAction: "delete",
    RaiseAction: "raiseEvent",
    TimeoutAction: "timeout",
    ResetTimeoutAction: "resetTimeout",
    MatchAction: "match",
}


@dataclass(frozen=True)
class TransitionDef:
    target: Optional[str] = None  # absent => internal transition
    event: Optional[str] = None  # required for `on`, absent for `always`
    guards: tuple[GuardOrRef, ...] = ()
    actions: tuple[ActionOrRef, ...] = ()

    @property
    def internal(self) -> bool:
        return self.target is None


@dataclass(frozen=True)
class StateDef:
    name: str
    initial: bool = False
    terminal: bool = False
    entry: tuple[ActionOrRef, ...] = ()
    exit: tuple[ActionOrRef, ...] = ()
    while_: tuple[ActionOrRef, ...] = ()  # JSON keyword "while"
    after: tuple[ActionOrRef, ...] = ()  # timeout actions only
    on: tuple[TransitionDef, ...] = ()
    always: tuple[TransitionDef, ...] = ()
    staticData: tuple[VariableDecl, ...] = ()
    localData: tuple[VariableDecl, ...] = ()
    persistentData: tuple[VariableDecl, ...] = ()


@dataclass(frozen=True)
class StateMachineDef:
    name: str
    states: tuple[StateDef, ...] = ()
    nested: tuple["StateMachineDef", ...] = ()
    guards: tuple[GuardDef, ...] = ()  # named declarations
    actions: tuple[ActionDef, ...] = ()  # named declarations
    localData: tuple[VariableDecl, ...] = ()
    persistentData: tuple[VariableDecl, ...] = ()

    def state(self, name: str) -> Optional[StateDef]:
        for s in self.states:
            if s.name == name:
                return s
        return None

    @property
    def initial_state(self) -> Optional[StateDef]:
        for s in self.states:
            if s.initial:
                return s
        return None


@dataclass(frozen=True)
class CsmDescription:
    name: str
    memoryMode: MemoryMode
    stateMachines: tuple[StateMachineDef, ...] = ()
    localData: tuple[VariableDecl, ...] = ()  # shared memory mode only
    persistentData: tuple[VariableDecl, ...] = ()

    def machine(self, name: str) -> Optional[StateMachineDef]:
        """Find a machine by name anywhere in the tree (depth-first)."""
        stack = list(self.stateMachines)
        while stack:
            m = stack.pop(0)
            if m.name == name:
                return m
            stack.extend(m.nested)
        return None


# --- Serialization back to the JSON shape ------------------------------


def _vars_json(decls) -> list:
    return [{"name": d.name, "value": d.value} for d in decls]


def _guard_json(g: GuardOrRef):
    if isinstance(g, str):
        return g
    out = {}
    if g.name is not None:
        out["name"] = g.name
    out["expression"] = g.expression
    return out


def _event_json(e: EventDef) -> dict:
    out = {"name": e.name, "channel": e.channel.value}
    if e.data:
        out["data"] = _vars_json(e.data)
    return out


def _action_json(a: ActionOrRef):
    if isinstance(a, str):
        return a
    out: dict = {"type": ACTION_TYPE_TAGS[type(a)]}
    if isinstance(a, TimeoutAction):
        out["name"] = a.name
    elif a.name is not None:
        out["name"] = a.name
    if isinstance(a, InvokeAction):
        out["serviceType"] = a.serviceType
        if a.local is not None:
            out["local"] = a.local
        if a.input:
            out["input"] = _vars_json(a.input)
        if a.done:
            out["done"] = [_event_json(e) for e in a.done]
        if a.properties:
            out["properties"] = [{"name": p.name, "value": p.value} for p in a.properties]
    elif isinstance(a, CreateAction):
        out["variable"] = {"name": a.variable.name, "value": a.variable.value}
        if a.persistent is not None:
            out["persistent"] = a.persistent
    elif isinstance(a, AssignAction):
        out["variable"] = {"name": a.variable}
        out["value"] = a.value
    elif isinstance(a, DeleteAction):
        out["variable"] = {"name": a.variable}
    elif isinstance(a, RaiseAction):
        out["event"] = _event_json(a.event)
    elif isinstance(a, TimeoutAction):
        out["delay"] = a.delay
        out["actions"] = [_action_json(x) for x in a.actions]
    elif isinstance(a, ResetTimeoutAction):
        out["action"] = a.action
    elif isinstance(a, MatchAction):
        out["value"] = a.value
        out["cases"] = [{"case": c.case, "action": _action_json(c.action)} for c in a.cases]
    return out


def _transition_json(t: TransitionDef) -> dict:
    out: dict = {}
    if t.target is not None:
        out["target"] = t.target
    if t.event is not None:
        out["event"] = t.event
    if t.guards:
        out["guards"] = [_guard_json(g) for g in t.guards]
    if t.actions:
        out["actions"] = [_action_json(a) for a in t.actions]
    return out


def _state_json(s: StateDef) -> dict:
    out: dict = {"name": s.name}
    if s.initial:
        out["initial"] = True
    if s.terminal:
        out["terminal"] = True
    for key, acts in (("entry", s.entry), ("exit", s.exit), ("while", s.while_), ("after", s.after)):
        if acts:
            out[key] = [_action_json(a) for a in acts]
    if s.on:
        out["on"] = [_transition_json(t) for t in s.on]
    if s.always:
        out["always"] = [_transition_json(t) for t in s.always]
    for key, decls in (
        ("staticData", s.staticData),
        ("localData", s.localData),
        ("persistentData", s.persistentData),
    ):
        if decls:
            out[key] = _vars_json(decls)
    return out


def _machine_json(m: StateMachineDef) -> dict:
    out: dict = {"name": m.name}
    states: list = [_state_json(s) for s in m.states]
    states.extend(_machine_json(n) for n in m.nested)
    out["states"] = states
    if m.guards:
        out["guards"] = [_guard_json(g) for g in m.guards]
    if m.actions:
        out["actions"] = [_action_json(a) for a in m.actions]
    if m.localData:
        out["localData"] = _vars_json(m.localData)
    if m.persistentData:
        out["persistentData"] = _vars_json(m.persistentData)
    return out


def description_to_json(desc: CsmDescription) -> dict:
    """Serialize a description tree back to its JSON document shape.

    Nested machines are emitted inside their parent's `states` array, the
    same position the parser accepts them from."""
    out: dict = {
        "name": desc.name,
        "memoryMode": desc.memoryMode.value,
        "stateMachines": [_machine_json(m) for m in desc.stateMachines],
    }
    if desc.localData:
        out["localData"] = _vars_json(desc.localData)
    if desc.persistentData:
        out["persistentData"] = _vars_json(desc.persistentData)
    return out
