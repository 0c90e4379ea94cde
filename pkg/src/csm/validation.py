"""Static checks over a parsed description tree.

validate() walks the whole tree and collects every violation into a
ValidationReport instead of stopping at the first; an empty error list
means the description is accepted for execution. resolve_named() rewrites
every by-name guard/action reference into the referenced declaration so
the executor never sees a bare string.

Reference resolution order: the declaring machine first, then ancestor
machines root-ward; the nearest declaration wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import expr
from .model import (
    ActionDef,
    ActionOrRef,
    AssignAction,
    CreateAction,
    CsmDescription,
    DeleteAction,
    GuardDef,
    GuardOrRef,
    InvokeAction,
    MatchAction,
    MatchCase,
    MemoryMode,
    RaiseAction,
    ResetTimeoutAction,
    StateDef,
    StateMachineDef,
    TimeoutAction,
    TransitionDef,
)

# error codes
INITIAL_STATE_COUNT = "InitialStateCount"
DUPLICATE_NAME = "DuplicateName"
UNKNOWN_TARGET = "UnknownTarget"
UNRESOLVED_REFERENCE = "UnresolvedReference"
DISTRIBUTED_ROOT_LOCAL_DATA = "DistributedRootLocalData"
UNKNOWN_TIMEOUT = "UnknownTimeout"
AFTER_NOT_TIMEOUT = "AfterNotTimeout"
TIMEOUT_ACTION_NOT_RAISE = "TimeoutActionNotRaise"
EXPRESSION_SYNTAX = "ExpressionSyntax"
EMPTY_NAME = "EmptyName"
# warning codes
TERMINAL_STATE_BEHAVIOR = "TerminalStateBehavior"


@dataclass(frozen=True)
class ReportEntry:
    path: str
    code: str
    message: str


@dataclass
class ValidationReport:
    errors: list[ReportEntry] = field(default_factory=list)
    warnings: list[ReportEntry] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def error(self, path: str, code: str, message: str) -> None:
        self.errors.append(ReportEntry(path, code, message))

    def warn(self, path: str, code: str, message: str) -> None:
        self.warnings.append(ReportEntry(path, code, message))

    def render(self) -> str:
        lines = []
        for e in self.errors:
            lines.append(f"error {e.code} at {e.path}: {e.message}")
        for w in self.warnings:
            lines.append(f"warning {w.code} at {w.path}: {w.message}")
        if not lines:
            lines.append("ok")
        return "\n".join(lines)


class UnresolvedReferenceError(Exception):
    def __init__(self, name: str, path: str):
        super().__init__(f"{path}: unresolved reference {name!r}")
        self.name = name
        self.path = path


def _lookup_guard(chain: tuple[StateMachineDef, ...], name: str) -> Optional[GuardDef]:
    for machine in reversed(chain):  # innermost first
        for g in machine.guards:
            if g.name == name:
                return g
    return None


def _lookup_action(chain: tuple[StateMachineDef, ...], name: str) -> Optional[ActionDef]:
    for machine in reversed(chain):
        for a in machine.actions:
            if getattr(a, "name", None) == name:
                return a
    return None


# --- validate ----------------------------------------------------------


def _check_expr(source: str, path: str, report: ValidationReport) -> None:
    try:
        expr.parse_expression(source)
    except expr.ExpressionSyntaxError as e:
        report.error(path, EXPRESSION_SYNTAX, str(e))


def _check_vars(decls, path: str, report: ValidationReport) -> None:
    for i, d in enumerate(decls):
        if not d.name:
            report.error(f"{path}[{i}].name", EMPTY_NAME, "variable name must be nonempty")
        _check_expr(d.value, f"{path}[{i}].value", report)


def _check_duplicates(names, path: str, what: str, report: ValidationReport) -> None:
    seen = set()
    for name in names:
        if name in seen:
            report.error(path, DUPLICATE_NAME, f"duplicate {what} name {name!r}")
        seen.add(name)


def _check_action(
    action: ActionOrRef,
    path: str,
    chain: tuple[StateMachineDef, ...],
    report: ValidationReport,
    timeout_names: set,
) -> None:
    if isinstance(action, str):
        if _lookup_action(chain, action) is None:
            report.error(path, UNRESOLVED_REFERENCE, f"no action named {action!r} in scope")
        return
    if isinstance(action, InvokeAction):
        for i, v in enumerate(action.input):
            _check_expr(v.value, f"{path}.input[{i}].value", report)
        for i, e in enumerate(action.done):
            _check_vars(e.data, f"{path}.done[{i}].data", report)
    elif isinstance(action, CreateAction):
        if not action.variable.name:
            report.error(f"{path}.variable.name", EMPTY_NAME, "variable name must be nonempty")
        _check_expr(action.variable.value, f"{path}.variable.value", report)
    elif isinstance(action, AssignAction):
        _check_expr(action.value, f"{path}.value", report)
    elif isinstance(action, RaiseAction):
        _check_vars(action.event.data, f"{path}.event.data", report)
    elif isinstance(action, TimeoutAction):
        _check_expr(action.delay, f"{path}.delay", report)
        for i, inner in enumerate(action.actions):
            ipath = f"{path}.actions[{i}]"
            resolved = _lookup_action(chain, inner) if isinstance(inner, str) else inner
            if isinstance(inner, str) and resolved is None:
                report.error(ipath, UNRESOLVED_REFERENCE, f"no action named {inner!r} in scope")
                continue
            if not isinstance(resolved, RaiseAction):
                report.error(
                    ipath,
                    TIMEOUT_ACTION_NOT_RAISE,
                    "a timeout may only carry raise-event actions",
                )
            else:
                _check_action(resolved, ipath, chain, report, timeout_names)
    elif isinstance(action, ResetTimeoutAction):
        if action.action not in timeout_names:
            report.error(
                f"{path}.action",
                UNKNOWN_TIMEOUT,
                f"no timeout named {action.action!r} declared in this machine",
            )
    elif isinstance(action, MatchAction):
        _check_expr(action.value, f"{path}.value", report)
        for i, case in enumerate(action.cases):
            _check_expr(case.case, f"{path}.cases[{i}].case", report)
            _check_action(case.action, f"{path}.cases[{i}].action", chain, report, timeout_names)


def _check_actions(actions, path, chain, report, timeout_names) -> None:
    for i, a in enumerate(actions):
        _check_action(a, f"{path}[{i}]", chain, report, timeout_names)


def _check_guards(guards, path, chain, report) -> None:
    for i, g in enumerate(guards):
        gpath = f"{path}[{i}]"
        if isinstance(g, str):
            if _lookup_guard(chain, g) is None:
                report.error(gpath, UNRESOLVED_REFERENCE, f"no guard named {g!r} in scope")
        else:
            _check_expr(g.expression, f"{gpath}.expression", report)


def _timeout_names(machine: StateMachineDef, chain: tuple[StateMachineDef, ...]) -> set:
    """Names of every timeout action declared anywhere in one machine.

    Static approximation for ResetTimeout checking: a reset may address any
    timeout the machine can ever start, regardless of state interleaving."""
    names = set()

    def scan(action: ActionOrRef) -> None:
        if isinstance(action, str):
            action = _lookup_action(chain, action)
        if isinstance(action, TimeoutAction):
            names.add(action.name)
        elif isinstance(action, MatchAction):
            for c in action.cases:
                scan(c.action)

    for a in machine.actions:
        scan(a)
    for s in machine.states:
        for group in (s.entry, s.exit, s.while_, s.after, *(t.actions for t in s.on), *(t.actions for t in s.always)):
            for a in group:
                scan(a)
    return names


def _check_transition(
    t: TransitionDef,
    path: str,
    machine: StateMachineDef,
    chain: tuple[StateMachineDef, ...],
    report: ValidationReport,
    timeout_names: set,
) -> None:
    if t.target is not None and machine.state(t.target) is None:
        report.error(f"{path}.target", UNKNOWN_TARGET, f"no state named {t.target!r} in machine {machine.name!r}")
    _check_guards(t.guards, f"{path}.guards", chain, report)
    _check_actions(t.actions, f"{path}.actions", chain, report, timeout_names)


def _check_machine(
    machine: StateMachineDef,
    path: str,
    parents: tuple[StateMachineDef, ...],
    report: ValidationReport,
) -> None:
    chain = parents + (machine,)
    timeout_names = _timeout_names(machine, chain)

    initials = [s for s in machine.states if s.initial]
    if len(initials) != 1:
        report.error(
            f"{path}.states",
            INITIAL_STATE_COUNT,
            f"machine {machine.name!r} declares {len(initials)} initial states, needs exactly 1",
        )
    _check_duplicates([s.name for s in machine.states], f"{path}.states", "state", report)
    _check_duplicates([n.name for n in machine.nested], f"{path}.states", "nested machine", report)
    _check_duplicates([g.name for g in machine.guards], f"{path}.guards", "guard", report)
    _check_duplicates(
        [a.name for a in machine.actions if getattr(a, "name", None)], f"{path}.actions", "action", report
    )

    for gi, g in enumerate(machine.guards):
        _check_expr(g.expression, f"{path}.guards[{gi}].expression", report)
    _check_actions(machine.actions, f"{path}.actions", chain, report, timeout_names)
    _check_vars(machine.localData, f"{path}.localData", report)
    _check_vars(machine.persistentData, f"{path}.persistentData", report)

    for si, s in enumerate(machine.states):
        spath = f"{path}.states[{si}]"
        for key, decls in (
            ("staticData", s.staticData),
            ("localData", s.localData),
            ("persistentData", s.persistentData),
        ):
            _check_vars(decls, f"{spath}.{key}", report)
        for key, acts in (("entry", s.entry), ("exit", s.exit), ("while", s.while_)):
            _check_actions(acts, f"{spath}.{key}", chain, report, timeout_names)
        for ai, a in enumerate(s.after):
            apath = f"{spath}.after[{ai}]"
            resolved = _lookup_action(chain, a) if isinstance(a, str) else a
            if isinstance(a, str) and resolved is None:
                report.error(apath, UNRESOLVED_REFERENCE, f"no action named {a!r} in scope")
                continue
            if not isinstance(resolved, TimeoutAction):
                report.error(apath, AFTER_NOT_TIMEOUT, "'after' entries must be timeout actions")
            else:
                _check_action(resolved, apath, chain, report, timeout_names)
        for ti, t in enumerate(s.on):
            _check_transition(t, f"{spath}.on[{ti}]", machine, chain, report, timeout_names)
        for ti, t in enumerate(s.always):
            _check_transition(t, f"{spath}.always[{ti}]", machine, chain, report, timeout_names)
        if s.terminal and (s.on or s.always or s.while_ or s.after):
            report.warn(
                spath,
                TERMINAL_STATE_BEHAVIOR,
                f"terminal state {s.name!r} declares transitions or activities that can never run",
            )

    for ni, n in enumerate(machine.nested):
        # nested machines sit in the parent's states array after the plain states
        _check_machine(n, f"{path}.states[{len(machine.states) + ni}]", chain, report)


def validate(desc: CsmDescription) -> ValidationReport:
    """Collect every structural rule violation in the tree."""
    report = ValidationReport()
    if desc.memoryMode is MemoryMode.DISTRIBUTED and desc.localData:
        report.error(
            "$.localData",
            DISTRIBUTED_ROOT_LOCAL_DATA,
            "a distributed-mode root cannot declare local data",
        )
    _check_duplicates([m.name for m in desc.stateMachines], "$.stateMachines", "state machine", report)
    _check_vars(desc.localData, "$.localData", report)
    _check_vars(desc.persistentData, "$.persistentData", report)
    for i, m in enumerate(desc.stateMachines):
        _check_machine(m, f"$.stateMachines[{i}]", (), report)
    return report


# --- resolve_named -----------------------------------------------------


def _resolve_action(action: ActionOrRef, path: str, chain, seen: frozenset) -> ActionDef:
    if isinstance(action, str):
        if action in seen:
            raise UnresolvedReferenceError(action, f"{path} (reference cycle)")
        found = _lookup_action(chain, action)
        if found is None:
            raise UnresolvedReferenceError(action, path)
        return _resolve_action(found, path, chain, seen | {action})
    if isinstance(action, TimeoutAction):
        return TimeoutAction(
            name=action.name,
            delay=action.delay,
            actions=tuple(
                _resolve_action(a, f"{path}.actions[{i}]", chain, seen) for i, a in enumerate(action.actions)
            ),
        )
    if isinstance(action, MatchAction):
        return MatchAction(
            value=action.value,
            cases=tuple(
                MatchCase(case=c.case, action=_resolve_action(c.action, f"{path}.cases[{i}].action", chain, seen))
                for i, c in enumerate(action.cases)
            ),
            name=action.name,
        )
    return action


def _resolve_guard(g: GuardOrRef, path: str, chain) -> GuardDef:
    if isinstance(g, str):
        found = _lookup_guard(chain, g)
        if found is None:
            raise UnresolvedReferenceError(g, path)
        return found
    return g


def _resolve_actions(actions, path, chain) -> tuple[ActionDef, ...]:
    return tuple(_resolve_action(a, f"{path}[{i}]", chain, frozenset()) for i, a in enumerate(actions))


def _resolve_transition(t: TransitionDef, path: str, chain) -> TransitionDef:
    return TransitionDef(
        target=t.target,
        event=t.event,
        guards=tuple(_resolve_guard(g, f"{path}.guards[{i}]", chain) for i, g in enumerate(t.guards)),
        actions=_resolve_actions(t.actions, f"{path}.actions", chain),
    )


def _resolve_state(s: StateDef, path: str, chain) -> StateDef:
    return StateDef(
        name=s.name,
        initial=s.initial,
        terminal=s.terminal,
        entry=_resolve_actions(s.entry, f"{path}.entry", chain),
        exit=_resolve_actions(s.exit, f"{path}.exit", chain),
        while_=_resolve_actions(s.while_, f"{path}.while", chain),
        after=_resolve_actions(s.after, f"{path}.after", chain),
        on=tuple(_resolve_transition(t, f"{path}.on[{i}]", chain) for i, t in enumerate(s.on)),
        always=tuple(_resolve_transition(t, f"{path}.always[{i}]", chain) for i, t in enumerate(s.always)),
        staticData=s.staticData,
        localData=s.localData,
        persistentData=s.persistentData,
    )


def _resolve_machine(machine: StateMachineDef, path: str, parents) -> StateMachineDef:
    chain = parents + (machine,)
    return StateMachineDef(
        name=machine.name,
        states=tuple(_resolve_state(s, f"{path}.states[{i}]", chain) for i, s in enumerate(machine.states)),
        nested=tuple(
            _resolve_machine(n, f"{path}.states[{len(machine.states) + i}]", chain)
            for i, n in enumerate(machine.nested)
        ),
        guards=machine.guards,
        actions=machine.actions,
        localData=machine.localData,
        persistentData=machine.persistentData,
    )


def resolve_named(desc: CsmDescription) -> CsmDescription:
    """Inline every by-name guard/action reference.

    Declarations themselves stay on their machines (they are harmless after
    inlining and keep serialization faithful). Raises UnresolvedReferenceError
    on a dangling or cyclic reference."""
    return CsmDescription(
        name=desc.name,
        memoryMode=desc.memoryMode,
        stateMachines=tuple(
            _resolve_machine(m, f"$.stateMachines[{i}]", ()) for i, m in enumerate(desc.stateMachines)
        ),
        localData=desc.localData,
        persistentData=desc.persistentData,
    )
