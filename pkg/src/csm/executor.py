"""Single-instance execution engine.

One InstanceCore runs one state machine. A step drains the input event
queue in FIFO order; handling an event selects at most one matching
on-transition, executes it, then chains always-transitions until none
fires. Every action runs to completion before the next starts, all on the
instance's own thread; timers and bus deliveries reach the instance only
through its inbox.

Per event handled, the sequence for an external transition is: cancel the
exiting state's while/after activities, exit actions, transition actions,
then enter the target (lexical declarations, entry actions, after timers,
while actions). An internal transition executes only its own actions and
ends the handling. Entering a terminal state stops the instance; entry
actions of the terminal state still run, nothing after them does.

Timers fire on the clock thread and are queued as inbox markers; their
raise actions execute on the instance thread at the start of the next
step, so payload expressions always evaluate against a quiescent scope.
"""

from __future__ import annotations

import queue
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import Clock, RealClock, TimerHandle
from .data import DataContext, ScopeChain, declare_block, declare_persistent
from .events import EventBus, EventInstance, TransportUnavailableError
from .expr import Environment, evaluate_text, guards_pass
from .model import (
    ActionDef,
    AssignAction,
    CreateAction,
    DeleteAction,
    EventChannel,
    EventDef,
    InvokeAction,
    MatchAction,
    RaiseAction,
    ResetTimeoutAction,
    StateDef,
    StateMachineDef,
    TimeoutAction,
    TransitionDef,
)
from .values import Value, copy_value, is_number, to_jsonable, values_equal


class TransitionConflictError(Exception):
    """Two or more transitions matched at once; the model forbids this."""

    def __init__(self, state: str, event: Optional[str], count: int):
        trigger = f"event {event!r}" if event else "always-transitions"
        super().__init__(f"TransitionConflict: {count} transitions match {trigger} in state {state!r}")
        self.state = state
        self.event = event
        self.count = count


class UnknownTimeoutError(Exception):
    def __init__(self, name: str):
        super().__init__(f"no timeout named {name!r} was ever started")
        self.name = name


class _TimerFiring:
    """Inbox marker: timer `action` came due; run its raises on our thread."""

    __slots__ = ("action",)

    def __init__(self, action: TimeoutAction):
        self.action = action


_STOP = object()

ServiceInvoker = Callable[[InvokeAction, dict, "InstanceCore"], dict]


def _no_services(action: InvokeAction, inputs: dict, core: "InstanceCore") -> dict:
    raise TransportUnavailableError(f"no service invoker configured (serviceType {action.serviceType!r})")


@dataclass
class InstanceReport:
    instance: str
    machine: str
    terminated: bool
    failed: bool
    error: Optional[str]
    final_state: Optional[str]
    steps: int
    events_handled: int


@dataclass
class _ActiveState:
    state: StateDef
    local_ctx: DataContext
    static_ctx: DataContext
    after_timers: list = field(default_factory=list)  # names started from `after`


class InstanceCore:
    """Execution state and step logic for one machine instance.

    Nested machines are separate cores built by the host; they share this
    core's machine context object, giving the whole machine subtree one
    memory as required.
    """

    def __init__(
        self,
        instance_id: str,
        machine: StateMachineDef,
        *,
        parent_chain: Optional[ScopeChain] = None,
        clock: Optional[Clock] = None,
        publish: Optional[Callable[[EventInstance], int]] = None,
        service_invoker: Optional[ServiceInvoker] = None,
        rng: Optional[random.Random] = None,
        instrument: Optional[Callable[[dict], None]] = None,
        metrics: Optional[Callable[[dict], None]] = None,
        instance_data: Optional[dict] = None,
        while_cadence: str = "per-event",
        record_trajectory: bool = False,
    ):
        self.id = instance_id
        self.machine = machine
        self.clock = clock if clock is not None else RealClock()
        self._publish = publish
        self._invoke = service_invoker if service_invoker is not None else _no_services
        self.rng = rng if rng is not None else random.Random(0)
        self._instrument = instrument
        self._metrics = metrics
        self._instance_data = dict(instance_data or {})
        if while_cadence not in ("per-event", "entry-only"):
            raise ValueError(f"unknown while cadence {while_cadence!r}")
        self._while_cadence = while_cadence

        self.machine_ctx = DataContext("local", f"machine:{machine.name}")
        base = parent_chain if parent_chain is not None else ScopeChain(())
        self.machine_chain = base.child(self.machine_ctx)

        self.inbox: queue.SimpleQueue = queue.SimpleQueue()
        self.E: deque = deque()
        self._active: Optional[_ActiveState] = None
        self._statics: dict[str, DataContext] = {}
        self._payload_ctx: Optional[DataContext] = None
        self._entered_in_handling = False

        self.timeouts: dict[str, TimerHandle] = {}
        self._known_timeouts: set = set()

        self.started = False
        self.terminated = False
        self.failed = False
        self.error: Optional[str] = None
        self.steps = 0
        self.events_handled = 0
        self.action_counts: dict[str, int] = {}
        self.state_entries: dict[str, int] = {}
        self.trajectory: Optional[list] = [] if record_trajectory else None

    # --- observability -------------------------------------------------

    @property
    def alive(self) -> bool:
        return self.started and not self.terminated

    @property
    def active_configuration(self) -> set:
        return {self._active.state.name} if self._active is not None else set()

    @property
    def state_name(self) -> Optional[str]:
        return self._active.state.name if self._active is not None else None

    def report(self) -> InstanceReport:
        return InstanceReport(
            instance=self.id,
            machine=self.machine.name,
            terminated=self.terminated,
            failed=self.failed,
            error=self.error,
            final_state=self.state_name,
            steps=self.steps,
            events_handled=self.events_handled,
        )

    def _trace(self, rec: dict) -> None:
        if self._instrument is not None:
            rec.setdefault("instance", self.id)
            self._instrument(rec)

    def _record(self, **kv) -> None:
        if self.trajectory is not None:
            kv["t"] = round(self.clock.now(), 9)
            self.trajectory.append(kv)

    # --- scope ---------------------------------------------------------

    def _chain(self) -> ScopeChain:
        chain = self.machine_chain
        if self._active is not None:
            chain = chain.child(self._active.static_ctx).child(self._active.local_ctx)
        if self._payload_ctx is not None:
            chain = chain.child(self._payload_ctx)
        return chain

    def _env(self) -> Environment:
        return self._chain().environment(self.rng)

    # --- lifecycle -----------------------------------------------------

    def start(self) -> None:
        """Install instance data, declare machine-level data, enter the
        initial state, and settle always-transitions."""
        if self.started:
            return
        self.started = True
        try:
            self.machine_ctx.entries.update(copy_value(self._instance_data))
            declare_block(
                self.machine.localData, self.machine_ctx, self.machine_chain, self.rng, skip_existing=True
            )
            if self.machine.persistentData:
                declare_persistent(self.machine.persistentData, self.machine_chain, self.rng)
            initial = self.machine.initial_state
            if initial is None:
                raise ValueError(f"machine {self.machine.name!r} has no initial state")
            self._enter(initial)
            if self.alive:
                self._transition_loop(self._select_always())
        except Exception as e:  # halt failed, never crash the host
            self._fail(e)

    def deliver(self, event: EventInstance) -> None:
        self.inbox.put(event)

    def stop(self) -> None:
        self.inbox.put(_STOP)

    def step(self, max_wait: Optional[float] = None) -> bool:
        """Drain the inbox and execute one step. Returns True if at least
        one event was handled. max_wait blocks for the first inbox item."""
        if not self.started:
            self.start()
        if self.terminated:
            return False
        self._drain_inbox(max_wait)
        if not self.E:
            return False
        try:
            self._execute_step()
        except Exception as e:
            self._fail(e)
        return True

    def run(self) -> InstanceReport:
        """Blocking loop for a dedicated instance thread."""
        if not self.started:
            self.start()
        while self.alive:
            try:
                item = self.inbox.get(timeout=0.5)
            except queue.Empty:
                continue
            if item is _STOP:
                break
            self._ingest(item)
            self._drain_inbox(None)
            if self.E:
                try:
                    self._execute_step()
                except Exception as e:
                    self._fail(e)
        return self.report()

    # --- step algorithm ------------------------------------------------

    def _ingest(self, item) -> None:
        if item is _STOP or self.terminated:
            return
        if isinstance(item, _TimerFiring):
            # run the timeout's raise actions now, on our thread
            self._run_actions(item.action.actions, "timeout")
        else:
            self.E.append(item)

    def _drain_inbox(self, max_wait: Optional[float]) -> None:
        if max_wait is not None and not self.E:
            try:
                self._ingest(self.inbox.get(timeout=max_wait))
            except queue.Empty:
                return
        while True:
            try:
                self._ingest(self.inbox.get_nowait())
            except queue.Empty:
                return

    def _execute_step(self) -> None:
        t0 = self.clock.now()
        handled = 0
        while self.E and self.alive:
            event = self.E.popleft()  # consumed now, regardless of matches
            self._handle_event(event)
            handled += 1
        self.steps += 1
        self._trace({"kind": "step", "n": self.steps, "events": handled, "t0": t0, "t1": self.clock.now()})

    def _handle_event(self, event: EventInstance) -> None:
        start = self.clock.now()
        self._record(k="handle", event=event.name, channel=event.channel.value, data=to_jsonable(event.data))
        self._payload_ctx = DataContext("local", f"event:{event.name}", dict(event.data))
        self._entered_in_handling = False
        try:
            self._transition_loop(self._select_on(event), event.name)
            if (
                self.alive
                and self._while_cadence == "per-event"
                and not self._entered_in_handling
                and self._active.state.while_
            ):
                self._run_actions(self._active.state.while_, "while")
        finally:
            self._payload_ctx = None
        # counted only once handling completed, so watchers that poll the
        # counter never observe a half-applied transition
        self.events_handled += 1
        end = self.clock.now()
        self._trace(
            {
                "kind": "event-handled",
                "event": event.name,
                "channel": event.channel.value,
                "createdAt": event.createdAt,
                "t0": start,
                "t1": end,
            }
        )
        if self._metrics is not None:
            self._metrics(
                {
                    "kind": "response-time",
                    "instance": self.id,
                    "value": (end - start) * 1000.0,
                    "unit": "ms",
                    "ts": time.time(),
                    "event": event.name,
                }
            )

    def _transition_loop(self, delta: Optional[TransitionDef], event_name: Optional[str] = None) -> None:
        while delta is not None and self.alive:
            if delta.internal:
                self._trace({"kind": "transition", "source": self.state_name, "target": None, "event": event_name})
                self._record(k="transition", source=self.state_name, target=None, event=event_name)
                self._run_actions(delta.actions, "transition")
                return  # stay in state; handling ends here
            source = self._active.state
            target = self.machine.state(delta.target)
            self._trace({"kind": "transition", "source": source.name, "target": target.name, "event": event_name})
            self._record(k="transition", source=source.name, target=target.name, event=event_name)
            self._exit_state()
            self._run_actions(delta.actions, "transition")
            self._enter(target)
            if not self.alive:
                return
            delta = self._select_always()
            event_name = None

    def _guards_ok(self, transition: TransitionDef) -> bool:
        return guards_pass(transition.guards, self._env())

    def _select_on(self, event: EventInstance) -> Optional[TransitionDef]:
        state = self._active.state
        matches = [t for t in state.on if t.event == event.name and self._guards_ok(t)]
        if len(matches) > 1:
            raise TransitionConflictError(state.name, event.name, len(matches))
        return matches[0] if matches else None

    def _select_always(self) -> Optional[TransitionDef]:
        state = self._active.state
        matches = [t for t in state.always if self._guards_ok(t)]
        if len(matches) > 1:
            raise TransitionConflictError(state.name, None, len(matches))
        return matches[0] if matches else None

    # --- state entry / exit -------------------------------------------

    def _enter(self, state: StateDef) -> None:
        static_ctx = self._statics.get(state.name)
        if static_ctx is None:
            static_ctx = DataContext("static", f"static:{state.name}")
            self._statics[state.name] = static_ctx
        active = _ActiveState(state=state, local_ctx=DataContext("local", f"state:{state.name}"), static_ctx=static_ctx)
        self._active = active
        self._entered_in_handling = True
        self.state_entries[state.name] = self.state_entries.get(state.name, 0) + 1
        self._record(k="enter", state=state.name)

        chain = self._chain()
        declare_block(state.staticData, static_ctx, chain, self.rng, skip_existing=True)
        declare_block(state.localData, active.local_ctx, chain, self.rng)
        if state.persistentData:
            declare_persistent(state.persistentData, chain, self.rng)

        self._run_actions(state.entry, "entry")
        if state.terminal:
            self._terminate()
            return
        for timeout in state.after:
            self._start_timeout(timeout)
            active.after_timers.append(timeout.name)
        if state.while_:
            self._run_actions(state.while_, "while")

    def _exit_state(self) -> None:
        active = self._active
        for name in active.after_timers:
            handle = self.timeouts.pop(name, None)
            if handle is not None:
                handle.cancel()
        active.after_timers.clear()
        self._run_actions(active.state.exit, "exit")
        active.local_ctx.entries.clear()

    def _terminate(self) -> None:
        for handle in self.timeouts.values():
            handle.cancel()
        self.timeouts.clear()
        self.terminated = True
        self._record(k="terminate", state=self.state_name, failed=self.failed)

    def _fail(self, exc: Exception) -> None:
        self.failed = True
        self.error = f"{type(exc).__name__}: {exc}"
        for handle in self.timeouts.values():
            handle.cancel()
        self.timeouts.clear()
        self.terminated = True
        self._record(k="terminate", state=self.state_name, failed=True, error=self.error)

    # --- actions -------------------------------------------------------

    def _run_actions(self, actions, phase: str) -> None:
        for action in actions:
            self._run_action(action, phase)

    def _run_action(self, action: ActionDef, phase: str) -> None:
        begin = self.clock.now()
        self._dispatch(action, phase)
        end = self.clock.now()
        self.action_counts[phase] = self.action_counts.get(phase, 0) + 1
        self._trace(
            {
                "kind": "action",
                "type": type(action).__name__,
                "phase": phase,
                "t0": begin,
                "t1": end,
            }
        )

    def _dispatch(self, action: ActionDef, phase: str) -> None:
        if isinstance(action, CreateAction):
            value = evaluate_text(action.variable.value, self._env())
            self._timed_write(
                lambda: self._chain().create(action.variable.name, value, bool(action.persistent))
            )
        elif isinstance(action, AssignAction):
            value = evaluate_text(action.value, self._env())
            self._timed_write(lambda: self._chain().assign(action.variable, value))
        elif isinstance(action, DeleteAction):
            self._chain().delete(action.variable)
        elif isinstance(action, RaiseAction):
            self._raise_event(action.event)
        elif isinstance(action, InvokeAction):
            self._invoke_service(action)
        elif isinstance(action, TimeoutAction):
            self._start_timeout(action)
        elif isinstance(action, ResetTimeoutAction):
            self._reset_timeout(action.action)
        elif isinstance(action, MatchAction):
            value = evaluate_text(action.value, self._env())
            env = self._env()
            for case in action.cases:
                if values_equal(evaluate_text(case.case, env), value):
                    self._run_action(case.action, phase)
        else:
            raise TypeError(f"unresolved action {action!r}")

    def _timed_write(self, write: Callable[[], str]) -> None:
        begin = self.clock.now()
        where = write()
        if self._metrics is not None:
            self._metrics(
                {
                    "kind": "write-latency",
                    "instance": self.id,
                    "value": (self.clock.now() - begin) * 1000.0,
                    "unit": "ms",
                    "ts": time.time(),
                    "target": where,
                }
            )

    def _build_event(self, definition: EventDef, extra: Optional[dict] = None) -> EventInstance:
        env = self._env()
        data = {d.name: evaluate_text(d.value, env) for d in definition.data}
        if extra:
            data.update(copy_value(extra))
        return EventInstance(
            name=definition.name,
            channel=definition.channel,
            data=data,
            sourceInstance=self.id,
            createdAt=self.clock.now(),
        )

    def _raise_event(self, definition: EventDef, extra: Optional[dict] = None) -> None:
        event = self._build_event(definition, extra)
        self._record(k="raise", event=event.name, channel=event.channel.value, data=to_jsonable(event.data))
        if event.channel is EventChannel.INTERNAL:
            # same-step handling: goes straight onto E, not through the inbox
            self.E.append(event)
        elif self._publish is not None:
            self._publish(event)

    def _invoke_service(self, action: InvokeAction) -> None:
        env = self._env()
        inputs = {d.name: evaluate_text(d.value, env) for d in action.input}
        output = self._invoke(action, inputs, self)
        for definition in action.done:
            self._raise_event(definition, extra=output if isinstance(output, dict) else {})

    def _start_timeout(self, action: TimeoutAction) -> None:
        delay = evaluate_text(action.delay, self._env())
        if not is_number(delay) or delay < 0:
            raise ValueError(f"timeout {action.name!r} delay must be a non-negative number, got {delay!r}")
        old = self.timeouts.pop(action.name, None)
        if old is not None:
            old.cancel()
        self._known_timeouts.add(action.name)
        firing = _TimerFiring(action)
        self.timeouts[action.name] = self.clock.schedule(
            float(delay) / 1000.0, lambda: self.inbox.put(firing), repeating=True
        )

    def _reset_timeout(self, name: str) -> None:
        handle = self.timeouts.pop(name, None)
        if handle is not None:
            handle.cancel()
            return
        if name not in self._known_timeouts:
            raise UnknownTimeoutError(name)
        # known but already stopped: resetting again is a no-op


def attach_to_bus(core: InstanceCore, bus: EventBus) -> None:
    bus.register_instance(core.id, core.inbox)
    core._publish = bus.publish


def run_threaded(core: InstanceCore, name: Optional[str] = None) -> threading.Thread:
    thread = threading.Thread(target=core.run, name=name or f"instance-{core.id}", daemon=True)
    thread.start()
    return thread
