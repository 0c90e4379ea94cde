"""Event instances and in-process routing between instance inboxes.

Channel semantics: internal events loop back to the raiser only; external
events reach instances whose subscription matches the raising source (and
the optional name filter); global events reach every live instance,
raiser included; peripheral events are injected from outside and
targeted at one instance or broadcast.

Payloads are deep-copied per delivery so no two instances ever share a
mutable payload object.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field, replace
from typing import Optional

from .model import EventChannel
from .values import copy_value, from_jsonable, to_jsonable


@dataclass(frozen=True)
class EventInstance:
    name: str
    channel: EventChannel
    data: dict = field(default_factory=dict)
    sourceInstance: Optional[str] = None
    createdAt: float = 0.0

    def with_copied_data(self) -> "EventInstance":
        return replace(self, data=copy_value(self.data))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "channel": self.channel.value,
            "data": {k: to_jsonable(v) for k, v in self.data.items()},
            "sourceInstance": self.sourceInstance,
            "createdAt": self.createdAt,
        }

    @staticmethod
    def from_json(obj: dict) -> "EventInstance":
        return EventInstance(
            name=obj["name"],
            channel=EventChannel(obj["channel"]),
            data={k: from_jsonable(v) for k, v in obj.get("data", {}).items()},
            sourceInstance=obj.get("sourceInstance"),
            createdAt=obj.get("createdAt", 0.0),
        )


@dataclass(frozen=True)
class Subscription:
    """subscriber receives external events from the given sources; sources
    None means any source, names None means any event name."""

    subscriber: str
    sources: Optional[frozenset] = None
    names: Optional[frozenset] = None

    def matches(self, event: EventInstance) -> bool:
        if self.sources is not None and event.sourceInstance not in self.sources:
            return False
        if self.names is not None and event.name not in self.names:
            return False
        return True


class UnknownTargetError(Exception):
    def __init__(self, target: str):
        super().__init__(f"no instance named {target!r}")
        self.target = target


class TransportUnavailableError(Exception):
    pass


class Transport:
    def publish(self, event: EventInstance) -> int:
        raise NotImplementedError

    def subscribe(self, sub: Subscription) -> None:
        raise NotImplementedError

    def unsubscribe(self, sub: Subscription) -> None:
        raise NotImplementedError


class EventBus(Transport):
    """In-process fan-out to registered instance inboxes."""

    def __init__(self):
        self._lock = threading.Lock()
        self._inboxes: dict[str, queue.SimpleQueue] = {}
        self._subs: list[Subscription] = []
        self.dropped = 0

    def register_instance(self, instance_id: str, inbox: queue.SimpleQueue) -> None:
        with self._lock:
            self._inboxes[instance_id] = inbox

    def unregister_instance(self, instance_id: str) -> None:
        with self._lock:
            self._inboxes.pop(instance_id, None)
            self._subs = [s for s in self._subs if s.subscriber != instance_id]

    def subscribe(self, sub: Subscription) -> None:
        with self._lock:
            if sub not in self._subs:
                self._subs.append(sub)

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            self._subs = [s for s in self._subs if s != sub]

    def instances(self) -> list[str]:
        with self._lock:
            return sorted(self._inboxes)

    def _deliver(self, targets: list[str], event: EventInstance) -> int:
        count = 0
        for target in targets:
            inbox = self._inboxes.get(target)
            if inbox is None:
                self.dropped += 1
                continue
            inbox.put(event.with_copied_data())
            count += 1
        return count

    def publish(self, event: EventInstance) -> int:
        with self._lock:
            if event.channel is EventChannel.INTERNAL:
                targets = [event.sourceInstance] if event.sourceInstance in self._inboxes else []
                if not targets:
                    self.dropped += 1
            elif event.channel is EventChannel.EXTERNAL:
                targets = []
                for sub in self._subs:
                    if sub.matches(event) and sub.subscriber not in targets:
                        targets.append(sub.subscriber)
            elif event.channel is EventChannel.GLOBAL:
                targets = list(self._inboxes)
            else:
                raise ValueError(f"cannot publish on channel {event.channel}")
            return self._deliver(targets, event)

    def inject(
        self,
        name: str,
        data: Optional[dict] = None,
        target: Optional[str] = None,
        created_at: float = 0.0,
    ) -> int:
        """Peripheral injection: one named instance, or all when target is None."""
        event = EventInstance(
            name=name,
            channel=EventChannel.PERIPHERAL,
            data=data or {},
            sourceInstance=None,
            createdAt=created_at,
        )
        with self._lock:
            if target is None:
                targets = list(self._inboxes)
            else:
                if target not in self._inboxes:
                    raise UnknownTargetError(target)
                targets = [target]
            return self._deliver(targets, event)
