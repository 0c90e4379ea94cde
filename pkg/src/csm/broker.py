"""TCP event broker: external/global/peripheral routing between runtimes.

One broker process serves every runtime in an experiment. Each client
connection attaches the instance ids it hosts and registers
subscriptions; publish frames are routed to the connections hosting the
matching recipients. Internal events never reach the broker.

Ordering: each connection's frames are processed by a single reader
thread under the broker lock, and every connection has one outbound
sender thread draining a FIFO queue, so per-source delivery order is
preserved end to end. The sender thread sleeps latency_ms before each
frame when artificial latency is configured, shifting all deliveries
uniformly without reordering.
"""

from __future__ import annotations

import itertools
import queue
import socket
import socketserver
import threading
import time
from typing import Callable, Optional

from . import wire
from .events import (
    EventInstance,
    Subscription,
    Transport,
    TransportUnavailableError,
    UnknownTargetError,
)
from .model import EventChannel


class _Connection:
    def __init__(self, sock: socket.socket, latency_ms: float):
        self.sock = sock
        self.outbound: queue.SimpleQueue = queue.SimpleQueue()
        self.latency_s = latency_ms / 1000.0
        self.closed = threading.Event()
        self.sender = threading.Thread(target=self._send_loop, name="broker-send", daemon=True)
        self.sender.start()

    def enqueue(self, frame: dict) -> None:
        self.outbound.put(frame)

    def _send_loop(self) -> None:
        while not self.closed.is_set():
            try:
                frame = self.outbound.get(timeout=0.5)
            except queue.Empty:
                continue
            if frame is None:
                return
            if self.latency_s > 0:
                time.sleep(self.latency_s)
            try:
                wire.send_frame(self.sock, frame)
            except OSError:
                return

    def close(self) -> None:
        self.closed.set()
        self.outbound.put(None)


class _BrokerHandler(socketserver.BaseRequestHandler):
    def setup(self):
        server: BrokerServer = self.server  # type: ignore[assignment]
        self.conn = _Connection(self.request, server.latency_ms)
        self.hosted: set = set()

    def handle(self):
        server: BrokerServer = self.server  # type: ignore[assignment]
        while True:
            try:
                frame = wire.recv_frame(self.request)
            except (wire.FrameError, OSError):
                return
            if frame is None:
                return
            server.process(frame, self)

    def finish(self):
        server: BrokerServer = self.server  # type: ignore[assignment]
        server.drop_connection(self)
        self.conn.close()


class BrokerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, latency_ms: float = 0.0):
        super().__init__((host, port), _BrokerHandler)
        self.latency_ms = latency_ms
        self._lock = threading.Lock()
        self._instance_conn: dict[str, _Connection] = {}
        self._subs: list[tuple[Subscription, _Connection]] = []
        self.dropped = 0

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "BrokerServer":
        threading.Thread(target=self.serve_forever, name="broker-server", daemon=True).start()
        return self

    def drop_connection(self, handler: _BrokerHandler) -> None:
        with self._lock:
            for instance in handler.hosted:
                if self._instance_conn.get(instance) is handler.conn:
                    del self._instance_conn[instance]
            self._subs = [(s, c) for (s, c) in self._subs if c is not handler.conn]

    def _deliver(self, targets: list[str], event_frame: dict) -> int:
        count = 0
        for target in targets:
            conn = self._instance_conn.get(target)
            if conn is None:
                self.dropped += 1
                continue
            conn.enqueue({"kind": "deliver", "to": target, "event": event_frame})
            count += 1
        return count

    def process(self, frame: dict, handler: _BrokerHandler) -> None:
        kind = frame.get("kind")
        with self._lock:
            if kind == "attach":
                for instance in frame.get("instances", ()):
                    self._instance_conn[instance] = handler.conn
                    handler.hosted.add(instance)
            elif kind == "detach":
                for instance in frame.get("instances", ()):
                    if self._instance_conn.get(instance) is handler.conn:
                        del self._instance_conn[instance]
                    handler.hosted.discard(instance)
            elif kind == "subscribe":
                sub = _sub_from_frame(frame)
                self._subs.append((sub, handler.conn))
            elif kind == "unsubscribe":
                sub = _sub_from_frame(frame)
                self._subs = [(s, c) for (s, c) in self._subs if s != sub]
            elif kind == "publish":
                event_frame = frame["event"]
                channel = event_frame.get("channel")
                source = event_frame.get("sourceInstance")
                if channel == EventChannel.EXTERNAL.value:
                    probe = EventInstance.from_json(event_frame)
                    targets: list[str] = []
                    for sub, _conn in self._subs:
                        if sub.matches(probe) and sub.subscriber not in targets:
                            targets.append(sub.subscriber)
                elif channel == EventChannel.GLOBAL.value:
                    targets = list(self._instance_conn)
                else:
                    targets = [source] if source else []
                self._deliver(targets, event_frame)
            elif kind == "inject":
                name = frame.get("name")
                target = frame.get("target")
                event_frame = {
                    "name": name,
                    "channel": EventChannel.PERIPHERAL.value,
                    "data": frame.get("data") or {},
                    "sourceInstance": None,
                    "createdAt": frame.get("createdAt", 0.0),
                }
                if target is None:
                    count = self._deliver(list(self._instance_conn), event_frame)
                    reply = {"kind": "reply", "reqId": frame.get("reqId"), "ok": True, "count": count}
                elif target in self._instance_conn:
                    count = self._deliver([target], event_frame)
                    reply = {"kind": "reply", "reqId": frame.get("reqId"), "ok": True, "count": count}
                else:
                    reply = {
                        "kind": "reply",
                        "reqId": frame.get("reqId"),
                        "ok": False,
                        "error": "UnknownTarget",
                        "target": target,
                    }
                if frame.get("reqId") is not None:
                    handler.conn.enqueue(reply)
            elif kind == "instances":
                handler.conn.enqueue(
                    {
                        "kind": "reply",
                        "reqId": frame.get("reqId"),
                        "ok": True,
                        "instances": sorted(self._instance_conn),
                    }
                )


def _sub_from_frame(frame: dict) -> Subscription:
    sources = frame.get("sources")
    names = frame.get("names")
    return Subscription(
        subscriber=frame["subscriber"],
        sources=frozenset(sources) if sources is not None else None,
        names=frozenset(names) if names is not None else None,
    )


class BrokerClient(Transport):
    """Runtime-side connection to the broker.

    on_deliver(instance_id, event) runs on the reader thread and must only
    enqueue into an inbox. publish is fire-and-forget; the delivery count
    is unknown to the sender, so it returns 0.
    """

    def __init__(self, host: str, port: int, on_deliver: Optional[Callable[[str, EventInstance], None]] = None):
        self._sock = socket.create_connection((host, port), timeout=10.0)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(None)
        self._send_lock = threading.Lock()
        self._on_deliver = on_deliver
        self._req_seq = itertools.count(1)
        self._pending: dict[int, queue.SimpleQueue] = {}
        self._pending_lock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, name="broker-client", daemon=True)
        self._reader.start()

    def _send(self, frame: dict) -> None:
        with self._send_lock:
            try:
                wire.send_frame(self._sock, frame)
            except OSError as e:
                raise TransportUnavailableError(f"broker connection lost: {e}") from e

    def _read_loop(self) -> None:
        while not self._closed:
            try:
                frame = wire.recv_frame(self._sock)
            except (wire.FrameError, OSError):
                break
            if frame is None:
                break
            kind = frame.get("kind")
            if kind == "deliver":
                if self._on_deliver is not None:
                    try:
                        self._on_deliver(frame["to"], EventInstance.from_json(frame["event"]))
                    except Exception:
                        pass
            elif kind == "reply":
                with self._pending_lock:
                    waiter = self._pending.pop(frame.get("reqId"), None)
                if waiter is not None:
                    waiter.put(frame)

    def _request(self, frame: dict, timeout: float = 10.0) -> dict:
        req_id = next(self._req_seq)
        frame["reqId"] = req_id
        waiter: queue.SimpleQueue = queue.SimpleQueue()
        with self._pending_lock:
            self._pending[req_id] = waiter
        self._send(frame)
        try:
            return waiter.get(timeout=timeout)
        except queue.Empty:
            raise TransportUnavailableError("broker did not reply") from None

    def attach(self, instance_ids) -> None:
        self._send({"kind": "attach", "instances": list(instance_ids)})

    def detach(self, instance_ids) -> None:
        self._send({"kind": "detach", "instances": list(instance_ids)})

    def subscribe(self, sub: Subscription) -> None:
        self._send(
            {
                "kind": "subscribe",
                "subscriber": sub.subscriber,
                "sources": sorted(sub.sources) if sub.sources is not None else None,
                "names": sorted(sub.names) if sub.names is not None else None,
            }
        )

    def unsubscribe(self, sub: Subscription) -> None:
        self._send(
            {
                "kind": "unsubscribe",
                "subscriber": sub.subscriber,
                "sources": sorted(sub.sources) if sub.sources is not None else None,
                "names": sorted(sub.names) if sub.names is not None else None,
            }
        )

    def publish(self, event: EventInstance) -> int:
        self._send({"kind": "publish", "event": event.to_json()})
        return 0

    def inject(self, name: str, data: Optional[dict] = None, target: Optional[str] = None) -> int:
        reply = self._request({"kind": "inject", "name": name, "data": data or {}, "target": target})
        if not reply.get("ok"):
            if reply.get("error") == "UnknownTarget":
                raise UnknownTargetError(target)
            raise TransportUnavailableError(str(reply))
        return int(reply.get("count", 0))

    def inject_nowait(self, name: str, data: Optional[dict] = None, target: Optional[str] = None) -> None:
        """Fire-and-forget injection for high-rate load generation."""
        self._send({"kind": "inject", "name": name, "data": data or {}, "target": target})

    def instances(self) -> list[str]:
        reply = self._request({"kind": "instances"})
        return list(reply.get("instances", ()))

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass
