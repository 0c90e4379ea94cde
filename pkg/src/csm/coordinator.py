"""Job placement: broadcast, bidding, and deterministic award.

One lightweight service owns the placement decision. Runtimes announce
themselves, every submitted job is offered to all of them, each answers with
an eligibility bid, and the coordinator awards the job to the least-loaded
eligible node (ties broken by smallest node id). Shared-memory descriptions
are pinned: every later job naming the same description lands on the node
that took the first one.

Two faces, one rulebook: LocalCoordinator wires in-process hosts for tests
and single-process runs; CoordinatorServer speaks length-prefixed JSON
frames over TCP ({kind: submit|bid|award|started|terminated, ...}).
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
import uuid
from typing import Callable, Optional

from .model import MemoryMode
from .parsing import DescriptionError, parse_description
from .validation import validate
from .wire import FrameError, recv_frame, send_frame

BID_TIMEOUT_S = 10.0
START_TIMEOUT_S = 30.0


class PlacementError(RuntimeError):
    pass


class NoEligibleRuntimeError(PlacementError):
    def __init__(self, detail: str = ""):
        super().__init__("no eligible runtime" + (f": {detail}" if detail else ""))
        self.detail = detail


class ValidationFailedError(PlacementError):
    def __init__(self, messages):
        super().__init__("job description failed validation: " + "; ".join(messages))
        self.messages = list(messages)


def select_runtime(eligible, counts) -> str:
    """Fewest hosted instances wins; ties go to the smallest node id."""
    if not eligible:
        raise NoEligibleRuntimeError()
    return min(eligible, key=lambda node: (counts.get(node, 0), node))


class PlacementBook:
    """Hosted-instance counts plus shared-mode pins, guarded by one lock."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts: dict[str, int] = {}
        self._pins: dict[str, str] = {}

    def register(self, node_id: str) -> None:
        with self._lock:
            self._counts.setdefault(node_id, 0)

    def forget(self, node_id: str) -> None:
        with self._lock:
            self._counts.pop(node_id, None)

    def counts(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def choose(self, eligible, description_name: str, memory_mode: str) -> str:
        with self._lock:
            if memory_mode == MemoryMode.SHARED.value:
                pinned = self._pins.get(description_name)
                if pinned is not None:
                    if pinned not in eligible:
                        raise NoEligibleRuntimeError(
                            f"shared description {description_name!r} is pinned to {pinned!r}, which is not eligible"
                        )
                    return pinned
            chosen = select_runtime(eligible, self._counts)
            if memory_mode == MemoryMode.SHARED.value:
                self._pins[description_name] = chosen
            return chosen

    def started(self, node_id: str, instances: int = 1) -> None:
        with self._lock:
            self._counts[node_id] = self._counts.get(node_id, 0) + instances

    def terminated(self, node_id: str) -> None:
        # may transiently go negative: an instance can die (and report) before
        # the submit path books its start; the two updates still net out
        with self._lock:
            if node_id in self._counts:
                self._counts[node_id] -= 1


def _validate_description_json(desc_json: object) -> tuple[str, str]:
    """Returns (description name, memory mode) or raises ValidationFailed."""
    try:
        desc = parse_description(json.dumps(desc_json))
    except DescriptionError as exc:
        raise ValidationFailedError([str(exc)])
    report = validate(desc)
    if not report.ok:
        raise ValidationFailedError([f"{e.path}: {e.message}" for e in report.errors])
    return desc.name, desc.memoryMode.value


class LocalCoordinator:
    """Placement over in-process hosts.

    A host is anything with node_id, bid(job) -> (eligible, cause),
    start_job(job) -> list of instance ids, and note_terminated wiring that
    calls back into instance_terminated.
    """

    def __init__(self):
        self.book = PlacementBook()
        self._hosts: dict[str, object] = {}

    def register(self, host) -> None:
        if host.node_id in self._hosts:
            raise ValueError(f"duplicate node id {host.node_id!r}")
        self._hosts[host.node_id] = host
        self.book.register(host.node_id)

    def instance_terminated(self, node_id: str) -> None:
        self.book.terminated(node_id)

    def submit(self, job) -> dict:
        name, mode = _validate_description_json(job.description_json())
        if not self._hosts:
            raise NoEligibleRuntimeError("no runtimes registered")
        bids = {node: host.bid(job) for node, host in sorted(self._hosts.items())}
        eligible = [node for node, (ok, _) in bids.items() if ok]
        if not eligible:
            causes = "; ".join(f"{node}: {cause}" for node, (ok, cause) in bids.items() if cause)
            raise NoEligibleRuntimeError(causes)
        chosen = self.book.choose(eligible, name, mode)
        instances = self._hosts[chosen].start_job(job)
        self.book.started(chosen, len(instances))
        return {"jobId": uuid.uuid4().hex, "nodeId": chosen, "instances": list(instances)}


class _Pending:
    def __init__(self, expected: set[str]):
        self.cond = threading.Condition()
        self.expected = expected
        self.bids: dict[str, tuple[bool, Optional[str]]] = {}
        self.started: Optional[dict] = None

    def add_bid(self, node: str, eligible: bool, cause: Optional[str]) -> None:
        with self.cond:
            self.bids[node] = (eligible, cause)
            self.cond.notify_all()

    def add_started(self, frame: dict) -> None:
        with self.cond:
            self.started = frame
            self.cond.notify_all()

    def wait_bids(self, timeout: float) -> dict:
        with self.cond:
            self.cond.wait_for(lambda: set(self.bids) >= self.expected, timeout=timeout)
            return dict(self.bids)

    def wait_started(self, timeout: float) -> Optional[dict]:
        with self.cond:
            self.cond.wait_for(lambda: self.started is not None, timeout=timeout)
            return self.started


class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Lock()

    def send(self, frame: dict) -> None:
        with self.lock:
            send_frame(self.sock, frame)


class _CoordinatorHandler(socketserver.BaseRequestHandler):
    def setup(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.conn = _Conn(self.request)
        self.node_id: Optional[str] = None

    def handle(self):
        server: CoordinatorServer = self.server  # type: ignore[assignment]
        while True:
            try:
                frame = recv_frame(self.request)
            except (FrameError, OSError):
                return
            if frame is None:
                return
            try:
                server.process(frame, self)
            except Exception:
                return

    def finish(self):
        if self.node_id is not None:
            self.server.drop_runtime(self.node_id)  # type: ignore[attr-defined]


class CoordinatorServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0, bid_timeout: float = BID_TIMEOUT_S):
        super().__init__((host, port), _CoordinatorHandler)
        self.book = PlacementBook()
        self.bid_timeout = bid_timeout
        self._lock = threading.Lock()
        self._runtimes: dict[str, _Conn] = {}
        self._pending: dict[str, _Pending] = {}
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def start(self) -> "CoordinatorServer":
        self._thread = threading.Thread(target=self.serve_forever, name="coordinator", daemon=True)
        self._thread.start()
        return self

    def drop_runtime(self, node_id: str) -> None:
        with self._lock:
            self._runtimes.pop(node_id, None)
        self.book.forget(node_id)

    def process(self, frame: dict, handler: _CoordinatorHandler) -> None:
        kind = frame.get("kind")
        if kind == "hello":
            node_id = frame["nodeId"]
            with self._lock:
                self._runtimes[node_id] = handler.conn
            handler.node_id = node_id
            self.book.register(node_id)
            handler.conn.send({"kind": "reply", "reqId": frame.get("reqId"), "ok": True})
        elif kind == "bid":
            pending = self._pending.get(frame["jobId"])
            if pending is not None:
                pending.add_bid(frame["nodeId"], bool(frame.get("eligible")), frame.get("cause"))
        elif kind == "started":
            pending = self._pending.get(frame["jobId"])
            if pending is not None:
                pending.add_started(frame)
        elif kind == "terminated":
            self.book.terminated(frame["nodeId"])
        elif kind == "submit":
            # handled inline: this connection's thread owns the whole placement
            self._handle_submit(frame, handler)
        elif kind == "nodes":
            handler.conn.send(
                {"kind": "reply", "reqId": frame.get("reqId"), "ok": True, "counts": self.book.counts()}
            )
        else:
            handler.conn.send({"kind": "reply", "reqId": frame.get("reqId"), "ok": False, "error": f"unknown kind {kind!r}"})

    def _handle_submit(self, frame: dict, handler: _CoordinatorHandler) -> None:
        req_id = frame.get("reqId")

        def fail(error: str, detail: str = "") -> None:
            handler.conn.send({"kind": "reply", "reqId": req_id, "ok": False, "error": error, "detail": detail})

        job_json = frame.get("job")
        if not isinstance(job_json, dict) or "description" not in job_json:
            fail("ValidationFailed", "job must be an object with a description")
            return
        try:
            name, mode = _validate_description_json(job_json["description"])
        except ValidationFailedError as exc:
            fail("ValidationFailed", "; ".join(exc.messages))
            return
        with self._lock:
            runtimes = dict(self._runtimes)
        if not runtimes:
            fail("NoEligibleRuntime", "no runtimes registered")
            return
        job_id = uuid.uuid4().hex
        pending = _Pending(set(runtimes))
        self._pending[job_id] = pending
        try:
            for conn in runtimes.values():
                conn.send({"kind": "submit", "jobId": job_id, "job": job_json})
            bids = pending.wait_bids(self.bid_timeout)
            eligible = [node for node, (ok, _) in bids.items() if ok]
            if not eligible:
                causes = "; ".join(f"{node}: {cause}" for node, (ok, cause) in sorted(bids.items()) if cause)
                fail("NoEligibleRuntime", causes)
                return
            try:
                chosen = self.book.choose(eligible, name, mode)
            except NoEligibleRuntimeError as exc:
                fail("NoEligibleRuntime", exc.detail)
                return
            runtimes[chosen].send({"kind": "award", "jobId": job_id, "job": job_json})
            started = pending.wait_started(START_TIMEOUT_S)
            if started is None:
                fail("StartTimeout", f"runtime {chosen!r} did not report started")
                return
            if not started.get("ok", False):
                fail("StartFailed", str(started.get("error")))
                return
            instances = list(started.get("instances", ()))
            self.book.started(chosen, len(instances))
            handler.conn.send(
                {
                    "kind": "reply",
                    "reqId": req_id,
                    "ok": True,
                    "receipt": {"jobId": job_id, "nodeId": chosen, "instances": instances},
                }
            )
        finally:
            self._pending.pop(job_id, None)

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class CoordinatorClient:
    """Submitter-side connection: submit jobs, query node counts."""

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()
        self._timeout = timeout

    def _request(self, frame: dict) -> dict:
        frame["reqId"] = uuid.uuid4().hex
        with self._lock:
            send_frame(self._sock, frame)
            reply = recv_frame(self._sock)
        if reply is None:
            raise ConnectionError("coordinator closed the connection")
        return reply

    def submit(self, job_json: dict) -> dict:
        reply = self._request({"kind": "submit", "job": job_json})
        if reply.get("ok"):
            return reply["receipt"]
        error = reply.get("error")
        detail = reply.get("detail", "")
        if error == "NoEligibleRuntime":
            raise NoEligibleRuntimeError(detail)
        if error == "ValidationFailed":
            raise ValidationFailedError([detail] if detail else [])
        raise PlacementError(f"{error}: {detail}")

    def counts(self) -> dict[str, int]:
        reply = self._request({"kind": "nodes"})
        return dict(reply.get("counts", {}))

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
