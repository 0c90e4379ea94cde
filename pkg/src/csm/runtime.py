"""Runtime hosts: job intake, eligibility, instance hosting, and wiring.

A host owns the instances placed on one node. It answers coordinator bids by
evaluating the job's eligibility conditions against its node attributes,
builds one core per machine in the placed subtree (nested cores share the
parent's machine context, so a subtree is one memory), registers the job's
bindings as event subscriptions, and runs each core on its own thread.

Transports abstract the event plane: LocalTransport is an in-process bus for
tests and single-process runs, BrokerTransport speaks to the TCP broker.
"""

from __future__ import annotations

import json
import logging
import random
import socket
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

from .broker import BrokerClient
from .clock import RealClock
from .data import DataContext, PersistentStore, ScopeChain, declare_block, declare_persistent
from .events import EventBus, EventInstance, Subscription, UnknownTargetError
from .executor import InstanceCore, InstanceReport
from .expr import evaluate_text
from .metrics import Emitter, NullEmitter, record
from .model import CsmDescription, StateMachineDef, description_to_json
from .parsing import DescriptionError, parse_description
from .services import (
    HttpServiceInvoker,
    ServiceConfigError,
    ServiceImplementationDescription,
    catalog_from_json,
    missing_service_types,
    validate_catalog,
)
from .wire import FrameError, recv_frame, send_frame

log = logging.getLogger("csm.runtime")


class JobError(ValueError):
    pass


@dataclass(frozen=True)
class Binding:
    """Subscription request: subscriber (None = the job's root instance)
    listens to external events from source, optionally name-filtered."""

    source: str
    subscriber: Optional[str] = None
    events: Optional[tuple[str, ...]] = None

    def to_json(self):
        if self.subscriber is None and self.events is None:
            return self.source
        out = {"source": self.source}
        if self.subscriber is not None:
            out["subscriber"] = self.subscriber
        if self.events is not None:
            out["events"] = list(self.events)
        return out


def _binding_from_json(obj: object, where: str) -> Binding:
    if isinstance(obj, str):
        return Binding(source=obj)
    if not isinstance(obj, dict):
        raise JobError(f"{where}: expected a string or an object")
    unknown = set(obj) - {"source", "subscriber", "events"}
    if unknown:
        raise JobError(f"{where}: unknown key {sorted(unknown)[0]!r}")
    if "source" not in obj or not isinstance(obj["source"], str):
        raise JobError(f"{where}: 'source' must be a string")
    subscriber = obj.get("subscriber")
    if subscriber is not None and not isinstance(subscriber, str):
        raise JobError(f"{where}: 'subscriber' must be a string")
    events = obj.get("events")
    if events is not None:
        if not isinstance(events, list) or not all(isinstance(e, str) for e in events):
            raise JobError(f"{where}: 'events' must be a list of strings")
        events = tuple(events)
    return Binding(source=obj["source"], subscriber=subscriber, events=events)


@dataclass(frozen=True)
class Job:
    """Everything needed to instantiate one machine somewhere."""

    description: CsmDescription
    stateMachineName: str
    serviceImplementations: tuple[ServiceImplementationDescription, ...] = ()
    instanceData: dict = field(default_factory=dict)
    bindings: tuple[Binding, ...] = ()
    eligibility: tuple[str, ...] = ()

    def __post_init__(self):
        if self.description.machine(self.stateMachineName) is None:
            raise JobError(f"description {self.description.name!r} has no machine {self.stateMachineName!r}")

    def description_json(self) -> dict:
        return description_to_json(self.description)

    def to_json(self) -> dict:
        return {
            "description": self.description_json(),
            "serviceImplementations": [impl.to_json() for impl in self.serviceImplementations],
            "stateMachineName": self.stateMachineName,
            "instanceData": dict(self.instanceData),
            "bindings": [b.to_json() for b in self.bindings],
            "eligibility": list(self.eligibility),
        }


_JOB_KEYS = frozenset(
    {"description", "serviceImplementations", "stateMachineName", "instanceData", "bindings", "eligibility"}
)


def job_from_json(obj: object) -> Job:
    if not isinstance(obj, dict):
        raise JobError(f"job: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - _JOB_KEYS
    if unknown:
        raise JobError(f"job: unknown key {sorted(unknown)[0]!r}")
    for key in ("description", "stateMachineName"):
        if key not in obj:
            raise JobError(f"job: missing {key!r}")
    try:
        description = parse_description(json.dumps(obj["description"]))
    except DescriptionError as exc:
        raise JobError(f"job.description: {exc}")
    if not isinstance(obj["stateMachineName"], str):
        raise JobError("job: 'stateMachineName' must be a string")
    try:
        catalog = catalog_from_json(obj.get("serviceImplementations", []), "job.serviceImplementations")
    except ServiceConfigError as exc:
        raise JobError(str(exc))
    instance_data = obj.get("instanceData", {})
    if not isinstance(instance_data, dict):
        raise JobError("job: 'instanceData' must be an object")
    bindings_json = obj.get("bindings", [])
    if not isinstance(bindings_json, list):
        raise JobError("job: 'bindings' must be a list")
    bindings = tuple(_binding_from_json(b, f"job.bindings[{i}]") for i, b in enumerate(bindings_json))
    eligibility = obj.get("eligibility", [])
    if not isinstance(eligibility, list) or not all(isinstance(c, str) for c in eligibility):
        raise JobError("job: 'eligibility' must be a list of strings")
    return Job(
        description=description,
        stateMachineName=obj["stateMachineName"],
        serviceImplementations=catalog,
        instanceData=dict(instance_data),
        bindings=bindings,
        eligibility=tuple(eligibility),
    )


def load_job(path: str) -> Job:
    with open(path, "r", encoding="utf-8") as fp:
        text = fp.read()
    try:
        obj = json.loads(text)
    except ValueError as exc:
        raise JobError(f"job file {path}: {exc}")
    return job_from_json(obj)


@dataclass
class RuntimeNode:
    """Identity and advertised attributes of one runtime."""

    id: str
    attributes: dict = field(default_factory=dict)


def evaluate_eligibility(job: Job, node: RuntimeNode) -> tuple[bool, Optional[str]]:
    """All conditions true against node.attributes; any expression error
    makes the node ineligible, with the cause logged and returned."""
    if not job.eligibility:
        return True, None
    ctx = DataContext("local", f"node:{node.id}", dict(node.attributes))
    env = ScopeChain((ctx,)).environment(random.Random(0))
    for condition in job.eligibility:
        try:
            value = evaluate_text(condition, env)
        except Exception as exc:
            cause = f"eligibility {condition!r}: {type(exc).__name__}: {exc}"
            log.warning("node %s ineligible: %s", node.id, cause)
            return False, cause
        if value is not True:
            return False, f"eligibility {condition!r} is {value!r}"
    return True, None


class LocalTransport:
    """Event plane backed by an in-process EventBus."""

    def __init__(self, bus: EventBus):
        self.bus = bus

    def attach(self, core: InstanceCore) -> None:
        self.bus.register_instance(core.id, core.inbox)
        core._publish = self.bus.publish

    def detach(self, instance_id: str) -> None:
        self.bus.unregister(instance_id)

    def subscribe(self, sub: Subscription) -> None:
        self.bus.subscribe(sub)

    def inject(self, name: str, data: dict, target: Optional[str] = None) -> int:
        return self.bus.inject(name, data, target)

    def close(self) -> None:
        pass


class BrokerTransport:
    """Event plane backed by the TCP broker; delivers into local inboxes."""

    def __init__(self, host: str, port: int):
        self._inboxes: dict = {}
        self._lock = threading.Lock()
        self.client = BrokerClient(host, port, on_deliver=self._deliver)

    def _deliver(self, to: str, event: EventInstance) -> None:
        with self._lock:
            inbox = self._inboxes.get(to)
        if inbox is not None:
            inbox.put(event)

    def attach(self, core: InstanceCore) -> None:
        with self._lock:
            self._inboxes[core.id] = core.inbox
        self.client.attach([core.id])
        self.client.instances()  # round-trip so the attach is visible broker-side
        core._publish = self.client.publish

    def detach(self, instance_id: str) -> None:
        with self._lock:
            self._inboxes.pop(instance_id, None)
        self.client.detach([instance_id])

    def subscribe(self, sub: Subscription) -> None:
        self.client.subscribe(sub)

    def inject(self, name: str, data: dict, target: Optional[str] = None) -> int:
        return self.client.inject(name, data, target)

    def close(self) -> None:
        self.client.close()


@dataclass
class _Hosted:
    core: InstanceCore
    thread: threading.Thread


class RuntimeHost:
    """Hosts instance cores for one node and answers placement questions."""

    def __init__(
        self,
        node: RuntimeNode,
        transport,
        *,
        store: Optional[PersistentStore] = None,
        metrics: Optional[Emitter] = None,
        inject_latency_ms: float = 0.0,
        invoke_timeout: float = 30.0,
        on_terminated: Optional[Callable[[str, InstanceReport], None]] = None,
        while_cadence: str = "per-event",
    ):
        self.node = node
        self.transport = transport
        self.store = store
        self.metrics = metrics if metrics is not None else NullEmitter()
        self.inject_latency_ms = inject_latency_ms
        self.invoke_timeout = invoke_timeout
        self.on_terminated = on_terminated
        self.while_cadence = while_cadence
        self.clock = RealClock()
        self._lock = threading.Lock()
        self._hosted: dict[str, _Hosted] = {}
        self._reports: dict[str, InstanceReport] = {}
        self._csm_chains: dict[str, ScopeChain] = {}
        self._sampler: Optional[threading.Thread] = None
        self._sampling = threading.Event()

    @property
    def node_id(self) -> str:
        return self.node.id

    def bid(self, job: Job) -> tuple[bool, Optional[str]]:
        return evaluate_eligibility(job, self.node)

    def hosted_count(self) -> int:
        with self._lock:
            return sum(1 for h in self._hosted.values() if h.core.alive or not h.core.started)

    def instance_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._hosted)

    def core(self, instance_id: str) -> Optional[InstanceCore]:
        with self._lock:
            hosted = self._hosted.get(instance_id)
        return hosted.core if hosted else None

    def report(self, instance_id: str) -> Optional[InstanceReport]:
        with self._lock:
            return self._reports.get(instance_id)

    # --- job intake ----------------------------------------------------

    def _csm_chain(self, description: CsmDescription) -> ScopeChain:
        """Root scope for one description on this host. Shared-mode machines
        of the same description land here together, so they share it."""
        with self._lock:
            chain = self._csm_chains.get(description.name)
            if chain is not None:
                return chain
            chain = ScopeChain((), self.store)
            rng = random.Random(description.name)
            if description.localData:
                root_ctx = DataContext("local", f"csm:{description.name}")
                declare_block(description.localData, root_ctx, chain, rng)
                chain = chain.child(root_ctx)
            if description.persistentData:
                declare_persistent(description.persistentData, chain, rng)
            self._csm_chains[description.name] = chain
            return chain

    def start_job(self, job: Job) -> list[str]:
        machine = job.description.machine(job.stateMachineName)
        if machine is None:
            raise JobError(f"no machine named {job.stateMachineName!r}")
        problems = validate_catalog(job.serviceImplementations)
        if problems:
            raise JobError("; ".join(problems))
        for missing in missing_service_types(machine, job.serviceImplementations):
            log.warning(
                "job %s: machine invokes service type %r but no implementation is provided",
                job.stateMachineName,
                missing,
            )
        invoker = HttpServiceInvoker(
            job.serviceImplementations,
            inject_latency_ms=self.inject_latency_ms,
            timeout=self.invoke_timeout,
            metrics=self.metrics.emit,
        )
        root_chain = self._csm_chain(job.description)
        cores: list[InstanceCore] = []

        def build(definition: StateMachineDef, parent_chain: ScopeChain, instance_id: str, data: Optional[dict]):
            core = InstanceCore(
                instance_id,
                definition,
                parent_chain=parent_chain,
                clock=self.clock,
                service_invoker=invoker,
                rng=random.Random(instance_id),
                metrics=self.metrics.emit,
                instance_data=data,
                while_cadence=self.while_cadence,
            )
            cores.append(core)
            for child in definition.nested:
                build(child, core.machine_chain, f"{instance_id}.{child.name}", None)

        build(machine, root_chain, job.stateMachineName, job.instanceData)
        ids = [core.id for core in cores]
        with self._lock:
            for instance_id in ids:
                if instance_id in self._hosted:
                    raise JobError(f"instance id {instance_id!r} already hosted")
        family = set(ids)
        subs = []
        for binding in job.bindings:
            subscriber = binding.subscriber if binding.subscriber is not None else job.stateMachineName
            if subscriber not in family:
                raise JobError(f"binding subscriber {subscriber!r} is not an instance of this job")
            subs.append(
                Subscription(
                    subscriber=subscriber,
                    sources=frozenset({binding.source}),
                    names=frozenset(binding.events) if binding.events else None,
                )
            )
        for core in cores:
            self.transport.attach(core)
        for sub in subs:
            self.transport.subscribe(sub)
        # parent-first synchronous starts: children read parent machine data,
        # and anything a parent raises early waits in the child's inbox
        for core in cores:
            core.start()
        threads = {}
        for core in cores:
            threads[core.id] = threading.Thread(
                target=self._run_core, args=(core,), name=f"instance-{core.id}", daemon=True
            )
        with self._lock:
            for core in cores:
                self._hosted[core.id] = _Hosted(core, threads[core.id])
        for core in cores:
            threads[core.id].start()
        return ids

    def _run_core(self, core: InstanceCore) -> None:
        report = core.run()
        with self._lock:
            self._reports[core.id] = report
        if self.on_terminated is not None:
            try:
                self.on_terminated(core.id, report)
            except Exception:
                log.exception("on_terminated callback failed for %s", core.id)

    # --- observability -------------------------------------------------

    def queue_depths(self) -> dict[str, int]:
        with self._lock:
            cores = [h.core for h in self._hosted.values()]
        return {core.id: core.inbox.qsize() + len(core.E) for core in cores if core.alive or not core.started}

    def sample_queues(self) -> None:
        for instance_id, depth in sorted(self.queue_depths().items()):
            self.metrics.emit(record("queue-depth", instance_id, depth, "events", node=self.node.id))

    def start_sampler(self, interval: float = 1.0) -> None:
        if self._sampler is not None:
            return
        self._sampling.set()

        def loop():
            while self._sampling.is_set():
                self.sample_queues()
                time.sleep(interval)

        self._sampler = threading.Thread(target=loop, name=f"sampler-{self.node.id}", daemon=True)
        self._sampler.start()

    def stop(self, join_timeout: float = 2.0) -> None:
        self._sampling.clear()
        with self._lock:
            hosted = list(self._hosted.values())
        for h in hosted:
            h.core.stop()
        for h in hosted:
            h.thread.join(timeout=join_timeout)
            for handle in list(h.core.timeouts.values()):
                handle.cancel()
        self.clock.stop()
        self.transport.close()


class CoordinatorLink:
    """Runtime-side coordinator connection: hello, bid on submits, start on
    awards, report terminations."""

    def __init__(self, host: str, port: int, runtime_host: RuntimeHost):
        self.host = runtime_host
        self._sock = socket.create_connection((host, port))
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None
        self.closed = threading.Event()
        runtime_host.on_terminated = self._instance_terminated
        self._send({"kind": "hello", "nodeId": runtime_host.node_id, "attributes": dict(runtime_host.node.attributes)})

    def _send(self, frame: dict) -> None:
        with self._send_lock:
            send_frame(self._sock, frame)

    def _instance_terminated(self, instance_id: str, report: InstanceReport) -> None:
        try:
            self._send({"kind": "terminated", "nodeId": self.host.node_id, "instance": instance_id})
        except OSError:
            pass

    def start(self) -> "CoordinatorLink":
        self._thread = threading.Thread(target=self._loop, name=f"coordinator-link-{self.host.node_id}", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        try:
            while True:
                frame = recv_frame(self._sock)
                if frame is None:
                    return
                kind = frame.get("kind")
                if kind == "submit":
                    self._on_submit(frame)
                elif kind == "award":
                    self._on_award(frame)
                # replies to hello are informational
        except (FrameError, OSError):
            return
        finally:
            self.closed.set()

    def _on_submit(self, frame: dict) -> None:
        try:
            job = job_from_json(frame["job"])
            eligible, cause = self.host.bid(job)
        except JobError as exc:
            eligible, cause = False, str(exc)
        self._send(
            {
                "kind": "bid",
                "jobId": frame["jobId"],
                "nodeId": self.host.node_id,
                "eligible": eligible,
                "cause": cause,
            }
        )

    def _on_award(self, frame: dict) -> None:
        try:
            job = job_from_json(frame["job"])
            instances = self.host.start_job(job)
        except Exception as exc:
            self._send(
                {
                    "kind": "started",
                    "jobId": frame["jobId"],
                    "nodeId": self.host.node_id,
                    "ok": False,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )
            return
        self._send(
            {
                "kind": "started",
                "jobId": frame["jobId"],
                "nodeId": self.host.node_id,
                "ok": True,
                "instances": instances,
            }
        )

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class _EventEndpointHandler(BaseHTTPRequestHandler):
    server_version = "csm-events/0.1"
    protocol_version = "HTTP/1.1"

    def setup(self):
        super().setup()
        # two-write responses stall behind delayed ACKs without this
        self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def log_message(self, fmt, *args):
        pass

    def do_GET(self):
        if self.path == "/healthz":
            self._reply(200, {"ok": True})
        else:
            self._reply(404, {"error": "not found"})

    def do_POST(self):
        if self.path != "/events":
            self._reply(404, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        try:
            body = json.loads(self.rfile.read(length).decode("utf-8"))
            if not isinstance(body, dict) or not isinstance(body.get("name"), str):
                raise ValueError("body must be an object with a 'name' string")
        except (ValueError, UnicodeDecodeError) as exc:
            self._reply(400, {"error": str(exc)})
            return
        data = body.get("data", {})
        if not isinstance(data, dict):
            self._reply(400, {"error": "'data' must be an object"})
            return
        transport = self.server.transport  # type: ignore[attr-defined]
        try:
            count = transport.inject(body["name"], data, body.get("target"))
        except UnknownTargetError as exc:
            self._reply(404, {"error": str(exc)})
            return
        self._reply(200, {"ok": True, "delivered": count})

    def _reply(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class EventEndpoint:
    """Local HTTP door for peripheral events: POST /events {name, data, target}."""

    def __init__(self, transport, host: str = "127.0.0.1", port: int = 0):
        self._server = ThreadingHTTPServer((host, port), _EventEndpointHandler)
        self._server.transport = transport  # type: ignore[attr-defined]
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[0], self._server.server_address[1]

    def start(self) -> "EventEndpoint":
        self._thread = threading.Thread(target=self._server.serve_forever, name="event-endpoint", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
