"""Service implementation catalogs: deterministic selection and HTTP invocation.

A machine invokes a service *type*; which concrete implementation answers is
decided here. Selection is reproducible: filter to the requested type, honor
a local-only demand, apply property hints softly, then rank by latencyHint,
costHint, catalog order. Invocation is a JSON-in/JSON-out HTTP POST with
client-side latency injection that local implementations bypass.
"""

from __future__ import annotations

import http.client
import json
import socket
import threading
import time
import urllib.parse
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional, Sequence

from .metrics import record
from .model import InvokeAction, MatchAction, StateMachineDef, TimeoutAction

# parsed but only "http" survives validation
KNOWN_PROTOCOLS = ("http", "grpc")

DEFAULT_TIMEOUT_S = 30.0


class ServiceConfigError(ValueError):
    """An implementation description is malformed or uses an unsupported protocol."""


class NoImplementationError(LookupError):
    def __init__(self, service_type: str):
        super().__init__(f"no implementation for service type {service_type!r}")
        self.service_type = service_type


class NoLocalImplementationError(LookupError):
    def __init__(self, service_type: str):
        super().__init__(f"no local implementation for service type {service_type!r}")
        self.service_type = service_type


class ServiceUnreachableError(ConnectionError):
    pass


class ServiceTimeoutError(TimeoutError):
    pass


class ServiceError(RuntimeError):
    """Non-2xx status or a response body that is not a JSON object."""

    def __init__(self, status: int, body: str, message: Optional[str] = None):
        super().__init__(message or f"service returned status {status}: {body[:200]}")
        self.status = status
        self.body = body


@dataclass(frozen=True)
class ServiceImplementationDescription:
    serviceType: str
    endpoint: str
    protocol: str = "http"
    local: bool = False
    costHint: Optional[float] = None
    latencyHint: Optional[float] = None

    def to_json(self) -> dict:
        out = {"serviceType": self.serviceType, "endpoint": self.endpoint, "protocol": self.protocol, "local": self.local}
        if self.costHint is not None:
            out["costHint"] = self.costHint
        if self.latencyHint is not None:
            out["latencyHint"] = self.latencyHint
        return out


_IMPL_KEYS = frozenset({"serviceType", "endpoint", "protocol", "local", "costHint", "latencyHint"})


def implementation_from_json(obj: object, where: str = "serviceImplementation") -> ServiceImplementationDescription:
    if not isinstance(obj, dict):
        raise ServiceConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - _IMPL_KEYS
    if unknown:
        raise ServiceConfigError(f"{where}: unknown key {sorted(unknown)[0]!r}")
    for key in ("serviceType", "endpoint"):
        if key not in obj:
            raise ServiceConfigError(f"{where}: missing {key!r}")
        if not isinstance(obj[key], str) or not obj[key]:
            raise ServiceConfigError(f"{where}: {key!r} must be a non-empty string")
    protocol = obj.get("protocol", "http")
    if protocol not in KNOWN_PROTOCOLS:
        raise ServiceConfigError(f"{where}: unknown protocol {protocol!r}")
    local = obj.get("local", False)
    if not isinstance(local, bool):
        raise ServiceConfigError(f"{where}: 'local' must be a boolean")
    hints = {}
    for key in ("costHint", "latencyHint"):
        if key in obj:
            v = obj[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ServiceConfigError(f"{where}: {key!r} must be a number")
            hints[key] = float(v)
    return ServiceImplementationDescription(
        serviceType=obj["serviceType"], endpoint=obj["endpoint"], protocol=protocol, local=local, **hints
    )


def catalog_from_json(items: object, where: str = "serviceImplementations") -> tuple[ServiceImplementationDescription, ...]:
    if not isinstance(items, list):
        raise ServiceConfigError(f"{where}: expected a list")
    return tuple(implementation_from_json(item, f"{where}[{i}]") for i, item in enumerate(items))


def validate_catalog(catalog: Sequence[ServiceImplementationDescription]) -> list[str]:
    """Messages for entries the runtime cannot use; empty means usable."""
    problems = []
    for i, impl in enumerate(catalog):
        if impl.protocol != "http":
            problems.append(f"serviceImplementations[{i}] ({impl.serviceType}): unsupported protocol {impl.protocol!r}")
    return problems


def _hint_key(impl: ServiceImplementationDescription, index: int):
    lat = impl.latencyHint if impl.latencyHint is not None else float("inf")
    cost = impl.costHint if impl.costHint is not None else float("inf")
    return (lat, cost, index)


def select_implementation(
    service_type: str,
    local_required: Optional[bool],
    properties: dict,
    catalog: Sequence[ServiceImplementationDescription],
) -> ServiceImplementationDescription:
    candidates = [(i, impl) for i, impl in enumerate(catalog) if impl.serviceType == service_type]
    if not candidates:
        raise NoImplementationError(service_type)
    if local_required:
        candidates = [(i, impl) for i, impl in candidates if impl.local]
        if not candidates:
            raise NoLocalImplementationError(service_type)
    # property hints narrow the field but never empty it
    for name, wanted in properties.items():
        if name not in ("local", "protocol", "endpoint"):
            continue
        narrowed = [(i, impl) for i, impl in candidates if getattr(impl, name) == wanted]
        if narrowed:
            candidates = narrowed
    return min(candidates, key=lambda pair: _hint_key(pair[1], pair[0]))[1]


_thread_local = threading.local()

_RETRYABLE = (
    http.client.RemoteDisconnected,
    http.client.CannotSendRequest,
    http.client.BadStatusLine,
    ConnectionResetError,
    BrokenPipeError,
)


def _connection(scheme: str, netloc: str, timeout: float) -> tuple[http.client.HTTPConnection, bool]:
    """Per-thread keepalive connection per endpoint; invocations stay serial
    per instance. Returns (connection, was_cached)."""
    pool = getattr(_thread_local, "connections", None)
    if pool is None:
        pool = _thread_local.connections = {}
    key = (scheme, netloc)
    conn = pool.get(key)
    if conn is not None:
        conn.timeout = timeout
        return conn, True
    cls = http.client.HTTPSConnection if scheme == "https" else http.client.HTTPConnection
    conn = cls(netloc, timeout=timeout)
    pool[key] = conn
    return conn, False


def _drop_connection(scheme: str, netloc: str) -> None:
    pool = getattr(_thread_local, "connections", {})
    conn = pool.pop((scheme, netloc), None)
    if conn is not None:
        conn.close()


def _post_json(endpoint: str, inputs: dict, timeout: float) -> tuple[int, str]:
    parts = urllib.parse.urlsplit(endpoint)
    path = parts.path or "/"
    if parts.query:
        path += "?" + parts.query
    body = json.dumps(inputs)
    headers = {"Content-Type": "application/json"}
    for attempt in (0, 1):
        conn, cached = _connection(parts.scheme, parts.netloc, timeout)
        try:
            conn.request("POST", path, body, headers)
            response = conn.getresponse()
            return response.status, response.read().decode("utf-8", "replace")
        except _RETRYABLE:
            # a cached keepalive connection may have gone stale server-side;
            # one fresh retry, then treat it as unreachable
            _drop_connection(parts.scheme, parts.netloc)
            if not cached or attempt:
                raise
        except BaseException:
            _drop_connection(parts.scheme, parts.netloc)
            raise
    raise AssertionError("unreachable")


def invoke_service(
    impl: ServiceImplementationDescription,
    inputs: dict,
    *,
    timeout: float = DEFAULT_TIMEOUT_S,
    inject_latency_ms: float = 0.0,
    metrics: Optional[Callable[[dict], None]] = None,
    instance: Optional[str] = None,
) -> dict:
    """POST the input variables, return the response object as output variables.

    The injected latency models network distance and is charged inside the
    measured interval; local implementations are exempt.
    """
    if impl.protocol != "http":
        raise ServiceConfigError(f"unsupported protocol {impl.protocol!r}")
    started = time.perf_counter()
    if inject_latency_ms > 0 and not impl.local:
        time.sleep(inject_latency_ms / 1000.0)
    try:
        status, text = _post_json(impl.endpoint, inputs, timeout)
    except TimeoutError as exc:
        raise ServiceTimeoutError(f"{impl.serviceType} at {impl.endpoint}: no response within {timeout}s") from exc
    except (OSError, http.client.HTTPException, ValueError) as exc:
        raise ServiceUnreachableError(f"{impl.serviceType} at {impl.endpoint}: {exc}") from exc
    if not 200 <= status < 300:
        raise ServiceError(status, text)
    try:
        output = json.loads(text)
    except ValueError:
        raise ServiceError(status, text, message="response body is not JSON")
    if not isinstance(output, dict):
        raise ServiceError(status, text, message="response is not a JSON object")
    elapsed_ms = (time.perf_counter() - started) * 1000.0
    if metrics is not None:
        metrics(
            record(
                "invoke-latency",
                instance,
                elapsed_ms,
                "ms",
                serviceType=impl.serviceType,
                local=impl.local,
            )
        )
    return output


class HttpServiceInvoker:
    """ServiceInvoker for InstanceCore: selects from a catalog and POSTs.

    Blocks only the invoking instance's thread; each thread keeps its own
    keepalive connection per endpoint, so concurrent instances never share
    a socket.
    """

    def __init__(
        self,
        catalog: Sequence[ServiceImplementationDescription],
        *,
        inject_latency_ms: float = 0.0,
        timeout: float = DEFAULT_TIMEOUT_S,
        metrics: Optional[Callable[[dict], None]] = None,
    ):
        self.catalog = tuple(catalog)
        self.inject_latency_ms = inject_latency_ms
        self.timeout = timeout
        self.metrics = metrics

    def __call__(self, action: InvokeAction, inputs: dict, core) -> dict:
        properties = {p.name: p.value for p in action.properties}
        impl = select_implementation(action.serviceType, action.local, properties, self.catalog)
        return invoke_service(
            impl,
            inputs,
            timeout=self.timeout,
            inject_latency_ms=self.inject_latency_ms,
            metrics=self.metrics,
            instance=getattr(core, "id", None),
        )


def missing_service_types(machine: StateMachineDef, catalog: Sequence[ServiceImplementationDescription]) -> list[str]:
    """Service types the machine invokes with no catalog entry, for warnings."""
    available = {impl.serviceType for impl in catalog}
    wanted: set[str] = set()

    def from_actions(actions) -> None:
        for action in actions:
            if isinstance(action, InvokeAction):
                wanted.add(action.serviceType)
            elif isinstance(action, TimeoutAction):
                from_actions(action.actions)
            elif isinstance(action, MatchAction):
                for case in action.cases:
                    from_actions(case.action)

    def walk(m: StateMachineDef) -> None:
        for state in m.states:
            from_actions(state.entry)
            from_actions(state.exit)
            from_actions(state.while_)
            from_actions(state.after)
            for t in list(state.on) + list(state.always):
                from_actions(t.actions)
        for child in m.nested:
            walk(child)

    walk(machine)
    return sorted(wanted - available)


class _StubHandler(BaseHTTPRequestHandler):
    server_version = "csm-stub/0.1"
    protocol_version = "HTTP/1.1"  # keep-alive: one connection per client thread

    def setup(self):
        super().setup()
        # headers and body go out as two writes; without this the second
        # write stalls ~40ms behind the peer's delayed ACK
        self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def log_message(self, fmt, *args):  # quiet
        pass

    def do_GET(self):
        if self.path == "/healthz":
            self._reply(200, {"ok": True})
        else:
            self._reply(404, {"error": "not found"})

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw.decode("utf-8"))
            if not isinstance(body, dict):
                raise ValueError("body must be a JSON object")
        except (ValueError, UnicodeDecodeError) as exc:
            self._reply(400, {"error": str(exc)})
            return
        stub: StubServiceServer = self.server.stub  # type: ignore[attr-defined]
        handler = stub.routes.get(self.path)
        if handler is None:
            self._reply(404, {"error": f"no service at {self.path}"})
            return
        if stub.delay_ms > 0:
            time.sleep(stub.delay_ms / 1000.0)
        stub.count(self.path)
        self._reply(200, handler(body))

    def _reply(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


def _gate(body: dict) -> dict:
    return {"ok": True, "position": body.get("position")}


def _light(body: dict) -> dict:
    return {"ok": True, "on": body.get("on")}


def _detect(body: dict) -> dict:
    return {"ok": True, "seen": bool(body.get("seen", True))}


class StubServiceServer:
    """In-process zero-delay services for tests and the local bench leg.

    Same wire contract as the standalone example services: flat JSON object
    in, flat JSON object out.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, delay_ms: float = 0.0):
        self.routes: dict[str, Callable[[dict], dict]] = {"/gate": _gate, "/light": _light, "/detect": _detect}
        self.delay_ms = delay_ms
        self._counts: dict[str, int] = {}
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer((host, port), _StubHandler)
        self._server.stub = self  # type: ignore[attr-defined]
        self._server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[0], self._server.server_address[1]

    def url(self, route: str) -> str:
        host, port = self.address
        return f"http://{host}:{port}{route}"

    def count(self, route: str) -> None:
        with self._lock:
            self._counts[route] = self._counts.get(route, 0) + 1

    def counts(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def start(self) -> "StubServiceServer":
        self._thread = threading.Thread(target=self._server.serve_forever, name="stub-services", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


def stub_catalog(server: StubServiceServer, *, local: bool) -> tuple[ServiceImplementationDescription, ...]:
    """One implementation per stub route, all flagged local or all remote."""
    return tuple(
        ServiceImplementationDescription(serviceType=route.lstrip("/"), endpoint=server.url(route), local=local)
        for route in sorted(server.routes)
    )
