"""Command-line entry points.

Subcommands:
  validate       check a description file; exit 0 ok, 1 invalid, 2 malformed
  run            execute a description in-process with scripted events
  submit         send a job file to a coordinator
  runtime        host machine instances against coordinator/broker/store
  coordinator    serve the placement coordinator in the foreground
  broker         serve the event broker in the foreground
  store          serve the persistent store in the foreground
  bench-railway  run the railway-crossing benchmark and write reports
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
import time
from typing import Optional

from .bench import BenchConfig, run_railway_bench, run_railway_comparison
from .broker import BrokerServer
from .coordinator import (
    CoordinatorClient,
    CoordinatorServer,
    NoEligibleRuntimeError,
    PlacementError,
    ValidationFailedError,
)
from .data import InMemoryStore, RemoteStore, StoreServer
from .events import EventBus, UnknownTargetError
from .metrics import JsonlEmitter, NullEmitter
from .parsing import DescriptionError, JsonSyntaxError, parse_description
from .runtime import (
    Binding,
    BrokerTransport,
    CoordinatorLink,
    EventEndpoint,
    Job,
    JobError,
    LocalTransport,
    RuntimeHost,
    RuntimeNode,
    load_job,
)
from .services import ServiceConfigError, catalog_from_json, validate_catalog
from .validation import validate


def _host_port(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _attribute(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare words stay strings
    return key, value


def _read(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fp:
        return fp.read()


def cmd_validate(args) -> int:
    try:
        text = _read(args.path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        desc = parse_description(text)
    except JsonSyntaxError as exc:
        print(f"malformed: {exc}", file=sys.stderr)
        return 2
    except DescriptionError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    report = validate(desc)
    for entry in report.errors:
        print(f"error: {entry.path}: {entry.message}")
    for entry in report.warnings:
        print(f"warning: {entry.path}: {entry.message}")
    if report.ok:
        print(f"ok: {desc.name}")
        return 0
    return 1


def _load_inject_script(path: str) -> list[dict]:
    doc = json.loads(_read(path))
    if not isinstance(doc, list):
        raise ValueError("inject script must be a JSON array")
    for entry in doc:
        if not isinstance(entry, dict) or "name" not in entry:
            raise ValueError("each script entry needs at least a 'name'")
    return sorted(doc, key=lambda e: e.get("at", 0.0))


def cmd_run(args) -> int:
    try:
        text = _read(args.path)
        desc = parse_description(text)
    except (OSError, DescriptionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (OSError, JsonSyntaxError)) else 1
    report = validate(desc)
    if not report.ok:
        for entry in report.errors:
            print(f"error: {entry.path}: {entry.message}", file=sys.stderr)
        return 1
    machine = args.machine or desc.stateMachines[0].name
    if not any(m.name == machine for m in desc.stateMachines):
        print(f"error: no state machine named {machine!r}", file=sys.stderr)
        return 1

    impls = []
    if args.service_impls:
        try:
            impls = catalog_from_json(json.loads(_read(args.service_impls)))
            problems = validate_catalog(impls)
            if problems:
                for problem in problems:
                    print(f"error: {problem}", file=sys.stderr)
                return 1
        except (OSError, ValueError, ServiceConfigError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    script = []
    if args.inject:
        try:
            script = _load_inject_script(args.inject)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1

    bindings = []
    for entry in args.bind or []:
        source, _, subscriber = entry.partition(":")
        bindings.append(Binding(source=source, subscriber=subscriber or None))

    job = Job(
        description=desc,
        stateMachineName=machine,
        serviceImplementations=tuple(impls),
        instanceData=json.loads(args.data) if args.data else {},
        bindings=tuple(bindings),
    )
    node = RuntimeNode("local", {})
    transport = LocalTransport(EventBus())
    emitter = JsonlEmitter(args.metrics_out) if args.metrics_out else NullEmitter()
    host = RuntimeHost(node, transport, store=InMemoryStore(), metrics=emitter)
    try:
        instances = host.start_job(job)
    except JobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        emitter.close()
        return 1
    try:
        started = time.monotonic()
        for entry in script:
            at = float(entry.get("at", 0.0))
            delay = started + at - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            try:
                transport.inject(entry["name"], entry.get("data", {}), entry.get("target"))
            except UnknownTargetError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return 1
        deadline = None if args.max_seconds is None else started + args.max_seconds
        while True:
            cores = [host.core(i) for i in instances]
            if all(c is None or not c.alive for c in cores):
                break
            if deadline is not None and time.monotonic() >= deadline:
                break
            time.sleep(0.02)
        if script and args.settle_seconds > 0:
            time.sleep(args.settle_seconds)
    finally:
        host.stop()
        emitter.close()
    summary = {}
    for instance in instances:
        core = host.core(instance)
        if core is None:
            continue
        summary[instance] = {
            "state": core.state_name,
            "terminated": core.terminated,
            "failed": core.failed,
            "error": core.error,
            "steps": core.steps,
            "eventsHandled": core.events_handled,
            "stateEntries": dict(core.state_entries),
        }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 1 if any(s["failed"] for s in summary.values()) else 0


def cmd_submit(args) -> int:
    try:
        job = load_job(args.path)
    except (OSError, JobError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    client = CoordinatorClient(*args.coordinator, timeout=args.timeout)
    try:
        receipt = client.submit(job.to_json())
    except NoEligibleRuntimeError as exc:
        print(f"error: no eligible runtime: {exc}", file=sys.stderr)
        return 1
    except ValidationFailedError as exc:
        for message in exc.messages:
            print(f"error: {message}", file=sys.stderr)
        return 1
    except (PlacementError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        client.close()
    print(json.dumps(receipt, indent=2, sort_keys=True))
    return 0


def _serve_forever(name: str, address: tuple[str, int], stop) -> int:
    print(f"{name} listening on {address[0]}:{address[1]}", flush=True)
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()
    stop()
    return 0


def cmd_coordinator(args) -> int:
    server = CoordinatorServer(args.host, args.port).start()
    return _serve_forever("coordinator", server.address, server.stop)


def cmd_broker(args) -> int:
    server = BrokerServer(args.host, args.port, latency_ms=args.latency_ms).start()

    def stop():
        server.shutdown()
        server.server_close()

    return _serve_forever("broker", server.address, stop)


def cmd_store(args) -> int:
    server = StoreServer(args.host, args.port).start()

    def stop():
        server.shutdown()
        server.server_close()

    return _serve_forever("store", server.address, stop)


def cmd_runtime(args) -> int:
    # handlers go in before the node becomes visible to the coordinator,
    # so a supervisor that signals right after registration is not racing
    # the default disposition
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    node = RuntimeNode(args.node_id, dict(args.attributes or []))
    store = None
    if args.store == "memory":
        store = InMemoryStore()
    elif args.store is not None:
        host_name, port = _host_port(args.store)
        store = RemoteStore(host_name, port, inject_latency_ms=args.inject_latency_ms)
    emitter = JsonlEmitter(args.metrics_out) if args.metrics_out else NullEmitter()
    transport = BrokerTransport(*args.broker)
    host = RuntimeHost(
        node,
        transport,
        store=store,
        metrics=emitter,
        inject_latency_ms=args.inject_latency_ms,
        invoke_timeout=args.invoke_timeout,
    )
    host.start_sampler(interval=args.queue_sample_seconds)
    link = CoordinatorLink(*args.coordinator, runtime_host=host).start()
    endpoint = EventEndpoint(transport, port=args.events_port).start()
    print(
        f"runtime {node.id} up: coordinator {args.coordinator[0]}:{args.coordinator[1]}, "
        f"events http://{endpoint.address[0]}:{endpoint.address[1]}/events",
        flush=True,
    )
    while not done.is_set():
        if link.closed.is_set():
            print("coordinator connection lost, shutting down", file=sys.stderr)
            break
        done.wait(0.2)
    endpoint.stop()
    host.stop()
    link.close()
    emitter.close()
    return 0


def cmd_bench_railway(args) -> int:
    if args.config:
        cfg = BenchConfig.from_json(json.loads(_read(args.config)))
    else:
        cfg = BenchConfig()
    if args.configuration and args.configuration != "both":
        cfg = BenchConfig.from_json({**cfg.to_json(), "configuration": args.configuration})

    def show(report) -> None:
        print(f"configuration {report.config.configuration}: peak {report.peak_throughput:.1f} events/s")
        for w in report.windows:
            print(
                f"  window {w.index}: rate {w.rate:g}/s"
                f"  injected {w.injected}  handled {w.handled}  r={w.ratio:.3f}"
                f"  p50 {w.responseTimeMsP50 if w.responseTimeMsP50 is None else round(w.responseTimeMsP50, 2)}ms"
            )

    if args.configuration == "both":
        comparison = run_railway_comparison(cfg, args.out, quiet=args.quiet)
        show(comparison.local)
        show(comparison.remote)
        print(f"peak throughput ratio localLocal/remotePersistent: {comparison.peak_ratio:.2f}")
        print(f"latency ordering holds in every window: {comparison.latency_ordering_ok()}")
    else:
        report = run_railway_bench(cfg, args.out, quiet=args.quiet)
        show(report)
    print(f"reports written under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csm", description="collaborative state machine runtime")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a description file")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute a description in-process")
    p.add_argument("path")
    p.add_argument("--machine", help="state machine name (default: first in the file)")
    p.add_argument("--service-impls", help="JSON file with a service implementation list")
    p.add_argument("--inject", help="JSON file with scripted events [{at, name, data, target}]")
    p.add_argument("--data", help="instance data overrides as a JSON object")
    p.add_argument("--bind", action="append", metavar="SOURCE[:SUBSCRIBER]", help="event binding, repeatable")
    p.add_argument("--max-seconds", type=float, default=None)
    p.add_argument("--settle-seconds", type=float, default=0.5)
    p.add_argument("--metrics-out", help="append metrics records to this JSONL file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("submit", help="send a job file to a coordinator")
    p.add_argument("path")
    p.add_argument("--coordinator", type=_host_port, required=True)
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("runtime", help="host machine instances")
    p.add_argument("--node-id", required=True)
    p.add_argument("--attributes", type=_attribute, action="append", metavar="KEY=VALUE")
    p.add_argument("--coordinator", type=_host_port, required=True)
    p.add_argument("--broker", type=_host_port, required=True)
    p.add_argument("--store", help="host:port of a store server, or 'memory'")
    p.add_argument("--inject-latency-ms", type=float, default=0.0)
    p.add_argument("--invoke-timeout", type=float, default=30.0)
    p.add_argument("--metrics-out", help="append metrics records to this JSONL file")
    p.add_argument("--events-port", type=int, default=0, help="HTTP port for peripheral events (default: ephemeral)")
    p.add_argument("--queue-sample-seconds", type=float, default=0.5)
    p.set_defaults(func=cmd_runtime)

    p = sub.add_parser("coordinator", help="serve the placement coordinator")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7700)
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("broker", help="serve the event broker")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7701)
    p.add_argument("--latency-ms", type=float, default=0.0)
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("store", help="serve the persistent store")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7702)
    p.set_defaults(func=cmd_store)

    p = sub.add_parser("bench-railway", help="railway-crossing benchmark")
    p.add_argument("--config", help="JSON file with benchmark settings")
    p.add_argument(
        "--configuration",
        choices=["both", "localLocal", "remotePersistent"],
        default="both",
    )
    p.add_argument("--out", default="bench-out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_bench_railway)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
