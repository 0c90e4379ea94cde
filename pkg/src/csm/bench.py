"""Railway-crossing benchmark: orchestration, injection, and reporting.

The harness owns the shared infrastructure (coordinator, broker, store, stub
services), spawns one runtime process per node, submits one controller job
per instance, then drives seen / notSeen events at the scheduled rates, one
injection thread per controller. Reports are built from the runtimes'
metrics streams: per-window throughput T against generated events N, the
ratio r = T/N, response-time percentiles, and invoke / write latency medians
split by locality.

Desk scale on purpose: windows are seconds, not the five-minute originals,
and the whole run fits in a couple of minutes on one host.
"""

from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

from .broker import BrokerClient, BrokerServer
from .coordinator import CoordinatorClient, CoordinatorServer
from .data import StoreServer
from .metrics import read_jsonl
from .railway import CONFIGURATIONS, SENSOR_EVENTS, payload_string, railway_job
from .services import StubServiceServer, stub_catalog

DEFAULT_SCHEDULE = ((10.0, 50.0), (10.0, 100.0), (10.0, 200.0))


class BenchSetupError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    eventRateSchedule: tuple[tuple[float, float], ...] = DEFAULT_SCHEDULE
    configuration: str = "localLocal"
    injectedLatencyMs: float = 10.0
    payloadSizes: tuple[int, ...] = (64, 1024, 16384)
    runtimeCount: int = 2
    instanceCount: int = 2
    invocationsPerEvent: int = 2
    writesPerEvent: int = 1
    settleSeconds: float = 2.0

    def __post_init__(self):
        if not self.eventRateSchedule:
            raise ValueError("eventRateSchedule must be nonempty")
        for duration, rate in self.eventRateSchedule:
            if duration <= 0 or rate <= 0:
                raise ValueError("schedule durations and rates must be positive")
        if self.configuration not in CONFIGURATIONS:
            raise ValueError(f"unknown configuration {self.configuration!r}")
        if self.runtimeCount < 1 or self.instanceCount < 1:
            raise ValueError("runtimeCount and instanceCount must be at least 1")

    def to_json(self) -> dict:
        return {
            "eventRateSchedule": [[d, r] for d, r in self.eventRateSchedule],
            "configuration": self.configuration,
            "injectedLatencyMs": self.injectedLatencyMs,
            "payloadSizes": list(self.payloadSizes),
            "runtimeCount": self.runtimeCount,
            "instanceCount": self.instanceCount,
            "invocationsPerEvent": self.invocationsPerEvent,
            "writesPerEvent": self.writesPerEvent,
            "settleSeconds": self.settleSeconds,
        }

    @staticmethod
    def from_json(obj: dict) -> "BenchConfig":
        kw = dict(obj)
        if "eventRateSchedule" in kw:
            kw["eventRateSchedule"] = tuple((float(d), float(r)) for d, r in kw["eventRateSchedule"])
        if "payloadSizes" in kw:
            kw["payloadSizes"] = tuple(int(s) for s in kw["payloadSizes"])
        return BenchConfig(**kw)


def _percentile(values: Sequence[float], fraction: float) -> Optional[float]:
    if not values:
        return None
    ordered = sorted(values)
    index = min(len(ordered) - 1, max(0, round(fraction * (len(ordered) - 1))))
    return ordered[index]


def _median(values: Sequence[float]) -> Optional[float]:
    return _percentile(values, 0.5)


@dataclass
class BenchWindow:
    index: int
    start: float
    duration: float
    rate: float
    injected: int
    handled: int
    responseTimeMsP50: Optional[float]
    responseTimeMsP99: Optional[float]
    invokeLatencyMs: dict
    writeLatencyMs: dict
    queueDepths: dict

    @property
    def ratio(self) -> float:
        return self.handled / self.injected if self.injected else 0.0

    @property
    def throughput(self) -> float:
        return self.handled / self.duration

    def queue_growth_monotone(self, slack: int = 1) -> bool:
        """True when every controller's depth samples never drop by more
        than `slack` and end above where they began."""
        if not self.queueDepths:
            return False
        for samples in self.queueDepths.values():
            if len(samples) < 2 or samples[-1] <= samples[0]:
                return False
            if any(b < a - slack for a, b in zip(samples, samples[1:])):
                return False
        return True

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "start": self.start,
            "duration": self.duration,
            "rate": self.rate,
            "injected": self.injected,
            "handled": self.handled,
            "ratio": self.ratio,
            "throughput": self.throughput,
            "responseTimeMsP50": self.responseTimeMsP50,
            "responseTimeMsP99": self.responseTimeMsP99,
            "invokeLatencyMs": self.invokeLatencyMs,
            "writeLatencyMs": self.writeLatencyMs,
            "queueDepths": self.queueDepths,
        }


@dataclass
class BenchReport:
    config: BenchConfig
    startedAt: float
    controllers: list
    windows: list

    @property
    def peak_throughput(self) -> float:
        return max((w.throughput for w in self.windows), default=0.0)

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "startedAt": self.startedAt,
            "controllers": self.controllers,
            "peakThroughput": self.peak_throughput,
            "windows": [w.to_json() for w in self.windows],
        }

    def write_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(self.to_json(), fp, indent=2, sort_keys=True)
            fp.write("\n")

    CSV_HEADER = (
        "window,rate,injected,handled,ratio,throughput,"
        "response_p50_ms,response_p99_ms,invoke_local_ms,invoke_remote_ms,"
        "write_local_ms,write_persistent_ms,queue_depth_last"
    )

    def csv_rows(self) -> list[str]:
        rows = [self.CSV_HEADER]
        for w in self.windows:
            last_depth = sum(samples[-1] for samples in w.queueDepths.values() if samples)
            cells = [
                w.index,
                w.rate,
                w.injected,
                w.handled,
                round(w.ratio, 4),
                round(w.throughput, 2),
                w.responseTimeMsP50,
                w.responseTimeMsP99,
                w.invokeLatencyMs.get("local"),
                w.invokeLatencyMs.get("remote"),
                w.writeLatencyMs.get("local"),
                w.writeLatencyMs.get("persistent"),
                last_depth,
            ]
            rows.append(",".join("" if c is None else str(c) for c in cells))
        return rows

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            fp.write("\n".join(self.csv_rows()) + "\n")


def build_report(
    config: BenchConfig,
    started_at: float,
    controllers: Sequence[str],
    injections: Sequence[tuple[float, str, str]],
    records: Sequence[dict],
) -> BenchReport:
    """Aggregate metrics records into tiled windows.

    injections: (wall ts, controller id, event name) per injected event.
    records: merged MetricsRecord dicts from every runtime's stream.
    """
    controller_set = set(controllers)
    windows = []
    cursor = started_at
    for index, (duration, rate) in enumerate(config.eventRateSchedule):
        start, end = cursor, cursor + duration
        cursor = end
        injected = sum(1 for ts, _, _ in injections if start <= ts < end)
        response_ms = []
        invoke_by_loc: dict[str, list] = {"local": [], "remote": []}
        write_by_target: dict[str, list] = {"local": [], "persistent": []}
        depth_samples: dict[str, list] = {c: [] for c in controllers}
        handled = 0
        for rec in records:
            ts = rec.get("ts")
            if ts is None or not start <= ts < end:
                continue
            kind = rec.get("kind")
            if kind == "response-time":
                if rec.get("instance") in controller_set and rec.get("event") in SENSOR_EVENTS:
                    handled += 1
                    response_ms.append(rec["value"])
            elif kind == "invoke-latency":
                invoke_by_loc["local" if rec.get("local") else "remote"].append(rec["value"])
            elif kind == "write-latency":
                target = rec.get("target")
                if target in write_by_target:
                    write_by_target[target].append(rec["value"])
            elif kind == "queue-depth":
                if rec.get("instance") in controller_set:
                    depth_samples[rec["instance"]].append((ts, rec["value"]))
        for instance, samples in depth_samples.items():
            samples.sort()
            depth_samples[instance] = [depth for _, depth in samples]
        windows.append(
            BenchWindow(
                index=index,
                start=start,
                duration=duration,
                rate=rate,
                injected=injected,
                handled=handled,
                responseTimeMsP50=_percentile(response_ms, 0.5),
                responseTimeMsP99=_percentile(response_ms, 0.99),
                invokeLatencyMs={k: _median(v) for k, v in invoke_by_loc.items()},
                writeLatencyMs={k: _median(v) for k, v in write_by_target.items()},
                queueDepths=depth_samples,
            )
        )
    return BenchReport(config=config, startedAt=started_at, controllers=list(controllers), windows=windows)


class _Injector(threading.Thread):
    """Drives one controller at the scheduled rates.

    All injectors pace against one shared anchor, and the log carries the
    scheduled timestamp (anchor + offset), not the send time. Generated
    counts per window are then exact by construction; only handling may
    spill across a boundary."""

    def __init__(self, controller: str, config: BenchConfig, broker_address, anchor_mono: float, anchor_wall: float, log: list, log_lock: threading.Lock):
        super().__init__(name=f"inject-{controller}", daemon=True)
        self.controller = controller
        self.config = config
        self.broker_address = broker_address
        self.anchor_mono = anchor_mono
        self.anchor_wall = anchor_wall
        self.log = log
        self.log_lock = log_lock
        self.error: Optional[BaseException] = None

    def run(self):
        try:
            client = BrokerClient(*self.broker_address, on_deliver=lambda to, e: None)
            try:
                base = 0.0
                sequence = 0
                for duration, rate in self.config.eventRateSchedule:
                    count = round(duration * rate)
                    interval = duration / count
                    for k in range(count):
                        offset = base + k * interval
                        wait = self.anchor_mono + offset - time.monotonic()
                        if wait > 0:
                            time.sleep(wait)
                        name = SENSOR_EVENTS[sequence % 2]
                        sequence += 1
                        client.inject_nowait(name, {}, target=self.controller)
                        with self.log_lock:
                            self.log.append((self.anchor_wall + offset, self.controller, name))
                    base += duration
            finally:
                client.close()
        except BaseException as exc:
            self.error = exc


def _spawn_runtime(
    node_id: str,
    workdir: str,
    coordinator_addr,
    broker_addr,
    store_addr,
    inject_latency_ms: float,
    python: str,
) -> tuple[subprocess.Popen, str]:
    metrics_path = os.path.join(workdir, f"{node_id}-metrics.jsonl")
    log_path = os.path.join(workdir, f"{node_id}.log")
    argv = [
        python,
        "-m",
        "csm.cli",
        "runtime",
        "--node-id",
        node_id,
        "--coordinator",
        f"{coordinator_addr[0]}:{coordinator_addr[1]}",
        "--broker",
        f"{broker_addr[0]}:{broker_addr[1]}",
        "--store",
        f"{store_addr[0]}:{store_addr[1]}",
        "--inject-latency-ms",
        str(inject_latency_ms),
        "--metrics-out",
        metrics_path,
    ]
    log_fp = open(log_path, "w", encoding="utf-8")
    proc = subprocess.Popen(argv, stdout=log_fp, stderr=subprocess.STDOUT)
    return proc, metrics_path


def run_railway_bench(config: BenchConfig, workdir: str, *, python: str = sys.executable, quiet: bool = False) -> BenchReport:
    os.makedirs(workdir, exist_ok=True)

    def say(message: str) -> None:
        if not quiet:
            print(message, flush=True)

    coordinator = CoordinatorServer().start()
    broker = BrokerServer().start()
    store = StoreServer().start()
    stub = StubServiceServer().start()
    procs: list[subprocess.Popen] = []
    metrics_paths: list[str] = []
    client: Optional[CoordinatorClient] = None
    try:
        say(f"[bench] {config.configuration}: starting {config.runtimeCount} runtimes")
        for i in range(config.runtimeCount):
            proc, metrics_path = _spawn_runtime(
                f"r{i}", workdir, coordinator.address, broker.address, store.address,
                config.injectedLatencyMs, python,
            )
            procs.append(proc)
            metrics_paths.append(metrics_path)
        client = CoordinatorClient(*coordinator.address)
        deadline = time.monotonic() + 15
        while len(client.counts()) < config.runtimeCount:
            for proc in procs:
                if proc.poll() is not None:
                    raise BenchSetupError(f"runtime exited early with code {proc.returncode}; see {workdir}")
            if time.monotonic() > deadline:
                raise BenchSetupError("runtimes did not register with the coordinator in time")
            time.sleep(0.05)

        catalog = stub_catalog(stub, local=(config.configuration == "localLocal"))
        controllers = []
        for i in range(config.instanceCount):
            payload = payload_string(config.payloadSizes[i % len(config.payloadSizes)])
            job = railway_job(
                i,
                config.configuration,
                payload,
                catalog,
                invocations=config.invocationsPerEvent,
                writes=config.writesPerEvent,
            )
            receipt = client.submit(job.to_json())
            controllers.append(f"controller{i}")
            say(f"[bench] controller{i} placed on {receipt['nodeId']}")

        injections: list = []
        log_lock = threading.Lock()
        # half-second lead so every injector is running before the first slot
        anchor_mono = time.monotonic() + 0.5
        anchor_wall = time.time() + 0.5
        injectors = [
            _Injector(controller, config, broker.address, anchor_mono, anchor_wall, injections, log_lock)
            for controller in controllers
        ]
        for injector in injectors:
            injector.start()
        started_at = anchor_wall
        total = sum(d for d, _ in config.eventRateSchedule)
        say(f"[bench] injecting for {total:.0f}s over {len(config.eventRateSchedule)} windows")
        for injector in injectors:
            injector.join(timeout=total + 60)
        for injector in injectors:
            if injector.error is not None:
                raise BenchSetupError(f"injector for {injector.controller} failed: {injector.error}")
        time.sleep(config.settleSeconds)
    finally:
        for proc in procs:
            if proc.poll() is None:
                proc.send_signal(signal.SIGTERM)
        for proc in procs:
            try:
                proc.wait(timeout=15)
            except subprocess.TimeoutExpired:
                proc.kill()
        if client is not None:
            client.close()
        stub.stop()
        store.shutdown()
        store.server_close()
        broker.shutdown()
        broker.server_close()
        coordinator.stop()

    records: list[dict] = []
    for path in metrics_paths:
        if os.path.exists(path):
            records.extend(read_jsonl(path))
    report = build_report(config, started_at, controllers, injections, records)
    report.write_json(os.path.join(workdir, f"report-{config.configuration}.json"))
    report.write_csv(os.path.join(workdir, f"report-{config.configuration}.csv"))
    return report


@dataclass
class ComparisonReport:
    local: BenchReport
    remote: BenchReport

    @property
    def peak_ratio(self) -> float:
        remote_peak = self.remote.peak_throughput
        return self.local.peak_throughput / remote_peak if remote_peak else float("inf")

    def latency_ordering_ok(self) -> bool:
        """invoke(local) < invoke(remote) and write(local) < write(persistent)
        must hold window by window."""
        for local_w, remote_w in zip(self.local.windows, self.remote.windows):
            invoke_local = local_w.invokeLatencyMs.get("local")
            invoke_remote = remote_w.invokeLatencyMs.get("remote")
            write_local = local_w.writeLatencyMs.get("local")
            write_remote = remote_w.writeLatencyMs.get("persistent")
            if None in (invoke_local, invoke_remote, write_local, write_remote):
                return False
            if not (invoke_local < invoke_remote and write_local < write_remote):
                return False
        return True

    def to_json(self) -> dict:
        return {
            "peakRatio": self.peak_ratio,
            "latencyOrderingOk": self.latency_ordering_ok(),
            "localLocal": self.local.to_json(),
            "remotePersistent": self.remote.to_json(),
        }

    def write_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(self.to_json(), fp, indent=2, sort_keys=True)
            fp.write("\n")


def run_railway_comparison(base: BenchConfig, workdir: str, *, python: str = sys.executable, quiet: bool = False) -> ComparisonReport:
    """Run both configurations with the same schedule and compare."""
    local_cfg = BenchConfig.from_json({**base.to_json(), "configuration": "localLocal"})
    remote_cfg = BenchConfig.from_json({**base.to_json(), "configuration": "remotePersistent"})
    local = run_railway_bench(local_cfg, os.path.join(workdir, "localLocal"), python=python, quiet=quiet)
    remote = run_railway_bench(remote_cfg, os.path.join(workdir, "remotePersistent"), python=python, quiet=quiet)
    comparison = ComparisonReport(local=local, remote=remote)
    comparison.write_json(os.path.join(workdir, "comparison.json"))
    return comparison
