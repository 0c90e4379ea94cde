#!/usr/bin/env python3
"""Two runtime processes, one coordinator: placement and cross-runtime events.

Starts the coordinator, broker, and store in this process, spawns two
runtime processes, and submits three single-machine jobs; the least-loaded
rule places them A, B, A. A listener job bound to a speaker on the other
node shows an external event crossing runtimes: the speaker raises "kick"
on entry and the listener transitions on it.
"""

import json
import signal
import subprocess
import sys
import tempfile
import time

from csm.broker import BrokerServer
from csm.coordinator import CoordinatorClient, CoordinatorServer
from csm.data import StoreServer
from csm.parsing import parse_description
from csm.runtime import Binding, Job


def description(name, machine, states):
    return parse_description(
        json.dumps({"name": name, "memoryMode": "distributed", "stateMachines": [{"name": machine, "states": states}]})
    )


IDLE = [{"name": "idle", "initial": True}]
SPEAKER = [
    {
        "name": "start",
        "initial": True,
        "entry": [{"type": "raiseEvent", "event": {"name": "kick", "channel": "external"}}],
    }
]
LISTENER = [
    {"name": "waiting", "initial": True, "on": [{"target": "done", "event": "kick"}]},
    {"name": "done", "terminal": True},
]


def spawn_runtime(node_id, coordinator, broker, store, workdir):
    return subprocess.Popen(
        [
            sys.executable, "-m", "csm.cli", "runtime",
            "--node-id", node_id,
            "--coordinator", f"{coordinator.address[0]}:{coordinator.address[1]}",
            "--broker", f"{broker.address[0]}:{broker.address[1]}",
            "--store", f"{store.address[0]}:{store.address[1]}",
            "--metrics-out", f"{workdir}/{node_id}.jsonl",
        ],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.STDOUT,
    )


def main() -> int:
    coordinator = CoordinatorServer().start()
    broker = BrokerServer().start()
    store = StoreServer().start()
    workdir = tempfile.mkdtemp(prefix="csm-demo-")
    procs = []
    client = None
    try:
        procs = [spawn_runtime(n, coordinator, broker, store, workdir) for n in ("A", "B")]
        client = CoordinatorClient(*coordinator.address)
        deadline = time.monotonic() + 10
        while len(client.counts()) < 2:
            if time.monotonic() > deadline:
                raise RuntimeError("runtimes did not register")
            time.sleep(0.05)
        print(f"runtimes registered: {sorted(client.counts())}")

        placed = []
        for i in range(3):
            job = Job(description(f"app{i}", f"m{i}", IDLE), f"m{i}")
            placed.append(client.submit(job.to_json())["nodeId"])
        print(f"three idle jobs placed on: {placed}  (least-loaded, ties to smallest id)")

        # listener first so its subscription exists before the speaker starts
        listener = Job(description("hear", "listener", LISTENER), "listener", bindings=(Binding(source="speaker"),))
        listener_node = client.submit(listener.to_json())["nodeId"]
        speaker = Job(description("talk", "speaker", SPEAKER), "speaker")
        speaker_node = client.submit(speaker.to_json())["nodeId"]
        print(f"listener on {listener_node}, speaker on {speaker_node}")

        deadline = time.monotonic() + 10
        while client.counts().get(listener_node, 0) > (3 - placed.count(listener_node)) + 1:
            # the listener terminates once the kick arrives, freeing its slot
            if time.monotonic() > deadline:
                print("listener did not terminate; event delivery failed")
                return 1
            time.sleep(0.05)
        print("listener heard the speaker's kick across runtimes and terminated")
        return 0
    finally:
        for proc in procs:
            if proc.poll() is None:
                proc.send_signal(signal.SIGTERM)
        for proc in procs:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
        if client is not None:
            client.close()
        store.shutdown()
        store.server_close()
        broker.shutdown()
        broker.server_close()
        coordinator.stop()


if __name__ == "__main__":
    sys.exit(main())
