#!/usr/bin/env python3
"""Drive one railway controller through full train cycles, in process.

A scripted sensor sequence (seen / notSeen pairs) pushes the controller
around idle -> approaching -> crossing -> departing -> idle while the nested
gate and light machines react to the phase events and call their services.
Prints the per-state entry counts and the service hit counts at the end.
"""

import argparse
import sys
import time

from csm.events import EventBus
from csm.metrics import MemoryEmitter
from csm.railway import payload_string, railway_job
from csm.runtime import LocalTransport, RuntimeHost, RuntimeNode
from csm.services import StubServiceServer, stub_catalog


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--cycles", type=int, default=3, help="full train passes to simulate")
    parser.add_argument(
        "--configuration", choices=["localLocal", "remotePersistent"], default="localLocal"
    )
    parser.add_argument("--payload-bytes", type=int, default=64)
    args = parser.parse_args(argv)

    stub = StubServiceServer().start()
    host = RuntimeHost(
        RuntimeNode("demo", {}), LocalTransport(EventBus()), metrics=MemoryEmitter()
    )
    try:
        catalog = stub_catalog(stub, local=(args.configuration == "localLocal"))
        job = railway_job(0, args.configuration, payload_string(args.payload_bytes), catalog)
        host.start_job(job)
        controller = host.core("controller0")

        # one cycle = train shows up twice (approach, cross), then clears twice
        script = ["seen", "seen", "notSeen", "notSeen"] * args.cycles
        for name in script:
            host.transport.inject(name, {}, target="controller0")
        gate, light = host.core("controller0.gate"), host.core("controller0.light")
        settled = lambda: (
            controller.events_handled >= len(script)
            # each cycle raises one approaching and one leaving phase event
            and gate.events_handled >= 2 * args.cycles
            and light.events_handled >= 2 * args.cycles
        )
        deadline = time.monotonic() + 10
        while not settled() and time.monotonic() < deadline:
            time.sleep(0.01)

        print(f"configuration: {args.configuration}")
        print(f"sensor events: {len(script)}, handled: {controller.events_handled}")
        print(f"controller state entries: {controller.state_entries}")
        print(f"gate state entries: {host.core('controller0.gate').state_entries}")
        print(f"light state entries: {host.core('controller0.light').state_entries}")
        print(f"service calls: {stub.counts()}")
        cycles_completed = controller.state_entries.get("idle", 1) - 1
        print(f"full cycles completed: {cycles_completed}")
        return 0 if cycles_completed == args.cycles else 1
    finally:
        host.stop()
        stub.stop()


if __name__ == "__main__":
    sys.exit(main())
