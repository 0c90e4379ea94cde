#!/usr/bin/env python3
"""Run the desk-scale railway benchmark and print the comparison table.

Both configurations run the same schedule on this host: two runtime
processes, one shared stub service server, 10 ms injected latency on every
remote service call and store operation. The local configuration should
hold r = T/N at 1.0 through the top scheduled rate while the remote one
saturates early; expect a peak-throughput ratio well above 5.
"""

import argparse
import json
import sys

from csm.bench import BenchConfig, run_railway_comparison


def parse_schedule(text: str):
    # "10x50,10x100,10x200" -> ((10,50),(10,100),(10,200))
    windows = []
    for chunk in text.split(","):
        duration, _, rate = chunk.partition("x")
        windows.append((float(duration), float(rate)))
    return tuple(windows)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="bench-out", help="directory for reports")
    parser.add_argument(
        "--schedule",
        type=parse_schedule,
        default=((10.0, 50.0), (10.0, 100.0), (10.0, 200.0)),
        help="windows as DURxRATE,... (seconds x events/s per controller)",
    )
    parser.add_argument("--latency-ms", type=float, default=10.0)
    parser.add_argument("--runtimes", type=int, default=2)
    parser.add_argument("--instances", type=int, default=2)
    args = parser.parse_args(argv)

    config = BenchConfig(
        eventRateSchedule=args.schedule,
        injectedLatencyMs=args.latency_ms,
        runtimeCount=args.runtimes,
        instanceCount=args.instances,
    )
    comparison = run_railway_comparison(config, args.out)

    header = f"{'':>18} " + " ".join(f"{'w' + str(w.index):>10}" for w in comparison.local.windows)
    print()
    print(header)
    for label, report in (("localLocal", comparison.local), ("remotePersistent", comparison.remote)):
        print(f"{label:>18} " + " ".join(f"{w.ratio:>10.3f}" for w in report.windows) + "   (r = T/N)")
        print(
            f"{'':>18} "
            + " ".join(
                f"{w.responseTimeMsP50:>8.1f}ms" if w.responseTimeMsP50 is not None else f"{'-':>10}"
                for w in report.windows
            )
            + "   (p50 response)"
        )
    print()
    print(f"peak throughput: local {comparison.local.peak_throughput:.1f} ev/s, "
          f"remote {comparison.remote.peak_throughput:.1f} ev/s, "
          f"ratio {comparison.peak_ratio:.2f}")
    print(f"latency ordering holds in every window: {comparison.latency_ordering_ok()}")
    print(f"reports: {args.out}/comparison.json and per-configuration JSON/CSV")
    return 0


if __name__ == "__main__":
    sys.exit(main())
