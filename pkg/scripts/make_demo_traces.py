#!/usr/bin/env python3
"""Generate a small synthetic telemetry set for trying out the CLI.

Produces power/proc/pidmap/jobs traces for a two-node toy cluster where
an external wattmeter reads 1.35x the software meters plus a 55 W
chassis baseline, so the calibrate subcommand has something real to
find.  Files land in --out (default: demo/).
"""

from __future__ import annotations

import argparse
import json
import random
from pathlib import Path

NODES = ("n1", "n2")
SPAN_S = 1800.0
TICK_S = 5.0
EXT_SCALE = 1.35
EXT_BASELINE_W = 55.0
GPU_MEM_MIB = 16384.0

JOBS = [
    # job, user, node, start, end, status, pids, gpu index or None
    (101, "alice", "n1", 0.0, 1500.0, "COMPLETED", [4101, 4102], 0),
    (102, "bob", "n1", 120.0, 1800.0, "TIMEOUT", [4201], 1),
    (103, "carol", "n2", 0.0, 900.0, "FAILED", [4301, 4302], 0),
    (104, "alice", "n2", 600.0, 1700.0, "CANCELLED", [4401], None),
]


def dump(path: Path, objs) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
    print(f"wrote {path}")


def walk(rng: random.Random, base: float, jitter: float, floor: float = 0.0):
    w = base
    while True:
        yield max(floor, w)
        w += rng.uniform(-jitter, jitter)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo", help="output directory")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()
    rng = random.Random(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ticks = [round(t * TICK_S, 3) for t in range(int(SPAN_S / TICK_S) + 1)]
    active = {
        job: [t for t in ticks if start <= t <= end]
        for (job, _, _, start, end, _, _, _) in JOBS
    }

    power = []
    external = []
    for node in NODES:
        cpu = walk(rng, 180.0, 12.0, floor=60.0)
        gpus = [walk(rng, 150.0, 20.0, floor=30.0) for _ in range(2)]
        for t in ticks:
            cpu_w = next(cpu)
            gpu_w = [next(g) for g in gpus]
            power.append({"node": node, "src": "cpu0", "ts": t, "w": round(cpu_w, 2)})
            for i, w in enumerate(gpu_w):
                power.append({"node": node, "src": f"gpu{i}", "ts": t, "w": round(w, 2)})
            # the wall meter sees everything, software meters do not
            total = cpu_w + sum(gpu_w)
            ext = EXT_SCALE * total + EXT_BASELINE_W + rng.uniform(-8.0, 8.0)
            external.append({"node": node, "src": "ext", "ts": t, "w": round(ext, 2)})
    dump(out / "power.jsonl", power)
    dump(out / "external.jsonl", external)

    procs = []
    cpu_clock = {}
    for (job, _, node, _, _, _, pids, gpu) in JOBS:
        for pid in pids:
            cpu_clock[pid] = 0.0
    for t in ticks:
        for (job, _, node, _, _, _, pids, gpu) in JOBS:
            if t not in set(active[job]):
                continue
            for pid in pids:
                cpu_clock[pid] += rng.uniform(0.5, TICK_S)
                rec = {"node": node, "ts": t, "pid": pid, "cpu_s": round(cpu_clock[pid], 3)}
                if gpu is not None:
                    rec["gpu"] = gpu
                    rec["sm_pct"] = round(rng.uniform(20.0, 95.0), 1)
                    rec["mem_mib"] = round(rng.uniform(2000.0, 12000.0), 1)
                procs.append(rec)
    dump(out / "proc.jsonl", procs)

    pidmap = []
    for t in ticks[::6]:  # ownership snapshots every 30 s
        per_node = {node: [] for node in NODES}
        for (job, _, node, _, _, _, pids, _) in JOBS:
            if t in set(active[job]):
                per_node[node].extend([pid, job] for pid in pids)
        for node, mapping in per_node.items():
            pidmap.append({"node": node, "ts": t, "map": mapping})
    dump(out / "pidmap.jsonl", pidmap)

    dump(
        out / "jobs.jsonl",
        [
            {"job": job, "user": user, "node": node, "submit": max(0.0, start - 60.0),
             "start": start, "end": end, "status": status}
            for (job, user, node, start, end, status, _, _) in JOBS
        ],
    )

    (out / "capacities.json").write_text(
        json.dumps({node: {"0": GPU_MEM_MIB, "1": GPU_MEM_MIB} for node in NODES}, indent=2) + "\n",
        encoding="utf-8",
    )
    print(f"wrote {out / 'capacities.json'}")


if __name__ == "__main__":
    main()
