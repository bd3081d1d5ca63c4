"""Reports over attributed energy: status/user breakdowns and GPU histograms.

Energy sums accumulate as joules and convert to kWh once at the end, so
row totals equal the sum of their inputs without per-row rounding drift.
Percentage shares are computed on one selectable energy column (external
by default, since that is what the machine room pays for).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .attribution import J_PER_KWH, JobEnergy
from .errors import MissingCapacity, UnknownJob
from .jobs import KNOWN_STATUSES, JobRecord
from .traces import ProcSnapshot

SHARE_COLUMNS = ("ext", "gpu", "cpu")

SM_PCT = "sm_pct"
MEM_PCT = "mem_pct"

DEFAULT_BINS = 20


@dataclass(frozen=True)
class BreakdownRow:
    key: str  # a status or a user name
    n_jobs: int
    gpu_kwh: float
    cpu_kwh: float
    ext_kwh: float
    share_pct: float  # exact share of the selected column, unrounded


@dataclass(frozen=True)
class BreakdownReport:
    key_label: str  # "status" | "user"
    column: str  # which energy column shares were computed on
    rows: tuple[BreakdownRow, ...]


@dataclass(frozen=True)
class UtilizationHistogram:
    metric: str  # "sm_pct" | "mem_pct"
    bin_edges: tuple[float, ...]  # n_bins + 1 edges spanning [0, 100]
    counts: tuple[int, ...]
    n_samples: int  # included samples; equals sum(counts)
    excluded: int  # GPU samples lacking the metric


def _select_column(gpu: float, cpu: float, ext: float, column: str) -> float:
    if column == "ext":
        return ext
    if column == "gpu":
        return gpu
    if column == "cpu":
        return cpu
    raise ValueError(f"unknown share column {column!r}")


def _group_rows(
    jobs: Sequence[JobRecord],
    energies: Mapping[int, JobEnergy],
    key_of: Callable[[JobRecord], str],
    column: str,
) -> list[BreakdownRow]:
    by_id = {j.job_id: j for j in jobs}
    for job_id in energies:
        if job_id not in by_id:
            raise UnknownJob(job_id)

    groups: dict[str, list[JobRecord]] = {}
    for job in jobs:
        groups.setdefault(key_of(job), []).append(job)

    sums: dict[str, tuple[float, float, float]] = {}
    for key, members in groups.items():
        gpu_j = cpu_j = ext_j = 0.0
        # accumulate in ascending job id order so sums are reproducible
        for job in sorted(members, key=lambda j: j.job_id):
            energy = energies.get(job.job_id)
            if energy is None:
                continue
            gpu_j += energy.gpu_kwh * J_PER_KWH
            cpu_j += energy.cpu_kwh * J_PER_KWH
            if energy.ext_kwh is not None:
                ext_j += energy.ext_kwh * J_PER_KWH
        sums[key] = (gpu_j, cpu_j, ext_j)

    total = sum(
        _select_column(*sums[key], column) for key in sorted(sums)
    )
    rows = []
    for key in sorted(sums):
        gpu_j, cpu_j, ext_j = sums[key]
        selected = _select_column(gpu_j, cpu_j, ext_j, column)
        share = 100.0 * selected / total if total > 0 else 0.0
        rows.append(
            BreakdownRow(
                key=key,
                n_jobs=len(groups[key]),
                gpu_kwh=gpu_j / J_PER_KWH,
                cpu_kwh=cpu_j / J_PER_KWH,
                ext_kwh=ext_j / J_PER_KWH,
                share_pct=share,
            )
        )
    return rows


def _status_sort_key(status: str) -> tuple[int, str]:
    if status in KNOWN_STATUSES:
        return (KNOWN_STATUSES.index(status), "")
    return (len(KNOWN_STATUSES), status)


def aggregate_by_status(
    jobs: Sequence[JobRecord],
    energies: Mapping[int, JobEnergy],
    column: str = "ext",
) -> BreakdownReport:
    """Energy broken down by final job status.

    n_jobs counts every job record in the group, including jobs with no
    integrated energy.  Rows follow the canonical status order, then any
    raw scheduler states alphabetically.

    Raises:
        UnknownJob: energies contains a job id with no record (this
            includes the UNATTRIBUTED pseudo-job; filter it out first).
    """
    if column not in SHARE_COLUMNS:
        raise ValueError(f"unknown share column {column!r}")
    rows = _group_rows(jobs, energies, lambda j: j.status, column)
    rows.sort(key=lambda r: _status_sort_key(r.key))
    return BreakdownReport("status", column, tuple(rows))


def aggregate_by_user(
    jobs: Sequence[JobRecord],
    energies: Mapping[int, JobEnergy],
    column: str = "ext",
) -> BreakdownReport:
    """Energy broken down by job owner, heaviest consumer first.

    Rows sort by the selected energy column descending (user name breaks
    ties), so the top of the report answers "who spends the most".
    """
    if column not in SHARE_COLUMNS:
        raise ValueError(f"unknown share column {column!r}")
    rows = _group_rows(jobs, energies, lambda j: j.user, column)
    rows.sort(key=lambda r: (-_select_column(r.gpu_kwh, r.cpu_kwh, r.ext_kwh, column), r.key))
    return BreakdownReport("user", column, tuple(rows))


def gpu_histogram(
    procs: Sequence[ProcSnapshot],
    metric: str = SM_PCT,
    n_bins: int = DEFAULT_BINS,
    gpu_mem_capacity_mib: Mapping[tuple[str, int], float] | None = None,
    job_of: Callable[[str, int, float], int | None] | None = None,
) -> UtilizationHistogram:
    """Histogram GPU utilization over all GPU-attached process samples.

    Bins are equal-width over [0, 100]; every bin is half-open except the
    last, which is closed so a reading of exactly 100 lands in it.  For
    MEM_PCT a sample normalizes as 100 * mem_mib / capacity of its
    (node, gpu); readings above capacity clamp to 100.  GPU samples
    missing the metric are not binned but counted in `excluded`.

    When job_of is given, samples are grouped by job (samples whose pid
    maps to no job stay separate per pid) and the per-group mean is
    binned instead of each raw sample.

    Raises:
        MissingCapacity: MEM_PCT needs a capacity the map does not have.
        ValueError: invalid metric, n_bins < 1, or non-positive capacity.
    """
    if metric not in (SM_PCT, MEM_PCT):
        raise ValueError(f"unknown metric {metric!r}")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")

    values: list[float] = []
    keyed: dict[object, list[float]] = {}
    excluded = 0
    for snap in procs:
        if snap.gpu_index is None:
            continue
        if metric == SM_PCT:
            raw = snap.gpu_sm_pct
            if raw is None:
                excluded += 1
                continue
            value = raw
        else:
            if snap.gpu_mem_mib is None:
                excluded += 1
                continue
            capacity = (gpu_mem_capacity_mib or {}).get((snap.node_id, snap.gpu_index))
            if capacity is None:
                raise MissingCapacity(snap.gpu_index, snap.node_id)
            if capacity <= 0:
                raise ValueError(f"capacity for ({snap.node_id}, {snap.gpu_index}) must be positive")
            value = min(100.0, 100.0 * snap.gpu_mem_mib / capacity)
        if job_of is None:
            values.append(value)
        else:
            owner = job_of(snap.node_id, snap.pid, snap.ts)
            key: object = owner if owner is not None else ("pid", snap.node_id, snap.pid)
            keyed.setdefault(key, []).append(value)

    if job_of is not None:
        values = [sum(vs) / len(vs) for _, vs in sorted(keyed.items(), key=lambda kv: repr(kv[0]))]

    edges = [100.0 * i / n_bins for i in range(n_bins + 1)]
    counts = [0] * n_bins
    for value in values:
        if value >= edges[-1]:
            idx = n_bins - 1  # final bin is right-closed
        else:
            idx = 0
            while idx + 1 < n_bins and value >= edges[idx + 1]:
                idx += 1
        counts[idx] += 1
    return UtilizationHistogram(metric, tuple(edges), tuple(counts), len(values), excluded)


def _fmt_kwh(value: float) -> str:
    return format(value, ".6g")


def _breakdown_cells(report: BreakdownReport) -> tuple[list[str], list[list[str]]]:
    header = [
        report.key_label,
        "n_jobs",
        "gpu_kwh",
        "cpu_kwh",
        "ext_kwh",
        f"{report.column}_share_pct",
    ]
    rows = [
        [
            r.key,
            str(r.n_jobs),
            _fmt_kwh(r.gpu_kwh),
            _fmt_kwh(r.cpu_kwh),
            _fmt_kwh(r.ext_kwh),
            str(round(r.share_pct)),
        ]
        for r in report.rows
    ]
    return header, rows


def _render_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(cell) for cell in col) for col in zip(header, *rows)] if rows else [len(h) for h in header]
    lines = []
    for cells in [header] + rows:
        padded = [cells[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        lines.append("  ".join(padded).rstrip())
    return "\n".join(lines) + "\n"


def _render_csv(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def render_report(report: BreakdownReport | UtilizationHistogram, fmt: str = "text") -> str:
    """Render a report deterministically as text, csv or json.

    csv and text round the share column to whole percent for reading;
    json carries exact values for downstream tooling.
    """
    if fmt not in ("text", "csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")

    if isinstance(report, UtilizationHistogram):
        if fmt == "json":
            obj = {
                "metric": report.metric,
                "edges": list(report.bin_edges),
                "counts": list(report.counts),
                "n": report.n_samples,
                "excluded": report.excluded,
            }
            return json.dumps(obj, separators=(",", ":")) + "\n"
        header = ["bin_start", "bin_end", "count"]
        rows = [
            [_fmt_kwh(lo), _fmt_kwh(hi), str(c)]
            for lo, hi, c in zip(report.bin_edges, report.bin_edges[1:], report.counts)
        ]
        if fmt == "csv":
            return _render_csv(header, rows)
        body = _render_table(header, rows)
        tail = f"n={report.n_samples} excluded={report.excluded} metric={report.metric}\n"
        return body + tail

    header, rows = _breakdown_cells(report)
    if fmt == "csv":
        return _render_csv(header, rows)
    if fmt == "text":
        return _render_table(header, rows)
    share_key = f"{report.column}_share_pct"
    obj = {
        "rows": [
            {
                report.key_label: r.key,
                "n_jobs": r.n_jobs,
                "gpu_kwh": r.gpu_kwh,
                "cpu_kwh": r.cpu_kwh,
                "ext_kwh": r.ext_kwh,
                share_key: r.share_pct,
            }
            for r in report.rows
        ]
    }
    return json.dumps(obj, separators=(",", ":")) + "\n"
