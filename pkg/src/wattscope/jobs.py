"""Scheduler job records and pid-to-job ownership over time.

Two JSON-lines formats, one object per line, unknown keys ignored:

  pidmap  {"node":"n1","ts":10.0,"map":[[4242,7],[4243,7]]}
  jobs    {"job":7,"user":"alice","node":"n1","submit":0.0,
           "start":5.0,"end":900.0,"status":"COMPLETED"}

Pid assignments use step-hold semantics: a snapshot's map is valid from
its ts until the next snapshot on the same node.  Work that no snapshot
ties to a job belongs to the reserved UNATTRIBUTED pseudo-job (id 0);
real job ids are positive.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import DuplicatePid, MalformedLine, MultiNodeJob, UnknownJob
from .traces import _dumps, _field_int, _field_num, _field_str, canonical_ts, iter_records

UNATTRIBUTED_JOB = 0

# canonical display order for the well-known scheduler states
KNOWN_STATUSES = ("COMPLETED", "FAILED", "CANCELLED", "TIMEOUT")


@dataclass(frozen=True)
class JobRecord:
    job_id: int
    user: str
    node_id: str
    t_submit: float
    t_start: float
    t_end: float
    status: str  # one of KNOWN_STATUSES or a raw scheduler state


@dataclass(frozen=True)
class PidMapSnapshot:
    """The pid -> job assignment observed on one node at one instant."""

    node_id: str
    ts: float
    assignments: tuple[tuple[int, int], ...]  # (pid, job_id), sorted by pid


@dataclass(frozen=True)
class PidTimeline:
    """A job's observed pid set at each snapshot instant on its node.

    Entries are (ts, pids) with strictly increasing ts; a set is valid
    from its ts until the next entry.  An empty set means the job was
    alive but had no observed processes.  A job that never appears in
    any snapshot has an empty entries tuple.
    """

    job_id: int
    node_id: str
    entries: tuple[tuple[float, frozenset[int]], ...]


def parse_pidmap(lines: Iterable[str]) -> list[PidMapSnapshot]:
    """Parse pidmap snapshots, merging records that share (node, ts).

    Raises:
        MalformedLine, DuplicatePid.
    """
    merged: dict[tuple[str, float], dict[int, int]] = {}
    for line_no, obj in iter_records(lines):
        node = _field_str(obj, "node", line_no)
        ts = canonical_ts(_field_num(obj, "ts", line_no))
        raw_map = obj.get("map")
        if not isinstance(raw_map, list):
            raise MalformedLine(line_no, "missing or invalid 'map'")
        assignments = merged.setdefault((node, ts), {})
        for pair in raw_map:
            if (
                not isinstance(pair, list)
                or len(pair) != 2
                or any(isinstance(v, bool) or not isinstance(v, int) for v in pair)
            ):
                raise MalformedLine(line_no, "map entries must be [pid, job_id] integer pairs")
            pid, job_id = pair
            if pid < 1:
                raise MalformedLine(line_no, f"invalid pid {pid}")
            if job_id < 1:
                raise MalformedLine(line_no, f"invalid job id {job_id} (0 is reserved)")
            if pid in assignments and assignments[pid] != job_id:
                raise DuplicatePid(pid, ts, line_no)
            assignments[pid] = job_id
    return [
        PidMapSnapshot(node, ts, tuple(sorted(assignments.items())))
        for (node, ts), assignments in sorted(merged.items())
    ]


def parse_jobs(lines: Iterable[str]) -> list[JobRecord]:
    """Parse job records; enforces submit <= start <= end and unique ids."""
    records: list[JobRecord] = []
    seen: set[int] = set()
    for line_no, obj in iter_records(lines):
        job_id = _field_int(obj, "job", line_no, minimum=1)
        if job_id in seen:
            raise MalformedLine(line_no, f"duplicate job id {job_id}")
        seen.add(job_id)
        user = _field_str(obj, "user", line_no)
        node = _field_str(obj, "node", line_no)
        t_submit = canonical_ts(_field_num(obj, "submit", line_no))
        t_start = canonical_ts(_field_num(obj, "start", line_no))
        t_end = canonical_ts(_field_num(obj, "end", line_no))
        if not t_submit <= t_start <= t_end:
            raise MalformedLine(line_no, "job times must satisfy submit <= start <= end")
        status = _field_str(obj, "status", line_no)
        records.append(JobRecord(job_id, user, node, t_submit, t_start, t_end, status))
    return records


def format_pidmap_line(snap: PidMapSnapshot) -> str:
    return _dumps({"node": snap.node_id, "ts": snap.ts, "map": [list(pair) for pair in snap.assignments]})


def format_job_line(job: JobRecord) -> str:
    return _dumps(
        {
            "job": job.job_id,
            "user": job.user,
            "node": job.node_id,
            "submit": job.t_submit,
            "start": job.t_start,
            "end": job.t_end,
            "status": job.status,
        }
    )


def serialize_pidmap(snaps: Iterable[PidMapSnapshot]) -> str:
    return "".join(format_pidmap_line(s) + "\n" for s in snaps)


def serialize_jobs(jobs: Iterable[JobRecord]) -> str:
    return "".join(format_job_line(j) + "\n" for j in jobs)


def build_timelines(
    snapshots: Sequence[PidMapSnapshot], jobs: Sequence[JobRecord]
) -> dict[int, PidTimeline]:
    """Build one pid timeline per job from pidmap snapshots.

    Insensitive to snapshot input order.  A job that appears in at least
    one snapshot gets an entry at every snapshot ts on its node (with an
    empty set where it is absent), so step-hold lookups match the latest
    snapshot at or before t.  Jobs never observed get no entries.

    Raises:
        UnknownJob: a snapshot references a job id with no record.
        MultiNodeJob: a snapshot places a job on a different node than
            its record; multi-node jobs are unsupported.
        DuplicatePid: conflicting assignments merged at the same (node, ts).
    """
    jobs_by_id = {j.job_id: j for j in jobs}

    # merge snapshots per (node, ts); duplicates may come from callers
    # that build snapshots directly rather than via parse_pidmap
    merged: dict[tuple[str, float], dict[int, int]] = {}
    for snap in snapshots:
        assignments = merged.setdefault((snap.node_id, snap.ts), {})
        for pid, job_id in snap.assignments:
            if pid in assignments and assignments[pid] != job_id:
                raise DuplicatePid(pid, snap.ts)
            assignments[pid] = job_id
            if job_id not in jobs_by_id:
                raise UnknownJob(job_id)
            if jobs_by_id[job_id].node_id != snap.node_id:
                raise MultiNodeJob(job_id, f"record says {jobs_by_id[job_id].node_id}, seen on {snap.node_id}")

    node_ts: dict[str, list[float]] = {}
    for node, ts in sorted(merged):
        node_ts.setdefault(node, []).append(ts)

    observed: dict[int, dict[float, set[int]]] = {}
    for (node, ts), assignments in merged.items():
        for pid, job_id in assignments.items():
            observed.setdefault(job_id, {}).setdefault(ts, set()).add(pid)

    timelines: dict[int, PidTimeline] = {}
    for job_id, job in jobs_by_id.items():
        pids_at = observed.get(job_id)
        if pids_at is None:
            timelines[job_id] = PidTimeline(job_id, job.node_id, ())
            continue
        entries = tuple(
            (ts, frozenset(pids_at.get(ts, ()))) for ts in node_ts[job.node_id]
        )
        timelines[job_id] = PidTimeline(job_id, job.node_id, entries)
    return timelines


def ownership_index(
    timelines: Mapping[int, PidTimeline]
) -> dict[str, tuple[list[float], list[dict[int, int]]]]:
    """Fold timelines into a per-node step function: ts -> {pid: job_id}."""
    per_node: dict[str, dict[float, dict[int, int]]] = {}
    for job_id in sorted(timelines):
        tl = timelines[job_id]
        for ts, pids in tl.entries:
            owners = per_node.setdefault(tl.node_id, {}).setdefault(ts, {})
            for pid in pids:
                owners[pid] = job_id
    index: dict[str, tuple[list[float], list[dict[int, int]]]] = {}
    for node, by_ts in per_node.items():
        ts_list = sorted(by_ts)
        index[node] = (ts_list, [by_ts[ts] for ts in ts_list])
    return index


def pid_owner(
    timelines: Mapping[int, PidTimeline], node_id: str, pid: int, t: float
) -> int | None:
    """Return the job owning pid on node_id at time t, or None.

    Step-hold: the assignment in force is the one from the latest snapshot
    at or before t on that node.  None (no owner) is a meaningful value;
    such work is charged to the UNATTRIBUTED pseudo-job.
    """
    entry = ownership_index(timelines).get(node_id)
    if entry is None:
        return None
    ts_list, owners = entry
    i = bisect_right(ts_list, t) - 1
    if i < 0:
        return None
    return owners[i].get(pid)
