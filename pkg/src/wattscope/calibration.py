"""Scaling software power readings against an external wattmeter.

Software counters (CPU packages, GPU boards) miss fans, drives, PSU loss
and the rest of the chassis, so per node we fit a single multiplicative
factor k mapping summed software power to the wall reading, by least
squares through the origin:

    k = sum(s_i * e_i) / sum(s_i ** 2)

Fit quality is reported as MAPE over samples with e_i > 0 and, since a
single percentage can hide bias, also as the relative error of total
energy.  An affine variant (k * s + b) exists behind a flag for
experimentation; the default stays scale-only, leaving any constant
baseline visible in the error figures rather than hidden in an intercept.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .attribution import AttributionSlice, JobPower
from .errors import DegenerateInput, MalformedLine, NodeMismatch
from .traces import CPU, GPU, EXT, PowerSample, _dumps, _field_num, _field_str, iter_records


@dataclass(frozen=True)
class CalibrationModel:
    node_id: str
    k: float  # > 0
    mape_pct: float
    n_points: int  # >= 2
    intercept_w: float = 0.0  # nonzero only for affine fits
    energy_err_pct: float | None = None  # |total predicted - total external| / total external


def fit_scale(
    software_w: Sequence[float],
    external_w: Sequence[float],
    node_id: str = "",
    affine: bool = False,
) -> CalibrationModel:
    """Fit external power as a scaled (optionally shifted) software reading.

    Args:
        software_w: summed software power per aligned sample, all >= 0.
        external_w: wattmeter power at the same instants, all >= 0.
        node_id: node the model belongs to.
        affine: also fit an intercept (experimentation only).

    Raises:
        DegenerateInput: fewer than 2 points, software identically zero,
            or the fitted scale is not positive.
        ValueError: length mismatch or negative readings.
    """
    s = np.asarray(software_w, dtype=float)
    e = np.asarray(external_w, dtype=float)
    if s.shape != e.shape or s.ndim != 1:
        raise ValueError("software and external series must have equal length")
    if np.any(s < 0) or np.any(e < 0):
        raise ValueError("power readings must be non-negative")
    n = len(s)
    if n < 2:
        raise DegenerateInput("need at least 2 aligned samples")
    if not np.any(s > 0):
        raise DegenerateInput("software power is identically zero")

    if affine:
        design = np.column_stack([s, np.ones(n)])
        (k, b), *_ = np.linalg.lstsq(design, e, rcond=None)
        k = float(k)
        b = float(b)
    else:
        k = float(np.dot(s, e) / np.dot(s, s))
        b = 0.0
    if k <= 0:
        raise DegenerateInput("fitted scale is not positive")

    predicted = k * s + b
    positive = e > 0
    if np.any(positive):
        mape = float(100.0 * np.mean(np.abs(predicted[positive] - e[positive]) / e[positive]))
        energy_err = float(100.0 * abs(predicted.sum() - e.sum()) / e.sum())
    else:
        mape = 0.0
        energy_err = None
    return CalibrationModel(node_id, k, mape, n, b, energy_err)


def apply_calibration(
    model: CalibrationModel, slices: Sequence[AttributionSlice]
) -> list[AttributionSlice]:
    """Project slices into wall-power terms: ext_w = k * (cpu_w + gpu_w).

    An affine model's intercept is chassis baseline no job asked for, so
    it lands on the unattributed bucket; per-job scaling stays linear and
    totals remain conserved.

    Raises:
        NodeMismatch: a slice belongs to a different node than the model.
    """
    out: list[AttributionSlice] = []
    for s in slices:
        if s.node_id != model.node_id:
            raise NodeMismatch(model.node_id, s.node_id)
        per_job = {
            job_id: JobPower(p.cpu_w, p.gpu_w, ext_w=model.k * (p.cpu_w + p.gpu_w))
            for job_id, p in s.per_job.items()
        }
        unattr_ext = (
            model.k * (s.unattributed_cpu_w + s.unattributed_gpu_w) + model.intercept_w
        )
        out.append(
            AttributionSlice(
                s.interval,
                s.node_id,
                per_job,
                s.unattributed_cpu_w,
                s.unattributed_gpu_w,
                unattributed_ext_w=unattr_ext,
            )
        )
    return out


def format_model_line(model: CalibrationModel) -> str:
    obj: dict = {
        "node": model.node_id,
        "k": model.k,
        "mape_pct": model.mape_pct,
        "n": model.n_points,
    }
    if model.intercept_w:
        obj["intercept_w"] = model.intercept_w
    if model.energy_err_pct is not None:
        obj["energy_err_pct"] = model.energy_err_pct
    return _dumps(obj)


def serialize_models(models: Iterable[CalibrationModel]) -> str:
    return "".join(format_model_line(m) + "\n" for m in models)


def fit_nodes(
    software: Sequence[PowerSample],
    external: Sequence[PowerSample],
    affine: bool = False,
) -> list[CalibrationModel]:
    """Fit one model per node from raw power traces.

    Software power is the sum over the node's cpu and gpu series, linearly
    resampled onto the external meter's own timestamps (external meters
    are usually the slower cadence).  Only instants covered by every
    software series on the node are used.  Nodes lacking either side, or
    without enough overlapping samples, are skipped.

    Raises:
        DegenerateInput: no node yields a usable fit.
    """
    soft_series: dict[str, list[list[PowerSample]]] = {}
    grouped: dict[tuple[str, object], list[PowerSample]] = {}
    for s in software:
        if s.source.kind in (CPU, GPU):
            grouped.setdefault((s.node_id, s.source), []).append(s)
    for (node, _), series in sorted(grouped.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
        soft_series.setdefault(node, []).append(sorted(series, key=lambda s: s.ts))

    ext_series: dict[str, list[PowerSample]] = {}
    for s in external:
        if s.source.kind == EXT:
            ext_series.setdefault(s.node_id, []).append(s)

    models: list[CalibrationModel] = []
    for node in sorted(ext_series):
        sources = soft_series.get(node)
        if not sources:
            continue
        ext = sorted(ext_series[node], key=lambda s: s.ts)
        lo = max(series[0].ts for series in sources)
        hi = min(series[-1].ts for series in sources)
        grid = [s.ts for s in ext if lo <= s.ts <= hi]
        if len(grid) < 2:
            continue
        total = np.zeros(len(grid))
        for series in sources:
            ts = np.array([p.ts for p in series])
            watts = np.array([p.power_w for p in series])
            total += np.interp(np.asarray(grid), ts, watts)
        by_ts = {s.ts: s.power_w for s in ext}
        try:
            models.append(fit_scale(total, [by_ts[t] for t in grid], node, affine))
        except DegenerateInput:
            continue
    if not models:
        raise DegenerateInput("no node has enough overlapping software and external readings")
    return models


def parse_models(lines: Iterable[str]) -> list[CalibrationModel]:
    """Parse a model file: JSON lines of {"node","k","mape_pct","n",...}."""
    models: list[CalibrationModel] = []
    for line_no, obj in iter_records(lines):
        node = _field_str(obj, "node", line_no)
        k = _field_num(obj, "k", line_no)
        mape = _field_num(obj, "mape_pct", line_no)
        n_raw = obj.get("n")
        if isinstance(n_raw, bool) or not isinstance(n_raw, int) or n_raw < 2:
            raise MalformedLine(line_no, "missing or invalid 'n'")
        if k <= 0:
            raise MalformedLine(line_no, "scale factor must be positive")
        if mape < 0:
            raise MalformedLine(line_no, "mape_pct must be non-negative")
        intercept = _field_num(obj, "intercept_w", line_no, required=False) or 0.0
        energy_err = _field_num(obj, "energy_err_pct", line_no, required=False)
        models.append(CalibrationModel(node, k, mape, n_raw, intercept, energy_err))
    return models
