"""Job-level energy attribution for shared compute clusters.

Replays power and process telemetry, splits node power among scheduler
jobs, calibrates software readings against external wattmeters, and
renders per-status / per-user energy reports and GPU utilization
histograms.
"""

from .attribution import (
    AttributionSlice,
    CoverageStats,
    Interval,
    JobEnergy,
    JobPower,
    attribute,
    cpu_shares,
    gpu_shares,
    integrate_energy,
    parse_slices,
    serialize_slices,
    slice_coverage,
)
from .calibration import (
    CalibrationModel,
    apply_calibration,
    fit_nodes,
    fit_scale,
    parse_models,
    serialize_models,
)
from .analytics import (
    BreakdownReport,
    BreakdownRow,
    UtilizationHistogram,
    aggregate_by_status,
    aggregate_by_user,
    gpu_histogram,
    render_report,
)
from .errors import (
    CpuTimeRegression,
    DegenerateInput,
    DuplicatePid,
    EmptySeries,
    MalformedLine,
    MissingCapacity,
    MultiNodeJob,
    NegativeDelta,
    NegativePower,
    NodeMismatch,
    NonMonotonicTimestamp,
    OutOfRangeUtilization,
    OverlappingSlices,
    TraceError,
    UnknownJob,
    WattscopeError,
)
from .jobs import (
    KNOWN_STATUSES,
    UNATTRIBUTED_JOB,
    JobRecord,
    PidMapSnapshot,
    PidTimeline,
    build_timelines,
    parse_jobs,
    parse_pidmap,
    pid_owner,
    serialize_jobs,
    serialize_pidmap,
)
from .traces import (
    PowerSample,
    ProcSnapshot,
    Source,
    TraceBundle,
    canonical_ts,
    parse_power_trace,
    parse_proc_trace,
    parse_source,
    resample_to_grid,
    serialize_power_trace,
    serialize_proc_trace,
)

__version__ = "0.1.0"
