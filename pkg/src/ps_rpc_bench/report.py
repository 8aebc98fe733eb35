"""
Run report: one ReportDocument per benchmark run, emitted as JSON (the full
document) and CSV (one row per repeat per worker).
"""

import os
import platform
import socket
import typing as T
from pathlib import Path

import pandas as pd
from pydantic import BaseModel, Field
from ryutils import log

from ps_rpc_bench.bench import RepeatOutcome, WorkerRun, aggregate_runs, merge_worker_runs, utc_now
from ps_rpc_bench.config import Benchmark, BenchConfig, OutputFormat
from ps_rpc_bench.errors import RunFailure

SCHEMA_VERSION = 1
JSON_NAME = "report.json"
CSV_NAME = "report.csv"

CSV_COLUMNS: T.Dict[Benchmark, T.List[str]] = {
    Benchmark.LATENCY: [
        "repeat",
        "worker",
        "count",
        "mean_us",
        "min_us",
        "max_us",
        "p50_us",
        "p90_us",
        "p99_us",
    ],
    Benchmark.BANDWIDTH: [
        "repeat",
        "worker",
        "rpc_count",
        "content_bytes",
        "measured_secs",
        "mbytes_per_sec",
    ],
    Benchmark.THROUGHPUT: ["repeat", "worker", "rpc_count", "rpcs_per_sec", "ps_counts"],
}


class Environment(BaseModel):
    hostname: str
    os: str
    python: str
    cpu_count: int
    timestamp: str

    @staticmethod
    def capture() -> "Environment":
        return Environment(
            hostname=socket.gethostname(),
            os=platform.platform(),
            python=platform.python_version(),
            cpu_count=os.cpu_count() or 1,
            timestamp=utc_now(),
        )


class RepeatRecord(BaseModel):
    repeat: int
    ok: bool
    error: T.Optional[str] = None
    result: T.Optional[T.Dict[str, T.Any]] = None
    window: T.Optional[T.Dict[str, T.Any]] = None


class WorkerRecord(BaseModel):
    role: str
    worker_index: int
    config: T.Dict[str, T.Any]
    repeats: T.List[RepeatRecord]
    captured_digests: T.List[str] = Field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""


class ReportDocument(BaseModel):
    schema_version: int = SCHEMA_VERSION
    benchmark: Benchmark
    config: T.Dict[str, T.Any]
    spec: T.Dict[str, T.Any]
    environment: Environment
    repeats: T.List[RepeatRecord]
    workers: T.List[WorkerRecord]
    averaged: T.Dict[str, float] = Field(default_factory=dict)
    successful_repeats: int = 0
    failed_repeats: int = 0
    errors: T.List[str] = Field(default_factory=list)
    # role -> one series per repeat (workers) or one for the process lifetime (PS)
    resources: T.Dict[str, T.List[T.Dict[str, T.Any]]] = Field(default_factory=dict)
    captured_digests: T.List[str] = Field(default_factory=list)
    # child processes that exited abnormally
    failed_roles: T.List[str] = Field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""

    @property
    def ok(self) -> bool:
        return (
            self.failed_repeats == 0 and self.successful_repeats > 0 and not self.failed_roles
        )

    def failing_roles(self) -> T.List[str]:
        roles = [w.role for w in self.workers if not all(r.ok for r in w.repeats)]
        return roles + [r for r in self.failed_roles if r not in roles]


def _record(outcome: RepeatOutcome) -> RepeatRecord:
    raw = outcome.to_dict()
    return RepeatRecord(
        repeat=raw["repeat"],
        ok=raw["ok"],
        error=raw["error"],
        result=raw["result"],
        window=raw["window"],
    )


def build_report(
    cfg: BenchConfig,
    runs: T.Sequence[WorkerRun],
    ps_resources: T.Optional[T.Mapping[str, T.Dict[str, T.Any]]] = None,
    started_at: T.Optional[str] = None,
) -> ReportDocument:
    """Merge per-worker runs (and PS resource dumps) into one document."""
    ordered = sorted(runs, key=lambda r: r.worker_index)
    if cfg.benchmark == Benchmark.THROUGHPUT:
        merged = merge_worker_runs(ordered, cfg.duration_secs)
    else:
        merged = list(ordered[0].repeats) if ordered else []

    averaged: T.Dict[str, float] = {}
    errors = [f"repeat {o.repeat}: {o.error}" for o in merged if not o.ok]
    successful = sum(1 for o in merged if o.ok)
    try:
        averaged = aggregate_runs(merged).averaged
    except RunFailure as exc:
        log.print_fail(str(exc))

    resources: T.Dict[str, T.List[T.Dict[str, T.Any]]] = {}
    for role, series in sorted((ps_resources or {}).items()):
        resources[role] = [series]
    digests: T.List[str] = []
    for run in ordered:
        resources[run.role] = [o.resources.to_dict() for o in run.repeats if o.resources]
        digests.extend(d for d in run.captured_digests if d not in digests)

    spec = ordered[0].spec.to_dict() if ordered else cfg.payload_spec().to_dict()
    return ReportDocument(
        benchmark=cfg.benchmark,
        config=cfg.to_dict(),
        spec=spec,
        environment=Environment.capture(),
        repeats=[_record(o) for o in merged],
        workers=[
            WorkerRecord(
                role=run.role,
                worker_index=run.worker_index,
                config=run.config,
                repeats=[_record(o) for o in run.repeats],
                captured_digests=run.captured_digests,
                started_at=run.started_at,
                finished_at=run.finished_at,
            )
            for run in ordered
        ],
        averaged=averaged,
        successful_repeats=successful,
        failed_repeats=len(merged) - successful,
        errors=errors,
        resources=resources,
        captured_digests=digests,
        started_at=started_at or (ordered[0].started_at if ordered else utc_now()),
        finished_at=utc_now(),
    )


def csv_rows(report: ReportDocument) -> T.List[T.Dict[str, T.Any]]:
    """One row per repeat per worker; a failed repeat keeps its row with empty metrics."""
    rows = []
    columns = CSV_COLUMNS[report.benchmark]
    for worker in report.workers:
        for repeat in worker.repeats:
            row: T.Dict[str, T.Any] = {"repeat": repeat.repeat, "worker": worker.worker_index}
            rows.append(row)
            if not repeat.ok or repeat.result is None:
                row.update((column, None) for column in columns[2:])
                continue
            for column in columns[2:]:
                value = repeat.result[column]
                if column == "ps_counts":
                    value = ";".join(str(c) for c in value)
                row[column] = value
    return rows


def render_csv(report: ReportDocument) -> str:
    # object dtype keeps integer cells integral when a failed row leaves gaps
    frame = pd.DataFrame(csv_rows(report), columns=CSV_COLUMNS[report.benchmark], dtype=object)
    return str(frame.to_csv(index=False, na_rep="", lineterminator="\n"))


def render_json(report: ReportDocument) -> str:
    return report.model_dump_json(indent=2) + "\n"


def load_report(path: T.Union[str, Path]) -> ReportDocument:
    return ReportDocument.model_validate_json(Path(path).read_text(encoding="utf-8"))


def emit(
    report: ReportDocument,
    output_format: OutputFormat,
    output_dir: T.Union[str, Path],
) -> T.List[Path]:
    """Write report.json and/or report.csv under ``output_dir``; returns the paths written."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if output_format in (OutputFormat.JSON, OutputFormat.BOTH):
        path = out / JSON_NAME
        path.write_text(render_json(report), encoding="utf-8")
        written.append(path)
    if output_format in (OutputFormat.CSV, OutputFormat.BOTH):
        path = out / CSV_NAME
        path.write_text(render_csv(report), encoding="utf-8")
        written.append(path)
    for path in written:
        log.print_ok_arrow(f"Wrote {path}")
    return written
