"""
Command-line entry point.

    ps-rpc-bench <latency|bandwidth|throughput> [flags]   # driver: spawn, run, report
    ps-rpc-bench role ps|worker [flags]                   # manual deployment

A driver spawns num_ps PS children and num_workers worker children of this
same program, all reading one effective-config file it writes. Each PS prints
``READY host:port`` on stdout once bound; each worker writes its result JSON
to the path the driver assigns.
"""

import argparse
import collections
import enum
import json
import os
import signal
import subprocess
import sys
import threading
import time
import typing as T
from dataclasses import dataclass, field
from pathlib import Path

from ryutils import log

from ps_rpc_bench.bench import WorkerRun, run_worker, utc_now
from ps_rpc_bench.config import Benchmark, BenchConfig, build_config, load_config_file
from ps_rpc_bench.errors import BenchError, ConfigError, OrchestrationError, StartupError
from ps_rpc_bench.monitor import start_monitor
from ps_rpc_bench.parse_args import ROLE_DESTS, add_bench_args, add_role_args
from ps_rpc_bench.report import ReportDocument, build_report, emit
from ps_rpc_bench.rpc import Endpoint, PsServer, ServerConfig, serve

READY_PREFIX = "READY "
CHILD_DIR = "children"
CONFIG_NAME = "effective_config.json"
STOP_TIMEOUT_SECS = 5.0
# beyond repeats * (warmup + duration) before a worker is declared hung
WORKER_GRACE_SECS = 30.0
TAIL_LINES = 20


class Role(str, enum.Enum):
    DRIVER = "driver"
    PS = "ps"
    WORKER = "worker"


@dataclass
class RoleSpec:
    role: Role
    config: BenchConfig
    result_path: T.Optional[Path] = None
    worker_index: int = 0
    ps_index: int = 0
    host: T.Optional[str] = None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ps-rpc-bench",
        description="Parameter-server RPC micro-benchmarks: latency, bandwidth, throughput",
    )
    add_bench_args(parser)
    add_role_args(parser)
    return parser


def _split_command(argv: T.Sequence[str]) -> T.Tuple[T.Dict[str, str], T.List[str]]:
    """Peel the leading ``<benchmark>`` or ``role <ps|worker>`` words off argv."""
    args = list(argv)
    command: T.Dict[str, str] = {}
    if args and args[0] in {b.value for b in Benchmark}:
        command["benchmark"] = args.pop(0)
    elif args and args[0] == "role":
        args.pop(0)
        if not args or args[0] not in (Role.PS.value, Role.WORKER.value):
            raise ConfigError("'role' must be followed by ps or worker")
        command["role"] = args.pop(0)
    return command, args


def parse_config(
    argv: T.Optional[T.Sequence[str]] = None,
) -> T.Tuple[BenchConfig, RoleSpec]:
    """Flags override the config file, which overrides TFGB_* variables and defaults."""
    command, rest = _split_command(sys.argv[1:] if argv is None else argv)
    namespace = vars(build_parser().parse_args(rest))

    role_values = {key: namespace.pop(key) for key in ROLE_DESTS}
    flag_values: T.Dict[str, T.Any] = dict(namespace)
    if "benchmark" in command:
        flag_values["benchmark"] = command["benchmark"]
    role = Role(command.get("role", role_values["role"]))

    file_values = load_config_file(role_values["config"]) if role_values["config"] else {}
    cfg = build_config(file_values, flag_values)
    spec = RoleSpec(
        role=role,
        config=cfg,
        result_path=Path(role_values["result_path"]) if role_values["result_path"] else None,
        worker_index=role_values["worker_index"],
        ps_index=role_values["ps_index"],
        host=role_values["host"],
    )
    if role == Role.WORKER and not 0 <= spec.worker_index < cfg.num_workers:
        raise ConfigError(
            f"--worker-index {spec.worker_index} outside [0, {cfg.num_workers - 1}]"
        )
    if role == Role.PS and not 0 <= spec.ps_index < cfg.num_ps:
        raise ConfigError(f"--ps-index {spec.ps_index} outside [0, {cfg.num_ps - 1}]")
    return cfg, spec


def _write_json(path: Path, payload: T.Dict[str, T.Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def run_ps_role(spec: RoleSpec) -> int:
    """Bind, announce READY, serve until SIGTERM/SIGINT, then dump the resource series."""
    cfg = spec.config
    endpoint = cfg.endpoints[spec.ps_index]
    bind = Endpoint(host=spec.host or endpoint.host, port=endpoint.port)
    role = f"ps-{spec.ps_index}"

    def ready(server: PsServer) -> None:
        for signum in (signal.SIGTERM, signal.SIGINT):
            signal.signal(signum, lambda *_: server.request_stop())
        print(f"{READY_PREFIX}{server.endpoint}", flush=True)

    session = start_monitor(cfg.monitor_interval_ms, role=role, warmup_secs=cfg.warmup_secs)
    try:
        serve(
            ServerConfig(endpoint=bind, response_spec=cfg.payload_spec(), mode=cfg.mode),
            verbose=cfg.verbose,
            on_ready=ready,
        )
    except StartupError as exc:
        session.stop()
        log.print_fail(f"{role}: {exc}")
        return 1
    series = session.stop()
    if spec.result_path is not None:
        _write_json(
            spec.result_path,
            {"role": role, "config": cfg.to_dict(), "resources": series.to_dict()},
        )
    return 0


def run_worker_role(spec: RoleSpec) -> int:
    """Run every repeat and write the WorkerRun JSON; nonzero exit if any repeat failed."""
    try:
        run = run_worker(spec.config, spec.worker_index)
    except StartupError as exc:
        log.print_fail(f"worker-{spec.worker_index}: {exc}")
        return 1
    if spec.result_path is not None:
        _write_json(spec.result_path, run.to_dict())
    else:
        for outcome in run.repeats:
            log.print_normal(json.dumps(outcome.to_dict()["result"]))
    return 0 if all(o.ok for o in run.repeats) else 1


class Child:
    """A spawned ps/worker process whose output is drained on background threads."""

    def __init__(self, role: str, argv: T.List[str], verbose: bool = False) -> None:
        self.role = role
        self.verbose = verbose
        self.ready = threading.Event()
        self.endpoint: T.Optional[str] = None
        self.tail: T.Deque[str] = collections.deque(maxlen=TAIL_LINES)
        env = dict(os.environ)
        src_dir = str(Path(__file__).resolve().parents[1])
        env["PYTHONPATH"] = os.pathsep.join(p for p in (src_dir, env.get("PYTHONPATH")) if p)
        env["PYTHONUNBUFFERED"] = "1"
        self.process = subprocess.Popen(  # pylint: disable=consider-using-with
            [sys.executable, "-m", "ps_rpc_bench", *argv],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            env=env,
        )
        self._threads = [
            threading.Thread(target=self._drain, args=(self.process.stdout, True), daemon=True),
            threading.Thread(target=self._drain, args=(self.process.stderr, False), daemon=True),
        ]
        for thread in self._threads:
            thread.start()

    def _drain(self, stream: T.Optional[T.IO[str]], watch_ready: bool) -> None:
        if stream is None:
            return
        for line in stream:
            line = line.rstrip("\n")
            if watch_ready and line.startswith(READY_PREFIX) and not self.ready.is_set():
                self.endpoint = line[len(READY_PREFIX) :].strip()
                self.ready.set()
                continue
            self.tail.append(line)
            if self.verbose:
                log.print_normal(f"[{self.role}] {line}")

    def exited(self) -> bool:
        return self.process.poll() is not None

    def diagnostics(self) -> str:
        code = self.process.poll()
        status = "running" if code is None else f"exit code {code}"
        tail = "\n    ".join(self.tail) if self.tail else "(no output)"
        return f"{self.role} ({status}):\n    {tail}"

    def wait_ready(self, deadline: float) -> None:
        while not self.ready.wait(timeout=0.05):
            if self.exited():
                raise OrchestrationError(f"{self.role} exited before READY\n{self.diagnostics()}")
            if time.monotonic() >= deadline:
                raise OrchestrationError(
                    f"{self.role} not READY within the startup timeout\n{self.diagnostics()}"
                )

    def stop(self) -> None:
        if self.exited():
            return
        self.process.terminate()
        try:
            self.process.wait(timeout=STOP_TIMEOUT_SECS)
        except subprocess.TimeoutExpired:
            log.print_warn(f"{self.role} ignored SIGTERM; killing it")
            self.process.kill()
            self.process.wait()

    def join_output(self) -> None:
        for thread in self._threads:
            thread.join(timeout=STOP_TIMEOUT_SECS)


@dataclass
class Orchestration:
    cfg: BenchConfig
    child_dir: Path
    ps: T.List[Child] = field(default_factory=list)
    workers: T.List[Child] = field(default_factory=list)

    @property
    def config_path(self) -> Path:
        return self.child_dir / CONFIG_NAME

    def ps_result(self, index: int) -> Path:
        return self.child_dir / f"ps-{index}.json"

    def worker_result(self, index: int) -> Path:
        return self.child_dir / f"worker-{index}.json"


def _check_echo(role: str, echoed: T.Mapping[str, T.Any], expected: T.Mapping[str, T.Any]) -> None:
    if dict(echoed) != dict(expected):
        keys = set(echoed) | set(expected)
        differing = sorted(k for k in keys if echoed.get(k) != expected.get(k))
        raise OrchestrationError(f"{role} ran with a different config; keys differ: {differing}")


def _spawn_ps(orch: Orchestration) -> None:
    cfg = orch.cfg
    for index in range(cfg.num_ps):
        orch.ps.append(
            Child(
                f"ps-{index}",
                [
                    "role",
                    "ps",
                    "--config",
                    str(orch.config_path),
                    "--ps-index",
                    str(index),
                    "--result-path",
                    str(orch.ps_result(index)),
                ],
                verbose=cfg.verbose,
            )
        )
    deadline = time.monotonic() + cfg.startup_timeout_secs
    for child in orch.ps:
        child.wait_ready(deadline)
        log.print_ok_arrow(f"{child.role} READY at {child.endpoint}")


def _run_workers(orch: Orchestration) -> None:
    cfg = orch.cfg
    for index in range(cfg.num_workers):
        orch.workers.append(
            Child(
                f"worker-{index}",
                [
                    "role",
                    "worker",
                    "--config",
                    str(orch.config_path),
                    "--worker-index",
                    str(index),
                    "--result-path",
                    str(orch.worker_result(index)),
                ],
                verbose=cfg.verbose,
            )
        )
    budget = cfg.repeats * (cfg.warmup_secs + cfg.duration_secs)
    deadline = time.monotonic() + budget + cfg.startup_timeout_secs + WORKER_GRACE_SECS
    for child in orch.workers:
        try:
            child.process.wait(timeout=max(0.0, deadline - time.monotonic()))
        except subprocess.TimeoutExpired as exc:
            raise OrchestrationError(
                f"{child.role} did not finish in time\n{child.diagnostics()}"
            ) from exc
        child.join_output()


def _collect(orch: Orchestration) -> T.Tuple[T.List[WorkerRun], T.Dict[str, T.Dict[str, T.Any]]]:
    expected = orch.cfg.to_dict()
    runs = []
    for index, child in enumerate(orch.workers):
        path = orch.worker_result(index)
        if not path.exists():
            raise OrchestrationError(f"{child.role} produced no result\n{child.diagnostics()}")
        run = WorkerRun.from_dict(json.loads(path.read_text(encoding="utf-8")))
        _check_echo(child.role, run.config, expected)
        runs.append(run)

    ps_resources = {}
    for index, child in enumerate(orch.ps):
        path = orch.ps_result(index)
        if not path.exists():
            log.print_warn(f"{child.role} left no resource dump\n{child.diagnostics()}")
            continue
        dump = json.loads(path.read_text(encoding="utf-8"))
        _check_echo(child.role, dump["config"], expected)
        ps_resources[dump["role"]] = dump["resources"]
    return runs, ps_resources


def orchestrate(spec: RoleSpec) -> ReportDocument:
    """Spawn PS and worker children locally, collect their results, merge one report."""
    cfg = spec.config
    started_at = utc_now()
    orch = Orchestration(cfg=cfg, child_dir=Path(cfg.output) / CHILD_DIR)
    orch.child_dir.mkdir(parents=True, exist_ok=True)
    for stale in orch.child_dir.glob("*.json"):
        stale.unlink()
    _write_json(orch.config_path, cfg.to_dict())

    log.print_bold(
        f"{cfg.benchmark.value}: {cfg.num_ps} PS x {cfg.num_workers} workers, "
        f"{cfg.repeats} repeat(s) of {cfg.warmup_secs}s warmup + {cfg.duration_secs}s"
    )
    try:
        _spawn_ps(orch)
        _run_workers(orch)
    finally:
        for child in orch.workers + orch.ps:
            child.stop()
        for child in orch.ps:
            child.join_output()

    crashed = [c for c in orch.ps if c.process.returncode not in (0, -signal.SIGTERM)]
    for child in crashed:
        log.print_warn(f"{child.role} exited abnormally\n{child.diagnostics()}")
    runs, ps_resources = _collect(orch)
    report = build_report(cfg, runs, ps_resources, started_at=started_at)
    report.failed_roles = [c.role for c in crashed]
    return report


def summarize(report: ReportDocument) -> None:
    for key, value in report.averaged.items():
        log.print_bold(f"{key}: {value:.3f}")
    log.print_normal(
        f"{report.successful_repeats} repeat(s) succeeded, {report.failed_repeats} failed"
    )
    for error in report.errors:
        log.print_fail(error)


def main(argv: T.Optional[T.Sequence[str]] = None) -> int:
    try:
        cfg, spec = parse_config(argv)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    if spec.role == Role.PS:
        return run_ps_role(spec)
    if spec.role == Role.WORKER:
        return run_worker_role(spec)

    try:
        report = orchestrate(spec)
        emit(report, cfg.output_format, cfg.output)
    except BenchError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"unable to write report: {exc}", file=sys.stderr)
        return 1
    summarize(report)
    if not report.ok:
        failing = ", ".join(report.failing_roles()) or "all repeats"
        print(f"run failed in: {failing}", file=sys.stderr)
        return 1
    return 0
