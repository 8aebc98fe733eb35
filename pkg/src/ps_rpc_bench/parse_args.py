import argparse

from ps_rpc_bench.config import Benchmark, Direction, OutputFormat
from ps_rpc_bench.workload import Scheme

# Only flags actually given reach the namespace; defaults come from the config layers.
QUIET = argparse.SUPPRESS


def add_benchmark_args(parser: argparse.ArgumentParser) -> None:
    bench_parser = parser.add_argument_group("benchmark-options")
    bench_parser.add_argument(
        "--benchmark", choices=[b.value for b in Benchmark], default=QUIET
    )
    bench_parser.add_argument(
        "--mode",
        choices=["non-serialized", "serialized"],
        default=QUIET,
        help="Wire mode: scatter-gather segments or one contiguous TLV message",
    )
    bench_parser.add_argument("--warmup", type=float, default=QUIET, help="Warmup seconds")
    bench_parser.add_argument("--duration", type=float, default=QUIET, help="Measured seconds")
    bench_parser.add_argument("--repeats", type=int, default=QUIET)
    bench_parser.add_argument(
        "--direction",
        choices=[d.value for d in Direction],
        default=QUIET,
        help="Throughput only: push (PUT) or pull (GET)",
    )


def add_topology_args(parser: argparse.ArgumentParser) -> None:
    topo_parser = parser.add_argument_group("topology-options")
    topo_parser.add_argument("--ip", default=QUIET, help="Parameter server address")
    topo_parser.add_argument("--port", type=int, default=QUIET, help="First PS port")
    topo_parser.add_argument(
        "--ps-endpoints",
        default=QUIET,
        help="Comma-separated host:port list, one per PS (overrides --ip/--port)",
    )
    topo_parser.add_argument("--num-ps", type=int, default=QUIET)
    topo_parser.add_argument("--num-workers", type=int, default=QUIET)


def add_payload_args(parser: argparse.ArgumentParser) -> None:
    payload_parser = parser.add_argument_group("payload-options")
    payload_parser.add_argument("--scheme", choices=[s.value for s in Scheme], default=QUIET)
    payload_parser.add_argument("--iovec-count", type=int, default=QUIET)
    payload_parser.add_argument("--small", type=int, default=QUIET, help="Small buffer bytes")
    payload_parser.add_argument("--medium", type=int, default=QUIET, help="Medium buffer bytes")
    payload_parser.add_argument("--large", type=int, default=QUIET, help="Large buffer bytes")
    payload_parser.add_argument(
        "--categories", default=QUIET, help="Comma-separated subset of small,medium,large"
    )
    payload_parser.add_argument("--bias", default=QUIET, help="Skew scheme bias category")
    payload_parser.add_argument(
        "--custom-sizes", default=QUIET, help="Comma-separated buffer sizes for --scheme custom"
    )
    payload_parser.add_argument("--seed", type=int, default=QUIET)


def add_output_args(parser: argparse.ArgumentParser) -> None:
    output_parser = parser.add_argument_group("output-options")
    output_parser.add_argument("--output", default=QUIET, help="Report directory")
    output_parser.add_argument(
        "--format", choices=[f.value for f in OutputFormat], default=QUIET
    )
    output_parser.add_argument("--monitor-interval", type=int, default=QUIET, help="ms")
    output_parser.add_argument(
        "--capture",
        action="store_true",
        default=QUIET,
        help="Record the digests of every distinct payload sent",
    )
    output_parser.add_argument("--verbose", action="store_true", default=QUIET)
    output_parser.add_argument("--startup-timeout", type=float, default=QUIET, help="Seconds")


def add_role_args(parser: argparse.ArgumentParser) -> None:
    role_parser = parser.add_argument_group("role-options")
    role_parser.add_argument("--role", choices=["driver", "ps", "worker"], default="driver")
    role_parser.add_argument("--config", default=None, help="JSON file keyed by flag names")
    role_parser.add_argument(
        "--result-path", default=None, help="Where a ps/worker child writes its JSON result"
    )
    role_parser.add_argument("--worker-index", type=int, default=0)
    role_parser.add_argument("--ps-index", type=int, default=0, help="Which endpoint a PS binds")
    role_parser.add_argument("--host", default=None, help="Bind address for role ps")


def add_bench_args(parser: argparse.ArgumentParser) -> None:
    add_benchmark_args(parser)
    add_topology_args(parser)
    add_payload_args(parser)
    add_output_args(parser)


ROLE_DESTS = ("role", "config", "result_path", "worker_index", "ps_index", "host")
