import enum
import json
import os
import threading
import typing as T
from dataclasses import dataclass, field, replace
from pathlib import Path

import dotenv

from ps_rpc_bench.errors import ConfigError
from ps_rpc_bench.rpc import DEFAULT_HOST, DEFAULT_PORT, Endpoint
from ps_rpc_bench.wire import Mode
from ps_rpc_bench.workload import (
    ALL_CATEGORIES,
    MAX_BUFFER_BYTES,
    U64_MASK,
    BufferCategory,
    BufferSizeConfig,
    PayloadSpec,
    Scheme,
    generate,
)

ENV_PREFIX = "TFGB_"
MIN_MONITOR_INTERVAL_MS = 10


class Benchmark(str, enum.Enum):
    LATENCY = "latency"
    BANDWIDTH = "bandwidth"
    THROUGHPUT = "throughput"


class Direction(str, enum.Enum):
    PUSH = "push"
    PULL = "pull"


class OutputFormat(str, enum.Enum):
    JSON = "json"
    CSV = "csv"
    BOTH = "both"


def _parse_enum(enum_type: T.Type[T.Any], name: str) -> T.Callable[[T.Any], T.Any]:
    def parse(value: T.Any) -> T.Any:
        if isinstance(value, enum_type):
            return value
        text = str(value).strip().lower()
        for member in enum_type:
            if member.value == text:
                return member
        choices = ", ".join(m.value for m in enum_type)
        raise ConfigError(f"--{name} must be one of {choices}, got {value!r}")

    return parse


def _split(value: T.Any) -> T.List[str]:
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value if str(v).strip()]
    return [part.strip() for part in str(value).split(",") if part.strip()]


def _parse_bool(value: T.Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"Cannot read {value!r} as a boolean")


def _typed(cast: T.Callable[[T.Any], T.Any], name: str) -> T.Callable[[T.Any], T.Any]:
    def parse(value: T.Any) -> T.Any:
        if isinstance(value, bool):
            raise ConfigError(f"--{name} expects a number, got {value!r}")
        try:
            return cast(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"--{name} expects a number, got {value!r}") from exc

    return parse


@dataclass
class BenchConfig:
    benchmark: Benchmark = Benchmark.LATENCY
    ip: str = DEFAULT_HOST
    port: int = DEFAULT_PORT
    ps_endpoints: T.Tuple[Endpoint, ...] = ()
    num_ps: int = 1
    num_workers: int = 1
    mode: Mode = Mode.NON_SERIALIZED
    scheme: Scheme = Scheme.UNIFORM
    iovec_count: int = 10
    sizes: BufferSizeConfig = field(default_factory=BufferSizeConfig)
    categories: T.Tuple[BufferCategory, ...] = ALL_CATEGORIES
    bias: BufferCategory = BufferCategory.LARGE
    custom_sizes: T.Tuple[int, ...] = ()
    warmup_secs: float = 2.0
    duration_secs: float = 10.0
    seed: int = 1
    repeats: int = 1
    direction: Direction = Direction.PUSH
    monitor_interval_ms: int = 100
    output: str = "results"
    output_format: OutputFormat = OutputFormat.BOTH
    capture: bool = False
    verbose: bool = False
    startup_timeout_secs: float = 10.0

    @property
    def endpoints(self) -> T.List[Endpoint]:
        """Explicit PS endpoints, else num_ps consecutive ports from ip:port."""
        if self.ps_endpoints:
            return list(self.ps_endpoints)
        return Endpoint.consecutive(self.ip, self.port, self.num_ps)

    def payload_spec(self) -> PayloadSpec:
        return generate(
            self.scheme,
            self.categories,
            self.iovec_count,
            self.sizes,
            self.bias,
            self.seed,
            custom_sizes=self.custom_sizes,
        )

    # pylint: disable=too-many-branches
    def validate(self) -> "BenchConfig":
        if self.num_ps < 1:
            raise ConfigError(f"--num-ps must be >= 1, got {self.num_ps}")
        if self.num_workers < 1:
            raise ConfigError(f"--num-workers must be >= 1, got {self.num_workers}")
        if self.benchmark != Benchmark.THROUGHPUT and (self.num_ps != 1 or self.num_workers != 1):
            raise ConfigError(
                f"{self.benchmark.value} runs between exactly one PS and one worker "
                f"(got --num-ps {self.num_ps} --num-workers {self.num_workers})"
            )
        if not 1 <= self.port <= 65535:
            raise ConfigError(f"--port must be a valid port [1, 65535], got {self.port}")
        if self.ps_endpoints and len(self.ps_endpoints) != self.num_ps:
            raise ConfigError(
                f"--ps-endpoints lists {len(self.ps_endpoints)} endpoints but --num-ps is "
                f"{self.num_ps}"
            )
        if self.iovec_count < 1:
            raise ConfigError(f"--iovec-count must be >= 1, got {self.iovec_count}")
        if self.warmup_secs < 0:
            raise ConfigError(f"--warmup must be >= 0 seconds, got {self.warmup_secs}")
        if self.duration_secs <= 0:
            raise ConfigError(f"--duration must be > 0 seconds, got {self.duration_secs}")
        if self.repeats < 1:
            raise ConfigError(f"--repeats must be >= 1, got {self.repeats}")
        if self.monitor_interval_ms < MIN_MONITOR_INTERVAL_MS:
            raise ConfigError(
                f"--monitor-interval must be >= {MIN_MONITOR_INTERVAL_MS} ms, "
                f"got {self.monitor_interval_ms}"
            )
        if not 0 <= self.seed <= U64_MASK:
            raise ConfigError(f"--seed must be a 64-bit unsigned value, got {self.seed}")
        if self.startup_timeout_secs <= 0:
            raise ConfigError(f"--startup-timeout must be > 0, got {self.startup_timeout_secs}")
        if self.scheme == Scheme.CUSTOM:
            if not self.custom_sizes:
                raise ConfigError("--scheme custom needs --custom-sizes")
            for size in self.custom_sizes:
                if not 1 <= size <= MAX_BUFFER_BYTES:
                    raise ConfigError(
                        f"--custom-sizes value {size} outside the buffer size range "
                        f"[1, {MAX_BUFFER_BYTES}] bytes"
                    )
        elif self.scheme in (Scheme.RANDOM, Scheme.SKEW) and len(self.categories) < 2:
            raise ConfigError(
                f"--scheme {self.scheme.value} needs at least two --categories, "
                f"got {[c.label for c in self.categories]}"
            )
        elif not self.categories:
            raise ConfigError("--categories must name at least one buffer category")
        if self.scheme == Scheme.SKEW and self.bias not in self.categories:
            raise ConfigError(f"--bias {self.bias.label} must be one of the chosen --categories")
        self.payload_spec()
        return self

    def to_dict(self) -> T.Dict[str, T.Any]:
        """Plain JSON-ready snapshot keyed by field name."""
        return {
            "benchmark": self.benchmark.value,
            "ip": self.ip,
            "port": self.port,
            "ps_endpoints": [str(e) for e in self.ps_endpoints],
            "num_ps": self.num_ps,
            "num_workers": self.num_workers,
            "mode": self.mode.label,
            "scheme": self.scheme.value,
            "iovec_count": self.iovec_count,
            "small": self.sizes.small_bytes,
            "medium": self.sizes.medium_bytes,
            "large": self.sizes.large_bytes,
            "categories": [c.label for c in self.categories],
            "bias": self.bias.label,
            "custom_sizes": list(self.custom_sizes),
            "warmup": self.warmup_secs,
            "duration": self.duration_secs,
            "seed": self.seed,
            "repeats": self.repeats,
            "direction": self.direction.value,
            "monitor_interval": self.monitor_interval_ms,
            "output": self.output,
            "format": self.output_format.value,
            "capture": self.capture,
            "verbose": self.verbose,
            "startup_timeout": self.startup_timeout_secs,
        }

    @staticmethod
    def from_dict(raw: T.Mapping[str, T.Any]) -> "BenchConfig":
        return apply_values(BenchConfig(), raw)


# flag name -> (BenchConfig field, parser); flag names double as env/file keys
OPTIONS: T.Dict[str, T.Tuple[str, T.Callable[[T.Any], T.Any]]] = {
    "benchmark": ("benchmark", _parse_enum(Benchmark, "benchmark")),
    "ip": ("ip", str),
    "port": ("port", _typed(int, "port")),
    "ps-endpoints": (
        "ps_endpoints",
        lambda v: tuple(Endpoint.parse(p) for p in _split(v)),
    ),
    "num-ps": ("num_ps", _typed(int, "num-ps")),
    "num-workers": ("num_workers", _typed(int, "num-workers")),
    "mode": ("mode", Mode.parse),
    "scheme": ("scheme", Scheme.parse),
    "iovec-count": ("iovec_count", _typed(int, "iovec-count")),
    "small": ("small", _typed(int, "small")),
    "medium": ("medium", _typed(int, "medium")),
    "large": ("large", _typed(int, "large")),
    "categories": (
        "categories",
        lambda v: tuple(sorted({BufferCategory.parse(c) for c in _split(v)})),
    ),
    "bias": ("bias", BufferCategory.parse),
    "custom-sizes": ("custom_sizes", lambda v: tuple(int(s) for s in _split(v))),
    "warmup": ("warmup_secs", _typed(float, "warmup")),
    "duration": ("duration_secs", _typed(float, "duration")),
    "seed": ("seed", _typed(int, "seed")),
    "repeats": ("repeats", _typed(int, "repeats")),
    "direction": ("direction", _parse_enum(Direction, "direction")),
    "monitor-interval": ("monitor_interval_ms", _typed(int, "monitor-interval")),
    "output": ("output", str),
    "format": ("output_format", _parse_enum(OutputFormat, "format")),
    "capture": ("capture", _parse_bool),
    "verbose": ("verbose", _parse_bool),
    "startup-timeout": ("startup_timeout_secs", _typed(float, "startup-timeout")),
}

SIZE_KEYS = {"small": "small_bytes", "medium": "medium_bytes", "large": "large_bytes"}


def normalize_key(key: str) -> str:
    return key.strip().lower().replace("_", "-")


def apply_values(config: BenchConfig, raw: T.Mapping[str, T.Any]) -> BenchConfig:
    """Return ``config`` with every recognised key in ``raw`` applied on top."""
    updates: T.Dict[str, T.Any] = {}
    size_updates: T.Dict[str, int] = {}
    for key, value in raw.items():
        name = normalize_key(key)
        if name not in OPTIONS:
            raise ConfigError(f"Unknown configuration key {key!r}")
        if value is None:
            continue
        target, parser = OPTIONS[name]
        try:
            parsed = parser(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"Invalid value for --{name}: {value!r}") from exc
        if name in SIZE_KEYS:
            size_updates[SIZE_KEYS[name]] = parsed
        else:
            updates[target] = parsed
    if size_updates:
        updates["sizes"] = replace(config.sizes, **size_updates)
    return replace(config, **updates)


def env_values(environ: T.Optional[T.Mapping[str, str]] = None) -> T.Dict[str, str]:
    """``TFGB_NUM_PS=2`` style variables, keyed by flag name."""
    environ = os.environ if environ is None else environ
    values = {}
    for name in OPTIONS:
        env_name = ENV_PREFIX + name.upper().replace("-", "_")
        if env_name in environ:
            values[name] = environ[env_name]
    return values


def load_config_file(path: T.Union[str, Path]) -> T.Dict[str, T.Any]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"Unable to read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return raw


class ConfigManager:
    """Thread-safe lazy-loaded configuration manager with runtime override support.

    The managed configuration is the defaults with ``TFGB_*`` environment
    variables (and a ``.env`` file) applied.
    """

    _instance: T.Optional["ConfigManager"] = None
    _lock = threading.Lock()
    _config: T.Optional[BenchConfig] = None
    _dotenv_loaded: bool = False
    _overrides_applied: bool = False

    def __new__(cls) -> "ConfigManager":
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super().__new__(cls)
        return cls._instance

    def get_config(self) -> BenchConfig:
        """Get the configuration, loading it lazily if needed."""
        if self._config is None:
            with self._lock:
                if self._config is None:
                    self._config = self._load_config()
        return self._config

    def _load_config(self) -> BenchConfig:
        if not self._dotenv_loaded:
            dotenv.load_dotenv()
            self._dotenv_loaded = True
        return apply_values(BenchConfig(), env_values())

    def set_config(self, **kwargs: T.Any) -> None:
        """Set configuration values at runtime."""
        with self._lock:
            if self._config is None:
                self._config = self._load_config()
            if kwargs:
                self._config = replace(self._config, **kwargs)
                self._overrides_applied = True

    def has_overrides(self) -> bool:
        return self._overrides_applied

    def reset_config(self) -> None:
        """Reset the configuration (useful for testing)."""
        with self._lock:
            self._config = None
            self._dotenv_loaded = False
            self._overrides_applied = False


_config_manager = ConfigManager()


def get_config() -> BenchConfig:
    """Defaults with environment overrides applied."""
    return _config_manager.get_config()


def set_config(**kwargs: T.Any) -> None:
    """Set configuration values at runtime.

    Example:
        set_config(num_ps=2, num_workers=3)
    """
    _config_manager.set_config(**kwargs)


def has_config_overrides() -> bool:
    return _config_manager.has_overrides()


def reset_config() -> None:
    _config_manager.reset_config()


def build_config(
    file_values: T.Optional[T.Mapping[str, T.Any]] = None,
    flag_values: T.Optional[T.Mapping[str, T.Any]] = None,
) -> BenchConfig:
    """Flags override file values override environment overrides defaults."""
    config = get_config()
    if file_values:
        config = apply_values(config, file_values)
    if flag_values:
        config = apply_values(config, flag_values)
    return config.validate()
