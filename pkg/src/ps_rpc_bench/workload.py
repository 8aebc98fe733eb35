"""
Payload generation over the Small/Medium/Large iovec buffer taxonomy.

A PayloadSpec is the ordered list of (category, size) pairs that make up one
RPC body. Specs are produced by one of the generation schemes (uniform,
random, skew, custom) and turned into bytes by ``materialize``. Every byte is
a pure function of (seed, buffer index), so two processes that agree on a
spec agree on its content.
"""

import enum
import hashlib
import typing as T
from dataclasses import dataclass, field

import numpy as np

from ps_rpc_bench.errors import ConfigError, RangeError

KIB = 1024
MIB = 1024 * 1024

MIN_BUFFER_BYTES = 1
MAX_BUFFER_BYTES = 10 * MIB

U64_MASK = (1 << 64) - 1
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
BUFFER_STREAM_SALT = 0xD1B54A32D192ED03

SKEW_WEIGHTS = (6, 3, 1)


class BufferCategory(enum.IntEnum):
    SMALL = 0
    MEDIUM = 1
    LARGE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def size_range(self) -> T.Tuple[int, int]:
        """Inclusive (low, high) byte bounds of the category."""
        return CATEGORY_RANGES[self]

    @staticmethod
    def parse(value: T.Union[str, "BufferCategory"]) -> "BufferCategory":
        if isinstance(value, BufferCategory):
            return value
        text = value.strip().lower()
        aliases = {"s": "small", "m": "medium", "l": "large"}
        text = aliases.get(text, text)
        for category in BufferCategory:
            if category.label == text:
                return category
        raise ConfigError(f"Unknown buffer category {value!r}; expected small, medium or large")


CATEGORY_RANGES: T.Dict[BufferCategory, T.Tuple[int, int]] = {
    BufferCategory.SMALL: (MIN_BUFFER_BYTES, KIB - 1),
    BufferCategory.MEDIUM: (KIB, MIB - 1),
    BufferCategory.LARGE: (MIB, MAX_BUFFER_BYTES),
}

ALL_CATEGORIES: T.Tuple[BufferCategory, ...] = tuple(BufferCategory)


class Scheme(str, enum.Enum):
    UNIFORM = "uniform"
    RANDOM = "random"
    SKEW = "skew"
    CUSTOM = "custom"

    @staticmethod
    def parse(value: T.Union[str, "Scheme"]) -> "Scheme":
        if isinstance(value, Scheme):
            return value
        try:
            return Scheme(value.strip().lower())
        except ValueError as exc:
            choices = ", ".join(s.value for s in Scheme)
            raise ConfigError(f"Unknown scheme {value!r}; expected one of {choices}") from exc


def categorize(size: int) -> BufferCategory:
    if size < MIN_BUFFER_BYTES or size > MAX_BUFFER_BYTES:
        raise RangeError(
            f"Buffer size {size} outside [{MIN_BUFFER_BYTES}, {MAX_BUFFER_BYTES}] bytes"
        )
    if size < KIB:
        return BufferCategory.SMALL
    if size < MIB:
        return BufferCategory.MEDIUM
    return BufferCategory.LARGE


@dataclass(frozen=True)
class BufferSizeConfig:
    small_bytes: int = 10
    medium_bytes: int = 10 * KIB
    large_bytes: int = MIB

    def __post_init__(self) -> None:
        for category, size in (
            (BufferCategory.SMALL, self.small_bytes),
            (BufferCategory.MEDIUM, self.medium_bytes),
            (BufferCategory.LARGE, self.large_bytes),
        ):
            low, high = category.size_range
            if not low <= size <= high:
                raise RangeError(
                    f"{category.label} buffer size {size} outside its range "
                    f"[{low}, {high}] bytes"
                )

    def size_of(self, category: BufferCategory) -> int:
        return {
            BufferCategory.SMALL: self.small_bytes,
            BufferCategory.MEDIUM: self.medium_bytes,
            BufferCategory.LARGE: self.large_bytes,
        }[category]

    def to_dict(self) -> T.Dict[str, int]:
        return {
            "small_bytes": self.small_bytes,
            "medium_bytes": self.medium_bytes,
            "large_bytes": self.large_bytes,
        }


@dataclass(frozen=True)
class BufferSpec:
    category: BufferCategory
    size: int


@dataclass(frozen=True)
class PayloadSpec:
    scheme: Scheme
    buffers: T.Tuple[BufferSpec, ...]
    seed: int

    def __post_init__(self) -> None:
        if not self.buffers:
            raise ConfigError("A payload spec needs at least one buffer")
        if not 0 <= self.seed <= U64_MASK:
            raise ConfigError(f"Seed {self.seed} is not a 64-bit unsigned value")
        for index, buf in enumerate(self.buffers):
            if categorize(buf.size) != buf.category:
                raise RangeError(
                    f"Buffer {index} of {buf.size} bytes does not belong to {buf.category.label}"
                )

    @property
    def total_bytes(self) -> int:
        return sum(buf.size for buf in self.buffers)

    @property
    def sizes(self) -> T.List[int]:
        return [buf.size for buf in self.buffers]

    def category_counts(self) -> T.Dict[BufferCategory, int]:
        counts = {category: 0 for category in BufferCategory}
        for buf in self.buffers:
            counts[buf.category] += 1
        return counts

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "scheme": self.scheme.value,
            "seed": self.seed,
            "buffers": [{"category": b.category.label, "size": b.size} for b in self.buffers],
        }

    @staticmethod
    def from_dict(raw: T.Dict[str, T.Any]) -> "PayloadSpec":
        return PayloadSpec(
            scheme=Scheme.parse(raw["scheme"]),
            seed=int(raw["seed"]),
            buffers=tuple(
                BufferSpec(BufferCategory.parse(b["category"]), int(b["size"]))
                for b in raw["buffers"]
            ),
        )


@dataclass(frozen=True)
class Payload:
    buffers: T.Tuple[bytes, ...]
    spec: PayloadSpec = field(compare=False)

    @property
    def total_bytes(self) -> int:
        return sum(len(buf) for buf in self.buffers)


def total_bytes(spec: PayloadSpec) -> int:
    return spec.total_bytes


def splitmix64(state: int) -> T.Tuple[int, int]:
    """Advance a splitmix64 state once; returns (new_state, output)."""
    state = (state + SPLITMIX_GAMMA) & U64_MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & U64_MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & U64_MASK
    return state, z ^ (z >> 31)


def mix(seed: int, index: int) -> int:
    """Per-buffer stream seed derived from the payload seed and buffer index."""
    salted = (seed ^ (((index + 1) * BUFFER_STREAM_SALT) & U64_MASK)) & U64_MASK
    return splitmix64(salted)[1]


def splitmix64_bytes(seed: int, length: int) -> bytes:
    """First ``length`` bytes of the little-endian splitmix64 word stream for ``seed``.

    splitmix64 is counter based (word k depends only on seed + k * gamma), so
    the whole stream is computed in one vectorized pass.
    """
    if length <= 0:
        return b""
    words = (length + 7) // 8
    with np.errstate(over="ignore"):
        z = np.arange(1, words + 1, dtype=np.uint64) * np.uint64(SPLITMIX_GAMMA)
        z += np.uint64(seed & U64_MASK)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
    return z.astype("<u8").tobytes()[:length]


def _ordered(categories: T.Iterable[T.Union[str, BufferCategory]]) -> T.List[BufferCategory]:
    return sorted({BufferCategory.parse(c) for c in categories})


def _check_count(count: int) -> None:
    if count < 1:
        raise ConfigError(f"iovec count must be >= 1, got {count}")


def _build(
    scheme: Scheme, chosen: T.Sequence[BufferCategory], sizes: BufferSizeConfig, seed: int
) -> PayloadSpec:
    return PayloadSpec(
        scheme=scheme,
        buffers=tuple(BufferSpec(c, sizes.size_of(c)) for c in chosen),
        seed=seed & U64_MASK,
    )


def generate_uniform(
    categories: T.Iterable[T.Union[str, BufferCategory]],
    count: int,
    sizes: BufferSizeConfig,
    seed: int,
) -> PayloadSpec:
    ordered = _ordered(categories)
    if not ordered:
        raise ConfigError("Uniform scheme needs at least one buffer category")
    _check_count(count)
    chosen = [ordered[i % len(ordered)] for i in range(count)]
    return _build(Scheme.UNIFORM, chosen, sizes, seed)


def generate_random(
    categories: T.Iterable[T.Union[str, BufferCategory]],
    count: int,
    sizes: BufferSizeConfig,
    seed: int,
) -> PayloadSpec:
    ordered = _ordered(categories)
    if len(ordered) < 2:
        raise ConfigError("Random scheme needs at least two buffer categories")
    _check_count(count)
    chosen: T.List[BufferCategory] = []
    state = seed & U64_MASK
    for _ in range(count):
        state, word = splitmix64(state)
        # multiply-shift maps a 64-bit word onto [0, k) without a modulo
        chosen.append(ordered[(word * len(ordered)) >> 64])
    return _build(Scheme.RANDOM, chosen, sizes, seed)


def skew_weights(
    categories: T.Sequence[BufferCategory], bias: BufferCategory
) -> T.Dict[BufferCategory, int]:
    """6 to the bias category, then 3 and 1 down the remaining ones by descending size."""
    rest = sorted((c for c in categories if c != bias), reverse=True)
    weights = {bias: SKEW_WEIGHTS[0]}
    for category, weight in zip(rest, SKEW_WEIGHTS[1:]):
        weights[category] = weight
    return weights


def skew_counts(
    categories: T.Sequence[BufferCategory], count: int, bias: BufferCategory
) -> T.Dict[BufferCategory, int]:
    """Largest-remainder apportionment of ``count`` over the 6:3:1 weights."""
    weights = skew_weights(categories, bias)
    denominator = sum(weights.values())
    counts = {c: (count * w) // denominator for c, w in weights.items()}
    remainders = {c: (count * w) % denominator for c, w in weights.items()}
    leftover = count - sum(counts.values())
    order = sorted(weights, key=lambda c: (-remainders[c], c != bias, -int(c)))
    for category in order[:leftover]:
        counts[category] += 1
    return counts


def generate_skew(
    categories: T.Iterable[T.Union[str, BufferCategory]],
    count: int,
    sizes: BufferSizeConfig,
    bias: T.Union[str, BufferCategory],
    seed: int,
) -> PayloadSpec:
    ordered = _ordered(categories)
    bias = BufferCategory.parse(bias)
    if len(ordered) < 2:
        raise ConfigError("Skew scheme needs at least two buffer categories")
    if bias not in ordered:
        raise ConfigError(
            f"Skew bias {bias.label} is not among the chosen categories "
            f"{[c.label for c in ordered]}"
        )
    _check_count(count)
    counts = skew_counts(ordered, count, bias)
    layout = [bias] + sorted((c for c in ordered if c != bias), reverse=True)
    chosen = [category for category in layout for _ in range(counts[category])]
    return _build(Scheme.SKEW, chosen, sizes, seed)


def generate_custom(sizes_list: T.Sequence[int], seed: int) -> PayloadSpec:
    if not sizes_list:
        raise ConfigError("Custom scheme needs at least one buffer size")
    return PayloadSpec(
        scheme=Scheme.CUSTOM,
        buffers=tuple(BufferSpec(categorize(int(size)), int(size)) for size in sizes_list),
        seed=seed & U64_MASK,
    )


# pylint: disable=too-many-arguments
# pylint: disable=too-many-positional-arguments
def generate(
    scheme: T.Union[str, Scheme],
    categories: T.Iterable[T.Union[str, BufferCategory]],
    count: int,
    sizes: BufferSizeConfig,
    bias: T.Union[str, BufferCategory],
    seed: int,
    custom_sizes: T.Optional[T.Sequence[int]] = None,
) -> PayloadSpec:
    scheme = Scheme.parse(scheme)
    if scheme == Scheme.UNIFORM:
        return generate_uniform(categories, count, sizes, seed)
    if scheme == Scheme.RANDOM:
        return generate_random(categories, count, sizes, seed)
    if scheme == Scheme.SKEW:
        return generate_skew(categories, count, sizes, bias, seed)
    return generate_custom(custom_sizes or [], seed)


def materialize(spec: PayloadSpec) -> Payload:
    return Payload(
        buffers=tuple(
            splitmix64_bytes(mix(spec.seed, index), buf.size)
            for index, buf in enumerate(spec.buffers)
        ),
        spec=spec,
    )


def content_digest(buffers: T.Iterable[T.Union[bytes, memoryview]]) -> str:
    digest = hashlib.sha256()
    for buf in buffers:
        digest.update(buf)
    return digest.hexdigest()
