# core/modes.py
# The six training modes, the global-batch algebra and the step policies the PS consumes.
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import ClassVar, Union

from errors import ArgumentError, ConfigError, SwitchConfigError


def _positive(mode, *names: str) -> None:
    for name in names:
        value = getattr(mode, name)
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"{mode.kind}: {name} must be a positive integer, got {value!r}", field=f"mode.{name}")


@dataclass(frozen=True, kw_only=True)
class SyncMode:
    kind: ClassVar[str] = "sync"
    n_workers: int
    batch_size: int
    eta: float = 0.1

    def __post_init__(self):
        _positive(self, "n_workers", "batch_size")


@dataclass(frozen=True, kw_only=True)
class AsyncMode:
    kind: ClassVar[str] = "async"
    n_workers: int
    batch_size: int
    eta: float = 0.1

    def __post_init__(self):
        _positive(self, "n_workers", "batch_size")


@dataclass(frozen=True, kw_only=True)
class BspMode:
    kind: ClassVar[str] = "bsp"
    n_workers: int
    batch_size: int
    b2: int
    eta: float = 0.1

    def __post_init__(self):
        _positive(self, "n_workers", "batch_size", "b2")


@dataclass(frozen=True, kw_only=True)
class HopBsMode:
    kind: ClassVar[str] = "hop-bs"
    n_workers: int
    batch_size: int
    b1: int
    eta: float = 0.1

    def __post_init__(self):
        _positive(self, "n_workers", "batch_size")
        if not isinstance(self.b1, int) or self.b1 < 0:
            raise ConfigError(f"hop-bs: b1 must be a non-negative integer, got {self.b1!r}", field="mode.b1")


@dataclass(frozen=True, kw_only=True)
class HopBwMode:
    kind: ClassVar[str] = "hop-bw"
    n_workers: int
    batch_size: int
    b3: int
    eta: float = 0.1

    def __post_init__(self):
        _positive(self, "n_workers", "batch_size")
        if not isinstance(self.b3, int) or not 0 <= self.b3 < self.n_workers:
            raise ConfigError(f"hop-bw: b3 must satisfy 0 <= b3 < n_workers, got {self.b3!r}", field="mode.b3")


@dataclass(frozen=True, kw_only=True)
class GbaMode:
    """GBA runs M workers, one buffer slot per worker."""

    kind: ClassVar[str] = "gba"
    m: int
    batch_size: int
    iota: float = math.inf
    eta: float = 0.1

    def __post_init__(self):
        _positive(self, "m", "batch_size")
        if not self.iota >= 0:
            raise ConfigError(f"gba: iota must be >= 0, got {self.iota!r}", field="mode.iota")

    @property
    def n_workers(self) -> int:
        return self.m


ModeConfig = Union[SyncMode, AsyncMode, BspMode, HopBsMode, HopBwMode, GbaMode]
MODE_TYPES: dict[str, type] = {cls.kind: cls for cls in (SyncMode, AsyncMode, BspMode, HopBsMode, HopBwMode, GbaMode)}


@dataclass(frozen=True)
class GlobalBatch:
    G: int


@dataclass(frozen=True)
class StepPolicy:
    """What the PS does for a mode: when to aggregate and whom to admit, filter or cancel."""

    kind: str
    capacity: int
    n_workers: int
    batch_size: int
    iota: float = math.inf
    barrier: bool = False
    staleness_bound: int | None = None
    backup: int = 0


def compute_M(B_s: int, N_s: int, B_a: int) -> int:
    """Buffer size keeping the global batch: M = B_s * N_s / B_a, exactly."""
    if min(B_s, N_s, B_a) < 1:
        raise ArgumentError("batch sizes and worker counts must be positive")
    total = B_s * N_s
    if total % B_a:
        lo = max(total // B_a, 1)
        raise SwitchConfigError(f"B_s*N_s = {total} is not divisible by B_a = {B_a}", candidates=(lo, lo + 1))
    return total // B_a


def global_batch(mode: ModeConfig) -> GlobalBatch:
    if isinstance(mode, SyncMode):
        return GlobalBatch(mode.n_workers * mode.batch_size)
    if isinstance(mode, GbaMode):
        return GlobalBatch(mode.m * mode.batch_size)
    if isinstance(mode, BspMode):
        return GlobalBatch(mode.b2 * mode.batch_size)
    if isinstance(mode, HopBsMode):
        return GlobalBatch(mode.n_workers * mode.batch_size)
    if isinstance(mode, HopBwMode):
        return GlobalBatch((mode.n_workers - mode.b3) * mode.batch_size)
    return GlobalBatch(mode.batch_size)


def gba_from_sync(mode: SyncMode, batch_size: int, iota: float = math.inf) -> GbaMode:
    m = compute_M(mode.batch_size, mode.n_workers, batch_size)
    return GbaMode(m=m, batch_size=batch_size, iota=iota, eta=mode.eta)


def gba_for_global_batch(G: int, batch_size: int, iota: float = math.inf, eta: float = 0.1) -> GbaMode:
    if G % batch_size:
        lo = max(G // batch_size, 1)
        raise SwitchConfigError(f"global batch {G} is not divisible by B_a = {batch_size}", candidates=(lo, lo + 1))
    return GbaMode(m=G // batch_size, batch_size=batch_size, iota=iota, eta=eta)


def step_semantics(mode: ModeConfig) -> StepPolicy:
    n, b = mode.n_workers, mode.batch_size
    if isinstance(mode, SyncMode):
        return StepPolicy("sync", capacity=n, n_workers=n, batch_size=b, barrier=True)
    if isinstance(mode, AsyncMode):
        return StepPolicy("async", capacity=1, n_workers=n, batch_size=b)
    if isinstance(mode, BspMode):
        return StepPolicy("bsp", capacity=mode.b2, n_workers=n, batch_size=b)
    if isinstance(mode, HopBsMode):
        return StepPolicy("hop-bs", capacity=n, n_workers=n, batch_size=b, staleness_bound=mode.b1)
    if isinstance(mode, HopBwMode):
        return StepPolicy("hop-bw", capacity=n - mode.b3, n_workers=n, batch_size=b, barrier=True, backup=mode.b3)
    if isinstance(mode, GbaMode):
        return StepPolicy("gba", capacity=mode.m, n_workers=n, batch_size=b, iota=mode.iota)
    raise ConfigError(f"unknown mode {mode!r}")


def mode_to_dict(mode: ModeConfig) -> dict:
    data = asdict(mode)
    if data.get("iota") == math.inf:
        data["iota"] = "inf"
    return {"kind": mode.kind, **data}


def mode_from_dict(data: dict) -> ModeConfig:
    data = dict(data)
    kind = data.pop("kind", None)
    cls = MODE_TYPES.get(kind)
    if cls is None:
        raise ConfigError(f"unknown mode kind {kind!r}", field="mode.kind")
    if "iota" in data:
        data["iota"] = float(data["iota"])
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys for mode {kind}: {sorted(unknown)}", field="mode")
    return cls(**data)


def mode_label(mode: ModeConfig) -> str:
    if isinstance(mode, GbaMode):
        iota = "inf" if math.isinf(mode.iota) else f"{mode.iota:g}"
        return f"gba(M={mode.m},B={mode.batch_size},iota={iota})"
    extra = {"bsp": "b2", "hop-bs": "b1", "hop-bw": "b3"}.get(mode.kind)
    tail = f",{extra}={getattr(mode, extra)}" if extra else ""
    return f"{mode.kind}(N={mode.n_workers},B={mode.batch_size}{tail})"
