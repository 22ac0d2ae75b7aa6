# cluster/profiles.py
# Per-worker speed profiles: compute-time sampler, slowdown schedule, failures, download pipeline.
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from errors import ConfigError

SamplerKind = Literal["constant", "uniform", "lognormal"]


@dataclass(frozen=True)
class ComputeSampler:
    """Per-batch compute time in simulated seconds.

    constant: `seconds`; uniform: U(low, high); lognormal: median * exp(sigma * N(0, 1)).
    """

    kind: SamplerKind = "constant"
    seconds: float = 1.0
    low: float = 0.5
    high: float = 1.5
    median: float = 1.0
    sigma: float = 0.25

    def __post_init__(self):
        if self.kind == "constant" and not self.seconds > 0:
            raise ConfigError("constant compute time must be > 0", field="cluster.profiles.seconds")
        if self.kind == "uniform" and not 0 < self.low <= self.high:
            raise ConfigError("uniform compute times need 0 < low <= high", field="cluster.profiles.low")
        if self.kind == "lognormal" and not (self.median > 0 and self.sigma >= 0):
            raise ConfigError("lognormal compute times need median > 0 and sigma >= 0", field="cluster.profiles.median")
        if self.kind not in ("constant", "uniform", "lognormal"):
            raise ConfigError(f"unknown compute sampler {self.kind!r}", field="cluster.profiles.compute")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return self.seconds
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        return float(self.median * math.exp(self.sigma * rng.standard_normal()))

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return self.seconds
        if self.kind == "uniform":
            return 0.5 * (self.low + self.high)
        return self.median * math.exp(0.5 * self.sigma ** 2)


@dataclass(frozen=True)
class WorkerProfile:
    worker_id: int
    compute: ComputeSampler = ComputeSampler()
    # (start time, multiplier) pairs; the multiplier holds until the next start.
    slowdown: tuple[tuple[float, float], ...] = ()
    # (fail_at, recover_at or None for a permanent failure)
    failures: tuple[tuple[float, float | None], ...] = ()
    download_time: float = 0.0
    download_capacity: int = 1
    _starts: tuple[float, ...] = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        slowdown = tuple(sorted((float(t), float(m)) for t, m in self.slowdown))
        if any(m <= 0 for _, m in slowdown):
            raise ConfigError("slowdown multipliers must be > 0", field="cluster.profiles.slowdown")
        object.__setattr__(self, "slowdown", slowdown)
        object.__setattr__(self, "_starts", tuple(t for t, _ in slowdown))

        failures = tuple(sorted((float(f), None if r is None else float(r)) for f, r in self.failures))
        last_end = -math.inf
        for fail_at, recover_at in failures:
            if fail_at < last_end:
                raise ConfigError(f"worker {self.worker_id}: failure intervals overlap", field="cluster.profiles.failures")
            if recover_at is not None and recover_at <= fail_at:
                raise ConfigError(f"worker {self.worker_id}: recover_at must follow fail_at",
                                  field="cluster.profiles.failures")
            last_end = math.inf if recover_at is None else recover_at
        object.__setattr__(self, "failures", failures)

        if self.download_time < 0 or self.download_capacity < 1:
            raise ConfigError("download_time must be >= 0 and download_capacity >= 1",
                              field="cluster.profiles.download_time")

    def multiplier(self, t: float) -> float:
        i = bisect.bisect_right(self._starts, t) - 1
        return self.slowdown[i][1] if i >= 0 else 1.0

    def compute_time(self, rng: np.random.Generator, t: float) -> float:
        return self.compute.sample(rng) * self.multiplier(t)

    @property
    def uses_pipeline(self) -> bool:
        return self.download_time > 0


def constant_profiles(seconds: list[float] | tuple[float, ...]) -> list[WorkerProfile]:
    """One deterministic worker per entry, e.g. [1, 1, 1, 4] for a single straggler."""
    return [WorkerProfile(w, ComputeSampler("constant", seconds=float(s))) for w, s in enumerate(seconds)]


def homogeneous_profiles(n: int, seconds: float = 1.0) -> list[WorkerProfile]:
    return constant_profiles([seconds] * n)


def analytic_rates(profiles: list[WorkerProfile], batch_size: int) -> list[float]:
    """Samples per second per worker, from mean compute times."""
    return [batch_size / p.compute.mean for p in profiles]
