# core/bounds.py
# Closed-form convergence envelopes, one-step switching bounds, and the
# empirical estimates (gamma, zeta, p0) that feed them.
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from core.model import QuadraticProblem, quad_true_grad
from errors import ArgumentError, CapViolationError, LoggingNotEnabledError

logger = logging.getLogger(__name__)

GAMMA_INFLATION = 1.2
ORDER_RTOL = 1e-12


@dataclass(frozen=True)
class BoundInputs:
    L: float
    c: float
    sigma: float
    theta: float
    eta: float
    gamma: float = 0.0
    zeta: float = 1.0
    p0: float = 1.0
    p1: float = 1.0
    M: int = 1
    B_a: int = 1
    N_s: int = 1
    B_s: int = 1
    # worker count and local batch of the mode analyzed by the switching bounds
    N: int = 1
    B: int = 1

    def __post_init__(self):
        if not (self.L > 0 and self.c > 0 and self.eta > 0):
            raise ArgumentError("L, c and eta must be positive")
        if self.c > self.L:
            raise ArgumentError(f"strong convexity c={self.c} exceeds smoothness L={self.L}")
        if self.sigma < 0 or self.theta < 0:
            raise ArgumentError("sigma and theta must be >= 0")
        if min(self.M, self.B_a, self.N_s, self.B_s, self.N, self.B) < 1:
            raise ArgumentError("worker counts and batch sizes must be positive")
        _check_unit("gamma", self.gamma)
        _check_unit("p0", self.p0)
        _check_unit("p1", self.p1)
        if not 0 < self.zeta <= 1:
            raise ArgumentError(f"zeta must lie in (0, 1], got {self.zeta}")


def _check_unit(name: str, value: float) -> None:
    if not 0 <= value <= 1:
        raise ArgumentError(f"{name} must lie in [0, 1], got {value}")


def bound_inputs_for(problem: QuadraticProblem, eta: float, **kwargs) -> BoundInputs:
    """BoundInputs with L, c, sigma and theta read off a quadratic problem."""
    return BoundInputs(L=problem.L, c=problem.c, sigma=problem.noise.sigma, theta=problem.noise.theta,
                       eta=eta, **kwargs)


# ---------------------------------------------------------------------------
# Composite constants
# ---------------------------------------------------------------------------

def gamma_prime(gamma: float, p0: float) -> float:
    _check_unit("gamma", gamma)
    _check_unit("p0", p0)
    return 1.0 - gamma + p0 / 2.0


def rho(gamma: float, zeta: float, p0: float, p1: float) -> float:
    """Sparsity-aware replacement for gamma'; equals it when p1 = 1 or zeta = 1."""
    _check_unit("gamma", gamma)
    _check_unit("zeta", zeta)
    _check_unit("p0", p0)
    _check_unit("p1", p1)
    return 1.0 - p1 * gamma - (1.0 - p1) * zeta * gamma + p0 / 2.0


# ---------------------------------------------------------------------------
# Caps, floors and envelopes
# ---------------------------------------------------------------------------

def async_cap(inputs: BoundInputs) -> float:
    return 1.0 / (2.0 * inputs.L * (inputs.theta / (inputs.M * inputs.B_a) + 1.0))


def sync_cap(inputs: BoundInputs) -> float:
    return 1.0 / (2.0 * inputs.L * (inputs.theta / (inputs.N_s * inputs.B_s) + 1.0))


def switch_cap(inputs: BoundInputs) -> float:
    return 1.0 / (2.0 * inputs.L * (inputs.theta / inputs.B + 1.0))


def switch_lower_cap(inputs: BoundInputs) -> float:
    return 1.0 / (inputs.N * inputs.L * (inputs.theta / inputs.B + 1.0))


def _require_cap(eta: float, cap: float, what: str) -> None:
    if eta > cap:
        raise CapViolationError(f"{what}: eta={eta:g} exceeds the step-size cap {cap:g}", cap)


def _async_factor(inputs: BoundInputs, use_rho: bool) -> float:
    factor = rho(inputs.gamma, inputs.zeta, inputs.p0, inputs.p1) if use_rho else gamma_prime(inputs.gamma, inputs.p0)
    if factor <= 0:
        raise ArgumentError(f"staleness composite is {factor:g}; the envelope has no contraction")
    return factor


def async_floor(inputs: BoundInputs, use_rho: bool = False) -> float:
    factor = _async_factor(inputs, use_rho)
    return inputs.eta * inputs.L * inputs.sigma ** 2 / (2.0 * inputs.c * factor * inputs.M * inputs.B_a)


def async_rate(inputs: BoundInputs, use_rho: bool = False) -> float:
    return 1.0 - inputs.eta * _async_factor(inputs, use_rho) * inputs.c


def sync_floor(inputs: BoundInputs) -> float:
    return inputs.eta * inputs.L * inputs.sigma ** 2 / (2.0 * inputs.c * inputs.N_s * inputs.B_s)


def sync_rate(inputs: BoundInputs) -> float:
    return 1.0 - inputs.eta * inputs.c


def async_envelope(k: int, E0: float, inputs: BoundInputs, use_rho: bool = False) -> float:
    """floor + (1 - eta gamma' c)^k (E0 - floor), with rho in place of gamma' when use_rho."""
    _require_cap(inputs.eta, async_cap(inputs), "asynchronous envelope")
    if k < 0:
        raise ArgumentError("k must be >= 0")
    floor = async_floor(inputs, use_rho)
    return floor + async_rate(inputs, use_rho) ** k * (E0 - floor)


def sync_envelope(k: int, E0: float, inputs: BoundInputs) -> float:
    _require_cap(inputs.eta, sync_cap(inputs), "synchronous envelope")
    if k < 0:
        raise ArgumentError("k must be >= 0")
    floor = sync_floor(inputs)
    return floor + sync_rate(inputs) ** k * (E0 - floor)


@dataclass(frozen=True)
class Envelope:
    values: np.ndarray
    floor: float
    rate: float
    cap: float

    def __len__(self) -> int:
        return int(self.values.shape[0])


def envelope_curve(kind: str, steps: int, E0: float, inputs: BoundInputs, use_rho: bool = False) -> Envelope:
    """Envelope values for k = 0..steps."""
    ks = np.arange(steps + 1)
    if kind == "sync":
        _require_cap(inputs.eta, sync_cap(inputs), "synchronous envelope")
        floor, rate, cap = sync_floor(inputs), sync_rate(inputs), sync_cap(inputs)
    elif kind == "async":
        _require_cap(inputs.eta, async_cap(inputs), "asynchronous envelope")
        floor, rate, cap = async_floor(inputs, use_rho), async_rate(inputs, use_rho), async_cap(inputs)
    else:
        raise ArgumentError(f"unknown envelope kind {kind!r}; expected 'sync' or 'async'")
    return Envelope(values=floor + rate ** ks * (E0 - floor), floor=floor, rate=rate, cap=cap)


# ---------------------------------------------------------------------------
# One-step bounds right after a mode switch
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SwitchBounds:
    stay: float
    switch: float
    ordered: bool
    grad_coefficient: float | None = None

    @property
    def gap(self) -> float:
        return self.switch - self.stay


def _ordered(stay: float, switch: float) -> bool:
    return stay <= switch + ORDER_RTOL * max(1.0, abs(switch))


def switch_step_bounds_async_to_sync(inputs: BoundInputs, E_k: float, grad_k: float,
                                     grad_tau: float) -> SwitchBounds:
    """Next-step loss bounds for continuing asynchronously vs switching to synchronous.

    E_k is E[F(w_k)], grad_k is E|grad F(w_k)|^2, grad_tau is E|grad F(w_tau(k))|^2.
    The step size must satisfy 1/(N L (theta/B + 1)) <= eta <= 1/(2 L (theta/B + 1)).
    """
    lower, upper = switch_lower_cap(inputs), switch_cap(inputs)
    eta = inputs.eta
    if lower > upper:
        raise CapViolationError(f"no admissible step size for N={inputs.N}: lower cap {lower:g} > upper cap {upper:g}",
                                (lower, upper))
    if not lower <= eta <= upper:
        raise CapViolationError(f"eta={eta:g} outside [{lower:g}, {upper:g}]", (lower, upper))

    L, B, N, gamma = inputs.L, inputs.B, inputs.N, inputs.gamma
    noise = L * eta ** 2 * inputs.sigma ** 2 / (2.0 * B)
    shared = E_k - eta / 2.0 * (1.0 - gamma) * grad_k + noise
    stay = shared - eta / 4.0 * grad_tau
    coefficient = L * eta ** 2 * inputs.theta / (2.0 * B) + L * eta ** 2 / 2.0 - eta / (2.0 * N)
    switch = shared + noise / N + coefficient * grad_k - eta / (4.0 * N) * grad_tau
    return SwitchBounds(stay=stay, switch=switch, ordered=_ordered(stay, switch), grad_coefficient=coefficient)


def switch_step_bounds_sync_to_async(inputs: BoundInputs, E_k: float, grad_k: float) -> SwitchBounds:
    """Next-step loss bounds for continuing synchronously vs switching to asynchronous."""
    upper = switch_cap(inputs)
    _require_cap(inputs.eta, upper, "sync-to-async switch bound")

    L, B, N, eta, theta = inputs.L, inputs.B, inputs.N, inputs.eta, inputs.theta
    sigma2 = inputs.sigma ** 2
    stay = E_k - eta * (1.0 - L * eta * theta / (2.0 * N * B) - L * eta / 2.0) * grad_k \
        + L * eta ** 2 * sigma2 / (2.0 * N * B)
    switch = E_k - eta * (1.0 - L * eta * theta / (2.0 * B) - L * eta / 2.0) * grad_k \
        + L * eta ** 2 * sigma2 / (2.0 * B)
    return SwitchBounds(stay=stay, switch=switch, ordered=_ordered(stay, switch))


@dataclass(frozen=True)
class SweepResult:
    draws: int
    async_to_sync_violations: int
    sync_to_async_violations: int

    @property
    def violations(self) -> int:
        return self.async_to_sync_violations + self.sync_to_async_violations


def _random_inputs(rng: np.random.Generator) -> BoundInputs:
    L = float(rng.uniform(0.5, 5.0))
    return BoundInputs(
        L=L, c=float(rng.uniform(0.05, 1.0)) * L, sigma=float(rng.uniform(0.0, 3.0)),
        theta=float(rng.uniform(0.0, 2.0)), eta=1e-3, gamma=float(rng.uniform(0.0, 1.0)),
        N=int(rng.integers(2, 65)), B=int(rng.integers(1, 257)),
    )


def sweep_switch_orderings(draws: int = 1000, seed: int = 0) -> SweepResult:
    """Check both switching orderings on random admissible parameter draws."""
    rng = np.random.default_rng(seed)
    a2s = s2a = 0
    for _ in range(draws):
        base = _random_inputs(rng)
        E_k, grad_k, grad_tau = (float(x) for x in rng.uniform(0.0, 10.0, size=3))

        lower, upper = switch_lower_cap(base), switch_cap(base)
        inputs = replace(base, eta=float(rng.uniform(lower, upper)))
        if not switch_step_bounds_async_to_sync(inputs, E_k, grad_k, grad_tau).ordered:
            a2s += 1

        inputs = replace(base, eta=float(rng.uniform(0.01, 1.0)) * upper)
        if not switch_step_bounds_sync_to_async(inputs, E_k, grad_k).ordered:
            s2a += 1
    if a2s or s2a:
        logger.error(f"❌ Switching bound ordering violated: {a2s} async->sync, {s2a} sync->async of {draws}")
    return SweepResult(draws, a2s, s2a)


# ---------------------------------------------------------------------------
# Empirical estimates from traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaEstimate:
    gamma: float
    zeta: float
    entries: int
    excluded: int


def _applied_entries(trace) -> list[dict]:
    return [r for r in trace.records if r.get("kind") == "apply"]


def estimate_gamma(trace, problem: QuadraticProblem) -> GammaEstimate:
    """gamma_hat = max over applied entries of |grad F(w_k) - grad F(w_pull)|^2 / |grad F(w_k)|^2.

    Needs a parameter snapshot for every step (record_snapshots). Steps where grad F(w_k) = 0
    are excluded and counted.
    """
    entries = _applied_entries(trace)
    if not trace.snapshots:
        raise LoggingNotEnabledError("gamma estimation needs parameter snapshots; logging not enabled "
                                     "(output.record_snapshots)")
    gamma = 0.0
    excluded = 0
    grads: dict[int, np.ndarray] = {}

    def grad_at(step: int) -> np.ndarray:
        if step not in grads:
            grads[step] = quad_true_grad(trace.snapshot(step), problem)
        return grads[step]

    for r in entries:
        k, pulled = int(r["apply_step"]), int(r["pull_step"])
        current = grad_at(k)
        denom = float(current @ current)
        if denom == 0.0:
            excluded += 1
            continue
        if pulled == k:
            continue
        diff = current - grad_at(pulled)
        gamma = max(gamma, float(diff @ diff) / denom)
    if excluded:
        logger.warning(f"⚠️ Excluded {excluded} entries at zero-gradient steps from the gamma estimate")
    return GammaEstimate(gamma=gamma, zeta=estimate_zeta(trace), entries=len(entries), excluded=excluded)


def estimate_zeta(trace) -> float:
    """Mean probability that an ID applied at step k was also applied at step k-1.

    Dense-only traces (no ID records) report 1.
    """
    steps = [r for r in trace.records if r.get("kind") == "step" and r.get("ids")]
    if len(steps) < 2:
        return 1.0
    overlaps = []
    previous: set[int] | None = None
    for r in steps:
        ids = set(int(x) for x in r["ids"])
        if previous is not None and ids:
            overlaps.append(len(ids & previous) / len(ids))
        previous = ids
    if not overlaps:
        return 1.0
    # zeta lives in (0, 1]
    return float(min(max(np.mean(overlaps), 1e-12), 1.0))


def estimate_p0(trace) -> float:
    """Fraction of aggregated entries whose batch was pulled at the step it is applied to."""
    entries = [r for r in trace.records if r.get("kind") in ("apply", "drop")]
    if not entries:
        raise ArgumentError("p0 estimation needs at least one aggregation")
    fresh = sum(1 for r in entries if int(r["pull_step"]) == int(r["apply_step"]))
    return fresh / len(entries)


def inflate_gamma(gamma: float, factor: float = GAMMA_INFLATION) -> float:
    return min(1.0, gamma * factor)


def deflate_p0(p0: float, factor: float = GAMMA_INFLATION) -> float:
    return p0 / factor


# ---------------------------------------------------------------------------
# Envelope check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvelopeCheck:
    passed: bool
    worst_margin: float
    worst_step: int
    seeds: int
    slack: float

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def check_envelope(errors, envelope: Envelope | np.ndarray, slack: float = 3.0,
                   min_seeds: int = 20) -> EnvelopeCheck:
    """Pass iff the seed-mean error stays under envelope + slack * stderr at every step.

    `errors` is a (seeds, steps) array of F(w_k) - F*.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2:
        raise ArgumentError("errors must be a (seeds, steps) array")
    seeds, steps = errors.shape
    if seeds < min_seeds:
        raise ArgumentError(f"envelope check needs errors from >= {min_seeds} seeds, got {seeds}")
    values = envelope.values if isinstance(envelope, Envelope) else np.asarray(envelope, dtype=np.float64)
    if values.shape[0] < steps:
        raise ArgumentError(f"envelope covers {values.shape[0]} steps but errors have {steps}")
    values = values[:steps]

    mean = errors.mean(axis=0)
    stderr = errors.std(axis=0, ddof=1) / math.sqrt(seeds) if seeds > 1 else np.zeros(steps)
    tolerance = 1e-9 * np.maximum(1.0, np.abs(values))
    margin = values + slack * stderr + tolerance - mean
    worst = int(np.argmin(margin))
    passed = bool(np.all(margin >= 0))
    if not passed:
        logger.warning(f"⚠️ Envelope exceeded at step {worst} by {-margin[worst]:.3g}")
    return EnvelopeCheck(passed=passed, worst_margin=float(margin[worst] - tolerance[worst]), worst_step=worst,
                         seeds=seeds, slack=slack)
