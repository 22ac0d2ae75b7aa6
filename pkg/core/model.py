# core/model.py
# Toy differentiable models (quadratic, logistic with embeddings), gradients and the SGD step.
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Union

import numpy as np
import numpy.typing as npt
from scipy.special import expit
from scipy.stats import rankdata

from errors import ArgumentError, ConfigError, NumericFaultError, UndefinedMetricError

if TYPE_CHECKING:
    from core.datagen import Batch

logger = logging.getLogger(__name__)

DenseVector = npt.NDArray[np.float64]
FeatureId = int


def as_dense(values, dim: int | None = None) -> DenseVector:
    """Copy `values` into a finite 1-D float64 vector, optionally checking its dimension."""
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if dim is not None and vec.shape[0] != dim:
        raise ConfigError(f"expected a vector of dimension {dim}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise NumericFaultError("dense vector contains non-finite values")
    return vec


@dataclass
class EmbeddingTable:
    """Sparse map FeatureId -> vector of dimension `dim`; absent IDs read as zeros."""

    dim: int
    entries: dict[int, DenseVector] = field(default_factory=dict)

    def lookup(self, fid: int) -> DenseVector:
        vec = self.entries.get(int(fid))
        return np.zeros(self.dim) if vec is None else vec.copy()

    def subset(self, ids) -> "EmbeddingTable":
        # Missing IDs materialize as zeros in the copy only; the table itself is not touched.
        return EmbeddingTable(self.dim, {int(i): self.lookup(i) for i in ids})

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.dim, {k: v.copy() for k, v in self.entries.items()})

    def __contains__(self, fid: int) -> bool:
        return int(fid) in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class ModelParams:
    dense: DenseVector
    embeddings: EmbeddingTable = field(default_factory=lambda: EmbeddingTable(1))
    global_step: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.dense.copy(), self.embeddings.copy(), self.global_step)


@dataclass
class SparseGradient:
    """One worker's gradient plus the bookkeeping the PS needs to place it."""

    dense: DenseVector
    sparse: dict[int, DenseVector] = field(default_factory=dict)
    token: int = 0
    worker_id: int = 0
    pull_step: int = 0
    pull_id: int = -1
    batch_index: int = -1
    samples: int = 0

    def is_finite(self) -> bool:
        if not np.all(np.isfinite(self.dense)):
            return False
        return all(np.all(np.isfinite(v)) for v in self.sparse.values())


@dataclass
class Aggregate:
    """The update direction v_k produced by one aggregation."""

    dense: DenseVector
    sparse: dict[int, DenseVector] = field(default_factory=dict)

    def norm(self) -> float:
        total = float(self.dense @ self.dense)
        for fid in sorted(self.sparse):
            vec = self.sparse[fid]
            total += float(vec @ vec)
        return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# Quadratic problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0
    theta: float = 0.0
    batch_size: int = 1

    def __post_init__(self):
        if self.sigma < 0 or self.theta < 0:
            raise ConfigError("noise sigma and theta must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("noise batch_size must be positive")


@dataclass(frozen=True)
class QuadraticProblem:
    """F(w) = 1/2 sum_i a_i (w_i - w*_i)^2, so L = max a, c = min a and F* = 0."""

    a: DenseVector
    w_star: DenseVector
    noise: NoiseModel = NoiseModel()

    def __post_init__(self):
        a = as_dense(self.a)
        w_star = as_dense(self.w_star)
        if a.shape != w_star.shape:
            raise ConfigError(f"coefficients ({a.shape[0]}) and optimum ({w_star.shape[0]}) differ in dimension")
        if np.any(a <= 0):
            raise ConfigError("all quadratic coefficients must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "w_star", w_star)

    @property
    def dim(self) -> int:
        return int(self.a.shape[0])

    @property
    def L(self) -> float:
        return float(np.max(self.a))

    @property
    def c(self) -> float:
        return float(np.min(self.a))

    def with_batch_size(self, batch_size: int) -> "QuadraticProblem":
        noise = NoiseModel(self.noise.sigma, self.noise.theta, batch_size)
        return QuadraticProblem(self.a, self.w_star, noise)


ParamsLike = Union[ModelParams, np.ndarray]


def _dense_of(params: ParamsLike, dim: int) -> DenseVector:
    dense = params.dense if isinstance(params, ModelParams) else np.asarray(params, dtype=np.float64)
    if dense.shape != (dim,):
        raise ConfigError(f"parameter dimension {dense.shape} does not match problem dimension {dim}")
    return dense


def quad_loss(params: ParamsLike, problem: QuadraticProblem) -> float:
    diff = _dense_of(params, problem.dim) - problem.w_star
    return float(0.5 * np.sum(problem.a * diff * diff))


def quad_true_grad(params: ParamsLike, problem: QuadraticProblem) -> DenseVector:
    return problem.a * (_dense_of(params, problem.dim) - problem.w_star)


def quad_stochastic_grad(params: ParamsLike, problem: QuadraticProblem, rng: np.random.Generator) -> SparseGradient:
    """True gradient plus isotropic Gaussian noise of total variance sigma^2/B + theta/B * |grad F|^2."""
    grad = quad_true_grad(params, problem)
    noise = problem.noise
    variance = noise.sigma ** 2 / noise.batch_size + noise.theta / noise.batch_size * float(grad @ grad)
    if variance > 0:
        grad = grad + rng.standard_normal(problem.dim) * np.sqrt(variance / problem.dim)
    return SparseGradient(dense=grad, samples=noise.batch_size)


# ---------------------------------------------------------------------------
# Logistic model with mean-pooled embeddings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticEmbeddingModel:
    """score = dense . x + (mean of the sample's embedding vectors) . 1"""

    dense_dim: int
    embed_dim: int
    vocab: int

    def __post_init__(self):
        if min(self.dense_dim, self.embed_dim, self.vocab) < 1:
            raise ConfigError("logistic model dimensions must be positive")

    def init_params(self) -> ModelParams:
        return ModelParams(np.zeros(self.dense_dim), EmbeddingTable(self.embed_dim), 0)


def _check_batch(model: LogisticEmbeddingModel, params: ModelParams, batch: "Batch") -> None:
    if batch.size == 0:
        raise ArgumentError("logistic gradient needs a non-empty batch")
    if batch.dense.shape[1] != model.dense_dim or params.dense.shape[0] != model.dense_dim:
        raise ConfigError("batch or parameter dense dimension does not match the model")
    if batch.ids.ndim != 2 or batch.ids.shape[1] < 1:
        raise ArgumentError("every sample needs at least one feature ID")


def _pooled(params: ModelParams, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (per-sample embedding score, unique ids, inverse index into unique ids)."""
    unique, inverse = np.unique(ids, return_inverse=True)
    inverse = inverse.reshape(ids.shape)
    sums = np.array([params.embeddings.lookup(fid).sum() for fid in unique], dtype=np.float64)
    return sums[inverse].mean(axis=1), unique, inverse


def logistic_scores(model: LogisticEmbeddingModel, params: ModelParams, batch: "Batch") -> np.ndarray:
    _check_batch(model, params, batch)
    emb_score, _, _ = _pooled(params, batch.ids)
    return batch.dense @ params.dense + emb_score


def logistic_predict(model: LogisticEmbeddingModel, params: ModelParams, batch: "Batch") -> np.ndarray:
    return expit(logistic_scores(model, params, batch))


def logistic_loss(model: LogisticEmbeddingModel, params: ModelParams, batch: "Batch") -> float:
    scores = logistic_scores(model, params, batch)
    return float(np.mean(np.logaddexp(0.0, scores) - batch.labels * scores))


def logistic_grad(model: LogisticEmbeddingModel, params: ModelParams, batch: "Batch",
                  rng: np.random.Generator | None = None) -> SparseGradient:
    """Average cross-entropy gradient; sparse keys are exactly the batch's IDs."""
    _check_batch(model, params, batch)
    emb_score, unique, inverse = _pooled(params, batch.ids)
    residual = expit(batch.dense @ params.dense + emb_score) - batch.labels
    n, per_sample = batch.ids.shape
    dense = batch.dense.T @ residual / n
    # d score_j / d emb[id] = count_j(id) / per_sample * ones(e)
    weights = np.repeat(residual / (n * per_sample), per_sample)
    coeff = np.bincount(inverse.reshape(-1), weights=weights, minlength=unique.shape[0])
    ones = np.ones(model.embed_dim)
    sparse = {int(fid): coeff[i] * ones for i, fid in enumerate(unique)}
    return SparseGradient(dense=dense, sparse=sparse, samples=n, batch_index=batch.index)


# ---------------------------------------------------------------------------
# Update rule and metrics
# ---------------------------------------------------------------------------

def apply_update(params: ModelParams, v: Aggregate | SparseGradient, eta: float) -> ModelParams:
    """w <- w - eta * v, then global_step += 1. Mutates and returns `params`."""
    if not eta > 0:
        raise ArgumentError(f"learning rate must be positive, got {eta}")
    if v.dense.shape != params.dense.shape:
        raise ConfigError("update dimension does not match parameters")
    if not np.all(np.isfinite(v.dense)) or any(not np.all(np.isfinite(x)) for x in v.sparse.values()):
        raise NumericFaultError(f"non-finite update at step {params.global_step}; parameters left untouched")

    params.dense = params.dense - eta * v.dense
    table = params.embeddings
    for fid in sorted(v.sparse):
        table.entries[fid] = table.lookup(fid) - eta * v.sparse[fid]
    params.global_step += 1
    return params


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties credited 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ArgumentError("scores and labels must have the same length")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.shape[0]:
        raise ArgumentError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
