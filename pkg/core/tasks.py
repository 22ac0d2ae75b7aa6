# core/tasks.py
# A task binds a model to its data stream: per-epoch batches, gradients and evaluation.
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from core import datagen
from core.datagen import CtrDatasetConfig, CtrSamples, QuadBatch
from core.model import (
    EmbeddingTable,
    LogisticEmbeddingModel,
    ModelParams,
    NoiseModel,
    QuadraticProblem,
    SparseGradient,
    auc,
    logistic_grad,
    logistic_loss,
    logistic_scores,
    quad_loss,
    quad_stochastic_grad,
)
from errors import ArgumentError, UndefinedMetricError
from utils.seeding import make_rng

logger = logging.getLogger(__name__)


def make_quadratic_problem(dim: int, a_min: float, a_max: float, sigma: float, theta: float,
                           batch_size: int, problem_seed: int = 0) -> QuadraticProblem:
    rng = make_rng(problem_seed, "quadratic-problem")
    a = np.sort(rng.uniform(a_min, a_max, dim)) if a_max > a_min else np.full(dim, float(a_min))
    w_star = rng.standard_normal(dim)
    return QuadraticProblem(a, w_star, NoiseModel(sigma, theta, batch_size))


@dataclass
class QuadraticTask:
    """Dense-only quadratic; each epoch is a fresh stream of Q noise descriptors."""

    problem: QuadraticProblem
    samples_per_epoch: int
    seed: int = 0
    init_scale: float = 1.0
    problem_seed: int = 0
    uses_ids: bool = False

    def __post_init__(self):
        if self.samples_per_epoch % self.batch_size:
            raise ArgumentError(
                f"samples_per_epoch {self.samples_per_epoch} is not divisible by batch size {self.batch_size}"
            )

    @property
    def batch_size(self) -> int:
        return self.problem.noise.batch_size

    @property
    def batches_per_epoch(self) -> int:
        return self.samples_per_epoch // self.batch_size

    def initial_params(self) -> ModelParams:
        # Fixed by the problem seed so every run seed starts from the same error.
        offset = make_rng(self.problem_seed, "quadratic-init").standard_normal(self.problem.dim)
        return ModelParams(self.problem.w_star + self.init_scale * offset, EmbeddingTable(1), 0)

    def epoch_batches(self, epoch: int) -> list[QuadBatch]:
        return datagen.quad_stream(self.problem, self.batches_per_epoch, self.seed, epoch)

    def gradient(self, snapshot: ModelParams, batch: QuadBatch) -> SparseGradient:
        grad = quad_stochastic_grad(snapshot, self.problem, np.random.default_rng(batch.sub_seed))
        grad.batch_index = batch.index
        return grad

    def start_epoch(self, epoch: int) -> None:
        pass

    def step_metrics(self, params: ModelParams) -> dict:
        return {"loss": quad_loss(params, self.problem)}

    def evaluate(self, params: ModelParams, epoch: int) -> dict:
        return {"loss": quad_loss(params, self.problem)}


@dataclass
class CtrTask:
    """Logistic model on day-structured CTR data: epoch e trains on day e, evaluates on day e+1.

    Days wrap for training; the evaluation day never wraps back to day 0 (see datagen.eval_day).
    """

    model: LogisticEmbeddingModel
    dataset: CtrDatasetConfig
    batch_size: int
    seed: int = 0
    eval_every: int = 0
    uses_ids: bool = True
    _samples: CtrSamples | None = field(default=None, repr=False)
    _current_epoch: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.dataset.train_size % self.batch_size:
            raise ArgumentError(
                f"{self.dataset.train_size} training samples per day are not divisible by batch size {self.batch_size}"
            )

    @property
    def samples(self) -> CtrSamples:
        if self._samples is None:
            # Same data for every run seed; the seed only reshuffles and drives the cluster.
            self._samples = datagen.gen_ctr_samples(self.dataset, self.dataset.truth_seed)
        return self._samples

    @property
    def batches_per_epoch(self) -> int:
        return self.dataset.train_size // self.batch_size

    def initial_params(self) -> ModelParams:
        return self.model.init_params()

    def epoch_batches(self, epoch: int) -> list[datagen.Batch]:
        return datagen.day_train_batches(self.samples, self.dataset, epoch, self.batch_size, self.seed, epoch)

    def gradient(self, snapshot: ModelParams, batch: datagen.Batch) -> SparseGradient:
        return logistic_grad(self.model, snapshot, batch)

    def eval_samples(self, epoch: int) -> CtrSamples:
        _, held_out = datagen.day_slices(self.samples, self.dataset, datagen.eval_day(self.dataset, epoch))
        return held_out

    def evaluate(self, params: ModelParams, epoch: int) -> dict:
        held_out = self.eval_samples(epoch)
        if len(held_out) == 0:
            return {"loss": float("nan"), "auc": float("nan")}
        batch = held_out.as_batch()
        metrics = {"loss": logistic_loss(self.model, params, batch)}
        try:
            metrics["auc"] = auc(logistic_scores(self.model, params, batch), batch.labels)
        except UndefinedMetricError:
            metrics["auc"] = float("nan")
        return metrics

    def step_metrics(self, params: ModelParams) -> dict:
        if self.eval_every and params.global_step % self.eval_every == 0:
            return self.evaluate(params, self._current_epoch)
        return {}

    def start_epoch(self, epoch: int) -> None:
        self._current_epoch = epoch


Task = QuadraticTask | CtrTask
