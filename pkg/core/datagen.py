# core/datagen.py
# Synthetic data: Zipf-skewed CTR samples split into days, and the quadratic noise stream.
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import pandas as pd

from errors import ArgumentError
from utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZipfConfig:
    exponent: float = 1.2
    vocab: int = 10_000

    def __post_init__(self):
        if self.exponent < 0:
            raise ArgumentError("Zipf exponent must be >= 0")
        if self.vocab < 1:
            raise ArgumentError("Zipf vocabulary must contain at least one ID")


@lru_cache(maxsize=32)
def _zipf_cdf(exponent: float, vocab: int) -> np.ndarray:
    weights = np.arange(1, vocab + 1, dtype=np.float64) ** (-exponent)
    cdf = np.cumsum(weights / weights.sum())
    cdf[-1] = 1.0
    cdf.setflags(write=False)
    return cdf


def zipf_pmf(config: ZipfConfig) -> np.ndarray:
    cdf = _zipf_cdf(float(config.exponent), int(config.vocab))
    return np.diff(np.concatenate(([0.0], cdf)))


def zipf_ranks(config: ZipfConfig, rng: np.random.Generator, size) -> np.ndarray:
    """Vectorized draws of ranks in 1..V with P(r) proportional to r^-alpha."""
    if config.vocab < 1:
        raise ArgumentError("Zipf vocabulary must contain at least one ID")
    cdf = _zipf_cdf(float(config.exponent), int(config.vocab))
    idx = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(idx, config.vocab - 1) + 1


def zipf_sample(config: ZipfConfig, rng: np.random.Generator) -> int:
    return int(zipf_ranks(config, rng, None))


# ---------------------------------------------------------------------------
# CTR-style dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CtrDatasetConfig:
    num_samples: int = 51_200
    dense_dim: int = 8
    ids_per_sample: int = 3
    zipf: ZipfConfig = ZipfConfig()
    truth_seed: int = 0
    label_noise: float = 0.1
    id_effect_scale: float = 0.5
    days: int = 8
    eval_fraction: float = 0.125

    def __post_init__(self):
        if not 0.0 <= self.label_noise < 0.5:
            raise ArgumentError(f"label_noise must be in [0, 0.5), got {self.label_noise}")
        if min(self.num_samples, self.dense_dim, self.ids_per_sample, self.days) < 1:
            raise ArgumentError("dataset sizes must be positive")
        if self.num_samples % self.days:
            raise ArgumentError(f"{self.num_samples} samples cannot be split into {self.days} equal days")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ArgumentError("eval_fraction must be in [0, 1)")

    @property
    def day_size(self) -> int:
        return self.num_samples // self.days

    @property
    def eval_size(self) -> int:
        return int(round(self.day_size * self.eval_fraction))

    @property
    def train_size(self) -> int:
        return self.day_size - self.eval_size


@dataclass
class Batch:
    """B samples: dense features (B x d), feature IDs (B x s) and labels."""

    index: int
    dense: np.ndarray
    ids: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_ids(self) -> np.ndarray:
        return np.unique(self.ids)


@dataclass(frozen=True)
class CtrSamples:
    dense: np.ndarray
    ids: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def take(self, order: np.ndarray) -> "CtrSamples":
        return CtrSamples(self.dense[order], self.ids[order], self.labels[order])

    def as_batch(self, index: int = 0) -> Batch:
        return Batch(index, self.dense, self.ids, self.labels)


@dataclass(frozen=True)
class GroundTruth:
    """Ground-truth logistic scorer labels are drawn from."""

    dense: np.ndarray
    id_effect: np.ndarray

    def scores(self, dense: np.ndarray, ids: np.ndarray) -> np.ndarray:
        return dense @ self.dense + self.id_effect[ids].mean(axis=1)


def ground_truth(config: CtrDatasetConfig) -> GroundTruth:
    rng = make_rng(config.truth_seed, "truth")
    dense = rng.standard_normal(config.dense_dim) / np.sqrt(config.dense_dim)
    id_effect = rng.standard_normal(config.zipf.vocab) * config.id_effect_scale
    return GroundTruth(dense, id_effect)


def gen_ctr_samples(config: CtrDatasetConfig, seed: int) -> CtrSamples:
    truth = ground_truth(config)
    rng = make_rng(seed, "ctr-samples")
    n = config.num_samples
    dense = rng.standard_normal((n, config.dense_dim))
    ids = zipf_ranks(config.zipf, rng, (n, config.ids_per_sample)) - 1
    labels = (truth.scores(dense, ids) > 0).astype(np.float64)
    if config.label_noise > 0:
        flip = rng.random(n) < config.label_noise
        labels[flip] = 1.0 - labels[flip]
    return CtrSamples(dense, ids.astype(np.int64), labels)


def _batches(samples: CtrSamples, batch_size: int) -> list[Batch]:
    if batch_size < 1 or len(samples) % batch_size:
        raise ArgumentError(f"{len(samples)} samples are not divisible into batches of {batch_size}")
    return [
        Batch(i, samples.dense[lo:lo + batch_size], samples.ids[lo:lo + batch_size], samples.labels[lo:lo + batch_size])
        for i, lo in enumerate(range(0, len(samples), batch_size))
    ]


def gen_ctr_dataset(config: CtrDatasetConfig, seed: int, batch_size: int, epoch: int = 0) -> list[Batch]:
    """All samples cut into Q = N / B batches, reshuffled with a per-epoch derived seed."""
    samples = gen_ctr_samples(config, seed)
    if len(samples) % batch_size:
        raise ArgumentError(f"{len(samples)} samples are not divisible into batches of {batch_size}")
    order = make_rng(seed, "shuffle", epoch).permutation(len(samples))
    return _batches(samples.take(order), batch_size)


def train_day(config: CtrDatasetConfig, epoch: int) -> int:
    """Epochs past the last day start over from day 0."""
    return epoch % config.days


def eval_day(config: CtrDatasetConfig, epoch: int) -> int:
    """The day after the training day; the last day evaluates on its own held-out part."""
    return min(train_day(config, epoch) + 1, config.days - 1)


def day_slices(samples: CtrSamples, config: CtrDatasetConfig, day: int) -> tuple[CtrSamples, CtrSamples]:
    """(train part, held-out eval part) of one day."""
    if not 0 <= day < config.days:
        raise ArgumentError(f"day {day} outside 0..{config.days - 1}")
    lo = day * config.day_size
    train_end = lo + config.train_size
    return (
        CtrSamples(samples.dense[lo:train_end], samples.ids[lo:train_end], samples.labels[lo:train_end]),
        CtrSamples(samples.dense[train_end:lo + config.day_size], samples.ids[train_end:lo + config.day_size],
                   samples.labels[train_end:lo + config.day_size]),
    )


def day_train_batches(samples: CtrSamples, config: CtrDatasetConfig, day: int, batch_size: int,
                      seed: int, epoch: int) -> list[Batch]:
    train, _ = day_slices(samples, config, train_day(config, day))
    order = make_rng(seed, "shuffle", epoch).permutation(len(train))
    return _batches(train.take(order), batch_size)


def id_histogram(batches) -> dict[int, int]:
    """Number of batches (not samples) each ID occurs in."""
    counts: dict[int, int] = {}
    for batch in batches:
        ids = batch.ids if hasattr(batch, "ids") else batch
        for fid in np.unique(np.asarray(ids)):
            counts[int(fid)] = counts.get(int(fid), 0) + 1
    return counts


def id_rank_frame(histogram: dict[int, int], total_batches: int | None = None) -> pd.DataFrame:
    """Rank-ordered export of an id_histogram for plotting."""
    frame = pd.DataFrame(sorted(histogram.items(), key=lambda kv: (-kv[1], kv[0])), columns=["feature_id", "batches"])
    frame.insert(0, "rank", np.arange(1, len(frame) + 1))
    if total_batches:
        frame["batch_fraction"] = frame["batches"] / total_batches
    return frame


def export_ctr_text(samples: CtrSamples, path: str | Path) -> Path:
    """label<TAB>dense values (comma separated)<TAB>feature IDs (space separated), one sample per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for label, dense, ids in zip(samples.labels, samples.dense, samples.ids):
            fh.write(f"{int(label)}\t{','.join(repr(float(x)) for x in dense)}\t{' '.join(str(int(i)) for i in ids)}\n")
    logger.info(f"📦 Wrote {len(samples)} samples to {path}")
    return path


# ---------------------------------------------------------------------------
# Quadratic stream
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadBatch:
    """Descriptor only; the noise is synthesized from `sub_seed` at compute time."""

    index: int
    sub_seed: int
    size: int


def quad_stream(problem, Q: int, seed: int = 0, epoch: int = 0) -> list[QuadBatch]:
    if Q < 1:
        raise ArgumentError("quad_stream needs Q >= 1")
    batch_size = problem.noise.batch_size
    return [QuadBatch(i, derive_seed(seed, "quad", epoch, i), batch_size) for i in range(Q)]
