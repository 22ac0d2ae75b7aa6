# experiments/config.py
# Experiment config: YAML on disk, validated by pydantic, turned into tasks, modes and profiles.
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_serializer, field_validator, model_validator

from cluster.profiles import ComputeSampler, WorkerProfile
from cluster.simulator import SimConfig
from core.datagen import CtrDatasetConfig, ZipfConfig
from core.model import LogisticEmbeddingModel
from core.modes import (
    AsyncMode,
    BspMode,
    GbaMode,
    HopBsMode,
    HopBwMode,
    ModeConfig,
    SyncMode,
)
from core.tasks import CtrTask, QuadraticTask, Task, make_quadratic_problem
from errors import ConfigError, LabError

logger = logging.getLogger(__name__)


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# model / data
# ---------------------------------------------------------------------------

class QuadraticModelSection(Section):
    kind: Literal["quadratic"]
    dim: int = Field(16, ge=1)
    a_min: float = Field(0.5, gt=0)
    a_max: float = Field(1.0, gt=0)
    sigma: float = Field(1.0, ge=0)
    theta: float = Field(0.0, ge=0)
    problem_seed: int = 0
    init_scale: float = 1.0

    @model_validator(mode="after")
    def _ordered_range(self):
        if self.a_max < self.a_min:
            raise ValueError("a_max must be >= a_min")
        return self


class LogisticModelSection(Section):
    kind: Literal["logistic-ctr"]
    dense_dim: int = Field(8, ge=1)
    embed_dim: int = Field(4, ge=1)


ModelSection = Annotated[Union[QuadraticModelSection, LogisticModelSection], Field(discriminator="kind")]


class DataSection(Section):
    # quadratic: samples drawn per epoch (Q = samples_per_epoch / B)
    samples_per_epoch: int = Field(12_800, ge=1)
    # logistic-ctr
    num_samples: int = Field(51_200, ge=1)
    days: int = Field(8, ge=1)
    ids_per_sample: int = Field(3, ge=1)
    vocab: int = Field(10_000, ge=1)
    zipf_exponent: float = Field(1.2, ge=0)
    label_noise: float = Field(0.1, ge=0, lt=0.5)
    id_effect_scale: float = Field(0.5, ge=0)
    eval_fraction: float = Field(0.125, ge=0, lt=1)
    truth_seed: int = 0

    def ctr_config(self, dense_dim: int) -> CtrDatasetConfig:
        return CtrDatasetConfig(
            num_samples=self.num_samples, dense_dim=dense_dim, ids_per_sample=self.ids_per_sample,
            zipf=ZipfConfig(self.zipf_exponent, self.vocab), truth_seed=self.truth_seed,
            label_noise=self.label_noise, id_effect_scale=self.id_effect_scale, days=self.days,
            eval_fraction=self.eval_fraction,
        )


# ---------------------------------------------------------------------------
# mode
# ---------------------------------------------------------------------------

class _WorkersSection(Section):
    n_workers: int = Field(ge=1)
    batch_size: int = Field(ge=1)


class SyncSection(_WorkersSection):
    kind: Literal["sync"]

    def build(self, eta: float, **_) -> ModeConfig:
        return SyncMode(n_workers=self.n_workers, batch_size=self.batch_size, eta=eta)


class AsyncSection(_WorkersSection):
    kind: Literal["async"]

    def build(self, eta: float, **_) -> ModeConfig:
        return AsyncMode(n_workers=self.n_workers, batch_size=self.batch_size, eta=eta)


class BspSection(_WorkersSection):
    kind: Literal["bsp"]
    b2: int = Field(ge=1)

    def build(self, eta: float, **_) -> ModeConfig:
        return BspMode(n_workers=self.n_workers, batch_size=self.batch_size, b2=self.b2, eta=eta)


class HopBsSection(_WorkersSection):
    kind: Literal["hop-bs"]
    b1: int = Field(ge=0)

    def build(self, eta: float, **_) -> ModeConfig:
        return HopBsMode(n_workers=self.n_workers, batch_size=self.batch_size, b1=self.b1, eta=eta)


class HopBwSection(_WorkersSection):
    kind: Literal["hop-bw"]
    b3: int = Field(ge=0)

    @model_validator(mode="after")
    def _fewer_backups_than_workers(self):
        if self.b3 >= self.n_workers:
            raise ValueError("b3 must be smaller than n_workers")
        return self

    def build(self, eta: float, **_) -> ModeConfig:
        return HopBwMode(n_workers=self.n_workers, batch_size=self.batch_size, b3=self.b3, eta=eta)


class GbaSection(Section):
    kind: Literal["gba"]
    # None: derived from the checkpoint (or switch base) being continued
    m: int | None = Field(None, ge=1)
    batch_size: int = Field(ge=1)
    iota: float = math.inf

    @field_validator("iota", mode="before")
    @classmethod
    def _parse_inf(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", ".inf"):
            return math.inf
        return value

    @field_validator("iota")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("iota must be >= 0")
        return value

    @field_serializer("iota")
    def _dump_inf(self, value: float):
        return "inf" if math.isinf(value) else value

    def build(self, eta: float, m: int | None = None, **_) -> ModeConfig:
        m = self.m if self.m is not None else m
        if m is None:
            raise ConfigError("gba mode needs m, or a sync checkpoint (--from) to derive it from", field="mode.m")
        return GbaMode(m=m, batch_size=self.batch_size, iota=self.iota, eta=eta)


ModeSection = Annotated[
    Union[SyncSection, AsyncSection, BspSection, HopBsSection, HopBwSection, GbaSection],
    Field(discriminator="kind"),
]


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------

class ComputeSection(Section):
    kind: Literal["constant", "uniform", "lognormal"] = "constant"
    seconds: float = Field(1.0, gt=0)
    low: float = Field(0.5, gt=0)
    high: float = Field(1.5, gt=0)
    median: float = Field(1.0, gt=0)
    sigma: float = Field(0.25, ge=0)

    def sampler(self) -> ComputeSampler:
        return ComputeSampler(self.kind, self.seconds, self.low, self.high, self.median, self.sigma)


class ProfileSection(Section):
    compute: ComputeSection = ComputeSection()
    slowdown: list[tuple[float, float]] = []
    failures: list[tuple[float, float | None]] = []
    download_time: float = Field(0.0, ge=0)
    download_capacity: int = Field(1, ge=1)

    def build(self, worker_id: int) -> WorkerProfile:
        return WorkerProfile(worker_id, self.compute.sampler(), tuple(self.slowdown), tuple(self.failures),
                             self.download_time, self.download_capacity)


class ClusterSection(Section):
    default_profile: ProfileSection = ProfileSection()
    profiles: list[ProfileSection] | None = None
    # shorthand for deterministic per-worker compute times, e.g. [1, 1, 1, 4]
    compute_seconds: list[float] | None = None
    pull_latency: float = Field(0.0, ge=0)
    push_latency: float = Field(0.0, ge=0)

    def build_profiles(self, n_workers: int) -> list[WorkerProfile]:
        if self.profiles is not None:
            if len(self.profiles) != n_workers:
                raise ConfigError(f"{len(self.profiles)} profiles given for {n_workers} workers",
                                  field="cluster.profiles")
            return [p.build(w) for w, p in enumerate(self.profiles)]
        if self.compute_seconds is not None:
            if len(self.compute_seconds) != n_workers:
                raise ConfigError(f"{len(self.compute_seconds)} compute times given for {n_workers} workers",
                                  field="cluster.compute_seconds")
            return [
                self.default_profile.model_copy(update={"compute": ComputeSection(seconds=s)}).build(w)
                for w, s in enumerate(self.compute_seconds)
            ]
        return [self.default_profile.build(w) for w in range(n_workers)]


# ---------------------------------------------------------------------------
# run / output / studies
# ---------------------------------------------------------------------------

class RunSection(Section):
    eta: float = Field(0.05, gt=0)
    epochs: int = Field(1, ge=1)
    max_steps: int | None = Field(None, ge=0)
    seeds: list[int] = [0]
    runner: Literal["sim", "live"] = "sim"
    wall_budget: float = Field(60.0, gt=0)
    eval_every: int = Field(0, ge=0)

    @field_validator("seeds")
    @classmethod
    def _some_seeds(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("at least one seed is required")
        return value


class OutputSection(Section):
    dir: str = "runs/experiment"
    record_snapshots: bool = False
    log_norms: bool = True
    log_ids: bool = False


class SwitchSection(Section):
    direction: Literal["from_base", "to_base"] = "from_base"
    base_epochs: int = Field(1, ge=1)
    target_epochs: int = Field(1, ge=1)
    targets: list[ModeSection] = Field(min_length=1)


class ScaleSection(Section):
    variants: list[ModeSection] = Field(min_length=1)


class BoundsSection(Section):
    kind: Literal["sync", "async"] = "sync"
    use_rho: bool = False
    slack: float = Field(3.0, ge=0)
    min_seeds: int = Field(20, ge=1)
    sweep_draws: int = Field(1000, ge=0)
    # optional trace to measure gamma and p0 from instead of the runs made here
    trace: str | None = None


class ExperimentConfig(Section):
    name: str = "experiment"
    model: ModelSection
    data: DataSection = DataSection()
    mode: ModeSection
    cluster: ClusterSection = ClusterSection()
    run: RunSection = RunSection()
    output: OutputSection = OutputSection()
    switch: SwitchSection | None = None
    scale: ScaleSection | None = None
    bounds: BoundsSection | None = None

    def sim_config(self, max_steps: int | None = None) -> SimConfig:
        return SimConfig(
            pull_latency=self.cluster.pull_latency,
            push_latency=self.cluster.push_latency,
            max_steps=self.run.max_steps if max_steps is None else max_steps,
            record_snapshots=self.output.record_snapshots,
            log_norms=self.output.log_norms,
            log_ids=self.output.log_ids,
        )

    def build_mode(self, section=None, m: int | None = None) -> ModeConfig:
        section = section or self.mode
        try:
            return section.build(self.run.eta, m=m)
        except ConfigError:
            raise
        except LabError as exc:
            raise ConfigError(str(exc), field="mode") from exc

    def build_task(self, batch_size: int, seed: int) -> Task:
        model = self.model
        try:
            if isinstance(model, QuadraticModelSection):
                problem = make_quadratic_problem(model.dim, model.a_min, model.a_max, model.sigma, model.theta,
                                                 batch_size, model.problem_seed)
                return QuadraticTask(problem, self.data.samples_per_epoch, seed, model.init_scale, model.problem_seed)
            dataset = self.data.ctr_config(model.dense_dim)
            return CtrTask(LogisticEmbeddingModel(model.dense_dim, model.embed_dim, self.data.vocab), dataset,
                           batch_size, seed, self.run.eval_every)
        except ConfigError:
            raise
        except LabError as exc:
            raise ConfigError(str(exc), field="data") from exc


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _line_map(node, prefix: tuple = (), out: dict | None = None) -> dict[tuple, int]:
    """Map every key path of a composed YAML document to its 1-based line."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = prefix + (key.value,)
            out[path] = key.start_mark.line + 1
            _line_map(value, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = prefix + (i,)
            out[path] = item.start_mark.line + 1
            _line_map(item, path, out)
    return out


def _locate(loc: tuple, lines: dict[tuple, int]) -> tuple[str, int | None]:
    # Discriminated unions add the tag to `loc`; drop parts that are not keys in the file.
    path: tuple = ()
    line = None
    named = []
    for part in loc:
        candidate = path + (part,)
        if candidate in lines:
            path = candidate
            line = lines[candidate]
            named.append(str(part))
        elif isinstance(part, str) and part not in ("sync", "async", "bsp", "hop-bs", "hop-bw", "gba",
                                                    "quadratic", "logistic-ctr"):
            named.append(part)
    return ".".join(named), line


def _merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_config(text: str, *, mode_override: dict | str | None = None, seed: int | None = None,
                 out: str | None = None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text) or {}
        lines = _line_map(yaml.compose(text)) if text.strip() else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {exc}", line=mark.line + 1 if mark else None) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")

    if mode_override:
        if isinstance(mode_override, str):
            mode_override = yaml.safe_load(mode_override)
        if not isinstance(mode_override, dict):
            raise ConfigError("--mode-override must be a YAML mapping", field="mode")
        if "kind" in mode_override and mode_override["kind"] != (raw.get("mode") or {}).get("kind"):
            raw["mode"] = dict(mode_override)
        else:
            raw["mode"] = _merge(raw.get("mode") or {}, mode_override)
    if seed is not None:
        raw.setdefault("run", {})
        raw["run"]["seeds"] = [seed]
    if out is not None:
        raw.setdefault("output", {})
        raw["output"]["dir"] = out

    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        field, line = _locate(tuple(first["loc"]), lines)
        raise ConfigError(first["msg"], field=field or None, line=line) from exc


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    config = parse_config(text, **overrides)
    logger.info(f"✅ Loaded config {config.name!r} from {path}")
    return config


def dump_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = config.model_dump(mode="json")
    with path.open("w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, default_flow_style=False, sort_keys=False)
    return path
