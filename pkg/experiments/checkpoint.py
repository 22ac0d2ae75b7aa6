# experiments/checkpoint.py
# Versioned, checksummed JSON checkpoints, taken at epoch boundaries or at a step-budget stop inside an epoch.
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from cluster.simulator import EpochCursor, EventKind, SimEvent, WorkerCursor
from core.model import EmbeddingTable, ModelParams, SparseGradient
from core.modes import ModeConfig, mode_from_dict, mode_to_dict
from core.ps import BufferEntry, PsCounters, PsCursor, PullTicket
from errors import CheckpointCorruptError, CheckpointError, CheckpointVersionError, ConfigError

logger = logging.getLogger(__name__)

FORMAT = "gbalab-checkpoint"
VERSION = 2
ENCODING = "base64-f64le"


@dataclass
class Checkpoint:
    """Everything needed to continue a run bit-exactly.

    Every random stream is derived from (seed, purpose, epoch), so the seed and the
    epoch stand in for generator state at an epoch boundary. A run stopped by its
    step budget inside `next_epoch` also records the first batch not handed out
    (`data_cursor`), the base of the token schedule it was drawing from
    (`token_base`) and, for the simulator, the in-flight state (`resume`).
    """

    params: ModelParams
    mode: ModeConfig
    seed: int
    next_epoch: int
    sim_time: float = 0.0
    id_tags: dict[int, int] = field(default_factory=dict)
    data_cursor: int = 0
    token_base: int | None = None
    resume: EpochCursor | None = None

    def __post_init__(self):
        if self.token_base is None:
            self.token_base = self.params.global_step

    @property
    def global_step(self) -> int:
        return self.params.global_step

    @property
    def mid_epoch(self) -> bool:
        return self.data_cursor > 0 or self.resume is not None


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class _ParamsDoc(_Strict):
    global_step: int
    dense_dim: int
    dense: str
    embed_dim: int
    embedding_ids: list[int]
    embeddings: str


class _GradientDoc(_Strict):
    dense_dim: int
    dense: str
    embed_dim: int
    sparse_ids: list[int]
    sparse: str
    token: int
    worker_id: int
    pull_step: int
    pull_id: int
    batch_index: int
    samples: int


class _TicketDoc(_Strict):
    pull_id: int
    worker_id: int
    token: int
    pull_step: int
    batch_index: int


class _EntryDoc(_Strict):
    token: int
    gradient: _GradientDoc


class _WorkerDoc(_Strict):
    rng_state: dict
    alive: bool
    gen: int
    life_gen: int
    status: str
    snapshot: _ParamsDoc | None = None
    ticket: _TicketDoc | None = None
    local: list[int]
    downloading: bool
    retry_pending: bool


class _EventDoc(_Strict):
    time: float
    seq: int
    kind: int
    worker_id: int
    gen: int
    gradient: _GradientDoc | None = None
    batch: int | None = None


class _ResumeDoc(_Strict):
    now: float
    tokens_issued: int
    token_queue: list[int]
    buffer: list[_EntryDoc]
    counters: dict[str, int]
    outstanding: list[_TicketDoc]
    cancelled: list[int]
    last_pull_step: dict[str, int | None]
    clocks: dict[str, int]
    alive: list[int]
    next_pull_id: int
    max_version_gap: int
    workers: list[_WorkerDoc]
    events: list[_EventDoc]
    seq: int
    productive: int


class _Payload(_Strict):
    global_step: int
    dense_dim: int
    dense: str
    embed_dim: int
    embedding_ids: list[int]
    embeddings: str
    id_tags: dict[str, int]
    mode: dict
    seed: int
    next_epoch: int
    data_cursor: int
    token_base: int
    sim_time: float
    resume: _ResumeDoc | None = None


class _Document(_Strict):
    format: str
    version: int
    encoding: str
    sha256: str
    payload: dict


def _encode(array: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(array, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str, count: int) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    if len(raw) != 8 * count:
        raise CheckpointCorruptError(f"expected {count} float64 values, found {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def _digest(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _rows(entries: dict[int, np.ndarray], dim: int) -> tuple[list[int], str]:
    ids = sorted(entries)
    values = np.stack([entries[i] for i in ids]) if ids else np.zeros((0, dim))
    return [int(i) for i in ids], _encode(values.reshape(-1))


def _unrows(ids: list[int], text: str, dim: int) -> dict[int, np.ndarray]:
    values = _decode(text, len(ids) * dim).reshape(len(ids), dim)
    return {fid: values[i].copy() for i, fid in enumerate(ids)}


def _params_doc(params: ModelParams) -> _ParamsDoc:
    table = params.embeddings
    ids, values = _rows(table.entries, table.dim)
    return _ParamsDoc(global_step=params.global_step, dense_dim=int(params.dense.shape[0]),
                      dense=_encode(params.dense), embed_dim=table.dim, embedding_ids=ids, embeddings=values)


def _params(doc: _ParamsDoc) -> ModelParams:
    table = EmbeddingTable(doc.embed_dim, _unrows(doc.embedding_ids, doc.embeddings, doc.embed_dim))
    return ModelParams(_decode(doc.dense, doc.dense_dim), table, doc.global_step)


def _gradient_doc(grad: SparseGradient) -> _GradientDoc:
    dim = len(next(iter(grad.sparse.values()))) if grad.sparse else 0
    ids, values = _rows(grad.sparse, dim)
    return _GradientDoc(dense_dim=int(grad.dense.shape[0]), dense=_encode(grad.dense), embed_dim=dim,
                        sparse_ids=ids, sparse=values, token=grad.token, worker_id=grad.worker_id,
                        pull_step=grad.pull_step, pull_id=grad.pull_id, batch_index=grad.batch_index,
                        samples=grad.samples)


def _gradient(doc: _GradientDoc) -> SparseGradient:
    return SparseGradient(_decode(doc.dense, doc.dense_dim), _unrows(doc.sparse_ids, doc.sparse, doc.embed_dim),
                          token=doc.token, worker_id=doc.worker_id, pull_step=doc.pull_step, pull_id=doc.pull_id,
                          batch_index=doc.batch_index, samples=doc.samples)


def _ticket_doc(ticket: PullTicket) -> _TicketDoc:
    return _TicketDoc(pull_id=ticket.pull_id, worker_id=ticket.worker_id, token=ticket.token,
                      pull_step=ticket.pull_step, batch_index=ticket.batch_index)


def _ticket(doc: _TicketDoc) -> PullTicket:
    return PullTicket(doc.pull_id, doc.worker_id, doc.token, doc.pull_step, doc.batch_index)


def _event_doc(ev: SimEvent) -> _EventDoc:
    doc = _EventDoc(time=ev.time, seq=ev.seq, kind=int(ev.kind), worker_id=ev.worker_id, gen=ev.gen)
    if ev.kind is EventKind.PUSH_ARRIVE:
        doc.gradient = _gradient_doc(ev.payload)
    elif ev.kind is EventKind.DOWNLOAD_COMPLETE:
        doc.batch = int(ev.payload)
    return doc


def _event(doc: _EventDoc) -> SimEvent:
    try:
        kind = EventKind(doc.kind)
    except ValueError as exc:
        raise CheckpointError(f"unknown event kind {doc.kind} in checkpoint") from exc
    payload = None
    if kind is EventKind.PUSH_ARRIVE:
        if doc.gradient is None:
            raise CheckpointCorruptError(f"push event {doc.seq} has no gradient")
        payload = _gradient(doc.gradient)
    elif kind is EventKind.DOWNLOAD_COMPLETE:
        if doc.batch is None:
            raise CheckpointCorruptError(f"download event {doc.seq} has no batch")
        payload = doc.batch
    return SimEvent(doc.time, int(kind), doc.seq, kind, doc.worker_id, doc.gen, payload)


def _resume_doc(cursor: EpochCursor) -> _ResumeDoc:
    server = cursor.server
    workers = [
        _WorkerDoc(rng_state=w.rng_state, alive=w.alive, gen=w.gen, life_gen=w.life_gen, status=w.status,
                   snapshot=_params_doc(w.snapshot) if w.snapshot is not None else None,
                   ticket=_ticket_doc(w.ticket) if w.ticket is not None else None,
                   local=list(w.local), downloading=w.downloading, retry_pending=w.retry_pending)
        for w in cursor.workers
    ]
    return _ResumeDoc(
        now=cursor.now,
        tokens_issued=server.tokens_issued,
        token_queue=list(server.token_queue),
        buffer=[_EntryDoc(token=e.token, gradient=_gradient_doc(e.gradient)) for e in server.buffer],
        counters=dict(vars(server.counters)),
        outstanding=[_ticket_doc(t) for t in server.outstanding],
        cancelled=list(server.cancelled),
        last_pull_step={str(k): v for k, v in sorted(server.last_pull_step.items())},
        clocks={str(k): v for k, v in sorted(server.clocks.items())},
        alive=list(server.alive),
        next_pull_id=server.next_pull_id,
        max_version_gap=server.max_version_gap,
        workers=workers,
        events=[_event_doc(ev) for ev in cursor.events],
        seq=cursor.seq,
        productive=cursor.productive,
    )


def _resume(doc: _ResumeDoc, epoch: int, data_cursor: int, token_base: int) -> EpochCursor:
    try:
        counters = PsCounters(**doc.counters)
    except TypeError as exc:
        raise CheckpointError(f"checkpoint counters do not match: {exc}") from exc
    server = PsCursor(
        data_position=data_cursor,
        token_base=token_base,
        tokens_issued=doc.tokens_issued,
        token_queue=list(doc.token_queue),
        buffer=[BufferEntry(_gradient(e.gradient), e.token) for e in doc.buffer],
        counters=counters,
        outstanding=[_ticket(t) for t in doc.outstanding],
        cancelled=list(doc.cancelled),
        last_pull_step={int(k): v for k, v in doc.last_pull_step.items()},
        clocks={int(k): v for k, v in doc.clocks.items()},
        alive=list(doc.alive),
        next_pull_id=doc.next_pull_id,
        max_version_gap=doc.max_version_gap,
    )
    workers = [
        WorkerCursor(rng_state=w.rng_state, alive=w.alive, gen=w.gen, life_gen=w.life_gen, status=w.status,
                     snapshot=_params(w.snapshot) if w.snapshot is not None else None,
                     ticket=_ticket(w.ticket) if w.ticket is not None else None,
                     local=list(w.local), downloading=w.downloading, retry_pending=w.retry_pending)
        for w in doc.workers
    ]
    return EpochCursor(epoch, doc.now, server, workers, [_event(e) for e in doc.events], doc.seq, doc.productive)


def to_document(ckpt: Checkpoint) -> dict:
    main = _params_doc(ckpt.params)
    if ckpt.resume is not None:
        server = ckpt.resume.server
        if (server.data_position, server.token_base) != (ckpt.data_cursor, ckpt.token_base):
            raise CheckpointError(
                f"cursor at batch {server.data_position} (tokens from {server.token_base}) disagrees with the "
                f"checkpoint's batch {ckpt.data_cursor} (tokens from {ckpt.token_base})"
            )
    payload = _Payload(
        global_step=main.global_step,
        dense_dim=main.dense_dim,
        dense=main.dense,
        embed_dim=main.embed_dim,
        embedding_ids=main.embedding_ids,
        embeddings=main.embeddings,
        id_tags={str(k): int(v) for k, v in sorted(ckpt.id_tags.items())},
        mode=mode_to_dict(ckpt.mode),
        seed=ckpt.seed,
        next_epoch=ckpt.next_epoch,
        data_cursor=ckpt.data_cursor,
        token_base=ckpt.token_base,
        sim_time=float(ckpt.sim_time),
        resume=_resume_doc(ckpt.resume) if ckpt.resume is not None else None,
    ).model_dump()
    return {"format": FORMAT, "version": VERSION, "encoding": ENCODING, "sha256": _digest(payload),
            "payload": payload}


def from_document(doc: dict) -> Checkpoint:
    try:
        header = _Document.model_validate(doc)
    except ValidationError as exc:
        raise CheckpointError(f"checkpoint schema violation: {exc.errors()[0]['msg']}") from exc
    if header.format != FORMAT:
        raise CheckpointError(f"not a checkpoint (format {header.format!r})")
    if header.version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {header.version} is not supported (expected {VERSION})")
    if header.encoding != ENCODING:
        raise CheckpointVersionError(f"unsupported array encoding {header.encoding!r}")
    if _digest(header.payload) != header.sha256:
        raise CheckpointCorruptError("checkpoint checksum mismatch")
    try:
        payload = _Payload.model_validate(header.payload)
    except ValidationError as exc:
        raise CheckpointError(f"checkpoint schema violation: {exc.errors()[0]['msg']}") from exc

    params = _params(_ParamsDoc(global_step=payload.global_step, dense_dim=payload.dense_dim, dense=payload.dense,
                                embed_dim=payload.embed_dim, embedding_ids=payload.embedding_ids,
                                embeddings=payload.embeddings))
    try:
        mode = mode_from_dict(payload.mode)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint carries an invalid mode: {exc}") from exc
    if payload.data_cursor < 0:
        raise CheckpointCorruptError(f"negative data cursor {payload.data_cursor}")
    resume = None
    if payload.resume is not None:
        resume = _resume(payload.resume, payload.next_epoch, payload.data_cursor, payload.token_base)
    elif payload.token_base != payload.global_step:
        # Without in-flight state the next token schedule starts at the current step.
        raise CheckpointCorruptError(
            f"token base {payload.token_base} differs from global step {payload.global_step} with no cursor"
        )
    return Checkpoint(
        params=params,
        mode=mode,
        seed=payload.seed,
        next_epoch=payload.next_epoch,
        sim_time=payload.sim_time,
        id_tags={int(k): v for k, v in payload.id_tags.items()},
        data_cursor=payload.data_cursor,
        token_base=payload.token_base,
        resume=resume,
    )


def checkpoint_save(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = to_document(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)
    where = f"epoch {ckpt.next_epoch}, batch {ckpt.data_cursor}" if ckpt.mid_epoch else f"start of epoch {ckpt.next_epoch}"
    logger.info(f"✅ Checkpoint at step {ckpt.global_step} ({where}) saved to {path}")
    return path


def checkpoint_load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"checkpoint {path} is truncated or not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CheckpointCorruptError(f"checkpoint {path} is not a JSON object")
    ckpt = from_document(doc)
    logger.info(f"🔁 Loaded checkpoint at step {ckpt.global_step} ({ckpt.mode.kind}) from {path}")
    return ckpt
