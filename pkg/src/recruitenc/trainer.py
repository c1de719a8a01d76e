"""Task losses and the multi-task training schedule.

Three tasks share one encoder:

* ``jt`` title translation ranking, an InfoNCE loss with in-batch negatives;
* ``jd`` description/title matching, binary cross-entropy on the match head;
* ``jf`` job field classification, multi-label binary cross-entropy.

Per mini-batch the tasks run one after another, each with its own
loss-backward-Adam cycle and unit loss weight.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from recruitenc import corpus
from recruitenc._io import write_csv
from recruitenc.encoder import (EncoderModel, Head, encode_backward, encode_forward, field_head,
                                match_head, nli_combine, nli_combine_backward, save_checkpoint, sigmoid)
from recruitenc.numcore import AdamState, NonFiniteError, adam_step, add_grads

logger = logging.getLogger(__name__)

TASKS = ("jt", "jd", "jf")
LOSS_LOG_COLUMNS = ("step", "loss_jt", "loss_jd", "loss_jf")
UNIT_NORM_TOL = 1e-3


@dataclass
class TrainConfig:
    temperature: float = 0.05
    batch_size: int = 64
    learning_rate: float = 3e-5
    steps: int = 200
    epochs: int | None = None
    seed: int = 0
    task_jt: bool = True
    task_jd: bool = True
    task_jf: bool = True
    symmetric_contrastive: bool = False
    summed_loss: bool = False
    freeze_encoder_jd: bool = False
    freeze_encoder_jf: bool = False
    dim: int = 128
    hash_size: int = 2 ** 18
    n_hidden: int = 1
    head_width: int = 512
    negatives_per_positive: int = 1
    iou_threshold: float = 0.5
    resample_negatives: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.task_jt and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    @property
    def enabled_tasks(self) -> tuple[str, ...]:
        return tuple(t for t in TASKS if getattr(self, f"task_{t}"))

    @classmethod
    def from_json(cls, path, **overrides) -> "TrainConfig":
        """Flat key-value JSON with exactly the field names; ``overrides`` win."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskLosses:
    """Per-step task losses; ``None`` marks a task that did not run."""

    step: int
    loss_jt: float | None = None
    loss_jd: float | None = None
    loss_jf: float | None = None

    def row(self):
        return [self.step] + ["" if v is None else v for v in (self.loss_jt, self.loss_jd, self.loss_jf)]


# ---------------------------------------------------------------------------
# losses


def _log_softmax(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    z = s - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def contrastive_loss(embeddings_l2: np.ndarray, embeddings_l1: np.ndarray, temperature: float = 0.05,
                     symmetric: bool = False):
    """InfoNCE over in-batch negatives: mean of ``-log softmax_j(sim(t_i, f_j)/tau)[i]``.

    Row ``i`` of both inputs is an aligned translation pair. Rows must be unit
    norm, so cosine similarity is the dot product. Returns
    ``(loss, grad_l2, grad_l1)``. With ``symmetric`` the l1->l2 direction is
    averaged in.
    """
    t = np.asarray(embeddings_l2)
    f = np.asarray(embeddings_l1)
    if t.shape != f.shape or t.ndim != 2:
        raise ValueError(f"batches must have equal 2-D shapes, got {t.shape} and {f.shape}")
    b = t.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 pairs")
    for name, e in (("l2", t), ("l1", f)):
        if np.max(np.abs(np.linalg.norm(e, axis=1) - 1.0)) > UNIT_NORM_TOL:
            raise ValueError(f"{name} embeddings are not unit norm")
    s = (t @ f.T) / temperature
    eye = np.eye(b)
    lp = _log_softmax(s)
    loss = -np.trace(lp) / b
    ds = (np.exp(lp) - eye) / b
    if symmetric:
        lp2 = _log_softmax(s.T)
        loss = 0.5 * (loss - np.trace(lp2) / b)
        ds = 0.5 * (ds + ((np.exp(lp2) - eye) / b).T)
    grad_t = ds @ f / temperature
    grad_f = ds.T @ t / temperature
    return float(loss), grad_t, grad_f


def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over all entries and its gradient wrt ``z``."""
    loss = np.logaddexp(0.0, z) - y * z
    grad = (sigmoid(z) - y) / z.size
    return float(loss.mean()), grad


def jt_loss(model: EncoderModel, pairs: Sequence[corpus.TitlePair], temperature: float = 0.05,
            symmetric: bool = False):
    """Title translation ranking loss and encoder gradients."""
    t, ct = encode_forward(model, [p.l2_text for p in pairs])
    f, cf = encode_forward(model, [p.l1_text for p in pairs])
    loss, gt, gf = contrastive_loss(t, f, temperature, symmetric)
    grads = add_grads(encode_backward(model, ct, gt), encode_backward(model, cf, gf))
    return loss, grads


def jd_loss(head: Head, model: EncoderModel, pairs: Sequence[corpus.MatchPair], freeze_encoder: bool = False):
    """Mean BCE of the match head over description/title pairs."""
    if len(pairs) == 0:
        raise ValueError("empty match batch")
    u, cu = encode_forward(model, [p.description for p in pairs])
    v, cv = encode_forward(model, [p.title for p in pairs])
    y = np.array([p.label for p in pairs], dtype=np.float64)
    logit, inputs = head.logits(nli_combine(u, v))
    loss, gz = _bce_with_logits(logit[:, 0], y)
    grads, gx = head.backward(inputs, gz[:, None].astype(logit.dtype))
    if not freeze_encoder:
        gu, gv = nli_combine_backward(u, v, gx)
        grads = add_grads(grads, encode_backward(model, cu, gu))
        grads = add_grads(grads, encode_backward(model, cv, gv))
    return loss, grads


def jf_loss(head: Head, model: EncoderModel, titles: Sequence[str], field_targets: np.ndarray,
            freeze_encoder: bool = False):
    """Mean multi-label BCE of the field head over batch and classes."""
    y = np.asarray(field_targets, dtype=np.float64)
    if len(titles) == 0:
        raise ValueError("empty field batch")
    if np.any(y.sum(axis=1) < 1):
        raise ValueError("every field target row needs at least one positive entry")
    e, ce = encode_forward(model, titles)
    logit, inputs = head.logits(e)
    loss, gz = _bce_with_logits(logit, y)
    grads, gx = head.backward(inputs, gz.astype(logit.dtype))
    if not freeze_encoder:
        grads = add_grads(grads, encode_backward(model, ce, gx))
    return loss, grads


# ---------------------------------------------------------------------------
# schedule


@dataclass
class Heads:
    match: Head
    field: Head

    def parameters(self) -> dict:
        return {**self.match.parameters(), **self.field.parameters()}


def all_parameters(model: EncoderModel, heads: Heads) -> dict:
    return {**model.parameters(), **heads.parameters()}


@dataclass
class Batch:
    jt: Sequence[corpus.TitlePair] | None = None
    jd: Sequence[corpus.MatchPair] | None = None
    jf_titles: Sequence[str] | None = None
    jf_targets: np.ndarray | None = None


def _check(loss: float, task: str, step: int) -> None:
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite {task} loss at step {step}")


def task_loss(task: str, model: EncoderModel, heads: Heads, batch: Batch, config: TrainConfig):
    if task == "jt":
        return jt_loss(model, batch.jt, config.temperature, config.symmetric_contrastive)
    if task == "jd":
        return jd_loss(heads.match, model, batch.jd, config.freeze_encoder_jd)
    if task == "jf":
        return jf_loss(heads.field, model, batch.jf_titles, batch.jf_targets, config.freeze_encoder_jf)
    raise ValueError(f"unknown task {task!r}")


def multi_task_step(model: EncoderModel, heads: Heads, batch: Batch, optimizer: AdamState,
                    config: TrainConfig, step: int = 0) -> TaskLosses:
    """Run the enabled tasks in order jt, jd, jf with one Adam update each.

    In ``summed_loss`` mode all task gradients are added and applied in a
    single update instead.
    """
    params = all_parameters(model, heads)
    losses = TaskLosses(step)
    total = {}
    for task in config.enabled_tasks:
        if task == "jt" and not batch.jt or task == "jd" and not batch.jd \
                or task == "jf" and not batch.jf_titles:
            raise ValueError(f"task {task} is enabled but has no batch")
        loss, grads = task_loss(task, model, heads, batch, config)
        _check(loss, task, step)
        setattr(losses, f"loss_{task}", loss)
        if config.summed_loss:
            total = add_grads(total, grads)
        else:
            try:
                adam_step(optimizer, params, grads)
            except NonFiniteError as exc:
                raise NonFiniteError(f"task {task}, step {step}: {exc}") from None
    if config.summed_loss and total:
        adam_step(optimizer, params, total)
    return losses


@dataclass
class TrainingData:
    """Everything the three tasks draw from."""

    title_pairs: list[corpus.TitlePair]
    match_pairs: list[corpus.MatchPair]
    field_titles: list[str]
    field_targets: np.ndarray
    field_names: list[str]
    postings: list[corpus.JobPosting] = field(default_factory=list)

    @classmethod
    def from_postings(cls, postings: Sequence[corpus.JobPosting], config: TrainConfig,
                      field_names: Sequence[str] | None = None) -> "TrainingData":
        pairs, _ = corpus.build_translation_pairs(postings)
        matches = corpus.sample_match_pairs(postings, config.negatives_per_positive,
                                            config.iou_threshold, seed=config.seed) if config.task_jd else []
        titles, fs = corpus.build_field_samples(postings)
        names = list(field_names) if field_names else corpus.field_vocabulary(postings)
        return cls(pairs, matches, titles, corpus.field_targets(fs, names), names, list(postings))


class _Cycler:
    """Endless seeded shuffled batches over ``n`` items, reshuffled each epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = rng.permutation(n)
        self.pos = 0
        self.epoch = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
            self.epoch += 1
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


@dataclass
class TrainResult:
    model: EncoderModel
    heads: Heads
    log: list[TaskLosses]
    optimizer: AdamState

    def write_log(self, path) -> None:
        write_csv(path, LOSS_LOG_COLUMNS, (l.row() for l in self.log))


def init_model(config: TrainConfig, n_fields: int) -> tuple[EncoderModel, Heads]:
    dtype = np.dtype(config.dtype)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = EncoderModel.init(config.dim, config.hash_size, config.n_hidden,
                              seed=int(seeds[0].generate_state(1)[0]), dtype=dtype)
    heads = Heads(match_head(config.dim, config.head_width, int(seeds[1].generate_state(1)[0]), dtype),
                  field_head(config.dim, n_fields, config.head_width, int(seeds[2].generate_state(1)[0]), dtype))
    return model, heads


def train(config: TrainConfig, data: TrainingData, model: EncoderModel | None = None,
          heads: Heads | None = None, checkpoint: str | Path | None = None,
          epoch_checkpoints: bool = False) -> TrainResult:
    """Seeded multi-task training for ``config.steps`` steps (or ``epochs`` over the title pairs)."""
    if model is None or heads is None:
        model, heads = init_model(config, len(data.field_names))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    bs = config.batch_size
    tasks = config.enabled_tasks
    if "jt" in tasks and len(data.title_pairs) < bs:
        raise ValueError(f"need at least batch_size={bs} title pairs, have {len(data.title_pairs)}")
    if "jd" in tasks and not data.match_pairs:
        raise ValueError("jd task enabled but there are no match pairs")
    if "jf" in tasks and not data.field_titles:
        raise ValueError("jf task enabled but there are no field samples")
    jt_cyc = _Cycler(len(data.title_pairs), min(bs, len(data.title_pairs)), rng) if data.title_pairs else None
    jd_cyc = _Cycler(len(data.match_pairs), min(bs, len(data.match_pairs)), rng) if data.match_pairs else None
    jf_cyc = _Cycler(len(data.field_titles), min(bs, len(data.field_titles)), rng) if data.field_titles else None
    steps = config.steps
    if config.epochs is not None:
        steps = config.epochs * max(1, len(data.title_pairs) // bs)
    optimizer = AdamState(lr=config.learning_rate)
    log = []
    match_pairs = data.match_pairs
    seen_epoch = 0
    for step in range(steps):
        batch = Batch()
        if "jt" in tasks:
            batch.jt = [data.title_pairs[i] for i in jt_cyc.next()]
        if "jd" in tasks:
            if config.resample_negatives and jd_cyc.epoch > seen_epoch and data.postings:
                seen_epoch = jd_cyc.epoch
                match_pairs = corpus.sample_match_pairs(
                    data.postings, config.negatives_per_positive, config.iou_threshold,
                    seed=config.seed + seen_epoch)
                jd_cyc = _Cycler(len(match_pairs), min(bs, len(match_pairs)), rng)
            batch.jd = [match_pairs[i] for i in jd_cyc.next()]
        if "jf" in tasks:
            idx = jf_cyc.next()
            batch.jf_titles = [data.field_titles[i] for i in idx]
            batch.jf_targets = data.field_targets[idx]
        log.append(multi_task_step(model, heads, batch, optimizer, config, step))
        if epoch_checkpoints and checkpoint is not None and jt_cyc is not None \
                and jt_cyc.pos + bs > jt_cyc.n:
            save_checkpoint(Path(checkpoint).with_suffix(f".epoch{jt_cyc.epoch}.npz"),
                            model, [heads.match, heads.field], {"config": config.to_dict(), "step": step})
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, [heads.match, heads.field],
                        {"config": config.to_dict(), "steps": steps, "field_names": data.field_names})
    return TrainResult(model, heads, log, optimizer)
