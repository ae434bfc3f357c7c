"""
Sequential class-incremental training and evaluation.

Three modes share one code path:

``finetune``  plain fine-tuning on the new task (all-ones mask, no distillation)
``mcfvc``     FgSS gradient mask + two-stage distillation against the frozen old model
``ideal``     fine-tuning on the union of every task seen so far (upper bound)

All randomness is drawn from streams keyed by ``(seed, task_index, purpose)``,
so a step can be replayed from its input checkpoint alone.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import DatasetRecord, TaskDataLoader
from .errors import ConfigurationError, ContractError, TrainingError
from .fgss import (ParamMask, apply_mask_to_gradients, compose_fgss, fisher_sensitivity, frozen_layer_mask,
                   random_linear_mask)
from .metrics import MetricReport, StepAccuracyTable, cider_d, score_corpus, tokenize
from .model import (BOS_ID, EOS_ID, PAD_ID, Captioner, Glossary, ModelDims, beam_search, caption_loss,
                    grow_vocab)
from .tskd import DistillBatch, batch_style_loss, ntxent_distill, total_loss

log = logging.getLogger(__name__)

MODES = ("finetune", "mcfvc", "ideal")

# purposes for the per-step random streams
_TRAIN, _MASK, _INIT = 0, 1, 2


@dataclass
class ExperimentConfig:
    sigma: float = 0.5
    kappa: float = 0.01
    tau: float = 0.5
    varsigma: float = 0.6
    vartheta: float = 0.0001
    gamma: float = 1.0
    ell: int = 20
    bs: int = 8
    epochs: int = 16
    beam: int = 5
    d2: int = 16
    d3: int = 16
    hidden: int = 32
    d_model: int = 32
    max_len: int = 12
    seed: int = 0
    lr: float = 8.75e-5
    mode: str = "mcfvc"
    dropout: float = 0.1
    freeze_lstm: bool = True
    style_mode: str = "row_mean"
    fisher_samples: int = 0
    n_classes: int = 20
    per_class: int = 30
    base_classes: int = 10
    per_increment: int = 2
    skew: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (0.0 <= self.sigma <= 1.0, f"sigma must lie in [0, 1], got {self.sigma}"),
            (self.tau > 0, f"tau must be positive, got {self.tau}"),
            (self.gamma > 0, f"gamma must be positive, got {self.gamma}"),
            (self.varsigma >= 0 and self.vartheta >= 0, "loss weights must be non-negative"),
            (self.mode in MODES, f"mode must be one of {MODES}, got {self.mode!r}"),
            (self.bs >= 1 and self.epochs >= 0 and self.beam >= 1, "bs, beam must be >= 1 and epochs >= 0"),
            (not (self.mode == "mcfvc" and self.bs < 2), "mode mcfvc needs bs >= 2"),
            (min(self.ell, self.d2, self.d3, self.hidden, self.d_model) >= 1, "widths must be >= 1"),
            (self.max_len >= 2, f"max_len must be >= 2, got {self.max_len}"),
            (self.lr > 0, f"lr must be positive, got {self.lr}"),
            (0.0 <= self.dropout < 1.0, f"dropout must lie in [0, 1), got {self.dropout}"),
            (self.style_mode in ("row_mean", "gram"), f"unknown style_mode {self.style_mode!r}"),
            (self.fisher_samples >= 0, "fisher_samples must be >= 0 (0 = one pass)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.d2, self.d3, self.d_model, self.hidden)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def desk_config(**overrides) -> ExperimentConfig:
    """Settings for the synthetic benchmark on a CPU.

    The learning rate is raised from the default because synthetic
    features and a 32-unit model train on a different scale.
    """
    base = dict(lr=5e-3)
    base.update(overrides)
    return ExperimentConfig(**base)


def stream(seed: int, task: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(task, purpose)))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    f2d: np.ndarray
    f3d: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray


def encode_caption(glossary: Glossary, caption: str, max_len: int) -> list[int]:
    return glossary.encode(tokenize(caption)[: max_len - 1])


def make_batch(records: Sequence[DatasetRecord], caption_idx: Sequence[int], glossary: Glossary,
               max_len: int) -> Batch:
    seqs = [encode_caption(glossary, r.captions[i], max_len) for r, i in zip(records, caption_idx)]
    n = max(len(s) for s in seqs) + 1
    inputs = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    targets = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for b, s in enumerate(seqs):
        inputs[b, : len(s) + 1] = [BOS_ID] + s
        targets[b, : len(s) + 1] = s + [EOS_ID]
    return Batch(np.stack([r.f2d for r in records]), np.stack([r.f3d for r in records]), inputs, targets)


def epoch_batches(records: Sequence[DatasetRecord], glossary: Glossary, cfg: ExperimentConfig,
                  rng: np.random.Generator) -> list[Batch]:
    """Shuffle records, pick one caption per record, cut into batches of ``bs``."""
    order = rng.permutation(len(records))
    picks = [int(rng.integers(len(records[i].captions))) for i in order]
    out = []
    for s in range(0, len(order), cfg.bs):
        idx = order[s: s + cfg.bs]
        out.append(make_batch([records[i] for i in idx], picks[s: s + cfg.bs], glossary, cfg.max_len))
    return out


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, model: Captioner, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t = model.params[name]
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# losses for one batch
# ---------------------------------------------------------------------------

@dataclass
class StepLosses:
    l_vc: float
    l_style: float
    l_c: float
    l_total: float


def batch_loss(model: Captioner, batch: Batch, rng: np.random.Generator | None, cfg: ExperimentConfig,
               old: Captioner | None = None) -> tuple[T.Tensor, StepLosses]:
    out = model.forward(batch.f2d, batch.f3d, batch.inputs, batch.targets, rng=rng, training=rng is not None)
    l_vc = caption_loss(out.logits, batch.targets)
    if old is None:
        return l_vc, StepLosses(l_vc.item(), 0.0, 0.0, l_vc.item())
    with T.no_grad():
        ref = old.forward(batch.f2d, batch.f3d, batch.inputs, batch.targets, rng=None, training=False)
    l_style = batch_style_loss(out.attention.S_A, ref.attention.S_A, out.mask, cfg.style_mode)
    if out.text_features.shape[0] >= 2:
        l_c = ntxent_distill(DistillBatch(out.text_features, ref.text_features, cfg.tau))
    else:
        # a trailing batch of one has no negatives; skip the contrastive term
        l_c = T.Tensor(0.0)
    loss = total_loss(l_vc, l_style, l_c, cfg.varsigma, cfg.vartheta)
    return loss, StepLosses(l_vc.item(), l_style.item(), l_c.item(), loss.item())


def param_grads(model: Captioner, loss: T.Tensor) -> dict[str, np.ndarray]:
    grads = T.backward(loss)
    out = {n: np.zeros(t.shape) for n, t in model.params.arrays().items()}
    for t, g in grads.items():
        if t.name in out and model.params[t.name] is t:
            out[t.name] = g
    return out


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

LossLogger = Callable[[int, int, int, StepLosses], None]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float] = field(default_factory=list)


def _optimize(model: Captioner, records: Sequence[DatasetRecord], cfg: ExperimentConfig, task: int,
              mask: ParamMask | None, old: Captioner | None, logger: LossLogger | None) -> tuple[list[float], dict]:
    rng = stream(cfg.seed, task, _TRAIN)
    opt = Adam(cfg.lr)
    epoch_means = []
    step = 0
    for epoch in range(cfg.epochs):
        totals = []
        for b, batch in enumerate(epoch_batches(records, model.glossary, cfg, rng)):
            loss, parts = batch_loss(model, batch, rng, cfg, old)
            if not math.isfinite(parts.l_total):
                raise TrainingError(f"non-finite loss at task {task}, epoch {epoch}, batch {b} (step {step})")
            grads = param_grads(model, loss)
            if mask is not None:
                grads = apply_mask_to_gradients(grads, mask)
            opt.step(model, grads)
            totals.append(parts.l_total)
            if logger is not None:
                logger(task, epoch, b, parts)
            step += 1
        epoch_means.append(float(np.mean(totals)))
        log.debug("task %d epoch %d loss %.4f", task, epoch, epoch_means[-1])
    return epoch_means, rng.bit_generator.state


def build_glossary(records: Sequence[DatasetRecord], glossary: Glossary | None = None) -> Glossary:
    g = glossary if glossary is not None else Glossary()
    return g.extend(tokenize(c) for r in records for c in r.captions)


def train_base(cfg: ExperimentConfig, records: Sequence[DatasetRecord],
               logger: LossLogger | None = None) -> TrainResult:
    """Train task 0 from scratch with the caption loss only."""
    if not records:
        raise ConfigurationError("no training records for the base task")
    glossary = build_glossary(records)
    model = Captioner.create(glossary, cfg.dims, stream(cfg.seed, 0, _INIT), gamma=cfg.gamma, dropout=cfg.dropout)
    losses, state = _optimize(model, records, cfg, 0, None, None, logger)
    return TrainResult(Checkpoint(0, model, None, state, meta={"mode": "base"}), losses)


def fisher_for(model: Captioner, records: Sequence[DatasetRecord], cfg: ExperimentConfig):
    """Per-sample squared gradients of the caption NLL at the inherited parameters (noise off).

    The NLL is summed over the caption's tokens: the log-likelihood of one sample.
    """
    samples = [make_batch([r], [0], model.glossary, cfg.max_len) for r in records]

    def nll(batch):
        out = model.forward(batch.f2d, batch.f3d, batch.inputs, batch.targets, rng=None, training=False)
        return caption_loss(out.logits, batch.targets, reduction="sum")

    return fisher_sensitivity(model.params, samples, nll, cfg.fisher_samples or None)


def build_fgss_mask(model: Captioner, records: Sequence[DatasetRecord], cfg: ExperimentConfig,
                    task: int) -> ParamMask:
    a = random_linear_mask(model.params, cfg.sigma, stream(cfg.seed, task, _MASK))
    e = fisher_for(model, records, cfg)
    frozen = frozen_layer_mask(model.params) if cfg.freeze_lstm else ParamMask.ones(model.params)
    return compose_fgss(a, e, cfg.kappa, frozen)


def train_increment(cfg: ExperimentConfig, ckpt: Checkpoint, records: Sequence[DatasetRecord],
                    logger: LossLogger | None = None) -> TrainResult:
    """One class-incremental step from checkpoint Θ_t to task ``t+1``.

    ``records`` is the new task's training data (the union of all seen tasks
    in ``ideal`` mode).
    """
    if not records:
        raise ConfigurationError("no training records for the increment")
    task = ckpt.task_index + 1
    prev = ckpt.model
    glossary = build_glossary(records, prev.glossary)
    if glossary.words[: len(prev.glossary)] != prev.glossary.words:
        raise ContractError("glossary shrank or reordered during extension")
    params = grow_vocab(prev.params, len(glossary), stream(cfg.seed, task, _INIT))
    model = Captioner(params, glossary, prev.dims, gamma=cfg.gamma, dropout=cfg.dropout)

    if cfg.mode == "mcfvc":
        mask = build_fgss_mask(model, records, cfg, task)
        old = model.frozen_copy()
    else:
        mask, old = ParamMask.ones(model.params), None
    if set(mask.names()) != set(model.params.names()):
        raise ContractError("mask does not cover the model parameters")

    losses, state = _optimize(model, records, cfg, task, mask, old, logger)
    return TrainResult(Checkpoint(task, model, mask, state, meta={"mode": cfg.mode}), losses)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def decode_records(model: Captioner, records: Sequence[DatasetRecord], beam: int, max_len: int) -> list[list[str]]:
    return [model.glossary.decode(beam_search(model, r.f2d, r.f3d, beam, max_len).tokens) for r in records]


@dataclass
class StepEvaluation:
    task_index: int
    report: MetricReport
    per_task_cider: list[float]
    class_counts: list[int]
    captions: dict[str, str]

    def to_dict(self) -> dict:
        return {"task_index": self.task_index, "class_counts": self.class_counts,
                "per_task_cider": self.per_task_cider, "report": self.report.to_dict(),
                "captions": self.captions}


def evaluate_all_tasks(ckpt: Checkpoint, loader: TaskDataLoader, class_counts: Sequence[int],
                       cfg: ExperimentConfig) -> StepEvaluation:
    """Decode the test split of every task up to the checkpoint's and score it.

    Pooled scores are class-count weighted means of the per-task scores.
    """
    t = ckpt.task_index
    loader.open_step(t)
    per_task: dict[int, dict[str, float]] = {}
    captions = {}
    for g in range(t + 1):
        recs = loader.test(g)
        if not recs:
            raise ConfigurationError(f"task {g} has an empty test split")
        cands = decode_records(ckpt.model, recs, cfg.beam, cfg.max_len)
        refs = [[tokenize(c) for c in r.captions] for r in recs]
        per_task[g] = score_corpus(cands, refs)
        captions.update({r.video_id: " ".join(c) for r, c in zip(recs, cands)})
    z = np.array(class_counts[: t + 1], dtype=np.float64)
    w = z / z.sum()
    pooled = {k: float(sum(w[g] * per_task[g][k] for g in range(t + 1))) for k in per_task[0]}
    report = MetricReport(pooled["bleu4"], pooled["rouge_l"], pooled["meteor_lite"], pooled["cider_d"], per_task)
    return StepEvaluation(t, report, [per_task[g]["cider_d"] for g in range(t + 1)], list(class_counts[: t + 1]),
                          captions)


def record_step(table: StepAccuracyTable, ev: StepEvaluation) -> None:
    """Append an evaluation as row ``t+1`` of the step accuracy table (1-based)."""
    table.set_row(ev.task_index + 1, ev.per_task_cider)


def corpus_cider(model: Captioner, records: Sequence[DatasetRecord], cfg: ExperimentConfig) -> float:
    cands = decode_records(model, records, cfg.beam, cfg.max_len)
    return cider_d(cands, [[tokenize(c) for c in r.captions] for r in records])
