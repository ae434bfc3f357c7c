"""
Fine-grained sensitivity selection: which parameters may move on a new task.

The mask combines three pieces elementwise::

    mask = thresh_κ[ A_σ ∘ E ] ∘ F_lstm

``A_σ`` randomly prunes linear-layer entries, ``E`` is the diagonal Fisher
estimate (mean squared per-sample gradient at the inherited parameters), and
``F_lstm`` zeroes the recurrent layer. A 1 means "trainable on the new task",
a 0 means "keep the inherited value".
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError, DomainError
from .model import LINEAR_TAGS, ModelParams


class ParamMask:
    """Binary tensor per parameter name."""

    def __init__(self, entries: dict[str, np.ndarray]):
        self.entries = {n: np.asarray(m, dtype=np.float64) for n, m in entries.items()}
        for n, m in self.entries.items():
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ContractError(f"mask for {n!r} is not binary")

    def __getitem__(self, name):
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries)

    def names(self):
        return list(self.entries)

    @classmethod
    def ones(cls, params: ModelParams) -> "ParamMask":
        return cls({n: np.ones(t.shape) for n, t in params.arrays().items()})

    def __mul__(self, other: "ParamMask") -> "ParamMask":
        _same_coverage(self, other)
        return ParamMask({n: self.entries[n] * other.entries[n] for n in self.entries})

    def zero_fraction(self, names: Iterable[str] | None = None) -> float:
        names = list(self.entries) if names is None else list(names)
        total = sum(self.entries[n].size for n in names)
        zeros = sum(int((self.entries[n] == 0).sum()) for n in names)
        return zeros / total if total else 0.0


@dataclass
class FisherEstimate:
    entries: dict[str, np.ndarray]
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ContractError("Fisher estimate needs at least one sample")


def _same_coverage(a, b):
    if set(a.entries) != set(b.entries):
        raise ContractError(f"parameter coverage differs: {sorted(set(a.entries) ^ set(b.entries))}")
    for n in a.entries:
        if a.entries[n].shape != b.entries[n].shape:
            raise ContractError(f"{n}: shapes {a.entries[n].shape} and {b.entries[n].shape} differ")


def random_linear_mask(params: ModelParams, sigma: float, rng: np.random.Generator) -> ParamMask:
    """Zero each linear-layer entry independently with probability ``sigma``."""
    if not 0.0 <= sigma <= 1.0:
        raise DomainError(f"pruning ratio must lie in [0, 1], got {sigma}")
    out = {}
    for name in params:
        shape = params[name].shape
        if params.tag(name) in LINEAR_TAGS:
            out[name] = (rng.random(shape) >= sigma).astype(np.float64)
        else:
            out[name] = np.ones(shape)
    return ParamMask(out)


def fisher_sensitivity(params: ModelParams, samples: Iterable, loss_fn: Callable[[object], T.Tensor],
                       n_samples: int | None = None) -> FisherEstimate:
    """Mean over samples of the squared gradient of ``loss_fn(sample)`` w.r.t. every parameter.

    ``loss_fn`` must build a fresh graph over ``params`` and return a scalar
    (the negative log-likelihood of the sample). At most ``n_samples`` samples
    are consumed; all of them when ``None``.
    """
    if n_samples is not None and n_samples < 1:
        raise DomainError(f"Fisher estimate needs N >= 1, got {n_samples}")
    acc = {n: np.zeros(t.shape) for n, t in params.arrays().items()}
    count = 0
    for sample in samples:
        if n_samples is not None and count >= n_samples:
            break
        grads = T.backward(loss_fn(sample))
        for t, g in grads.items():
            if t.name in acc and params[t.name] is t:
                acc[t.name] += g * g
        count += 1
    if count == 0:
        raise DomainError("no samples available for the Fisher estimate")
    return FisherEstimate({n: a / count for n, a in acc.items()}, count)


def threshold_mask(weighted: dict[str, np.ndarray], kappa: float) -> ParamMask:
    """1 where the weighted sensitivity is at least ``kappa``."""
    return ParamMask({n: (np.asarray(w) >= kappa).astype(np.float64) for n, w in weighted.items()})


def frozen_layer_mask(params: ModelParams, frozen_tag: str = "lstm") -> ParamMask:
    if not any(params.tag(n) == frozen_tag for n in params):
        raise ConfigurationError(f"no parameters tagged {frozen_tag!r} to freeze")
    return ParamMask({n: np.full(params[n].shape, 0.0 if params.tag(n) == frozen_tag else 1.0)
                      for n in params})


def compose_fgss(a: ParamMask, e: FisherEstimate, kappa: float, frozen: ParamMask) -> ParamMask:
    _same_coverage(a, e)
    _same_coverage(a, frozen)
    weighted = {n: a.entries[n] * e.entries[n] for n in a.entries}
    return threshold_mask(weighted, kappa) * frozen


def apply_mask_to_gradients(grads: dict[str, np.ndarray], mask: ParamMask) -> dict[str, np.ndarray]:
    out = {}
    for n, g in grads.items():
        if n not in mask.entries:
            raise ContractError(f"no mask entry for gradient {n!r}")
        if mask.entries[n].shape != g.shape:
            raise DimensionError(f"{n}: gradient {g.shape} vs mask {mask.entries[n].shape}")
        out[n] = g * mask.entries[n]
    return out
