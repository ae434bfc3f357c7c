"""
Toy multimodal encoder-decoder captioner.

Pipeline for one video (batched over a leading axis during training)::

    V        = f2d ⊛ f3d                         frame-wise concatenation
    enc      = tanh(V W_enc + b_enc)
    AT       = softmax(enc Wq (enc Wk)^T / sqrt(d))   single-head self-attention
    selected = gumbel_select(enc, AT)             hard forward / soft backward
    S_A      = semantic_attention(selected, phrase)   phrase queries over frames
    h_k      = LSTM([emb(w_{k-1}) ⊛ S_A[k]], h_{k-1})
    logits_k = dropout(h_k) W_out^T + b_out

Phrase features are the embeddings of the caption prefix, so row k of S_A is
the visual context for predicting token k.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .tensor import Tensor

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"
BOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3

LAYER_TAGS = ("encoder", "attention", "lstm", "embedding", "output_linear")
LINEAR_TAGS = ("encoder", "attention", "output_linear")

INIT_SCALE = 0.08


# ---------------------------------------------------------------------------
# glossary
# ---------------------------------------------------------------------------

class Glossary:
    """Append-only token ↔ index map. Reserved tokens occupy indices 0-3."""

    def __init__(self, words: Iterable[str] = ()):
        self.words: list[str] = [BOS, EOS, PAD, UNK]
        self.index: dict[str, int] = {w: i for i, w in enumerate(self.words)}
        for w in words:
            if w not in self.index:
                self.index[w] = len(self.words)
                self.words.append(w)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def __eq__(self, other):
        return isinstance(other, Glossary) and self.words == other.words

    def extend(self, token_streams: Iterable[Sequence[str]]) -> "Glossary":
        """Return a new glossary with unseen tokens appended in first-occurrence order."""
        out = Glossary()
        out.words = list(self.words)
        out.index = dict(self.index)
        for tokens in token_streams:
            for w in tokens:
                if w not in out.index:
                    out.index[w] = len(out.words)
                    out.words.append(w)
        return out

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (BOS_ID, PAD_ID):
                continue
            out.append(self.words[i])
        return out


def glossary_extend(g: Glossary, new_captions: Iterable[Sequence[str]]) -> Glossary:
    return g.extend(new_captions)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelDims:
    d2: int = 16
    d3: int = 16
    d_model: int = 32
    hidden: int = 32

    @property
    def d_visual(self) -> int:
        return self.d2 + self.d3


class ModelParams:
    """Named, layer-tagged registry of trainable tensors."""

    def __init__(self):
        self.entries: dict[str, tuple[Tensor, str]] = {}

    def add(self, name: str, data: np.ndarray, tag: str) -> Tensor:
        if tag not in LAYER_TAGS:
            raise ContractError(f"unknown layer tag {tag!r}")
        if name in self.entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)
        self.entries[name] = (t, tag)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name][0]

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def tag(self, name: str) -> str:
        return self.entries[name][1]

    def names(self) -> list[str]:
        return list(self.entries)

    def tensors(self) -> list[Tensor]:
        return [t for t, _ in self.entries.values()]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, (t, _) in self.entries.items()}

    def tags(self) -> dict[str, str]:
        return {n: tag for n, (_, tag) in self.entries.items()}

    def replace(self, name: str, data: np.ndarray) -> None:
        t, tag = self.entries[name]
        if data.shape != t.data.shape:
            raise DimensionError(f"{name}: replacement shape {data.shape} != {t.data.shape}")
        t.data = np.asarray(data, dtype=np.float64)

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for n, (t, tag) in self.entries.items():
            out.add(n, t.data.copy(), tag)
        return out


def init_params(dims: ModelDims, vocab_size: int, rng: np.random.Generator) -> ModelParams:
    """Uniform(-0.08, 0.08) initialisation of every weight, zero biases."""

    def u(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

    d, h = dims.d_model, dims.hidden
    p = ModelParams()
    p.add("enc.W", u(dims.d_visual, d), "encoder")
    p.add("enc.b", np.zeros(d), "encoder")
    p.add("att.Wq", u(d, d), "attention")
    p.add("att.Wk", u(d, d), "attention")
    p.add("sem.Wv", u(d, d), "attention")
    p.add("emb.W", u(vocab_size, d), "embedding")
    p.add("lstm.W_ih", u(2 * d, 4 * h), "lstm")
    p.add("lstm.W_hh", u(h, 4 * h), "lstm")
    p.add("lstm.b", np.zeros(4 * h), "lstm")
    p.add("out.W", u(vocab_size, h), "output_linear")
    p.add("out.b", np.zeros(vocab_size), "output_linear")
    return p


VOCAB_ROWS = ("emb.W", "out.W", "out.b")


def grow_vocab(params: ModelParams, new_size: int, rng: np.random.Generator) -> ModelParams:
    """Copy of ``params`` with embedding/output rows extended to ``new_size``.

    Existing rows are copied bit-for-bit; new rows are drawn from
    Uniform(-0.08, 0.08) (biases start at zero).
    """
    old_size = params["emb.W"].shape[0]
    if new_size < old_size:
        raise ContractError(f"glossary shrank from {old_size} to {new_size}")
    out = params.copy()
    extra = new_size - old_size
    if extra == 0:
        return out
    for name in VOCAB_ROWS:
        t, tag = out.entries[name]
        if t.ndim == 2:
            rows = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(extra, t.shape[1]))
        else:
            rows = np.zeros(extra)
        out.entries[name] = (Tensor(np.concatenate([t.data, rows]), requires_grad=True, name=name), tag)
    return out


def check_vocab(params: ModelParams, glossary: Glossary) -> None:
    for name in VOCAB_ROWS:
        if params[name].shape[0] != len(glossary):
            raise ContractError(
                f"{name} has {params[name].shape[0]} rows but the glossary has {len(glossary)} words"
            )


# ---------------------------------------------------------------------------
# visual side
# ---------------------------------------------------------------------------

def encode_visual(f2d, f3d) -> Tensor:
    """Frame-wise concatenation of static and dynamic features."""
    f2d, f3d = T._wrap(f2d), T._wrap(f3d)
    if f2d.shape[:-1] != f3d.shape[:-1]:
        raise DimensionError(f"frame counts differ: f2d {f2d.shape} vs f3d {f3d.shape}")
    return T.concat([f2d, f3d], axis=-1)


def visual_attention(enc: Tensor, params: ModelParams) -> Tensor:
    d = params["att.Wq"].shape[1]
    q = enc @ params["att.Wq"]
    k = enc @ params["att.Wk"]
    return T.softmax(q @ T.transpose(k) * (1.0 / math.sqrt(d)), axis=-1)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return -np.log(-np.log(u))


def gumbel_select(V: Tensor, AT: Tensor, gamma: float = 1.0, rng: np.random.Generator | None = None,
                  noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Gumbel feature selection over frames.

    Row i of the forward output is the frame chosen by
    ``argmax_j(log AT_ij + η_ij)``; the soft path weights frames by
    ``softmax_j(log AT_ij + γ η_ij)``. The returned ``forward`` carries the hard
    values but backpropagates through the soft path (straight-through).

    ``rng=None`` and ``noise=None`` disable the noise (inference).
    """
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    at = AT.data
    if noise is None:
        noise = sample_gumbel(at.shape, rng) if rng is not None else np.zeros_like(at)
    with np.errstate(divide="ignore"):
        hard_logits = np.log(at) + noise
    hard = T.argmax_onehot(hard_logits, axis=-1)
    # softmax(log AT + γη) written without the log so zero entries stay finite
    scale = np.exp(gamma * (noise - noise.max(axis=-1, keepdims=True)))
    w = AT * scale
    soft = w / T.tsum(w, axis=-1, keepdims=True)
    backward_path = soft @ V
    forward = T.straight_through(hard.data @ V.data, backward_path)
    return forward, backward_path


def semantic_attention(selected: Tensor, phrase: Tensor, value_weight: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention of phrase queries over visual frames.

    ``S_A[j] = Σ_i softmax_i(<P_j, V_i> / sqrt(d)) · V_i W_v``
    """
    selected, phrase = T._wrap(selected), T._wrap(phrase)
    d = selected.shape[-1]
    if phrase.shape[-1] != d:
        raise DimensionError(f"phrase width {phrase.shape[-1]} != visual width {d}")
    values = selected if value_weight is None else selected @ value_weight
    logits = phrase @ T.transpose(selected) * (1.0 / math.sqrt(d))
    return T.softmax(logits, axis=-1) @ values


def structured_dropout(o: Tensor, rate: float, rng: np.random.Generator | None = None,
                       training: bool = True, R: np.ndarray | None = None) -> Tensor:
    """``o ∘ R·size(R)/sum(R)`` with a Bernoulli(1-rate) mask R.

    An all-zero draw is redrawn. Identity when not training.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if R is None:
        if not training or rate == 0.0:
            return o
        while True:
            R = (rng.random(o.shape) >= rate).astype(np.float64)
            if R.sum() > 0:
                break
    total = R.sum()
    if total == 0:
        raise DomainError("dropout mask has no kept entries")
    return o * (R * (R.size / total))


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def lstm_cell(params: ModelParams, state: tuple[Tensor, Tensor], x: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate order in the packed weights is (input, forget, cell, output)."""
    h, c = state
    hid = h.shape[-1]
    if params["lstm.W_hh"].shape[0] != hid:
        raise DimensionError(f"hidden state width {hid} != configured {params['lstm.W_hh'].shape[0]}")
    gates = x @ params["lstm.W_ih"] + h @ params["lstm.W_hh"] + params["lstm.b"]
    i = T.sigmoid(gates[..., 0:hid])
    f = T.sigmoid(gates[..., hid:2 * hid])
    g = T.tanh(gates[..., 2 * hid:3 * hid])
    o = T.sigmoid(gates[..., 3 * hid:4 * hid])
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return h_new, c_new


def project(params: ModelParams, h: Tensor) -> Tensor:
    return h @ T.transpose(params["out.W"]) + params["out.b"]


def decoder_step(params: ModelParams, state, token_embedding: Tensor, context: Tensor,
                 vocab_size: int | None = None):
    """Advance the decoder one token; returns ``(new_state, logits)``.

    Inputs are not modified, so calling twice from the same state yields the
    same result.
    """
    x = T.concat([token_embedding, context], axis=-1)
    new_state = lstm_cell(params, state, x)
    logits = project(params, new_state[0])
    if vocab_size is not None and logits.shape[-1] != vocab_size:
        raise ContractError(f"logits width {logits.shape[-1]} != glossary size {vocab_size}")
    return new_state, logits


def zero_state(params: ModelParams, batch_shape=()) -> tuple[Tensor, Tensor]:
    hid = params["lstm.W_hh"].shape[0]
    return Tensor(np.zeros(batch_shape + (hid,))), Tensor(np.zeros(batch_shape + (hid,)))


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------

@dataclass
class AttentionOutputs:
    AT: Tensor
    S_A: Tensor
    selected_features: Tensor


@dataclass
class ForwardOutputs:
    logits: Tensor        # [B, T, V]
    attention: AttentionOutputs
    text_features: Tensor  # [B, H], mean of h over non-PAD steps
    mask: np.ndarray      # [B, T], 1 on real target positions


class Captioner:
    """Parameters plus glossary; the unit that is trained, copied and checkpointed."""

    def __init__(self, params: ModelParams, glossary: Glossary, dims: ModelDims,
                 gamma: float = 1.0, dropout: float = 0.1, straight_through: bool = True):
        self.params = params
        self.glossary = glossary
        self.dims = dims
        self.gamma = gamma
        self.dropout = dropout
        # False feeds the soft path forward too, making the whole model
        # exactly differentiable (used for gradient checks)
        self.straight_through = straight_through
        check_vocab(params, glossary)

    @classmethod
    def create(cls, glossary: Glossary, dims: ModelDims, rng: np.random.Generator, **kw) -> "Captioner":
        return cls(init_params(dims, len(glossary), rng), glossary, dims, **kw)

    def frozen_copy(self) -> "Captioner":
        """Deep copy whose tensors never require gradients."""
        params = self.params.copy()
        for t in params.tensors():
            t.requires_grad = False
        return Captioner(params, self.glossary, self.dims, self.gamma, self.dropout, self.straight_through)

    def copy(self) -> "Captioner":
        return Captioner(self.params.copy(), copy.deepcopy(self.glossary), self.dims, self.gamma, self.dropout,
                         self.straight_through)

    # -- visual encoder -------------------------------------------------------
    def encode(self, f2d, f3d, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        p = self.params
        V = encode_visual(f2d, f3d)
        enc = T.tanh(V @ p["enc.W"] + p["enc.b"])
        AT = visual_attention(enc, p)
        forward, soft = gumbel_select(enc, AT, self.gamma, rng)
        return AT, forward if self.straight_through else soft

    # -- teacher-forced pass --------------------------------------------------
    def forward(self, f2d: np.ndarray, f3d: np.ndarray, inputs: np.ndarray, targets: np.ndarray,
                rng: np.random.Generator | None = None, training: bool = True) -> ForwardOutputs:
        """Teacher-forced forward pass over a batch.

        ``inputs`` is BOS + caption and ``targets`` is caption + EOS, both
        [B, T] and PAD-filled. With ``rng=None`` Gumbel noise and dropout are off.
        """
        p = self.params
        noise_rng = rng if training else None
        AT, selected = self.encode(f2d, f3d, noise_rng)
        phrase = T.take_rows(p["emb.W"], inputs)  # [B, T, d]
        S_A = semantic_attention(selected, phrase, p["sem.Wv"])
        x_all = T.concat([phrase, S_A], axis=-1)  # [B, T, 2d]

        B, n_steps = inputs.shape
        state = zero_state(p, (B,))
        hs = []
        for k in range(n_steps):
            state = lstm_cell(p, state, x_all[:, k, :])
            hs.append(state[0])
        H = T.stack(hs, axis=1)  # [B, T, H]
        mask = (targets != PAD_ID).astype(np.float64)
        lengths = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        text = T.tsum(H * mask[:, :, None], axis=1) / lengths
        out = structured_dropout(H, self.dropout, noise_rng, training=noise_rng is not None)
        logits = project(p, out)
        return ForwardOutputs(logits, AttentionOutputs(AT, S_A, selected), text, mask)


def caption_loss(logits: Tensor, gold: np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross-entropy over non-PAD positions, token-averaged (``mean``) or summed (``sum``).

    The summed form is the negative log-likelihood of the whole caption.
    """
    gold = np.asarray(gold, dtype=np.int64)
    V = logits.shape[-1]
    if gold.shape != logits.shape[:-1]:
        raise DimensionError(f"gold shape {gold.shape} does not match logits {logits.shape}")
    if np.any(gold >= V) or np.any(gold < 0):
        raise ContractError(f"gold index outside glossary of size {V}")
    mask = gold != PAD_ID
    n = int(mask.sum())
    if n == 0:
        raise ContractError("caption_loss: every position is PAD")
    logp = T.log_softmax(logits, axis=-1)
    pick = np.zeros(logits.shape)
    np.put_along_axis(pick, gold[..., None], 1.0, axis=-1)
    pick *= mask[..., None]
    if reduction == "sum":
        return -T.tsum(logp * pick)
    if reduction != "mean":
        raise DomainError(f"unknown reduction {reduction!r}")
    return -T.tsum(logp * pick) * (1.0 / n)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class CaptionHypothesis:
    tokens: list[int]
    log_prob: float


BANNED = (BOS_ID, PAD_ID, UNK_ID)


class _StepModel:
    """Inference-only view of a captioner for one video."""

    def __init__(self, model: Captioner, f2d, f3d):
        self.model = model
        with T.no_grad():
            _, selected = model.encode(T.Tensor(f2d)[None], T.Tensor(f3d)[None], None)
        self.selected = T.Tensor(selected.data[0])
        self.V = len(model.glossary)

    def step(self, states, tokens):
        p = self.model.params
        with T.no_grad():
            emb = p["emb.W"].data[np.asarray(tokens)]
            emb = T.Tensor(emb)
            ctx = semantic_attention(self.selected, emb, p["sem.Wv"])
            (h, c), logits = decoder_step(p, states, emb, ctx, self.V)
        z = logits.data - logits.data.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return (h, c), logp


def _search(sm: _StepModel, beam: int, max_len: int) -> list[CaptionHypothesis]:
    p = sm.model.params
    states = zero_state(p, (1,))
    alive = [([BOS_ID], 0.0)]
    done: list[CaptionHypothesis] = []
    for step in range(max_len):
        (h, c), logp = sm.step(states, [seq[-1] for seq, _ in alive])
        logp = logp.copy()
        logp[:, list(BANNED)] = -np.inf
        scores = np.array([lp for _, lp in alive])[:, None] + logp
        flat = scores.ravel()
        # stable sort keeps ties in (beam, token) order
        order = np.argsort(-flat, kind="stable")[:beam]
        next_alive, rows = [], []
        for k in order:
            if not np.isfinite(flat[k]):
                break
            b, tok = divmod(int(k), sm.V)
            seq = alive[b][0] + [tok]
            if tok == EOS_ID or step == max_len - 1:
                done.append(CaptionHypothesis(seq[1:], float(flat[k])))
            else:
                next_alive.append((seq, float(flat[k])))
                rows.append(b)
        if not next_alive:
            break
        alive = next_alive
        states = (T.Tensor(h.data[rows]), T.Tensor(c.data[rows]))
    return done


def beam_search(model: Captioner, f2d, f3d, beam: int = 5, max_len: int = 12) -> CaptionHypothesis:
    """Highest log-probability completed caption among those explored.

    The greedy path is always among the explored hypotheses, so widening the
    beam never lowers the returned log-probability.
    """
    if beam < 1:
        raise DomainError(f"beam must be >= 1, got {beam}")
    if max_len < 1:
        raise DomainError(f"max_len must be >= 1, got {max_len}")
    sm = _StepModel(model, f2d, f3d)
    done = _search(sm, beam, max_len)
    if beam > 1:
        done += _search(sm, 1, max_len)
    best = done[0]
    for hyp in done[1:]:
        if hyp.log_prob > best.log_prob:
            best = hyp
    return best
