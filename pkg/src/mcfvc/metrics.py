"""
Caption metrics (BLEU-4, ROUGE-L, METEOR-lite, CIDEr-D) and the average step
accuracy used to track forgetting across class-incremental steps.

Every corpus metric takes ``candidates`` as a list of token lists and
``references`` as a parallel list of reference sets (lists of token lists).
Scores are on the natural scale (BLEU/ROUGE/METEOR in [0, 1], CIDEr-D in
[0, 10] per single reference); multiply by 100 for report tables.
"""

from __future__ import annotations

import csv
import io
import json
import math
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DomainError

Tokens = Sequence[str]

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(raw: str) -> list[str]:
    """Lowercase, delete ASCII punctuation, split on whitespace."""
    return raw.lower().translate(_PUNCT).split()


def _check_corpus(candidates, references):
    if len(candidates) == 0:
        raise DomainError("empty corpus")
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if len(refs) == 0:
            raise DomainError(f"candidate {i} has no references")


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def bleu4(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4) -> float:
    """Corpus BLEU with clipped counts, closest-length brevity penalty, no smoothing."""
    _check_corpus(candidates, references)
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        c_len += len(cand)
        # closest reference length, shorter wins ties
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            cand_counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in cand_counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_prec)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand: Tokens, ref: Tokens, beta: float = 1.2) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    """Mean over candidates of the best LCS F-measure against any reference."""
    _check_corpus(candidates, references)
    return float(np.mean([max(rouge_l_pair(c, r, beta) for r in refs)
                          for c, refs in zip(candidates, references)]))


# ---------------------------------------------------------------------------
# METEOR (exact-match stage only)
# ---------------------------------------------------------------------------

def _align(cand: Tokens, ref: Tokens) -> list[tuple[int, int]]:
    """Exact-match unigram alignment with the maximal number of matches.

    Each candidate token takes the reference occurrence that extends the
    previous match when possible, otherwise the earliest unused one; this keeps
    contiguous runs together and so keeps the chunk count low.
    """
    free: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        free.setdefault(w, []).append(j)
    pairs = []
    last = None
    for i, w in enumerate(cand):
        slots = free.get(w)
        if not slots:
            continue
        j = last + 1 if last is not None and last + 1 in slots else slots[0]
        slots.remove(j)
        pairs.append((i, j))
        last = j
    return pairs


def _chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_pair(cand: Tokens, ref: Tokens, alpha: float = 0.9, gamma: float = 0.5, beta: float = 3.0) -> float:
    pairs = _align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (_chunks(pairs) / m) ** beta
    return fmean * (1 - penalty)


def meteor_lite(candidates, references) -> float:
    """Exact-match METEOR: recall-weighted F (weight 9) times the fragmentation penalty."""
    _check_corpus(candidates, references)
    return float(np.mean([max(meteor_pair(c, r) for r in refs)
                          for c, refs in zip(candidates, references)]))


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------

def _cider_vec(counts: list[Counter], doc_freq: Counter, log_n_docs: float):
    vecs, norms = [], []
    for n, cnt in enumerate(counts):
        v = {g: tf * (log_n_docs - math.log(max(1.0, doc_freq[g]))) for g, tf in cnt.items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


def cider_d_scores(candidates, references, corpus=None, n: int = 4, sigma: float = 6.0) -> np.ndarray:
    """Per-candidate CIDEr-D.

    Document frequencies come from ``corpus`` (a list of reference sets; the
    evaluated references by default): an n-gram's df is the number of sets in
    which any reference contains it.
    """
    _check_corpus(candidates, references)
    corpus = references if corpus is None else corpus
    if len(corpus) == 0:
        raise DomainError("empty reference corpus for document frequencies")
    doc_freq: Counter = Counter()
    for refs in corpus:
        seen = set()
        for r in refs:
            for k in range(1, n + 1):
                seen.update(ngrams(r, k))
        doc_freq.update(seen)
    log_n = math.log(float(len(corpus)))

    scores = []
    for cand, refs in zip(candidates, references):
        cv, cn = _cider_vec([ngrams(cand, k) for k in range(1, n + 1)], doc_freq, log_n)
        per_n = np.zeros(n)
        for r in refs:
            rv, rn = _cider_vec([ngrams(r, k) for k in range(1, n + 1)], doc_freq, log_n)
            delta = len(cand) - len(r)
            for k in range(n):
                val = sum(min(x, rv[k][g]) * rv[k][g] for g, x in cv[k].items() if g in rv[k])
                if cn[k] != 0 and rn[k] != 0:
                    val /= cn[k] * rn[k]
                per_n[k] += val * math.exp(-(delta ** 2) / (2 * sigma ** 2))
        scores.append(per_n.mean() / len(refs) * 10.0)
    return np.array(scores)


def cider_d(candidates, references, corpus=None) -> float:
    return float(np.mean(cider_d_scores(candidates, references, corpus)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    bleu4: float
    rouge_l: float
    meteor_lite: float
    cider_d: float
    per_task: dict[int, dict[str, float]] = field(default_factory=dict)

    def as_percent(self) -> dict[str, float]:
        return {"bleu4": 100 * self.bleu4, "meteor_lite": 100 * self.meteor_lite,
                "rouge_l": 100 * self.rouge_l, "cider_d": 100 * self.cider_d}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_task"] = {str(k): v for k, v in self.per_task.items()}
        return d


def score_corpus(candidates, references) -> dict[str, float]:
    return {
        "bleu4": bleu4(candidates, references),
        "rouge_l": rouge_l(candidates, references),
        "meteor_lite": meteor_lite(candidates, references),
        "cider_d": cider_d(candidates, references),
    }


# ---------------------------------------------------------------------------
# average step accuracy
# ---------------------------------------------------------------------------

class StepAccuracyTable:
    """Lower-triangular CIDEr matrix: ``scores[t][g]`` is task g's CIDEr after step t.

    Steps and tasks are 1-based here, matching how they are reported.
    """

    def __init__(self, class_counts: Sequence[int]):
        if any(z < 1 for z in class_counts):
            raise ContractError(f"class counts must be >= 1, got {list(class_counts)}")
        self.class_counts = list(class_counts)
        self.scores: dict[int, dict[int, float]] = {}

    @property
    def t_max(self) -> int:
        return len(self.class_counts)

    def z_total(self, t: int) -> int:
        return sum(self.class_counts[:t])

    def set(self, t: int, g: int, cider: float) -> None:
        if not 1 <= g <= t <= self.t_max:
            raise ContractError(f"score ({t}, {g}) outside the lower triangle of a {self.t_max}-task table")
        self.scores.setdefault(t, {})[g] = float(cider)

    def set_row(self, t: int, ciders: Sequence[float]) -> None:
        for g, c in enumerate(ciders, start=1):
            self.set(t, g, c)

    def get(self, t: int, g: int) -> float:
        try:
            return self.scores[t][g]
        except KeyError:
            raise ContractError(f"missing CIDEr score for step t={t}, task g={g}") from None

    def steps(self) -> list[int]:
        return sorted(self.scores)

    # -- CSV ingestion / emission (task_step, sub_task, class_count, cider) ----
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_step", "sub_task", "class_count", "cider"])
        for t in self.steps():
            for g in sorted(self.scores[t]):
                w.writerow([t, g, self.class_counts[g - 1], repr(self.scores[t][g])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "StepAccuracyTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        counts: dict[int, int] = {}
        for r in rows:
            g, z = int(r["sub_task"]), int(r["class_count"])
            if counts.setdefault(g, z) != z:
                raise ContractError(f"sub_task {g} listed with class counts {counts[g]} and {z}")
        if sorted(counts) != list(range(1, len(counts) + 1)):
            raise ContractError(f"sub_task ids must be 1..n, got {sorted(counts)}")
        table = cls([counts[g] for g in sorted(counts)])
        for r in rows:
            table.set(int(r["task_step"]), int(r["sub_task"]), float(r["cider"]))
        return table


def step_forgetting_metric(table: StepAccuracyTable, t: int) -> float:
    """Average step accuracy after step ``t``: (1/t) Σ_g (z^g / z^total) CIDEr_{t,g}."""
    if not 1 <= t <= table.t_max:
        raise ContractError(f"step {t} outside 1..{table.t_max}")
    z_total = table.z_total(t)
    return sum(table.class_counts[g - 1] / z_total * table.get(t, g) for g in range(1, t + 1)) / t


def forgetting_curve(table: StepAccuracyTable) -> dict[int, float]:
    return {t: step_forgetting_metric(table, t) for t in table.steps()}


def summary_json(table: StepAccuracyTable) -> str:
    return json.dumps({"class_counts": table.class_counts,
                       "cider_tilde": {str(t): v for t, v in forgetting_curve(table).items()}},
                      indent=2, sort_keys=True)
