"""
Synthetic multimodal captioning data, class-incremental task splits, and a
loader that refuses to hand out records from tasks not yet reached.

Dataset files are JSON lines, one record per line::

    {"video_id": "v0003", "class_id": 0, "f2d": [[...], ...], "f3d": [[...], ...],
     "captions": ["a rubo is kepa the lomi", ...]}

``f2d`` is ℓ×d2 and ``f3d`` is ℓ×d3. Externally produced files in the same
schema (e.g. real CNN features) load through :func:`load_jsonl`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, ProtocolError

FUNCTION_WORDS = ("a", "the", "is", "in", "with", "and", "on")

_TEMPLATES = (
    "a {s} is {v} the {o}",
    "the {s} {v} a {o}",
    "a {s} is {v} with the {o}",
    "the {s} is {v} on a {o}",
    "a {s} and the {o}",
)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class DatasetRecord:
    video_id: str
    class_id: int
    f2d: np.ndarray
    f3d: np.ndarray
    captions: list[str]

    def __post_init__(self):
        self.f2d = np.asarray(self.f2d, dtype=np.float64)
        self.f3d = np.asarray(self.f3d, dtype=np.float64)
        if self.f2d.ndim != 2 or self.f3d.ndim != 2 or self.f2d.shape[0] != self.f3d.shape[0]:
            raise ContractError(f"{self.video_id}: feature blocks must share ℓ rows, got "
                                f"{self.f2d.shape} and {self.f3d.shape}")
        if not self.captions:
            raise ContractError(f"{self.video_id}: needs at least one caption")

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "class_id": int(self.class_id),
                "f2d": self.f2d.tolist(), "f3d": self.f3d.tolist(), "captions": list(self.captions)}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetRecord":
        return cls(d["video_id"], int(d["class_id"]), d["f2d"], d["f3d"], list(d["captions"]))


def save_jsonl(records: Iterable[DatasetRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def load_jsonl(path) -> list[DatasetRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(DatasetRecord.from_json(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _word(rng: np.random.Generator, taken: set[str]) -> str:
    while True:
        n = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n))
        if w not in taken and w not in FUNCTION_WORDS:
            taken.add(w)
            return w


@dataclass
class ClassSpec:
    prototype: np.ndarray
    frequency: float
    phases: np.ndarray
    subjects: list[str]
    verbs: list[str]
    objects: list[str]

    @property
    def vocabulary(self) -> set[str]:
        return set(self.subjects) | set(self.verbs) | set(self.objects)


@dataclass
class SyntheticSpec:
    n_classes: int = 20
    per_class: int = 30
    frames: int = 20
    d2: int = 16
    d3: int = 16
    noise: float = 0.5
    separation: float = 4.0
    skew: float = 0.0
    seed: int = 0
    classes: list[ClassSpec] = field(default_factory=list)


def make_classes(spec: SyntheticSpec, rng: np.random.Generator) -> list[ClassSpec]:
    """Class prototypes with pairwise distance >= ``separation`` (rejection sampled)."""
    protos: list[np.ndarray] = []
    while len(protos) < spec.n_classes:
        p = rng.normal(size=spec.d2)
        if all(np.linalg.norm(p - q) >= spec.separation for q in protos):
            protos.append(p)
    taken: set[str] = set()
    classes = []
    for c in range(spec.n_classes):
        classes.append(ClassSpec(
            prototype=protos[c],
            frequency=0.2 + 0.6 * c / max(spec.n_classes - 1, 1),
            phases=rng.uniform(0, 2 * np.pi, size=spec.d3),
            subjects=[_word(rng, taken) for _ in range(2)],
            verbs=[_word(rng, taken) for _ in range(2)],
            objects=[_word(rng, taken) for _ in range(2)],
        ))
    return classes


def _caption(cls: ClassSpec, rng: np.random.Generator) -> str:
    tpl = _TEMPLATES[rng.integers(len(_TEMPLATES))]
    return tpl.format(s=cls.subjects[rng.integers(2)], v=cls.verbs[rng.integers(2)],
                      o=cls.objects[rng.integers(2)])


def generate_synthetic_dataset(n_classes: int = 20, per_class: int = 30, frames: int = 20, d2: int = 16,
                               d3: int = 16, seed: int = 0, noise: float = 0.5, skew: float = 0.0,
                               separation: float = 4.0) -> list[DatasetRecord]:
    """Deterministic synthetic video-caption records.

    Each class has a static prototype (f2d rows are prototype + Gaussian
    noise), a temporal sinusoid motif whose phase is shifted per record (f3d),
    and a private vocabulary that every one of its 3-5 captions draws from.
    ``skew`` > 0 makes later classes smaller: class c keeps
    ``round(per_class · (1 - skew · c / (n_classes-1)))`` records (at least 1).
    """
    if n_classes < 1 or per_class < 1:
        raise ConfigurationError("need n_classes >= 1 and per_class >= 1")
    if not 0.0 <= skew < 1.0:
        raise ConfigurationError(f"skew must lie in [0, 1), got {skew}")
    spec = SyntheticSpec(n_classes, per_class, frames, d2, d3, noise, separation, skew, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    classes = make_classes(spec, rng)
    t = np.arange(frames)[:, None]
    records = []
    vid = 0
    for c, cls in enumerate(classes):
        count = per_class if skew == 0 else max(1, round(per_class * (1 - skew * c / max(n_classes - 1, 1))))
        for _ in range(count):
            f2d = cls.prototype[None, :] + noise * rng.normal(size=(frames, d2))
            shift = rng.uniform(0, 2 * np.pi)
            f3d = np.sin(cls.frequency * t + cls.phases[None, :] + shift) + noise * rng.normal(size=(frames, d3))
            caps = [_caption(cls, rng) for _ in range(int(rng.integers(3, 6)))]
            records.append(DatasetRecord(f"v{vid:05d}", c, f2d, f3d, caps))
            vid += 1
    return records


def class_vocabulary(seed: int = 0, n_classes: int = 20, d2: int = 16, d3: int = 16,
                     separation: float = 4.0) -> list[set[str]]:
    """Private vocabulary of each class, as generated for ``seed``."""
    spec = SyntheticSpec(n_classes=n_classes, d2=d2, d3=d3, separation=separation, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return [c.vocabulary for c in make_classes(spec, rng)]


# ---------------------------------------------------------------------------
# class-incremental split
# ---------------------------------------------------------------------------

@dataclass
class TaskSpec:
    task_index: int
    class_ids: list[int]

    @property
    def z(self) -> int:
        return len(self.class_ids)


@dataclass
class TaskSplit:
    spec: TaskSpec
    train: list[DatasetRecord]
    valid: list[DatasetRecord]
    test: list[DatasetRecord]


def split_class_incremental(dataset: Sequence[DatasetRecord], base_classes: int = 10, per_increment: int = 2,
                            seed: int = 0, ratios=(7, 1, 2)) -> list[TaskSplit]:
    """Task 0 gets the first ``base_classes`` classes, each later task ``per_increment``.

    Within a task the records are shuffled and cut 7:1:2 (train/valid/test).
    Classes that do not fill a whole increment are dropped.
    """
    class_ids = sorted({r.class_id for r in dataset})
    if base_classes < 1 or per_increment < 1:
        raise ConfigurationError("base_classes and per_increment must be >= 1")
    if base_classes > len(class_ids):
        raise ConfigurationError(f"{base_classes} base classes requested but only {len(class_ids)} present")
    groups = [class_ids[:base_classes]]
    rest = class_ids[base_classes:]
    while len(rest) >= per_increment:
        groups.append(rest[:per_increment])
        rest = rest[per_increment:]
    by_class: dict[int, list[DatasetRecord]] = {}
    for r in dataset:
        by_class.setdefault(r.class_id, []).append(r)
    total = sum(ratios)
    splits = []
    for t, ids in enumerate(groups):
        recs = [r for c in ids for r in by_class[c]]
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t, 7)))
        order = rng.permutation(len(recs))
        recs = [recs[i] for i in order]
        n = len(recs)
        n_train = round(n * ratios[0] / total)
        n_valid = round(n * ratios[1] / total)
        splits.append(TaskSplit(TaskSpec(t, list(ids)), recs[:n_train], recs[n_train:n_train + n_valid],
                                recs[n_train + n_valid:]))
    return splits


def splits_to_json(splits: Sequence[TaskSplit]) -> dict:
    return {"tasks": [{"task_index": s.spec.task_index, "class_ids": s.spec.class_ids,
                       "train": [r.video_id for r in s.train], "valid": [r.video_id for r in s.valid],
                       "test": [r.video_id for r in s.test]} for s in splits]}


def splits_from_json(d: dict, dataset: Sequence[DatasetRecord]) -> list[TaskSplit]:
    by_id = {r.video_id: r for r in dataset}
    out = []
    for t in d["tasks"]:
        try:
            out.append(TaskSplit(TaskSpec(t["task_index"], list(t["class_ids"])),
                                 [by_id[v] for v in t["train"]], [by_id[v] for v in t["valid"]],
                                 [by_id[v] for v in t["test"]]))
        except KeyError as e:
            raise ConfigurationError(f"split refers to unknown video {e}") from None
    return out


# ---------------------------------------------------------------------------
# audited loader
# ---------------------------------------------------------------------------

class TaskDataLoader:
    """Hands out training records while enforcing the class-incremental protocol.

    ``open_step(t)`` sets the current step; training reads of any task beyond
    ``t`` raise :class:`ProtocolError`. Every read is logged as
    ``(step, task, split)`` in :attr:`access_log`.
    """

    def __init__(self, splits: Sequence[TaskSplit]):
        self.splits = list(splits)
        self.step: int | None = None
        self.access_log: list[tuple[int, int, str]] = []

    def open_step(self, t: int) -> None:
        if not 0 <= t < len(self.splits):
            raise ConfigurationError(f"no task {t}; {len(self.splits)} tasks available")
        self.step = t

    def _read(self, task: int, split: str) -> list[DatasetRecord]:
        if self.step is None:
            raise ProtocolError("no step opened on the data loader")
        if task > self.step:
            raise ProtocolError(f"step {self.step} attempted to read {split} data of future task {task}")
        if not 0 <= task < len(self.splits):
            raise ConfigurationError(f"missing split for task {task}")
        self.access_log.append((self.step, task, split))
        return list(getattr(self.splits[task], split))

    def train(self, task: int) -> list[DatasetRecord]:
        return self._read(task, "train")

    def test(self, task: int) -> list[DatasetRecord]:
        return self._read(task, "test")

    def tasks_read(self, split: str = "train") -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for step, task, sp in self.access_log:
            if sp == split:
                out.setdefault(step, set()).add(task)
        return out
