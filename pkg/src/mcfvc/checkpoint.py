"""
Checkpoint persistence.

A checkpoint is a directory holding two files:

``checkpoint.json``
    ``format_version``, ``task_index``, ``glossary`` (ordered word list),
    ``dims``, ``gamma``, ``dropout``, ``params`` (list of ``{name, shape, tag}``
    in registration order), ``masks`` (list of parameter names that carry a
    mask, or null) and ``rng_state`` (numpy bit-generator state or null).
``tensors.npz``
    float64 arrays keyed ``param/<name>`` and ``mask/<name>``.

Arrays are stored losslessly, so save → load is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .fgss import ParamMask
from .model import Captioner, Glossary, ModelDims, ModelParams

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    task_index: int
    model: Captioner
    masks: ParamMask | None = None
    rng_state: dict | None = None
    format_version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m = ckpt.model
    header = {
        "format_version": FORMAT_VERSION,
        "task_index": ckpt.task_index,
        "glossary": m.glossary.words,
        "dims": {"d2": m.dims.d2, "d3": m.dims.d3, "d_model": m.dims.d_model, "hidden": m.dims.hidden},
        "gamma": m.gamma,
        "dropout": m.dropout,
        "params": [{"name": n, "shape": list(m.params[n].shape), "tag": m.params.tag(n)} for n in m.params],
        "masks": None if ckpt.masks is None else ckpt.masks.names(),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }
    arrays = {f"param/{n}": a for n, a in m.params.arrays().items()}
    if ckpt.masks is not None:
        arrays.update({f"mask/{n}": ckpt.masks[n] for n in ckpt.masks})
    with open(path / "tensors.npz", "wb") as fh:
        np.savez(fh, **arrays)
    (path / "checkpoint.json").write_text(json.dumps(header, indent=1))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    header = json.loads((path / "checkpoint.json").read_text())
    if header["format_version"] != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format {header['format_version']}")
    with np.load(path / "tensors.npz") as npz:
        arrays = {k: npz[k] for k in npz.files}
    params = ModelParams()
    for entry in header["params"]:
        data = arrays[f"param/{entry['name']}"]
        if list(data.shape) != entry["shape"]:
            raise ContractError(f"{entry['name']}: stored shape {data.shape} != header {entry['shape']}")
        params.add(entry["name"], data, entry["tag"])
    glossary = Glossary()
    glossary.words = list(header["glossary"])
    glossary.index = {w: i for i, w in enumerate(glossary.words)}
    model = Captioner(params, glossary, ModelDims(**header["dims"]), header["gamma"], header["dropout"])
    masks = None
    if header["masks"] is not None:
        masks = ParamMask({n: arrays[f"mask/{n}"] for n in header["masks"]})
    return Checkpoint(header["task_index"], model, masks, header["rng_state"], header["format_version"],
                      header.get("meta", {}))
