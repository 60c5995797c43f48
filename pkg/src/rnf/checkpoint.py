"""Self-describing JSON checkpoints.

Floats are written with Python's shortest round-trip repr, so a value read
back is bit-identical to the one written, and save -> load -> save yields the
same bytes.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .core import RnfModel
from .data import NormStats

FORMAT = "rnf-checkpoint"
VERSION = "1.0"


class CheckpointError(ValueError):
    pass


def _major(version: str) -> str:
    return str(version).split(".", 1)[0]


def to_document(model: RnfModel, norm: NormStats | None = None) -> dict:
    norm = norm or NormStats.identity(model.input_dim, model.obs_dim)
    params = {}
    for name in sorted(model.params):
        a = np.asarray(model.params[name], dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"tensor {name!r} holds non-finite values")
        params[name] = {"shape": list(a.shape), "values": a.ravel().tolist()}
    return {
        "format": FORMAT,
        "version": VERSION,
        "variant": model.variant,
        "head": model.head,
        "dims": {"J": model.state_size, "I": model.input_dim, "O": model.obs_dim},
        "params": params,
        "norm": norm.to_dict(),
    }


def dumps(model: RnfModel, norm: NormStats | None = None) -> str:
    return json.dumps(to_document(model, norm), indent=1, sort_keys=True) + "\n"


def save(path: str | Path, model: RnfModel, norm: NormStats | None = None) -> None:
    Path(path).write_text(dumps(model, norm))


def from_document(doc: dict) -> tuple[RnfModel, NormStats]:
    if doc.get("format") != FORMAT:
        raise CheckpointError("not an rnf checkpoint")
    if _major(doc.get("version", "")) != _major(VERSION):
        raise CheckpointError(f"checkpoint version {doc.get('version')!r} is incompatible with {VERSION}")
    try:
        dims = doc["dims"]
        J, I, O = int(dims["J"]), int(dims["I"]), int(dims["O"])
        params = {}
        for name, entry in doc["params"].items():
            shape = tuple(int(n) for n in entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            if values.size != math.prod(shape):
                raise CheckpointError(f"tensor {name!r}: shape {shape} needs {math.prod(shape)} values, "
                                      f"found {values.size}")
            params[name] = values.reshape(shape)
        model = RnfModel(doc["variant"], J, I, O, params, doc.get("head", "gaussian"))
        norm = NormStats.from_dict(doc["norm"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: missing or bad field {exc}") from exc
    _check_shapes(model)
    return model, norm


def _check_shapes(model: RnfModel) -> None:
    """Compare every tensor against a freshly initialised model of the same kind."""
    from .core import init_model

    ref = init_model(model.variant, model.input_dim, model.obs_dim, model.state_size,
                     np.random.default_rng(0), model.head).params
    missing = sorted(set(ref) - set(model.params))
    extra = sorted(set(model.params) - set(ref))
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, value in ref.items():
        if model.params[name].shape != value.shape:
            raise CheckpointError(f"tensor {name!r} has shape {model.params[name].shape}, "
                                  f"expected {value.shape}")


def loads(text: str) -> tuple[RnfModel, NormStats]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    return from_document(doc)


def load(path: str | Path) -> tuple[RnfModel, NormStats]:
    return loads(Path(path).read_text())
