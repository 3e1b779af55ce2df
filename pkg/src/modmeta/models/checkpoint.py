"""Structured-text checkpoints.

Floats are written with ``repr`` precision through the json module, so a
save/load/save cycle reproduces the file byte for byte.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .structured import StructuredModel, build_model

FORMAT_VERSION = 1


def _encode(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _decode(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_dict(model: StructuredModel, params: dict, latents: dict | None = None,
                    extra: dict | None = None) -> dict:
    out = {
        "format": FORMAT_VERSION,
        "model": model.describe(),
        "layout": {net.prefix: [[l, name, list(shape), list(span)] for l, name, shape, span in net.layout]
                   for net in model.nets},
        "params": {k: _encode(params[k]) for k in model.param_names()},
        "latents": {str(k): _encode(v) for k, v in sorted((latents or {}).items())},
    }
    if extra:
        out["extra"] = extra
    return out


def save_checkpoint(path, model: StructuredModel, params: dict, latents: dict | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(checkpoint_dict(model, params, latents, extra), sort_keys=True, separators=(",", ":"))
    path.write_text(blob + "\n")
    return path


def load_checkpoint(path):
    """Returns (model, params, latents keyed by int task index, extra)."""
    d = json.loads(Path(path).read_text())
    if d.get("format") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {d.get('format')}")
    model = build_model(d["model"])
    params = {k: _decode(v) for k, v in d["params"].items()}
    model.check_params(params)
    latents = {int(k): _decode(v) for k, v in d["latents"].items()}
    return model, params, latents, d.get("extra", {})
