"""Plot-ready field rasters: a JSON header line, then one line per grid point."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import MeshSpec


@dataclass(frozen=True)
class FieldRaster:
    system: str
    mu: np.ndarray
    mesh: MeshSpec
    points: np.ndarray            # (n_points, dim)
    model: np.ndarray             # (n_points, state_dim)
    truth: np.ndarray | None = None

    def grid(self, which: str = "model") -> np.ndarray:
        """Field reshaped onto the mesh, shape ``(*mesh.shape, state_dim)``."""
        arr = self.model if which == "model" else self.truth
        return arr.reshape(*self.mesh.shape, arr.shape[-1])


def export_raster(path, raster: FieldRaster) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if raster.points.shape[0] != raster.mesh.n_points:
        raise ValueError("raster point count does not match the mesh")
    header = {"system": raster.system, "mu": [float(v) for v in raster.mu], "mesh": raster.mesh.to_dict(),
              "state_dim": int(raster.model.shape[1]), "has_truth": raster.truth is not None}
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(raster.points.shape[0]):
        row = [float(v) for v in raster.points[i]]
        if raster.truth is not None:
            row += [float(v) for v in raster.truth[i]]
        row += [float(v) for v in raster.model[i]]
        lines.append(json.dumps(row))
    path.write_text("\n".join(lines) + "\n")
    return path


def import_raster(path) -> FieldRaster:
    with open(path) as fh:
        header = json.loads(fh.readline())
        rows = np.array([json.loads(line) for line in fh if line.strip()], dtype=np.float64)
    mesh = MeshSpec.from_dict(header["mesh"])
    d, k = mesh.dim, header["state_dim"]
    points = rows[:, :d]
    truth = rows[:, d:d + k] if header["has_truth"] else None
    model = rows[:, d + k:] if header["has_truth"] else rows[:, d:]
    return FieldRaster(header["system"], np.array(header["mu"]), mesh, points, model, truth)
