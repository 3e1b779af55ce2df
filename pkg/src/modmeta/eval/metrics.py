"""Relative field errors, SSIM and evaluation meshes."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class MeshSpec:
    ranges: tuple[tuple[float, float], ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.ranges) != len(self.counts):
            raise ValueError("one point count per mesh dimension")
        if any(c < 1 for c in self.counts):
            raise ValueError("mesh counts must be >= 1")

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.counts)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.counts))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.ranges, self.counts)]

    def points(self) -> np.ndarray:
        """Flattened grid, row-major with the first coordinate varying slowest."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def to_dict(self) -> dict:
        return {"ranges": [list(r) for r in self.ranges], "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, d) -> "MeshSpec":
        return cls(tuple(tuple(float(v) for v in r) for r in d["ranges"]), tuple(int(c) for c in d["counts"]))


DEFAULT_MESHES = {
    "mass_spring": MeshSpec(((-10.0, 10.0), (-10.0, 10.0)), (100, 100)),
    "pendulum": MeshSpec(((-6.0, 6.0), (-20.0, 20.0)), (100, 100)),
    "duffing": MeshSpec(((-3.0, 3.0), (-3.0, 3.0)), (100, 100)),
    "dno": MeshSpec(((-8.0, 8.0), (-1.0, 1.0), (0.0, 3.0)), (30, 30, 30)),
    "tgc": MeshSpec(((0.5, 1.5), (-1.5, 1.5), (103.0, 103.8), (103.0, 103.8)), (30, 30, 30, 30)),
}


def default_mesh(system: str) -> MeshSpec | None:
    """Evaluation mesh for ``system``; Kepler has none (field error is not reported)."""
    return DEFAULT_MESHES.get(system)


# ------------------------------------------------------------------ relative errors

def relative_l2(true, pred) -> float:
    """||true - pred||_2 / ||true||_2 over all entries."""
    t = np.asarray(true, dtype=np.float64).ravel()
    p = np.asarray(pred, dtype=np.float64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch {np.shape(true)} vs {np.shape(pred)}")
    den = np.linalg.norm(t)
    if den == 0:
        raise ZeroDivisionError("reference field has zero norm")
    return float(np.linalg.norm(t - p) / den)


def traj_error(true_fields, pred_fields) -> float:
    """Mean over trajectories of the stacked relative L2 error.

    Each element of ``true_fields`` / ``pred_fields`` is one trajectory's
    field evaluated at all of its states, shape ``(n_seq, state_dim)``.
    Trajectories whose true field is identically zero are skipped.
    """
    errs, skipped = [], 0
    for t, p in zip(true_fields, pred_fields, strict=True):
        try:
            errs.append(relative_l2(t, p))
        except ZeroDivisionError:
            skipped += 1
    if skipped:
        warnings.warn(f"traj_error: skipped {skipped} equilibrium trajectories", RuntimeWarning, stacklevel=2)
    if not errs:
        raise ValueError("traj_error: no trajectory with a nonzero field")
    return float(np.mean(errs))


def field_error(true_field, pred_field, mask=None) -> float:
    """Relative L2 error over mesh points, optionally restricted to ``mask``."""
    t = np.asarray(true_field, dtype=np.float64)
    p = np.asarray(pred_field, dtype=np.float64)
    if mask is not None:
        t, p = t[mask], p[mask]
    return relative_l2(t, p)


# ------------------------------------------------------------------ SSIM

def _ssim_constants(truth_channel, k1, k2, data_range):
    if data_range is None:
        data_range = float(np.max(truth_channel) - np.min(truth_channel))
        if data_range == 0:
            data_range = 1.0
    return (k1 * data_range) ** 2, (k2 * data_range) ** 2


def ssim_channel(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03, data_range=None) -> float:
    """Mean SSIM over all fully contained ``window x window`` uniform windows.

    Window statistics use population (1/N) moments.  The dynamic range comes
    from ``a`` (the reference) unless given.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs equal 2-D grids, got {a.shape} and {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"grid {a.shape} is smaller than the {window}x{window} window")
    c1, c2 = _ssim_constants(a, k1, k2, data_range)
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da ** 2).mean(axis=(-1, -2))
    var_b = (db ** 2).mean(axis=(-1, -2))
    cov = (da * db).mean(axis=(-1, -2))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(truth, model, window: int = 7, k1: float = 0.01, k2: float = 0.03, data_range=None) -> float:
    """Channel-averaged SSIM of two ``(H, W, C)`` vector-field rasters."""
    truth = np.asarray(truth, dtype=np.float64)
    model = np.asarray(model, dtype=np.float64)
    if truth.ndim == 2:
        truth, model = truth[..., None], model[..., None]
    if truth.shape != model.shape or truth.ndim != 3:
        raise ValueError(f"ssim needs equal (H, W, C) rasters, got {truth.shape} and {model.shape}")
    return float(np.mean([ssim_channel(truth[..., c], model[..., c], window, k1, k2, data_range)
                          for c in range(truth.shape[-1])]))


def ssim_reference(truth, model, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Literal double loop over window positions; slow, used as an oracle."""
    truth = np.asarray(truth, dtype=np.float64)
    model = np.asarray(model, dtype=np.float64)
    if truth.ndim == 2:
        truth, model = truth[..., None], model[..., None]
    scores = []
    for c in range(truth.shape[-1]):
        a, b = truth[..., c], model[..., c]
        rng = a.max() - a.min()
        rng = rng if rng != 0 else 1.0
        c1, c2 = (k1 * rng) ** 2, (k2 * rng) ** 2
        vals = []
        for i in range(a.shape[0] - window + 1):
            for j in range(a.shape[1] - window + 1):
                x = a[i:i + window, j:j + window].ravel()
                y = b[i:i + window, j:j + window].ravel()
                n = x.size
                mx = sum(x) / n
                my = sum(y) / n
                vx = sum((x - mx) ** 2) / n
                vy = sum((y - my) ** 2) / n
                cxy = sum((x - mx) * (y - my)) / n
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
        scores.append(sum(vals) / len(vals))
    return float(sum(scores) / len(scores))
