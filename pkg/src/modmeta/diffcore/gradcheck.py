from __future__ import annotations

from typing import Callable

import numpy as np

from .node import Node, NonFiniteError, grad, leaf


def numeric_gradient(f: Callable[[Node], Node], point, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h`` for every component."""
    x0 = np.array(point, dtype=np.float64)
    out = np.zeros_like(x0)
    flat = out.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        # f may take input-gradients internally, so the graph must stay on
        with np.errstate(all="ignore"):
            fp = f(leaf(xp.reshape(x0.shape))).value
            fm = f(leaf(xm.reshape(x0.shape))).value
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite near the point (component {i})")
        flat[i] = (float(fp) - float(fm)) / (2 * h)
    return out


def check_gradient(f: Callable[[Node], Node], point, h: float = 1e-5, scale: str = "max") -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``scale="max"`` divides the largest absolute discrepancy by the largest
    gradient magnitude (either estimate).  ``scale="component"`` divides each
    component by its own ``max(|analytic|, |numeric|, 1e-12)``, which is only
    meaningful when no component is near zero: central differences carry an
    absolute error of roughly ``eps |f| / h``.
    """
    if scale not in ("max", "component"):
        raise ValueError("scale must be 'max' or 'component'")
    if h <= 0:
        raise ValueError("step h must be positive")
    x = leaf(point)
    with np.errstate(all="ignore"):
        y = f(x)
    if not np.all(np.isfinite(y.value)):
        raise NonFiniteError("f is not finite at the point")
    (g,) = grad(y, [x])
    analytic = g.value
    numeric = numeric_gradient(f, point, h)
    if not analytic.size:
        return 0.0
    diff = np.abs(analytic - numeric)
    if scale == "component":
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
        return float(np.max(diff / denom))
    denom = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(diff) / denom)
