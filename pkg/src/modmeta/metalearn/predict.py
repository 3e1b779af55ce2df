"""Adapted models as plain field callables, plus trajectory-error helpers."""
from __future__ import annotations

import numpy as np

from ..diffcore import constant
from ..eval import traj_error
from ..models import StructuredModel
from ..systems import true_field
from .data import as_task_data


class Predictor:
    """A model with fixed parameters and (optionally) one latent code per task.

    ``params`` may hold per-task arrays with a leading task axis (adapted
    optimization baselines); shared arrays are used by every task.
    """

    def __init__(self, model: StructuredModel, params, z=None, chunk: int = 4096):
        self.model = model
        self.params = {k: np.asarray(v) for k, v in params.items()}
        shapes = model.param_shapes()
        self.per_task = {k for k, v in self.params.items() if v.ndim == len(shapes[k]) + 1}
        sizes = {self.params[k].shape[0] for k in self.per_task}
        self.z = None if z is None else np.atleast_2d(np.asarray(z, dtype=np.float64))
        if self.z is not None:
            sizes.add(self.z.shape[0])
        if len(sizes) > 1:
            raise ValueError(f"inconsistent task counts {sorted(sizes)}")
        self.n_tasks = sizes.pop() if sizes else None
        if model.modulated and self.z is None:
            raise ValueError("a modulated model needs latent codes")
        self.chunk = int(chunk)

    def task(self, b: int) -> "Predictor":
        if self.n_tasks is None:
            return self
        p = {k: (v[b:b + 1] if k in self.per_task else v) for k, v in self.params.items()}
        z = None if self.z is None else self.z[b:b + 1]
        return Predictor(self.model, p, z, self.chunk)

    def field(self, states) -> np.ndarray:
        """Field at ``(B, n, N)`` states (or ``(n, N)`` for a single-task predictor)."""
        x = np.asarray(states, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        nb = x.shape[0]
        if self.n_tasks is not None and nb != self.n_tasks:
            raise ValueError(f"predictor holds {self.n_tasks} tasks, got states for {nb}")
        p = {k: constant(v) for k, v in self.params.items()}
        z = None if self.z is None else constant(self.z)
        out = np.empty_like(x)
        step = max(1, self.chunk // max(nb, 1))
        for lo in range(0, x.shape[1], step):
            f = self.model.field(p, z, x[:, lo:lo + step], create_graph=False)
            out[:, lo:lo + step] = f.value
        return out[0] if single else out

    __call__ = field


def traj_error_tasks(spec, predictor: Predictor, tasks, role: str = "performance") -> float:
    """Mean over tasks of the trajectory error against the analytic field."""
    tasks = as_task_data(tasks, role)
    errs = []
    for b, t in enumerate(tasks):
        trajs = t.trajectories
        true = true_field(spec, trajs, t.mu)
        n_t, n_seq, dim = trajs.shape
        pred = predictor.task(b).field(trajs.reshape(1, n_t * n_seq, dim))[0].reshape(trajs.shape)
        errs.append(traj_error(true, pred))
    return float(np.mean(errs))
