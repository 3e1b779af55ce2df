"""Meta-training with persistent latent codes and latent auto-decoding."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from ..diffcore import NonFiniteError, constant, grad, leaf, ops
from ..models import StructuredModel, task_losses
from .adam import AdamState, adam_init, adam_step, clip_global_norm
from .config import BATCHES, INIT, MetaConfig, TrainingDivergence, stream
from .data import TaskData, as_task_data, stack_tasks
from .predict import Predictor, traj_error_tasks


@dataclass
class TrainerState:
    model: StructuredModel
    params: dict[str, np.ndarray]
    task_ids: list[int]
    latents: np.ndarray            # (n_train, latent_dim), row i belongs to task_ids[i]
    adam: AdamState
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    best: dict | None = None       # {"iteration", "val", "params", "latents"}

    def selected(self) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Best-validation snapshot if one was taken, else the current state."""
        if self.best is not None:
            return self.best["params"], self.best["latents"]
        return self.params, self.latents

    def latent_dict(self, which: str = "selected") -> dict[int, np.ndarray]:
        lat = self.selected()[1] if which == "selected" else self.latents
        return {k: lat[i].copy() for i, k in enumerate(self.task_ids)}


def mean_latent(latents) -> np.ndarray:
    """Arithmetic mean of the training latent codes."""
    lat = np.asarray(list(latents.values()) if isinstance(latents, dict) else latents, dtype=np.float64)
    if lat.ndim != 2 or lat.shape[0] == 0:
        raise ValueError("need at least one training latent code")
    return lat.mean(axis=0)


def _finite_or_raise(losses: np.ndarray, iteration: int, ids) -> None:
    if not np.all(np.isfinite(losses)):
        bad = [k for k, v in zip(ids, losses) if not np.isfinite(v)]
        raise TrainingDivergence(iteration, bad, losses.tolist())


def latent_steps(model: StructuredModel, params, z: np.ndarray, states, labels, n_steps: int, lr: float,
                 iteration: int = -1, ids=None, final_loss: bool = True) -> tuple[np.ndarray, list[np.ndarray]]:
    """``n_steps`` of plain gradient descent on the latent codes only.

    Returns the final codes and the per-task losses seen before each step
    (plus the loss at the final codes when ``final_loss``).
    """
    ids = list(range(len(z))) if ids is None else ids
    frozen = {k: constant(v) for k, v in params.items()}
    trace = []
    for step in range(n_steps + int(final_loss)):
        zl = leaf(z, name="z")
        try:
            per_task = task_losses(model, frozen, zl, states, labels)
        except NonFiniteError as e:
            raise TrainingDivergence(iteration, ids, str(e)) from e
        _finite_or_raise(per_task.value, iteration, ids)
        trace.append(per_task.value.copy())
        if step == n_steps:
            break
        (gz,) = grad(ops.sum(per_task), [zl])
        z = z - lr * gz.value
    return z, trace


def adapt(model: StructuredModel, params, z_start, tasks, n_steps: int, lr: float):
    """Latent auto-decoding on adaptation data with the base parameters frozen.

    ``z_start`` is one code (broadcast to every task) or one code per task.
    Returns ``(codes (B, latent), per-step loss trace)``.
    """
    tasks = as_task_data(tasks)
    if not tasks:
        raise ValueError("adapt needs at least one task")
    if not model.modulated:
        raise ValueError("adapt needs a modulated model")
    x, y = stack_tasks(tasks)
    z0 = np.asarray(z_start, dtype=np.float64)
    z0 = np.broadcast_to(z0, (len(tasks), model.latent_dim)).copy()
    return latent_steps(model, params, z0, x, y, n_steps, lr, ids=[t.k for t in tasks])


def start_code(state: TrainerState, config: MetaConfig) -> np.ndarray:
    if config.init == "zero":
        return np.zeros(state.model.latent_dim)
    return mean_latent(state.selected()[1])


def validate(model, params, latents, tasks, spec, config: MetaConfig) -> dict:
    z0 = np.zeros(model.latent_dim) if config.init == "zero" else mean_latent(latents)
    z, trace = adapt(model, params, z0, tasks, config.n_val, config.eta_val)
    pred = Predictor(model, params, z)
    out = {"val_loss": float(np.mean(trace[-1]))}
    if spec is not None:
        out["val_traj"] = traj_error_tasks(spec, pred, tasks, role="adaptation")
    return out


def init_state(model: StructuredModel, train_tasks, config: MetaConfig, params=None) -> TrainerState:
    train_tasks = as_task_data(train_tasks)
    if params is None:
        params = model.init(stream(config.seed, INIT), config.hyper_scale)
    model.check_params(params)
    ids = [t.k for t in train_tasks]
    return TrainerState(model, dict(params), ids, np.zeros((len(ids), model.latent_dim)), adam_init(params))


def _append_log(path, record: dict) -> None:
    if path is not None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def meta_train(config: MetaConfig, model: StructuredModel, train_tasks, val_tasks=(), spec=None,
               state: TrainerState | None = None, log_path=None, verbose: bool = False) -> TrainerState:
    """Outer loop over base parameters with persistent per-task latent codes.

    Each outer iteration samples a batch of training tasks, takes ``n_in``
    gradient-descent steps on their latent codes (kept across iterations),
    then one Adam step on the base parameters at the updated codes.  Every
    ``n_cert`` iterations the model is validated by auto-decoding and the
    best snapshot (lowest validation trajectory error, or loss without
    ``spec``) is kept.
    """
    if not model.modulated:
        raise ValueError("meta_train needs a modulated model; use the baselines for kind='none'")
    train_tasks = as_task_data(train_tasks)
    val_tasks = as_task_data(val_tasks)
    if not train_tasks:
        raise ValueError("no training tasks")
    state = state or init_state(model, train_tasks, config)
    x_all, y_all = stack_tasks(train_tasks)
    nb = min(config.batch_size, len(train_tasks))
    names = model.param_names()
    t0 = time.perf_counter()

    for it in range(state.iteration, config.n_out):
        idx = np.sort(stream(config.seed, BATCHES, it).choice(len(train_tasks), size=nb, replace=False))
        ids = [int(state.task_ids[i]) for i in idx]
        x, y = x_all[idx], y_all[idx]
        z, _ = latent_steps(model, state.params, state.latents[idx], x, y, config.n_in, config.lr_in, it, ids,
                            final_loss=False)
        state.latents[idx] = z

        leaves = {k: leaf(v, name=k) for k, v in state.params.items()}
        try:
            per_task = task_losses(model, leaves, constant(z), x, y)
        except NonFiniteError as e:
            raise TrainingDivergence(it, ids, str(e)) from e
        _finite_or_raise(per_task.value, it, ids)
        gs = grad(ops.sum(per_task), [leaves[k] for k in names])
        grads = clip_global_norm({k: g.value for k, g in zip(names, gs)}, config.clip)
        before = state.params
        state.params, state.adam = adam_step(state.adam, state.params, grads, config.lr_out)
        state.iteration = it + 1

        record = {"iter": it + 1, "tasks": ids, "loss": float(np.mean(per_task.value))}
        if model.kind == "mr":
            pen = model.penalty(before, constant(z)).value
            record["penalty"] = float(np.mean(pen))
            record["residual"] = record["loss"] - record["penalty"]
        if val_tasks and (state.iteration % config.n_cert == 0 or state.iteration == config.n_out):
            val = validate(model, state.params, state.latents, val_tasks, spec, config)
            record.update(val)
            score = val.get("val_traj", val["val_loss"])
            if state.best is None or score < state.best["val"]:
                state.best = {"iteration": state.iteration, "val": score,
                              "params": {k: v.copy() for k, v in state.params.items()},
                              "latents": state.latents.copy()}
        state.history.append(record)
        _append_log(log_path, {**record, "time": round(time.perf_counter() - t0, 3)})
        if verbose and ("val_loss" in record or state.iteration % 100 == 0):
            print(json.dumps(record))
    return state
