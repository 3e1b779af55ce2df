"""Optimization-based meta-learning baselines and per-task Scratch training.

The update rules are written against a generic per-task loss callable
``loss_fn(p) -> (B,)`` so they can be checked on closed-form objectives.
Parameters listed in ``per_task`` names carry a leading task axis inside the
inner loop; all other parameters stay shared.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from ..diffcore import Node, NonFiniteError, constant, grad, leaf, ops
from ..models import StructuredModel, task_losses
from .adam import AdamState, adam_init, adam_step, clip_global_norm
from .config import BATCHES, INIT, TASK_INIT, MetaConfig, TrainingDivergence, stream
from .data import as_task_data, stack_tasks
from .predict import Predictor, traj_error_tasks

METHODS = ("maml", "anil", "reptile", "multitask")


def per_task(theta: dict[str, Node], nb: int, names) -> dict[str, Node]:
    """Copy ``names`` along a new leading task axis (gradients flow back summed)."""
    out = dict(theta)
    for n in names:
        v = theta[n]
        out[n] = ops.broadcast_to(ops.reshape(v, (1,) + v.shape), (nb,) + v.shape)
    return out


def inner_sgd(loss_fn, p: dict[str, Node], names, n_steps: int, lr: float, create_graph: bool):
    """``n_steps`` of SGD on ``names``; returns (params, per-task losses before each step)."""
    trace = []
    for _ in range(n_steps):
        per = loss_fn(p)
        trace.append(per.value.copy())
        gs = grad(ops.sum(per), [p[n] for n in names], create_graph=create_graph)
        p = dict(p)
        for n, g in zip(names, gs):
            p[n] = ops.sub(p[n], ops.mul(lr, g))
    return p, trace


def inner_adam(loss_fn, p: dict[str, Node], names, n_steps: int, lr: float):
    """First-order counterpart of ``inner_sgd`` taking Adam steps with fresh moments.

    Adam is elementwise, so parameters with a task axis are adapted
    independently per task.
    """
    trace = []
    vals = {n: p[n].value for n in names}
    state = adam_init(vals)
    for _ in range(n_steps):
        q = dict(p)
        q.update({n: leaf(vals[n], name=n) for n in names})
        per = loss_fn(q)
        trace.append(per.value.copy())
        gs = grad(ops.sum(per), [q[n] for n in names])
        vals, state = adam_step(state, vals, {n: g.value for n, g in zip(names, gs)}, lr)
    out = dict(p)
    out.update({n: constant(vals[n]) for n in names})
    return out, trace


def _inner(loss_fn, p, names, n_steps, lr, optimizer):
    if optimizer == "adam":
        return inner_adam(loss_fn, p, names, n_steps, lr)
    if optimizer == "sgd":
        return inner_sgd(loss_fn, p, names, n_steps, lr, create_graph=False)
    raise ValueError(f"unknown inner optimizer '{optimizer}'")


def meta_gradient(loss_fn, theta: dict[str, np.ndarray], inner: list[str], n_in: int, lr_in: float, nb: int,
                  first_order: bool = False, batched: list[str] | None = None):
    """MAML-style meta-gradient of sum_b L_b(theta_{n_in}(theta)).

    ``inner`` names are adapted per task; ``batched`` (defaults to ``inner``)
    are the names given a task axis.  ``first_order`` drops the dependence of
    the inner gradients on ``theta`` (stop-gradient through the update).
    With ``n_in == 0`` the loss is evaluated at ``theta`` directly, which is
    plain multi-task training.
    """
    leaves = {k: leaf(v, name=k) for k, v in theta.items()}
    p = leaves
    if n_in > 0:
        p = per_task(leaves, nb, inner if batched is None else batched)
        p, _ = inner_sgd(loss_fn, p, inner, n_in, lr_in, create_graph=not first_order)
    per = loss_fn(p)
    names = list(theta)
    gs = grad(ops.sum(per), [leaves[k] for k in names])
    return per.value.copy(), {k: g.value for k, g in zip(names, gs)}


def reptile_update(loss_fn, theta: dict[str, np.ndarray], names: list[str], n_in: int, lr_in: float, beta: float,
                   nb: int, optimizer: str = "sgd"):
    """theta + beta * mean_b(theta_b^{n_in} - theta) with first-order inner steps per task."""
    p = {k: (leaf(np.broadcast_to(v, (nb,) + v.shape).copy(), name=k) if k in names else constant(v))
         for k, v in theta.items()}
    p, trace = _inner(loss_fn, p, names, n_in, lr_in, optimizer)
    new = dict(theta)
    for k in names:
        new[k] = theta[k] + beta * np.mean(p[k].value - theta[k], axis=0)
    first = trace[0] if trace else loss_fn(p).value.copy()
    return new, first


def method_names(model: StructuredModel, method: str) -> tuple[list[str], list[str]]:
    """(adapted names, names carrying a task axis) for a baseline method."""
    if method == "anil":
        inner = model.final_layer_names()
        biases = []
        for n in inner:
            prefix, w = n.rsplit(".", 1)
            biases.append(f"{prefix}.b{w[1:]}")
        batched = inner + biases
        return inner, batched
    names = model.param_names()
    return names, names


def model_loss(model: StructuredModel, x, y):
    def loss_fn(p):
        return task_losses(model, p, None, x, y)
    return loss_fn


@dataclass
class BaselineState:
    method: str
    model: StructuredModel
    params: dict[str, np.ndarray]
    adam: AdamState | None
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    best: dict | None = None

    def selected(self) -> dict[str, np.ndarray]:
        return self.best["params"] if self.best is not None else self.params


def adapt_params(model: StructuredModel, method: str, theta, tasks, n_steps: int, lr: float,
                 optimizer: str = "sgd"):
    """Test-time fine-tuning: ``n_steps`` SGD (or Adam) steps per task from the meta-initialization.

    ANIL adapts only the final-layer weights.  Returns per-task parameters
    (leading task axis on adapted names) and the per-step loss trace.
    """
    tasks = as_task_data(tasks)
    if not tasks:
        raise ValueError("adaptation needs at least one task")
    x, y = stack_tasks(tasks)
    inner, batched = method_names(model, "anil" if method == "anil" else "maml")
    p = {k: (leaf(np.broadcast_to(v, (len(tasks),) + v.shape).copy(), name=k) if k in batched else constant(v))
         for k, v in theta.items()}
    loss_fn = model_loss(model, x, y)
    p, trace = _inner(loss_fn, p, inner, n_steps, lr, optimizer)
    trace.append(loss_fn(p).value.copy())
    return {k: v.value for k, v in p.items()}, trace


def inner_optimizer(method: str, config: MetaConfig) -> str:
    """Reptile's inner loop (training and test-time) uses ``config.reptile_inner``; the others plain SGD."""
    return config.reptile_inner if method == "reptile" else "sgd"


def _validate(model, method, theta, tasks, spec, config: MetaConfig) -> dict:
    p, trace = adapt_params(model, method, theta, tasks, config.n_val, config.eta_val, inner_optimizer(method, config))
    out = {"val_loss": float(np.mean(trace[-1]))}
    if spec is not None:
        out["val_traj"] = traj_error_tasks(spec, Predictor(model, p), tasks, role="adaptation")
    return out


def optimization_train(method: str, config: MetaConfig, model: StructuredModel, train_tasks, val_tasks=(),
                       spec=None, params=None, log_path=None, outer: str = "adam") -> BaselineState:
    """Shared outer loop for MAML, ANIL, Reptile and multi-task training.

    MAML/ANIL/multi-task take an Adam step (or plain SGD with
    ``outer='sgd'``) on the meta-gradient; Reptile moves the initialization
    towards the mean of the adapted task parameters with step ``lr_out``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown baseline '{method}'")
    if model.modulated:
        raise ValueError("optimization-based baselines use an unmodulated model")
    train_tasks = as_task_data(train_tasks)
    val_tasks = as_task_data(val_tasks)
    if params is None:
        params = model.init(stream(config.seed, INIT))
    model.check_params(params)
    state = BaselineState(method, model, dict(params), adam_init(params) if method != "reptile" else None)
    x_all, y_all = stack_tasks(train_tasks)
    nb = min(config.batch_size, len(train_tasks))
    inner, batched = method_names(model, method)
    t0 = time.perf_counter()

    for it in range(config.n_out):
        idx = np.sort(stream(config.seed, BATCHES, it).choice(len(train_tasks), size=nb, replace=False))
        ids = [int(train_tasks[i].k) for i in idx]
        loss_fn = model_loss(model, x_all[idx], y_all[idx])
        try:
            if method == "reptile":
                state.params, per = reptile_update(loss_fn, state.params, inner, config.n_in, config.lr_in,
                                                   config.lr_out, nb, config.reptile_inner)
            else:
                n_in = 0 if method == "multitask" else config.n_in
                per, grads = meta_gradient(loss_fn, state.params, inner, n_in, config.lr_in, nb,
                                           config.first_order, batched)
                grads = clip_global_norm(grads, config.clip)
                if outer == "sgd":
                    state.params = {k: v - config.lr_out * grads[k] for k, v in state.params.items()}
                else:
                    state.params, state.adam = adam_step(state.adam, state.params, grads, config.lr_out)
        except NonFiniteError as e:
            raise TrainingDivergence(it, ids, str(e)) from e
        if not np.all(np.isfinite(per)) or not all(np.all(np.isfinite(v)) for v in state.params.values()):
            raise TrainingDivergence(it, [k for k, v in zip(ids, per) if not np.isfinite(v)] or ids, per.tolist())
        state.iteration = it + 1
        record = {"iter": it + 1, "tasks": ids, "loss": float(np.mean(per))}
        if val_tasks and (state.iteration % config.n_cert == 0 or state.iteration == config.n_out):
            val = _validate(model, method, state.params, val_tasks, spec, config)
            record.update(val)
            score = val.get("val_traj", val["val_loss"])
            if state.best is None or score < state.best["val"]:
                state.best = {"iteration": state.iteration, "val": score,
                              "params": {k: v.copy() for k, v in state.params.items()}}
        state.history.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps({**record, "time": round(time.perf_counter() - t0, 3)}, sort_keys=True) + "\n")
    return state


def maml_train(config, model, train_tasks, val_tasks=(), spec=None, **kw) -> BaselineState:
    return optimization_train("maml", config, model, train_tasks, val_tasks, spec, **kw)


def anil_train(config, model, train_tasks, val_tasks=(), spec=None, **kw) -> BaselineState:
    return optimization_train("anil", config, model, train_tasks, val_tasks, spec, **kw)


def reptile_train(config, model, train_tasks, val_tasks=(), spec=None, **kw) -> BaselineState:
    return optimization_train("reptile", config, model, train_tasks, val_tasks, spec, **kw)


def multitask_train(config, model, train_tasks, val_tasks=(), spec=None, **kw) -> BaselineState:
    return optimization_train("multitask", config, model, train_tasks, val_tasks, spec, **kw)


def scratch_init(model: StructuredModel, seed: int, task_ids) -> dict[str, np.ndarray]:
    """Independent initialization per task, stacked along a leading task axis."""
    inits = [model.init(stream(seed, TASK_INIT, int(k))) for k in task_ids]
    return {n: np.stack([p[n] for p in inits]) for n in model.param_names()}


def scratch_train(config: MetaConfig, model: StructuredModel, tasks, n_steps: int | None = None):
    """Adam on a fresh unmodulated model per task, using only that task's data.

    Tasks are trained side by side with per-task parameters; the summed loss
    decouples, so each task sees exactly its own gradient.  Returns
    ``(per-task params, per-step per-task loss trace)``.
    """
    if model.modulated:
        raise ValueError("scratch models are unmodulated")
    tasks = as_task_data(tasks)
    if not tasks:
        raise ValueError("scratch training needs at least one task")
    n_steps = config.n_scratch if n_steps is None else n_steps
    x, y = stack_tasks(tasks)
    params = scratch_init(model, config.seed, [t.k for t in tasks])
    adam = adam_init(params)
    names = model.param_names()
    trace = []
    for it in range(n_steps + 1):
        leaves = {k: leaf(v, name=k) for k, v in params.items()}
        try:
            per = task_losses(model, leaves, None, x, y)
        except NonFiniteError as e:
            raise TrainingDivergence(it, [t.k for t in tasks], str(e)) from e
        _check(per.value, it, tasks)
        trace.append(per.value.copy())
        if it == n_steps:
            break
        gs = grad(ops.sum(per), [leaves[k] for k in names])
        grads = {k: g.value for k, g in zip(names, gs)}
        params, adam = adam_step(adam, params, grads, config.lr_out)
    return params, trace


def _check(losses, it, tasks):
    if not np.all(np.isfinite(losses)):
        raise TrainingDivergence(it, [t.k for t, v in zip(tasks, losses) if not np.isfinite(v)], losses.tolist())
