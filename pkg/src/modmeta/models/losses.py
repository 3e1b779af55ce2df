"""Velocity-matching losses for the structured models."""
from __future__ import annotations

import numpy as np

from ..diffcore import Node, constant, ops
from .structured import GenericModel, HamiltonianModel, StructuredModel


def _batch(a, name: str) -> Node:
    a = a if isinstance(a, Node) else constant(np.asarray(a, dtype=np.float64))
    if a.ndim == 2:
        a = ops.reshape(a, (1,) + a.shape)
    if a.ndim != 3:
        raise ValueError(f"{name} must be (B, n, state_dim), got {a.shape}")
    if a.shape[1] == 0:
        raise ValueError("empty batch")
    return a


def residual_loss(pred: Node, target) -> Node:
    """Per-task mean over points of the squared residual norm, shape (B,)."""
    target = _batch(target, "labels")
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and labels {target.shape} differ")
    return ops.mean(ops.sum(ops.square(ops.sub(pred, target)), axis=2), axis=1)


def task_losses(model: StructuredModel, p, z, states, labels, penalties: bool = True,
                create_graph: bool = True) -> Node:
    """Per-task loss (B,): velocity residual, plus the MR penalties when they apply."""
    states = _batch(states, "states")
    loss = residual_loss(model.field(p, z, states, create_graph=create_graph), labels)
    if penalties and model.kind == "mr":
        loss = ops.add(loss, model.penalty(p, z))
    return loss


def symplectic_loss(model: HamiltonianModel, p, z, states, labels, penalties: bool = True) -> Node:
    """Mean of |dq/dt - dH/dp|^2 + |dp/dt + dH/dq|^2, summed over tasks."""
    if not isinstance(model, HamiltonianModel):
        raise TypeError("symplectic_loss needs a HamiltonianModel")
    return ops.sum(task_losses(model, p, z, states, labels, penalties))


def generic_loss(model: GenericModel, p, z, states, labels, penalties: bool = True) -> Node:
    """Mean of |dx/dt - L dE/dx - M dS/dx|^2, summed over tasks."""
    if not isinstance(model, GenericModel):
        raise TypeError("generic_loss needs a GenericModel")
    return ops.sum(task_losses(model, p, z, states, labels, penalties))
