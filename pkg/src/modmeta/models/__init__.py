"""Modulated MLPs and structure-preserving vector-field models."""
import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .losses import generic_loss, residual_loss, symplectic_loss, task_losses
from .mlp import KINDS, LayoutError, ModulatedMLP, orthonormal
from .structured import (GenericModel, HamiltonianModel, StructuredModel, antisymmetrize_lower, build_model,
                         canonical_poisson, spsd_core)


def model_for_system(spec, hidden=(100, 100, 100, 100), kind="none", latent_dim=10, rank=8, d1=2, d2=2,
                     friction="factor", scaling=None) -> StructuredModel:
    """Hamiltonian model for conservative systems, GENERIC model for dissipative ones.

    ``scaling`` is an optional dict with ``x_shift``, ``x_scale``, ``e_scale``.
    """
    scaling = scaling or {}
    if spec.is_generic:
        return GenericModel(spec.n_dof, spec.n_entropy, hidden, kind, latent_dim, rank, d1, d2, friction,
                            **scaling)
    return HamiltonianModel(spec.n_dof, hidden, kind, latent_dim, rank, **scaling)


def data_scaling(states, labels) -> dict:
    """Fixed normalisation constants from training data.

    Inputs are centred and scaled per coordinate; the energy scale makes
    ``e_scale / x_scale`` match the typical velocity magnitude.
    """
    x = np.asarray(states).reshape(-1, np.shape(states)[-1])
    y = np.asarray(labels).reshape(-1, x.shape[1])
    scale = np.std(x, axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    rms_y = float(np.sqrt(np.mean(y ** 2))) or 1.0
    return {"x_shift": np.mean(x, axis=0).tolist(), "x_scale": scale.tolist(),
            "e_scale": rms_y * float(np.sqrt(np.mean(scale ** 2)))}


def modulated_forward(net: ModulatedMLP, params, z, inputs):
    return net.forward(params, z, inputs)


def hamiltonian_field(model: HamiltonianModel, params, z, states, create_graph=True):
    return model.field(params, z, states, create_graph)


def generic_field(model: GenericModel, params, z, states, create_graph=True):
    return model.field(params, z, states, create_graph)
