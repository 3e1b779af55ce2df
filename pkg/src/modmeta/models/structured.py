"""Vector fields with built-in structure.

Hamiltonian: f = (dH/dp, -dH/dq) for a learned scalar H.
GENERIC: f = L dE/dx + M dS/dx with canonical L, S = sum of entropy
coordinates and M = A D A^T where A[a, m] = sum_b Lam[a, b, m] dE/dx_b.  Lam is
antisymmetric in (a, b), so A^T dE/dx = 0 and M dE/dx = 0 by construction.
"""
from __future__ import annotations

import numpy as np

from ..diffcore import Node, constant, grad, leaf, ops
from .mlp import LayoutError, ModulatedMLP


def canonical_poisson(n_dof: int, n_entropy: int) -> np.ndarray:
    n = 2 * n_dof + n_entropy
    L = np.zeros((n, n))
    L[:n_dof, n_dof:2 * n_dof] = np.eye(n_dof)
    L[n_dof:2 * n_dof, :n_dof] = -np.eye(n_dof)
    return L


def antisymmetrize_lower(lam):
    """0.5 (Lam - Lam^T) over the first two (lower) indices; a leading task axis is allowed."""
    lam = lam if isinstance(lam, Node) else constant(lam)
    axes = (1, 0, 2) if lam.ndim == 3 else (0, 2, 1, 3)
    return ops.mul(0.5, ops.sub(lam, ops.transpose(lam, axes)))


def spsd_core(dtil):
    """D = Dt Dt^T (batched over a leading axis if present)."""
    dtil = dtil if isinstance(dtil, Node) else constant(dtil)
    return ops.matmul(dtil, ops.transpose(dtil))


def _as_batch(x) -> Node:
    x = x if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, None, :] if not isinstance(x, Node) else ops.reshape(x, (1, 1) + x.shape)
    elif x.ndim == 2:
        x = x[None] if not isinstance(x, Node) else ops.reshape(x, (1,) + x.shape)
    return x if isinstance(x, Node) else constant(x)


def _input_leaf(x) -> Node:
    # states are data: fresh leaf so input-gradients never leak into caller graphs
    value = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    return leaf(value, name="x")


class StructuredModel:
    """Shared plumbing for the two structured model families.

    Optional fixed constants ``x_shift``, ``x_scale`` (per state coordinate) and
    ``e_scale`` make the learned energy ``e_scale * net((x - x_shift) / x_scale)``.
    They are part of the energy itself, so the field is still its exact
    structured gradient.
    """

    nets: tuple[ModulatedMLP, ...]
    kind: str
    latent_dim: int
    state_dim: int

    def _set_scaling(self, x_shift, x_scale, e_scale):
        n = self.state_dim
        self.x_shift = None if x_shift is None else np.asarray(x_shift, dtype=np.float64).reshape(n)
        self.x_scale = None if x_scale is None else np.asarray(x_scale, dtype=np.float64).reshape(n)
        self.e_scale = None if e_scale is None else float(e_scale)
        if self.x_scale is not None and not np.all(self.x_scale > 0):
            raise LayoutError("x_scale must be positive")

    def _scaling_desc(self) -> dict:
        return {"x_shift": None if self.x_shift is None else [float(v) for v in self.x_shift],
                "x_scale": None if self.x_scale is None else [float(v) for v in self.x_scale],
                "e_scale": self.e_scale}

    def _normalize(self, x: Node, cols: slice) -> Node:
        if self.x_shift is not None:
            x = ops.sub(x, np.broadcast_to(self.x_shift[cols], x.shape))
        if self.x_scale is not None:
            x = ops.mul(x, np.broadcast_to(1.0 / self.x_scale[cols], x.shape))
        return x

    def _scale_energy(self, e: Node) -> Node:
        return e if self.e_scale is None else ops.mul(self.e_scale, e)

    @property
    def modulated(self) -> bool:
        return self.kind != "none"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for net in self.nets:
            shapes.update(net.param_shapes())
        return shapes

    def param_names(self) -> list[str]:
        return list(self.param_shapes())

    def final_layer_names(self) -> list[str]:
        return [net.final_layer_weight() for net in self.nets]

    def hyper_names(self) -> list[str]:
        return [n for net in self.nets for n in net.hyper_names()]

    def check_params(self, p):
        for name, shape in self.param_shapes().items():
            if name not in p:
                raise LayoutError(f"missing parameter '{name}'")
            got = tuple(p[name].shape)
            if got != shape and got[1:] != shape:
                raise LayoutError(f"parameter '{name}' has shape {got}, expected {shape}")

    def penalty(self, p, z) -> Node | None:
        if self.kind != "mr":
            return None
        out = None
        for net in self.nets:
            term = net.mr_penalty(p, z)
            out = term if out is None else ops.add(out, term)
        return out

    def weight_corrections(self, p, z) -> dict[str, list[np.ndarray]]:
        return {net.prefix: net.weight_corrections(p, z) for net in self.nets}

    def describe(self) -> dict:
        raise NotImplementedError


class HamiltonianModel(StructuredModel):
    family = "hamiltonian"

    def __init__(self, n_dof: int, hidden=(100, 100, 100, 100), kind: str = "none", latent_dim: int = 10,
                 rank: int = 8, x_shift=None, x_scale=None, e_scale=None):
        self.n_dof = int(n_dof)
        self.state_dim = 2 * self.n_dof
        self._set_scaling(x_shift, x_scale, e_scale)
        self.hidden = tuple(int(h) for h in hidden)
        self.kind = kind
        self.latent_dim = int(latent_dim)
        self.rank = int(rank)
        self.net = ModulatedMLP((self.state_dim, *self.hidden, 1), kind, latent_dim, rank, prefix="h.")
        self.nets = (self.net,)

    def describe(self) -> dict:
        return {"family": self.family, "n_dof": self.n_dof, "hidden": list(self.hidden), "kind": self.kind,
                "latent_dim": self.latent_dim, "rank": self.rank, **self._scaling_desc()}

    def init(self, rng: np.random.Generator, hyper_scale: float = 1e-2) -> dict[str, np.ndarray]:
        return self.net.init(rng, hyper_scale)

    def energy(self, p, z, x) -> Node:
        """H~ at states ``x`` (B, n, 2d) -> (B, n)."""
        x = _as_batch(x)
        h = self.net.forward(p, z, self._normalize(x, slice(None)))
        return self._scale_energy(ops.reshape(h, h.shape[:2]))

    def field_and_grad(self, p, z, x, create_graph: bool = True):
        x = _input_leaf(_as_batch(x))
        energy = self.energy(p, z, x)
        (e,) = grad(ops.sum(energy), [x], create_graph=create_graph)
        d = self.n_dof
        f = ops.concat([ops.getitem(e, (..., slice(d, 2 * d))), ops.neg(ops.getitem(e, (..., slice(0, d))))])
        return f, e, energy

    def field(self, p, z, x, create_graph: bool = True) -> Node:
        return self.field_and_grad(p, z, x, create_graph)[0]


class GenericModel(StructuredModel):
    """E = E_qp(q, p) + E_S(S), S = sum of entropy coordinates, friction through (Lam, D)."""

    family = "generic"

    def __init__(self, n_dof: int, n_entropy: int, hidden=(100, 100, 100, 100), kind: str = "none",
                 latent_dim: int = 10, rank: int = 8, d1: int = 2, d2: int = 2, friction: str = "factor",
                 x_shift=None, x_scale=None, e_scale=None):
        if friction not in ("factor", "additive"):
            raise LayoutError(f"unknown friction modulation '{friction}'")
        self.n_dof, self.n_entropy = int(n_dof), int(n_entropy)
        self.state_dim = 2 * self.n_dof + self.n_entropy
        self._set_scaling(x_shift, x_scale, e_scale)
        self.hidden = tuple(int(h) for h in hidden)
        self.kind = kind
        self.latent_dim = int(latent_dim)
        self.rank = int(rank)
        self.d1, self.d2 = int(d1), int(d2)
        self.friction = friction
        self.e_qp = ModulatedMLP((2 * self.n_dof, *self.hidden, 1), kind, latent_dim, rank, prefix="eqp.")
        self.e_s = ModulatedMLP((self.n_entropy, *self.hidden, 1), kind, latent_dim, rank, prefix="es.")
        self.nets = (self.e_qp, self.e_s)
        self.poisson = canonical_poisson(self.n_dof, self.n_entropy)
        self.entropy_grad = np.concatenate([np.zeros(2 * self.n_dof), np.ones(self.n_entropy)])

    def describe(self) -> dict:
        return {"family": self.family, "n_dof": self.n_dof, "n_entropy": self.n_entropy,
                "hidden": list(self.hidden), "kind": self.kind, "latent_dim": self.latent_dim,
                "rank": self.rank, "d1": self.d1, "d2": self.d2, "friction": self.friction,
                **self._scaling_desc()}

    @property
    def n_friction_mod(self) -> int:
        return self.d1 * (self.d2 if self.friction == "factor" else self.d1)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = super().param_shapes()
        n = self.state_dim
        shapes["lam"] = (n, n, self.d1)
        shapes["dtil"] = (self.d1, self.d2)
        if self.modulated:
            shapes["fd.hW"] = (self.n_friction_mod, self.latent_dim)
            shapes["fd.hb"] = (self.n_friction_mod,)
        return shapes

    def hyper_names(self) -> list[str]:
        return super().hyper_names() + (["fd.hW", "fd.hb"] if self.modulated else [])

    def init(self, rng: np.random.Generator, hyper_scale: float = 1e-2) -> dict[str, np.ndarray]:
        p = self.e_qp.init(rng, hyper_scale)
        p.update(self.e_s.init(rng, hyper_scale))
        n = self.state_dim
        p["lam"] = rng.uniform(-1, 1, (n, n, self.d1)) / np.sqrt(n)
        p["dtil"] = rng.uniform(-1, 1, (self.d1, self.d2)) / np.sqrt(self.d2)
        if self.modulated:
            p["fd.hW"] = hyper_scale * rng.standard_normal((self.n_friction_mod, self.latent_dim))
            p["fd.hb"] = np.zeros(self.n_friction_mod)
        return p

    def energy(self, p, z, x) -> Node:
        x = _as_batch(x)
        d = 2 * self.n_dof
        eqp = self.e_qp.forward(p, z, self._normalize(ops.getitem(x, (..., slice(0, d))), slice(0, d)))
        es = self.e_s.forward(p, z, self._normalize(ops.getitem(x, (..., slice(d, None))), slice(d, None)))
        e = ops.add(eqp, es)
        return self._scale_energy(ops.reshape(e, e.shape[:2]))

    def entropy(self, x) -> np.ndarray:
        x = x.value if isinstance(x, Node) else np.asarray(x)
        return np.sum(x[..., 2 * self.n_dof:], axis=-1)

    def friction_core(self, p, z, nb: int) -> Node:
        """Per-task D, shape (B, d1, d1)."""
        dtil = p["dtil"]
        dtil = dtil if isinstance(dtil, Node) else constant(dtil)
        if dtil.ndim == 2:
            dtil = ops.broadcast_to(ops.reshape(dtil, (1,) + dtil.shape), (nb,) + dtil.shape)
        delta = None
        if self.modulated:
            zz = z if isinstance(z, Node) else constant(z)
            flat = ops.affine(zz, p["fd.hW"], p["fd.hb"])
            if self.friction == "factor":
                delta = ops.reshape(flat, (nb, self.d1, self.d2))
                dtil = ops.add(dtil, delta)
                return spsd_core(dtil)
            return ops.add(spsd_core(dtil), ops.reshape(flat, (nb, self.d1, self.d1)))
        return spsd_core(dtil)

    def field_and_grad(self, p, z, x, create_graph: bool = True):
        x = _input_leaf(_as_batch(x))
        nb, n, N = x.shape
        d = self.n_dof
        energy = self.energy(p, z, x)
        (e,) = grad(ops.sum(energy), [x], create_graph=create_graph)
        eq = ops.getitem(e, (..., slice(0, d)))
        ep = ops.getitem(e, (..., slice(d, 2 * d)))
        le = ops.concat([ep, ops.neg(eq), constant(np.zeros((nb, n, self.n_entropy)))])

        lam = p["lam"]
        lam = lam if isinstance(lam, Node) else constant(lam)
        lam = antisymmetrize_lower(lam)
        # A[b, i, a, m] = sum_beta Lam[a, beta, m] e[b, i, beta]
        if lam.ndim == 3:
            lam_t = ops.reshape(ops.transpose(lam, (1, 0, 2)), (N, N * self.d1))
            lam_t = ops.broadcast_to(ops.reshape(lam_t, (1, N, N * self.d1)), (nb, N, N * self.d1))
        else:
            lam_t = ops.reshape(ops.transpose(lam, (0, 2, 1, 3)), (nb, N, N * self.d1))
        a = ops.reshape(ops.matmul(e, lam_t), (nb, n, N, self.d1))
        a_s = ops.sum(ops.getitem(a, (slice(None), slice(None), slice(2 * d, None), slice(None))), axis=2)
        core = self.friction_core(p, z, nb)
        w = ops.matmul(a_s, core)  # (B, n, d1); D symmetric in the factor form
        ms = ops.sum(ops.mul(a, ops.broadcast_to(ops.reshape(w, (nb, n, 1, self.d1)), a.shape)), axis=3)
        return ops.add(le, ms), e, energy

    def field(self, p, z, x, create_graph: bool = True) -> Node:
        return self.field_and_grad(p, z, x, create_graph)[0]

    def friction_matrix(self, p, z, x) -> np.ndarray:
        """M at given states (values only), shape (B, n, N, N)."""
        x = _input_leaf(_as_batch(x))
        nb, n, N = x.shape
        (e,) = grad(ops.sum(self.energy(p, z, x)), [x])
        lam = antisymmetrize_lower(p["lam"]).value
        if lam.ndim == 3:
            a = np.einsum("abm,kib->kiam", lam, e.value)
        else:
            a = np.einsum("kabm,kib->kiam", lam, e.value)
        core = self.friction_core(p, z, nb).value
        return np.einsum("kiam,kmn,kicn->kiac", a, core, a)


def build_model(desc: dict) -> StructuredModel:
    desc = dict(desc)
    family = desc.pop("family")
    if family == "hamiltonian":
        return HamiltonianModel(**desc)
    if family == "generic":
        return GenericModel(**desc)
    raise LayoutError(f"unknown model family '{family}'")
