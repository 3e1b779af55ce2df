"""Base MLP with latent modulation driven by an affine hypernetwork.

Every forward pass is batched over tasks: inputs are ``(B, n, in)`` and latent
codes ``(B, latent_dim)``.  Hidden layers are modulated, the output layer is a
plain affine map.
"""
from __future__ import annotations

import numpy as np

from ..diffcore import Node, constant, ops

KINDS = ("none", "shift", "fw", "ro", "mr")


class LayoutError(ValueError):
    pass


def _rows(x: Node, n: int) -> Node:
    """(B, k) -> (B, n, k) by repeating along a new middle axis."""
    b, k = x.shape
    return ops.broadcast_to(ops.reshape(x, (b, 1, k)), (b, n, k))


def _tasks(x: Node, b: int) -> Node:
    """Shared tensor -> (B, *shape)."""
    return ops.broadcast_to(ops.reshape(x, (1,) + x.shape), (b,) + x.shape)


def orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random matrix with orthonormal columns (rows >= cols)."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


class ModulatedMLP:
    """tanh MLP ``sizes[0] -> ... -> sizes[-1]`` with one of the modulation kinds.

    Hypernetwork output layout, hidden layer by hidden layer:
      shift: s | fw: dW (row-major), s | ro: u, v, s | mr: d, s
    MR bases live with the base weights: ``U{l}`` is (out, r_l) and ``V{l}`` is
    (r_l, in), with ``r_l = min(rank, in, out)``.
    """

    def __init__(self, sizes, kind: str = "none", latent_dim: int = 10, rank: int = 8, prefix: str = ""):
        if kind not in KINDS:
            raise LayoutError(f"unknown modulation kind '{kind}'")
        if len(sizes) < 2:
            raise LayoutError("need at least an input and an output size")
        self.sizes = tuple(int(s) for s in sizes)
        self.kind = kind
        self.latent_dim = int(latent_dim)
        self.rank = int(rank)
        self.prefix = prefix
        self.n_layers = len(self.sizes) - 1
        self.layout = self._layout()
        self.n_mod = sum(int(np.prod(shape)) for _, _, shape, _ in self.layout)

    # ------------------------------------------------------------ layout

    def layer_rank(self, l: int) -> int:
        return min(self.rank, self.sizes[l], self.sizes[l + 1])

    def _layout(self):
        pieces, offset = [], 0
        if self.kind == "none":
            return pieces
        for l in range(self.n_layers - 1):
            fan_in, fan_out = self.sizes[l], self.sizes[l + 1]
            if self.kind == "shift":
                shapes = [("s", (fan_out,))]
            elif self.kind == "fw":
                shapes = [("dW", (fan_out, fan_in)), ("s", (fan_out,))]
            elif self.kind == "ro":
                shapes = [("u", (fan_out,)), ("v", (fan_in,)), ("s", (fan_out,))]
            else:
                shapes = [("d", (self.layer_rank(l),)), ("s", (fan_out,))]
            for name, shape in shapes:
                size = int(np.prod(shape))
                pieces.append((l, name, shape, (offset, offset + size)))
                offset += size
        return pieces

    def name(self, key: str) -> str:
        return self.prefix + key

    @property
    def modulated(self) -> bool:
        return self.kind != "none"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for l in range(self.n_layers):
            shapes[self.name(f"W{l}")] = (self.sizes[l + 1], self.sizes[l])
            shapes[self.name(f"b{l}")] = (self.sizes[l + 1],)
        if self.kind == "mr":
            for l in range(self.n_layers - 1):
                r = self.layer_rank(l)
                shapes[self.name(f"U{l}")] = (self.sizes[l + 1], r)
                shapes[self.name(f"V{l}")] = (r, self.sizes[l])
        if self.modulated:
            shapes[self.name("hW")] = (self.n_mod, self.latent_dim)
            shapes[self.name("hb")] = (self.n_mod,)
        return shapes

    def final_layer_weight(self) -> str:
        return self.name(f"W{self.n_layers - 1}")

    def hyper_names(self) -> tuple[str, ...]:
        return (self.name("hW"), self.name("hb")) if self.modulated else ()

    def init(self, rng: np.random.Generator, hyper_scale: float = 1e-2) -> dict[str, np.ndarray]:
        """Uniform fan-in weights, orthonormal MR bases, small random hypernetwork weights.

        The hypernetwork bias is zero, so a zero latent code leaves the base MLP
        unmodulated.  ``hyper_scale=0`` gives an all-zero hypernetwork.
        """
        p = {}
        for l in range(self.n_layers):
            bound = 1.0 / np.sqrt(self.sizes[l])
            p[self.name(f"W{l}")] = rng.uniform(-bound, bound, (self.sizes[l + 1], self.sizes[l]))
            p[self.name(f"b{l}")] = rng.uniform(-bound, bound, self.sizes[l + 1])
        if self.kind == "mr":
            for l in range(self.n_layers - 1):
                r = self.layer_rank(l)
                p[self.name(f"U{l}")] = orthonormal(rng, self.sizes[l + 1], r)
                p[self.name(f"V{l}")] = orthonormal(rng, self.sizes[l], r).T.copy()
        if self.modulated:
            p[self.name("hW")] = hyper_scale * rng.standard_normal((self.n_mod, self.latent_dim))
            p[self.name("hb")] = np.zeros(self.n_mod)
        return p

    # ------------------------------------------------------------ forward

    def modulations(self, p, z) -> dict:
        """Partition ``f_hyper(z)`` into per-layer pieces, each with a leading task axis."""
        if not self.modulated:
            return {}
        z = z if isinstance(z, Node) else constant(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise LayoutError(f"latent codes must be (B, {self.latent_dim}), got {z.shape}")
        w, b = p[self.name("hW")], p[self.name("hb")]
        if w.shape != (self.n_mod, self.latent_dim):
            raise LayoutError(f"hypernetwork is {w.shape}, layout needs {(self.n_mod, self.latent_dim)}")
        flat = ops.affine(z, w, b)
        nb = z.shape[0]
        out = {}
        for l, name, shape, (lo, hi) in self.layout:
            out[l, name] = ops.reshape(ops.getitem(flat, (slice(None), slice(lo, hi))), (nb,) + shape)
        return out

    def forward(self, p, z, h: Node) -> Node:
        """``h`` is (B, n, in); returns (B, n, out)."""
        if h.ndim != 3 or h.shape[-1] != self.sizes[0]:
            raise LayoutError(f"input must be (B, n, {self.sizes[0]}), got {h.shape}")
        nb, n = h.shape[0], h.shape[1]
        mods = self.modulations(p, z)
        for l in range(self.n_layers):
            w, b = p[self.name(f"W{l}")], p[self.name(f"b{l}")]
            last = l == self.n_layers - 1
            if w.ndim == 3:
                # per-task weights (optimization-based baselines)
                pre = ops.affine(h, w, b)
            elif last or not self.modulated:
                pre = ops.affine(h, w, b)
            elif self.kind == "fw":
                wb = ops.add(_tasks(w, nb), mods[l, "dW"])
                bb = ops.add(_tasks(b, nb), mods[l, "s"])
                pre = ops.affine(h, wb, bb)
            else:
                pre = ops.affine(h, w, b)
                if self.kind == "ro":
                    fan_in, fan_out = self.sizes[l], self.sizes[l + 1]
                    hv = ops.matmul(h, ops.reshape(mods[l, "v"], (nb, fan_in, 1)))
                    pre = ops.add(pre, ops.matmul(hv, ops.reshape(mods[l, "u"], (nb, 1, fan_out))))
                elif self.kind == "mr":
                    r = self.layer_rank(l)
                    coef = ops.mul(ops.affine(h, p[self.name(f"V{l}")], np.zeros(r)),
                                   _rows(ops.relu(mods[l, "d"]), n))
                    pre = ops.add(pre, ops.affine(coef, p[self.name(f"U{l}")], np.zeros(self.sizes[l + 1])))
                pre = ops.add(pre, _rows(mods[l, "s"], n))
            h = pre if last else ops.tanh(pre)
        return h

    # ------------------------------------------------------------ diagnostics

    def weight_corrections(self, p, z) -> list[np.ndarray]:
        """Effective weight change of every hidden layer for a single latent code."""
        p = {k: (v.value if isinstance(v, Node) else np.asarray(v)) for k, v in p.items()}
        z = np.asarray(z, dtype=np.float64).reshape(1, -1)
        mods = {k: v.value[0] for k, v in self.modulations(p, z).items()}
        out = []
        for l in range(self.n_layers - 1):
            shape = (self.sizes[l + 1], self.sizes[l])
            if self.kind == "fw":
                out.append(mods[l, "dW"].copy())
            elif self.kind == "ro":
                out.append(np.outer(mods[l, "u"], mods[l, "v"]))
            elif self.kind == "mr":
                d = np.maximum(mods[l, "d"], 0.0)
                out.append(p[self.name(f"U{l}")] @ (d[:, None] * p[self.name(f"V{l}")]))
            else:
                out.append(np.zeros(shape))
        return out

    def mr_penalty(self, p, z, w_orth: float = 1e-2, w_l1: float = 1e-5) -> Node:
        """Per-task penalty (B,): basis orthonormality plus l1 of the clamped coefficients."""
        if self.kind != "mr":
            raise LayoutError("mr_penalty needs the MR modulation kind")
        orth = 0.0
        for l in range(self.n_layers - 1):
            r = self.layer_rank(l)
            u, v = p[self.name(f"U{l}")], p[self.name(f"V{l}")]
            eye = np.eye(r)
            orth = ops.add(orth, ops.sum(ops.square(ops.sub(ops.matmul(ops.transpose(u), u), eye))))
            orth = ops.add(orth, ops.sum(ops.square(ops.sub(ops.matmul(v, ops.transpose(v)), eye))))
        mods = self.modulations(p, z)
        nb = next(iter(mods.values())).shape[0]
        l1 = None
        for l in range(self.n_layers - 1):
            term = ops.sum(ops.relu(mods[l, "d"]), axis=1)
            l1 = term if l1 is None else ops.add(l1, term)
        return ops.add(ops.mul(w_l1, l1), ops.broadcast_to(ops.mul(w_orth, orth), (nb,)))
