"""Closed-form energies and vector fields of the benchmark systems.

All functions are vectorised over leading axes: ``state`` has shape
``(..., state_dim)`` with components ordered ``(q..., p..., S...)``.
"""
from __future__ import annotations

import numpy as np

from .spec import DomainError, SystemSpec


def _check_mu(spec: SystemSpec, mu, strict: bool):
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (len(spec.param_names),):
        raise ValueError(f"{spec.system}: expected {len(spec.param_names)} parameters, got shape {mu.shape}")
    if not np.all(np.isfinite(mu)):
        raise ValueError("parameters must be finite")
    if strict:
        for v, (lo, hi), name in zip(mu, spec.param_ranges, spec.param_names):
            if not lo <= v <= hi:
                raise ValueError(f"{spec.system}: {name}={v} outside [{lo}, {hi}]")
    return mu


def _state(spec: SystemSpec, state):
    x = np.asarray(state, dtype=np.float64)
    if x.shape[-1] != spec.state_dim:
        raise ValueError(f"{spec.system}: state dimension {x.shape[-1]} != {spec.state_dim}")
    return x


# ------------------------------------------------------------------ TGC helpers

def _tgc_energies_raw(spec: SystemSpec, q, s1, s2):
    lg, area, nkb = spec.const("L_g"), spec.const("A_c"), spec.const("NkB")
    v1, v2 = q * area, (2 * lg - q) * area
    c_hat = spec.const("c_hat")
    if spec.option("closure") == "additive":
        # S / NkB = c_hat + ln(V E^{3/2})
        e1 = (np.exp(s1 / nkb - c_hat) / v1) ** (2.0 / 3.0)
        e2 = (np.exp(s2 / nkb - c_hat) / v2) ** (2.0 / 3.0)
    else:
        # S / NkB = ln(c_hat V E^{3/2})
        e1 = (np.exp(s1 / nkb) / (c_hat * v1)) ** (2.0 / 3.0)
        e2 = (np.exp(s2 / nkb) / (c_hat * v2)) ** (2.0 / 3.0)
    return e1, e2


def tgc_internal_energies(spec: SystemSpec, q, s1, s2):
    """Internal energies of the two gas containers from entropies and wall position."""
    lg = spec.const("L_g")
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0) or np.any(q >= 2 * lg):
        raise DomainError(f"tgc: wall position must lie in (0, {2 * lg}); internal energy is not positive")
    with np.errstate(over="ignore"):
        e1, e2 = _tgc_energies_raw(spec, q, s1, s2)
    if not (np.all(np.isfinite(e1)) and np.all(np.isfinite(e2)) and np.all(e1 > 0) and np.all(e2 > 0)):
        raise DomainError("tgc: internal energy is not a positive finite number")
    return e1, e2


def tgc_entropy_from_energy(spec: SystemSpec, q, e):
    """Inverse of the Sackur-Tetrode closure for the first container."""
    nkb, c_hat, area = spec.const("NkB"), spec.const("c_hat"), spec.const("A_c")
    v = np.asarray(q) * area
    if spec.option("closure") == "additive":
        return nkb * (c_hat + np.log(v * np.asarray(e) ** 1.5))
    return nkb * np.log(c_hat * v * np.asarray(e) ** 1.5)


# ------------------------------------------------------------------ energies

def hamiltonian(spec: SystemSpec, state, mu, strict: bool = False):
    mu = _check_mu(spec, mu, strict)
    x = _state(spec, state)
    s = spec.system
    if s == "mass_spring":
        m, k = mu
        q, p = x[..., 0], x[..., 1]
        return p ** 2 / (2 * m) + k * q ** 2 / 2
    if s == "pendulum":
        m, l = mu
        q, p = x[..., 0], x[..., 1]
        g = spec.const("g")
        inertia = m * l if spec.option("kinetic") == "as_written" else m * l * l
        return p ** 2 / (2 * inertia) + m * g * l * (1 - np.cos(q))
    if s == "duffing":
        a, b = mu
        q, p = x[..., 0], x[..., 1]
        return 0.5 * p ** 2 + a / 4 * q ** 4 + b / 2 * q ** 2
    if s == "kepler":
        m1, m2 = mu
        q, p = x[..., :2], x[..., 2:4]
        r = np.linalg.norm(q, axis=-1)
        return np.sum(p ** 2, axis=-1) / (2 * m2) - spec.const("G") * m1 * m2 / r
    raise ValueError(f"{s} is not a Hamiltonian system; use generic_energy")


def generic_energy(spec: SystemSpec, state, mu, strict: bool = False):
    mu = _check_mu(spec, mu, strict)
    x = _state(spec, state)
    if spec.system == "dno":
        m, _ = mu
        q, p, S = x[..., 0], x[..., 1], x[..., 2]
        return p ** 2 / (2 * m) - spec.const("k") * np.cos(q) + spec.const("T") * S
    if spec.system == "tgc":
        m, _ = mu
        q, p = x[..., 0], x[..., 1]
        e1, e2 = tgc_internal_energies(spec, q, x[..., 2], x[..., 3])
        return p ** 2 / (2 * m) + e1 + e2
    raise ValueError(f"{spec.system} is not a GENERIC system; use hamiltonian")


def generic_entropy(spec: SystemSpec, state):
    x = _state(spec, state)
    return np.sum(x[..., 2 * spec.n_dof:], axis=-1)


def energy(spec: SystemSpec, state, mu):
    return generic_energy(spec, state, mu) if spec.is_generic else hamiltonian(spec, state, mu)


# ------------------------------------------------------------------ fields

def true_field(spec: SystemSpec, state, mu, strict: bool = False):
    """Exact time derivative of ``state`` under parameters ``mu``."""
    mu = _check_mu(spec, mu, strict)
    x = _state(spec, state)
    out = np.empty_like(x)
    s = spec.system
    if s == "mass_spring":
        m, k = mu
        out[..., 0] = x[..., 1] / m
        out[..., 1] = -k * x[..., 0]
    elif s == "pendulum":
        m, l = mu
        inertia = m * l if spec.option("kinetic") == "as_written" else m * l * l
        out[..., 0] = x[..., 1] / inertia
        out[..., 1] = -m * spec.const("g") * l * np.sin(x[..., 0])
    elif s == "duffing":
        a, b = mu
        q = x[..., 0]
        out[..., 0] = x[..., 1]
        out[..., 1] = -a * q ** 3 - b * q
    elif s == "kepler":
        m1, m2 = mu
        q = x[..., :2]
        r = np.linalg.norm(q, axis=-1, keepdims=True)
        out[..., :2] = x[..., 2:4] / m2
        out[..., 2:4] = -spec.const("G") * m1 * m2 * q / r ** 3
    elif s == "dno":
        m, gamma = mu
        k, temp = spec.const("k"), spec.const("T")
        q, p = x[..., 0], x[..., 1]
        sign = 1.0 if spec.option("sign") == "as_written" else -1.0
        out[..., 0] = p / m
        out[..., 1] = sign * k * np.sin(q) - gamma * p
        out[..., 2] = gamma * p ** 2 / (m * temp)
    elif s == "tgc":
        m, alpha = mu
        lg, nkb = spec.const("L_g"), spec.const("NkB")
        q, p = x[..., 0], x[..., 1]
        e1, e2 = tgc_internal_energies(spec, q, x[..., 2], x[..., 3])
        exchange = 9 * nkb ** 2 * alpha / 4 * (1 / e1 - 1 / e2)
        out[..., 0] = p / m
        out[..., 1] = 2.0 / 3.0 * (e1 / q - e2 / (2 * lg - q))
        out[..., 2] = exchange / e1
        if spec.option("entropy") == "as_written":
            out[..., 3] = -exchange / e1
        else:
            out[..., 3] = -exchange / e2
    return out


def tgc_mask(spec: SystemSpec, states) -> np.ndarray:
    """Points where the TGC closed forms are defined (positive finite energies)."""
    x = np.asarray(states, dtype=np.float64)
    q = x[..., 0]
    lg = spec.const("L_g")
    ok = (q > 0) & (q < 2 * lg)
    with np.errstate(all="ignore"):
        e1, e2 = _tgc_energies_raw(spec, np.where(ok, q, lg), x[..., 2], x[..., 3])
    return ok & np.isfinite(e1) & np.isfinite(e2) & (e1 > 0) & (e2 > 0)
