from __future__ import annotations

import math

import numpy as np

from .spec import SystemSpec

ROLES = {"param": 0, "adaptation": 1, "performance": 2}


def task_rng(seed: int, task: int, role: str) -> np.random.Generator:
    """Counter-based stream for (seed, task, role); independent of generation order."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(task), ROLES[role]))
    return np.random.Generator(np.random.Philox(ss))


def sample_task(spec: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = np.array(spec.param_ranges).T
    return rng.uniform(lo, hi)


def kepler_f_min(e_max: float) -> float:
    return math.sqrt((1 - e_max) / (1 + e_max))


def sample_initial(spec: SystemSpec, rng: np.random.Generator, mu) -> np.ndarray:
    lo, hi = np.array(spec.ic_ranges).T
    draw = rng.uniform(lo, hi)
    if spec.system == "kepler":
        return _kepler_initial(spec, rng, mu, *draw)
    if spec.system == "dno":
        return np.array([draw[0], draw[1], spec.const("S0")])
    if spec.system == "tgc":
        s0 = spec.const("S0")
        return np.array([draw[0], draw[1], s0, s0])
    return draw


def _kepler_initial(spec, rng, mu, r, theta):
    m1, m2 = mu
    e_max = spec.const("e_max")
    f_min = kepler_f_min(e_max)
    f = rng.uniform(f_min, 1.0) if f_min < 1.0 else 1.0
    v_c = math.sqrt(spec.const("G") * m1 / r)
    v0 = f * v_c
    q = np.array([r * math.cos(theta), r * math.sin(theta)])
    if spec.option("velocity") == "literal":
        rho_y = spec.const("rho_y")
        p = np.array([-rho_y * v0 * math.sin(theta), rho_y * v0 * math.sin(theta)])
    else:
        # momentum = m2 * velocity, perpendicular to the radius vector
        p = m2 * v0 * np.array([-math.sin(theta), math.cos(theta)])
    return np.concatenate([q, p])
