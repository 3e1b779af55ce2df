from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import true_field
from .spec import SystemSpec


class IntegrationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Trajectory:
    mu: np.ndarray
    times: np.ndarray
    states: np.ndarray   # (n_seq, state_dim)
    labels: np.ndarray   # (n_seq - 2, state_dim), centred differences
    role: str = "adaptation"

    @property
    def n_seq(self) -> int:
        return self.states.shape[0]

    @property
    def interior(self) -> np.ndarray:
        """States at which ``labels`` are defined."""
        return self.states[1:-1]


def rk4_step(fn, x, dt):
    k1 = fn(x)
    k2 = fn(x + 0.5 * dt * k1)
    k3 = fn(x + 0.5 * dt * k2)
    k4 = fn(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_states(spec: SystemSpec, mu, initial, dt: float, n_steps: int, substeps: int | None = None) -> np.ndarray:
    """Classical fixed-step RK4 from one or many initial states.

    ``initial`` is ``(d,)`` or ``(n, d)``; the result has ``n_steps + 1`` states
    along the second-to-last axis.  With ``substeps > 1`` every output step is
    covered by that many equal RK4 steps.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    substeps = spec.substeps if substeps is None else int(substeps)
    mu = np.asarray(mu, dtype=np.float64)
    x = np.array(initial, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    h = dt / substeps
    fn = lambda s: true_field(spec, s, mu)  # noqa: E731
    out = np.empty((x.shape[0], n_steps + 1, x.shape[1]))
    out[:, 0] = x
    with np.errstate(all="ignore"):
        for i in range(1, n_steps + 1):
            for _ in range(substeps):
                x = rk4_step(fn, x, h)
            if not np.all(np.isfinite(x)):
                raise IntegrationError(f"{spec.system}: non-finite state at step {i}")
            out[:, i] = x
    return out[0] if single else out


def finite_difference(states, dt: float) -> np.ndarray:
    """Centred differences ``(x[j+1] - x[j-1]) / 2dt`` at interior indices (time axis = -2)."""
    x = np.asarray(states, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 3:
        raise ValueError("finite_difference needs at least 3 states")
    return (x[..., 2:, :] - x[..., :-2, :]) / (2.0 * dt)


def rk4_integrate(spec: SystemSpec, mu, initial, dt: float | None = None, n_steps: int | None = None,
                  role: str = "adaptation") -> Trajectory:
    dt = spec.dt if dt is None else dt
    n_steps = spec.n_steps if n_steps is None else n_steps
    states = rk4_states(spec, mu, np.asarray(initial, dtype=np.float64), dt, n_steps)
    labels = finite_difference(states, dt) if states.shape[0] >= 3 else np.empty((0, states.shape[-1]))
    times = dt * np.arange(n_steps + 1)
    return Trajectory(np.asarray(mu, dtype=np.float64), times, states, labels, role)
