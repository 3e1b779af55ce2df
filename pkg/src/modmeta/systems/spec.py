"""System descriptions: parameter boxes, initial-condition boxes, constants."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any

SYSTEM_IDS = ("mass_spring", "pendulum", "duffing", "kepler", "dno", "tgc")
HAMILTONIAN_IDS = ("mass_spring", "pendulum", "duffing", "kepler")
GENERIC_IDS = ("dno", "tgc")

# (n_dof, n_entropy)
DIMS = {
    "mass_spring": (1, 0),
    "pendulum": (1, 0),
    "duffing": (1, 0),
    "kepler": (2, 0),
    "dno": (1, 1),
    "tgc": (1, 2),
}


class DomainError(ValueError):
    """State outside the domain where the system's closed forms are defined."""


@dataclass(frozen=True)
class SystemSpec:
    system: str
    param_names: tuple[str, ...]
    param_ranges: tuple[tuple[float, float], ...]
    ic_names: tuple[str, ...]
    ic_ranges: tuple[tuple[float, float], ...]
    dt: float
    t_end: float
    constants: dict[str, float] = field(default_factory=dict)
    options: dict[str, str] = field(default_factory=dict)
    substeps: int = 1

    def __post_init__(self):
        if self.system not in SYSTEM_IDS:
            raise ValueError(f"unknown system '{self.system}'")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        ratio = self.t_end / self.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(f"t_end={self.t_end} is not a positive integer multiple of dt={self.dt}")
        if len(self.param_names) != len(self.param_ranges) or len(self.ic_names) != len(self.ic_ranges):
            raise ValueError("names and ranges must have equal lengths")
        for lo, hi in self.param_ranges + self.ic_ranges:
            if lo > hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def n_dof(self) -> int:
        return DIMS[self.system][0]

    @property
    def n_entropy(self) -> int:
        return DIMS[self.system][1]

    @property
    def state_dim(self) -> int:
        return 2 * self.n_dof + self.n_entropy

    @property
    def is_generic(self) -> bool:
        return self.system in GENERIC_IDS

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def n_seq(self) -> int:
        return self.n_steps + 1

    def const(self, name: str) -> float:
        return float(self.constants[name])

    def option(self, name: str) -> str:
        return self.options[name]

    def replace(self, **changes) -> "SystemSpec":
        return dataclasses.replace(self, **changes)

    def with_constants(self, **values) -> "SystemSpec":
        return self.replace(constants={**self.constants, **values})

    def with_options(self, **values) -> "SystemSpec":
        return self.replace(options={**self.options, **values})

    def to_dict(self) -> dict[str, Any]:
        return {
            "system": self.system,
            "param_names": list(self.param_names),
            "param_ranges": [list(r) for r in self.param_ranges],
            "ic_names": list(self.ic_names),
            "ic_ranges": [list(r) for r in self.ic_ranges],
            "dt": self.dt,
            "t_end": self.t_end,
            "constants": dict(sorted(self.constants.items())),
            "options": dict(sorted(self.options.items())),
            "substeps": self.substeps,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SystemSpec":
        return cls(
            system=d["system"],
            param_names=tuple(d["param_names"]),
            param_ranges=tuple(tuple(float(x) for x in r) for r in d["param_ranges"]),
            ic_names=tuple(d["ic_names"]),
            ic_ranges=tuple(tuple(float(x) for x in r) for r in d["ic_ranges"]),
            dt=float(d["dt"]),
            t_end=float(d["t_end"]),
            constants={k: float(v) for k, v in d.get("constants", {}).items()},
            options=dict(d.get("options", {})),
            substeps=int(d.get("substeps", 1)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SystemSpec":
        return cls.from_dict(json.loads(text))

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


TWO_PI = 2 * math.pi


def default_spec(system: str) -> SystemSpec:
    """Sampling boxes, step sizes and horizons for the six benchmark systems."""
    if system == "mass_spring":
        return SystemSpec("mass_spring", ("m", "k"), ((1.0, 5.0), (1.0, 5.0)),
                          ("q", "p"), ((-9.0, 9.0), (-9.0, 9.0)), 0.1, 3.0)
    if system == "pendulum":
        return SystemSpec("pendulum", ("m", "l"), ((1.0, 5.0), (1.0, 5.0)),
                          ("q", "p"), ((-TWO_PI, TWO_PI), (-19.0, 19.0)), 0.1, 3.0,
                          constants={"g": 9.81}, options={"kinetic": "as_written"})
    if system == "duffing":
        return SystemSpec("duffing", ("alpha", "beta"), ((2.0, 5.0), (-5.0, -2.0)),
                          ("q", "p"), ((-3.0, 3.0), (-2.0, 2.0)), 0.1, 3.0)
    if system == "kepler":
        return SystemSpec("kepler", ("m1", "m2"), ((0.5, 2.5), (0.5, 2.5)),
                          ("r", "theta"), ((2.0, 3.0), (0.0, TWO_PI)), 0.05, 5.0,
                          constants={"G": 1.0, "e_max": 0.5, "rho_y": 1.0},
                          options={"velocity": "tangential"})
    if system == "dno":
        return SystemSpec("dno", ("m", "gamma"), ((1.0, 1.5), (0.05, 0.15)),
                          ("q", "p"), ((-TWO_PI, TWO_PI), (-2.0, 2.0)), 0.01, 1.0,
                          constants={"k": 1.0, "T": 1.0, "S0": 0.0},
                          options={"sign": "energy_consistent"})
    if system == "tgc":
        c_hat = 102.25
        return SystemSpec("tgc", ("m", "alpha"), ((1.0, 4.0), (0.5, 1.5)),
                          ("q", "p"), ((0.5, 1.5), (-2.0, 2.0)), 0.02, 2.0,
                          constants={"L_g": 1.0, "A_c": 1.0, "NkB": 1.0, "c_hat": c_hat,
                                     "S0": c_hat + math.log(2.0)},
                          options={"closure": "additive", "entropy": "generic"})
    raise ValueError(f"unknown system '{system}'")
