from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetaConfig:
    n_out: int = 10_000
    n_in: int = 3
    n_val: int = 100
    n_cert: int = 250
    lr_out: float = 1e-3
    lr_in: float = 2e-3
    lr_val: float | None = None
    batch_size: int = 5
    seed: int = 0
    first_order: bool = False
    clip: float | None = None
    init: str = "mean"
    scratch_steps: int | None = None
    hyper_scale: float = 1e-2
    reptile_inner: str = "adam"

    def __post_init__(self):
        for name in ("n_out", "n_in", "n_val"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_cert < 1 or self.batch_size < 1:
            raise ValueError("n_cert and batch_size must be >= 1")
        for name in ("lr_out", "lr_in"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_val is not None and not self.lr_val > 0:
            raise ValueError("lr_val must be positive")
        if self.init not in ("mean", "zero"):
            raise ValueError("init must be 'mean' or 'zero'")
        if self.reptile_inner not in ("sgd", "adam"):
            raise ValueError("reptile_inner must be 'sgd' or 'adam'")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive")

    @property
    def eta_val(self) -> float:
        return self.lr_in if self.lr_val is None else self.lr_val

    @property
    def n_scratch(self) -> int:
        return self.n_val if self.scratch_steps is None else self.scratch_steps

    def replace(self, **kw) -> "MetaConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for a (seed, purpose, ...) path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(path))))


# purposes for stream()
INIT, BATCHES, TASK_INIT = 0, 1, 2


class TrainingDivergence(FloatingPointError):
    def __init__(self, iteration: int, tasks, value):
        super().__init__(f"non-finite loss {value} at iteration {iteration} (tasks {list(tasks)})")
        self.iteration = iteration
        self.tasks = list(tasks)
