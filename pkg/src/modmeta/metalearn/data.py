"""Dense per-task arrays used by the trainers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..systems import SystemSpec, TaskDataset, true_field


@dataclass(frozen=True)
class TaskData:
    k: int
    mu: np.ndarray
    states: np.ndarray        # (n, N) interior states of all trajectories
    labels: np.ndarray        # (n, N) finite-difference velocities
    trajectories: np.ndarray  # (n_T, n_seq, N) full trajectories for error metrics

    @classmethod
    def from_task(cls, task: TaskDataset, role: str = "adaptation") -> "TaskData":
        x, y = task.stacked(role)
        return cls(task.k, task.mu, x, y, task.states(role))

    def true_traj_fields(self, spec: SystemSpec) -> np.ndarray:
        return true_field(spec, self.trajectories, self.mu)


def stack_tasks(tasks) -> tuple[np.ndarray, np.ndarray]:
    """(B, n, N) states and labels; every task must have the same number of points."""
    sizes = {t.states.shape for t in tasks}
    if len(sizes) != 1:
        raise ValueError(f"tasks have different data sizes: {sorted(sizes)}")
    return np.stack([t.states for t in tasks]), np.stack([t.labels for t in tasks])


def as_task_data(tasks, role: str = "adaptation") -> list[TaskData]:
    return [t if isinstance(t, TaskData) else TaskData.from_task(t, role) for t in tasks]
