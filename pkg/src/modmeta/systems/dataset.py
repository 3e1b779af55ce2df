"""Task datasets: generation, splitting and line-delimited persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .integrate import Trajectory, finite_difference, rk4_states
from .sampling import sample_initial, sample_task, task_rng
from .spec import SystemSpec

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TaskDataset:
    k: int
    mu: np.ndarray
    adaptation: tuple[Trajectory, ...]
    performance: tuple[Trajectory, ...] = ()

    def stacked(self, role: str = "adaptation"):
        """(interior states, labels) of every trajectory of ``role`` concatenated."""
        trajs = self.adaptation if role == "adaptation" else self.performance
        return (np.concatenate([t.interior for t in trajs]),
                np.concatenate([t.labels for t in trajs]))

    def initial_states(self, role: str = "adaptation") -> np.ndarray:
        trajs = self.adaptation if role == "adaptation" else self.performance
        return np.stack([t.states[0] for t in trajs])

    def states(self, role: str = "adaptation") -> np.ndarray:
        trajs = self.adaptation if role == "adaptation" else self.performance
        return np.stack([t.states for t in trajs])


@dataclass(frozen=True)
class DatasetSplit:
    spec: SystemSpec
    train: tuple[TaskDataset, ...]
    val: tuple[TaskDataset, ...]
    test: tuple[TaskDataset, ...]
    seed: int
    n_T: int = 0
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> tuple[TaskDataset, ...]:
        return getattr(self, name)

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split_counts(n_mu: int, ratios=(70, 20, 10)) -> tuple[int, int, int]:
    """Turn ratios into integer counts summing to ``n_mu`` (largest remainder)."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
        raise ValueError("ratios must be three non-negative numbers")
    exact = n_mu * r / r.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: n_mu - counts.sum()]:
        counts[i] += 1
    return int(counts[0]), int(counts[1]), int(counts[2])


def _trajectories(spec, mu, rng, n, role):
    x0 = np.stack([sample_initial(spec, rng, mu) for _ in range(n)])
    states = rk4_states(spec, mu, x0, spec.dt, spec.n_steps)
    labels = finite_difference(states, spec.dt)
    times = spec.dt * np.arange(spec.n_seq)
    return tuple(Trajectory(mu, times, states[i], labels[i], role) for i in range(n))


def build_task(spec: SystemSpec, k: int, n_T: int, seed: int, with_performance: bool) -> TaskDataset:
    mu = sample_task(spec, task_rng(seed, k, "param"))
    adapt = _trajectories(spec, mu, task_rng(seed, k, "adaptation"), n_T, "adaptation")
    perf = ()
    if with_performance:
        perf = _trajectories(spec, mu, task_rng(seed, k, "performance"), n_T, "performance")
    return TaskDataset(k, mu, adapt, perf)


def build_dataset(spec: SystemSpec, n_mu: int, n_T: int, ratios=(70, 20, 10), seed: int = 0,
                  counts: tuple[int, int, int] | None = None) -> DatasetSplit:
    """Sample ``n_mu`` tasks and split them into train/val/test.

    Task ``k`` uses its own random streams, so the result does not depend on the
    order in which tasks are generated.  Only test tasks get performance sets.
    """
    if counts is None:
        counts = split_counts(n_mu, ratios)
    if sum(counts) != n_mu:
        raise ValueError(f"split counts {counts} do not sum to n_mu={n_mu}")
    if n_T < 1:
        raise ValueError("n_T must be >= 1")
    n_tr, n_va, _ = counts
    tasks = [build_task(spec, k, n_T, seed, with_performance=k >= n_tr + n_va) for k in range(n_mu)]
    return DatasetSplit(spec, tuple(tasks[:n_tr]), tuple(tasks[n_tr:n_tr + n_va]),
                        tuple(tasks[n_tr + n_va:]), seed, n_T)


# ------------------------------------------------------------------ persistence

def _dump_floats(a) -> str:
    # json writes floats with repr, which round-trips exactly
    return json.dumps([float(v) for v in np.ravel(a)])


def save_dataset(ds: DatasetSplit, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "spec.json").write_text(ds.spec.to_json() + "\n")
    manifest = {
        "system": ds.spec.system,
        "spec_hash": ds.spec.spec_hash(),
        "seed": ds.seed,
        "n_T": ds.n_T,
        "counts": dict(zip(SPLITS, ds.counts)),
        "tasks": {name: [t.k for t in ds.split(name)] for name in SPLITS},
        **ds.meta,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name in SPLITS:
        d = root / name
        d.mkdir(exist_ok=True)
        for task in ds.split(name):
            header = {
                "system": ds.spec.system,
                "spec_hash": ds.spec.spec_hash(),
                "k": task.k,
                "mu": [float(v) for v in task.mu],
                "dt": ds.spec.dt,
                "n_seq": ds.spec.n_seq,
                "state_dim": ds.spec.state_dim,
                "roles": {"adaptation": len(task.adaptation), "performance": len(task.performance)},
                "seed_path": [ds.seed, task.k],
            }
            lines = [json.dumps(header, sort_keys=True)]
            lines += [_dump_floats(t.states) for t in task.adaptation + task.performance]
            (d / f"task_{task.k}.jsonl").write_text("\n".join(lines) + "\n")
    return root


def _load_task(path: Path, spec: SystemSpec) -> TaskDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    if header["system"] != spec.system:
        raise ValueError(f"{path}: system {header['system']} does not match {spec.system}")
    mu = np.array(header["mu"])
    n_seq, d, dt = header["n_seq"], header["state_dim"], header["dt"]
    n_a = header["roles"]["adaptation"]
    if len(rows) != n_a + header["roles"]["performance"]:
        raise ValueError(f"{path}: trajectory count does not match header")
    times = dt * np.arange(n_seq)
    trajs = []
    for i, row in enumerate(rows):
        states = np.array(row).reshape(n_seq, d)
        role = "adaptation" if i < n_a else "performance"
        trajs.append(Trajectory(mu, times, states, finite_difference(states, dt), role))
    return TaskDataset(header["k"], mu, tuple(trajs[:n_a]), tuple(trajs[n_a:]))


def load_dataset(root) -> DatasetSplit:
    root = Path(root)
    spec = SystemSpec.from_json((root / "spec.json").read_text())
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["spec_hash"] != spec.spec_hash():
        raise ValueError(f"{root}: spec hash mismatch")
    parts = {name: tuple(_load_task(root / name / f"task_{k}.jsonl", spec) for k in manifest["tasks"][name])
             for name in SPLITS}
    extra = {k: v for k, v in manifest.items()
             if k not in ("system", "spec_hash", "seed", "n_T", "counts", "tasks")}
    return DatasetSplit(spec, parts["train"], parts["val"], parts["test"], manifest["seed"], manifest["n_T"], extra)
