"""Experiment configuration, training dispatch, test-time evaluation and result tables.

This is the layer shared by the command line and the acceptance suite.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .eval import default_mesh, field_error, ssim, traj_error
from .metalearn import (MetaConfig, Predictor, adapt, adapt_params, inner_optimizer, mean_latent, meta_train,
                        optimization_train, scratch_train)
from .metalearn.data import as_task_data, stack_tasks
from .models import data_scaling, model_for_system
from .systems import DatasetSplit, SystemSpec, build_dataset, default_spec, tgc_mask, true_field

METHODS = ("scratch", "maml", "reptile", "anil", "shift", "fw", "ro", "mr")
MODULATION = ("shift", "fw", "ro", "mr")
OPTIMIZATION = ("maml", "reptile", "anil")
PSEUDO = ("oracle",)
SYSTEM_NT = {"mass_spring": 20, "pendulum": 10, "duffing": 10, "kepler": 10, "dno": 10, "tgc": 10}
REPTILE_RATES = {"lr_out": 0.01, "lr_in": 0.02}

PRESETS = {
    "paper": {"n_mu": 100, "counts": None, "hidden": [100, 100, 100, 100], "n_seeds": 7,
              "scaling": False, "meta": {"n_out": 10_000}},
    "desk": {"n_mu": 30, "counts": [20, 5, 5], "hidden": [64, 64, 64], "n_seeds": 3,
             "scaling": True, "meta": {"n_out": 1500}},
}
# every departure of the desk preset from the full-scale setup, printed in report headers
DESK_REDUCTIONS = [
    "tasks n_mu 100 -> 30 (split 70/20/10 -> 20/5/5)",
    "MLP 4x100 -> 3x64",
    "outer iterations 10000 -> 1500",
    "seeds 7 -> 3",
    "fixed input/energy normalisation from training data (off in the paper preset)",
]


@dataclass(frozen=True)
class ExperimentConfig:
    system: str = "mass_spring"
    method: str = "mr"
    n_T: int | None = None
    n_mu: int = 100
    counts: tuple[int, int, int] | None = None
    data_seed: int = 0
    seeds: tuple[int, ...] = (0,)
    preset: str = "paper"
    hidden: tuple[int, ...] = (100, 100, 100, 100)
    latent_dim: int = 10
    rank: int = 8
    d1: int = 2
    d2: int = 2
    friction: str = "factor"
    scaling: bool = False
    meta: dict = field(default_factory=dict)
    shots: int | None = None
    zero_init: bool = False
    system_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS + PSEUDO + ("multitask",):
            raise ValueError(f"unknown method '{self.method}'")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset '{self.preset}'")
        if self.n_mu < 3:
            raise ValueError("n_mu must be >= 3")
        if self.counts is not None and (len(self.counts) != 3 or sum(self.counts) != self.n_mu):
            raise ValueError("split counts must be three numbers summing to n_mu")
        if self.shots is not None and self.shots < 0:
            raise ValueError("shots must be >= 0")
        if not self.seeds:
            raise ValueError("at least one seed")
        MetaConfig(**self.meta)  # validates overrides early

    @property
    def n_traj(self) -> int:
        return SYSTEM_NT[self.system] if self.n_T is None else self.n_T

    def spec(self) -> SystemSpec:
        spec = default_spec(self.system)
        return spec.with_options(**self.system_options) if self.system_options else spec

    def meta_config(self, seed: int) -> MetaConfig:
        kw = dict(self.meta)
        if self.method == "reptile":
            for k, v in REPTILE_RATES.items():
                kw.setdefault(k, v)
        if self.shots is not None:
            kw["n_val"] = self.shots
        if self.zero_init:
            kw["init"] = "zero"
        return MetaConfig(seed=seed, **kw)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["counts"] = None if self.counts is None else list(self.counts)
        d["seeds"] = list(self.seeds)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        for k in ("counts", "seeds", "hidden"):
            if d.get(k) is not None:
                d[k] = tuple(int(v) for v in d[k])
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def resolve(preset: str = "paper", **overrides) -> ExperimentConfig:
    """Preset defaults with explicit overrides; ``meta`` overrides are merged."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset '{preset}'")
    p = PRESETS[preset]
    base = {"preset": preset, "n_mu": p["n_mu"], "counts": None if p["counts"] is None else tuple(p["counts"]),
            "hidden": tuple(p["hidden"]), "seeds": tuple(range(p["n_seeds"])), "scaling": p["scaling"],
            "meta": dict(p["meta"])}
    meta = overrides.pop("meta", None) or {}
    base.update({k: v for k, v in overrides.items() if v is not None})
    base["meta"] = {**base["meta"], **meta}
    if base["counts"] is not None:
        base["counts"] = tuple(base["counts"])
        if sum(base["counts"]) != base["n_mu"]:
            base["counts"] = None if "counts" not in overrides else base["counts"]
    return ExperimentConfig(**base)


# ------------------------------------------------------------------ data and models

def make_dataset(cfg: ExperimentConfig) -> DatasetSplit:
    return build_dataset(cfg.spec(), cfg.n_mu, cfg.n_traj, seed=cfg.data_seed, counts=cfg.counts)


def make_model(cfg: ExperimentConfig, ds: DatasetSplit, kind: str | None = None):
    if kind is None:
        kind = cfg.method if cfg.method in MODULATION else "none"
    scaling = None
    if cfg.scaling:
        x, y = stack_tasks(as_task_data(ds.train))
        scaling = data_scaling(x, y)
    return model_for_system(ds.spec, cfg.hidden, kind, cfg.latent_dim, cfg.rank, cfg.d1, cfg.d2, cfg.friction,
                            scaling)


@dataclass
class Trained:
    method: str
    model: object
    params: dict | None
    latents: dict | None = None
    best_iteration: int | None = None
    history: list = field(default_factory=list)


def train(cfg: ExperimentConfig, ds: DatasetSplit, seed: int, log_path=None) -> Trained:
    """Run the configured method on the training split (validation picks the snapshot)."""
    meta = cfg.meta_config(seed)
    if cfg.method == "oracle":
        return Trained("oracle", None, None)
    model = make_model(cfg, ds)
    if cfg.method in MODULATION:
        st = meta_train(meta, model, ds.train, ds.val, ds.spec, log_path=log_path)
        params, _ = st.selected()
        return Trained(cfg.method, model, params, st.latent_dict(),
                       None if st.best is None else st.best["iteration"], st.history)
    if cfg.method == "scratch":
        params, trace = scratch_train(meta, model, ds.train)
        hist = [{"step": i, "loss": float(np.mean(v))} for i, v in enumerate(trace)]
        return Trained("scratch", model, params, None, None, hist)
    st = optimization_train(cfg.method, meta, model, ds.train, ds.val, ds.spec, log_path=log_path)
    return Trained(cfg.method, model, st.selected(), None,
                   None if st.best is None else st.best["iteration"], st.history)


# ------------------------------------------------------------------ evaluation

class OraclePredictor:
    """Ground-truth field behind the predictor interface."""

    def __init__(self, spec: SystemSpec, mus):
        self.spec, self.mus = spec, [np.asarray(m) for m in mus]

    def task(self, b: int) -> "OraclePredictor":
        return OraclePredictor(self.spec, self.mus[b:b + 1])

    def field(self, states) -> np.ndarray:
        x = np.asarray(states, dtype=np.float64)
        if x.ndim == 2:
            return true_field(self.spec, x, self.mus[0])
        return np.stack([true_field(self.spec, x[b], self.mus[b]) for b in range(x.shape[0])])


def adapted_predictor(cfg: ExperimentConfig, trained: Trained, spec: SystemSpec, tasks, seed: int):
    """Test-time adaptation on each task's adaptation trajectories."""
    meta = cfg.meta_config(seed)
    tasks = as_task_data(tasks)
    if trained.method == "oracle":
        return OraclePredictor(spec, [t.mu for t in tasks])
    model = trained.model
    if trained.method in MODULATION:
        if not trained.latents:
            raise KeyError("checkpoint has no latent codes for a modulation method")
        z0 = np.zeros(model.latent_dim) if meta.init == "zero" else mean_latent(trained.latents)
        z, _ = adapt(model, trained.params, z0, tasks, meta.n_val, meta.eta_val)
        return Predictor(model, trained.params, z)
    if trained.method == "scratch":
        params, _ = scratch_train(meta, model, tasks)
        return Predictor(model, params)
    params, _ = adapt_params(model, trained.method, trained.params, tasks, meta.n_val, meta.eta_val,
                             inner_optimizer(trained.method, meta))
    return Predictor(model, params)


def task_metrics(spec: SystemSpec, predictor, task, mesh="default") -> dict:
    """Trajectory error on performance trajectories, field error on the mesh, SSIM for 2-D states."""
    trajs = task.states("performance")
    n_t, n_seq, dim = trajs.shape
    true = true_field(spec, trajs, task.mu)
    pred = predictor.field(trajs.reshape(1, n_t * n_seq, dim))[0].reshape(trajs.shape)
    out = {"k": int(task.k), "eps_traj": traj_error(true, pred)}
    mesh = default_mesh(spec.system) if mesh == "default" else mesh
    if mesh is not None:
        pts = mesh.points()
        mask = tgc_mask(spec, pts) if spec.system == "tgc" else np.ones(len(pts), dtype=bool)
        tf = np.zeros_like(pts)
        tf[mask] = true_field(spec, pts[mask], task.mu)
        pf = predictor.field(pts[None])[0]
        out["eps_field"] = field_error(tf, pf, mask)
        if not mask.all():
            out["mesh_excluded"] = int((~mask).sum())
        if dim == 2:
            out["ssim"] = ssim(tf.reshape(*mesh.shape, dim), pf.reshape(*mesh.shape, dim))
    return out


def evaluate(cfg: ExperimentConfig, ds: DatasetSplit, trained: Trained, seed: int, mesh="default") -> dict:
    tasks = ds.test
    if not tasks or tasks[0].performance is None or len(tasks[0].performance) == 0:
        raise ValueError("test split has no performance trajectories")
    pred = adapted_predictor(cfg, trained, ds.spec, tasks, seed)
    per_task = [task_metrics(ds.spec, pred.task(b), t, mesh) for b, t in enumerate(tasks)]
    summary = {}
    for key in ("eps_traj", "eps_field", "ssim"):
        vals = [r[key] for r in per_task if key in r]
        if vals:
            summary[key] = float(np.mean(vals))
    return {"summary": summary, "tasks": per_task}


def run_cell(cfg: ExperimentConfig, seed: int, ds: DatasetSplit | None = None, log_path=None) -> dict:
    ds = make_dataset(cfg) if ds is None else ds
    if cfg.method == "scratch":
        # scratch models are fit per test task at evaluation time; nothing is shared
        trained = Trained("scratch", make_model(cfg, ds), None)
    else:
        trained = train(cfg, ds, seed, log_path)
    res = evaluate(cfg, ds, trained, seed)
    res["best_iteration"] = trained.best_iteration
    return res


# ------------------------------------------------------------------ reports and tables

def report_header(cfg: ExperimentConfig, spec: SystemSpec | None = None) -> dict:
    spec = cfg.spec() if spec is None else spec
    head = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "spec_hash": spec.spec_hash(),
            "code_version": __version__, "preset": cfg.preset}
    if cfg.preset == "desk":
        head["reductions"] = list(DESK_REDUCTIONS)
    return head


def dumps(obj) -> str:
    """Deterministic JSON text (sorted keys, shortest round-trip floats)."""
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def aggregate(values) -> dict:
    """Mean and (sample) standard deviation over seeds; std is absent below two seeds."""
    vals = [float(v) for v in values if v is not None and np.isfinite(v)]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals, ddof=1)) if len(vals) >= 2 else None,
            "n": len(vals)}


@dataclass
class ResultsTable:
    """Rows keyed by (method, system, n_T); each cell maps a metric to its seed aggregate."""

    title: str
    methods: list[str]
    columns: list[tuple[str, int, str]]      # (system, n_T, metric)
    cells: dict = field(default_factory=dict)  # (method, system, n_T) -> {metric: aggregate}
    failures: dict = field(default_factory=dict)

    def set(self, method, system, n_t, metric, agg):
        self.cells.setdefault((method, system, n_t), {})[metric] = agg

    def get(self, method, system, n_t, metric):
        return self.cells.get((method, system, n_t), {}).get(metric)

    def ranks(self, column) -> dict[str, int]:
        """1 for best, 2 for second best (SSIM is higher-better, errors lower-better)."""
        system, n_t, metric = column
        scored = [(m, self.get(m, system, n_t, metric)) for m in self.methods]
        scored = [(m, a["mean"]) for m, a in scored if a and a["mean"] is not None]
        sign = -1.0 if metric == "ssim" else 1.0
        order = sorted(scored, key=lambda t: sign * t[1])
        return {m: i + 1 for i, (m, _) in enumerate(order[:2])}

    def to_dict(self) -> dict:
        rows = []
        for m in self.methods:
            row = {"method": m, "cells": []}
            for col in self.columns:
                row["cells"].append({"system": col[0], "n_T": col[1], "metric": col[2],
                                     **(self.get(m, *col) or {"mean": None, "std": None, "n": 0})})
            rows.append(row)
        fails = [{"method": k[0], "system": k[1], "n_T": k[2], "error": v} for k, v in sorted(self.failures.items())]
        return {"title": self.title, "rows": rows, "failures": fails}

    def render(self) -> str:
        """Plain-text table: mean (std x 1e-2); '*' best, '+' second best, '-' missing."""
        heads = [f"{s}({n}) {m}" for s, n, m in self.columns]
        ranks = [self.ranks(c) for c in self.columns]
        lines = [self.title, " | ".join(["method"] + heads)]
        for m in self.methods:
            cells = [m]
            for col, rk in zip(self.columns, ranks):
                a = self.get(m, *col)
                if not a or a["mean"] is None:
                    cells.append("-")
                    continue
                txt = f"{a['mean']:.4f}"
                if a["std"] is not None:
                    txt += f" ({100 * a['std']:.1f})"
                txt += {1: " *", 2: " +"}.get(rk.get(m), "")
                cells.append(txt)
            lines.append(" | ".join(cells))
        for (m, s, n), err in sorted(self.failures.items()):
            lines.append(f"failed: {m} {s}({n}): {err}")
        return "\n".join(lines) + "\n"


# table id -> (title, methods, columns); ids follow the paper's table numbering
def table_layout(table_id: int):
    all_m = list(METHODS)
    if table_id == 1:
        return ("Trajectory errors, energy-conserving systems", all_m,
                [(s, SYSTEM_NT[s], "eps_traj") for s in ("mass_spring", "pendulum", "duffing", "kepler")])
    if table_id == 2:
        cols = []
        for s in ("mass_spring", "pendulum", "duffing"):
            cols += [(s, SYSTEM_NT[s], "eps_field"), (s, SYSTEM_NT[s], "ssim")]
        return "Field errors and SSIM, energy-conserving systems", all_m, cols
    if table_id in (3, 4):
        s = {3: "dno", 4: "tgc"}[table_id]
        cols = []
        for n in (10, 20, 30):
            cols += [(s, n, "eps_field"), (s, n, "eps_traj")]
        return f"Field and trajectory errors, {s}", all_m, cols
    if table_id in (6, 7, 8):
        s = {6: "mass_spring", 7: "pendulum", 8: "duffing"}[table_id]
        cols = []
        for n in (10, 20, 30):
            cols += [(s, n, "eps_field"), (s, n, "eps_traj"), (s, n, "ssim")]
        return f"Field, trajectory errors and SSIM, {s}", all_m, cols
    if table_id == 9:
        methods = [f"{m}{suffix}" for m in MODULATION for suffix in ("", "@zero")]
        cols = [(s, SYSTEM_NT[s], "eps_traj") for s in ("mass_spring", "pendulum", "duffing", "kepler")]
        return "Mean-latent ('m') vs zero ('m@zero') initialisation, trajectory errors", methods, cols
    raise ValueError(f"no layout for table {table_id} (available: 1-4, 6-9)")


TABLE_IDS = (1, 2, 3, 4, 6, 7, 8, 9)


def run_table(table_id: int, preset: str = "desk", seeds=None, methods=None, systems=None, overrides=None,
              progress=None) -> ResultsTable:
    """Run every (method, column) cell over seeds and aggregate; failed cells are recorded, not fatal."""
    title, all_methods, columns = table_layout(table_id)
    if methods:
        all_methods = [m for m in all_methods if m.split("@")[0] in methods]
    if systems:
        columns = [c for c in columns if c[0] in systems]
    table = ResultsTable(title, all_methods, columns)
    overrides = dict(overrides or {})
    cells = sorted({(c[0], c[1]) for c in columns}, key=lambda t: (list(SYSTEM_NT).index(t[0]), t[1]))
    for system, n_t in cells:
        metrics = [c[2] for c in columns if c[:2] == (system, n_t)]
        for method in all_methods:
            base, _, init = method.partition("@")
            cfg = resolve(preset, system=system, method=base, n_T=n_t, zero_init=(init == "zero"), **overrides)
            if seeds is not None:
                cfg = cfg.replace(seeds=tuple(seeds))
            try:
                ds = make_dataset(cfg)
                results = [run_cell(cfg, s, ds) for s in cfg.seeds]
            except Exception as e:  # recorded as a gap in the table
                table.failures[(method, system, n_t)] = f"{type(e).__name__}: {e}"
                continue
            for metric in metrics:
                table.set(method, system, n_t, metric, aggregate(r["summary"].get(metric) for r in results))
            if progress is not None:
                progress(method, system, n_t, results)
    return table
