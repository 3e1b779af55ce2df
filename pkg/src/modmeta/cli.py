"""Command line: generate, train, evaluate, reproduce, export-field, print-config.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
The output root defaults to ``$MODMETA_OUTPUT`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diffcore import NonFiniteError
from .eval import FieldRaster, MeshSpec, default_mesh, export_raster
from .experiment import (METHODS, MODULATION, PRESETS, TABLE_IDS, ExperimentConfig, Trained, adapted_predictor,
                         dumps, evaluate, make_model, report_header, resolve, run_table, train)
from .metalearn import TrainingDivergence
from .models import load_checkpoint, save_checkpoint
from .systems import SYSTEM_IDS, DatasetSplit, IntegrationError, build_dataset, load_dataset, save_dataset, true_field

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ENV = "MODMETA_OUTPUT"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


# ------------------------------------------------------------------ config assembly

META_FLAGS = {"n_out": int, "n_in": int, "n_val": int, "n_cert": int, "lr_out": float, "lr_in": float,
              "lr_val": float, "batch_size": int, "clip": float, "scratch_steps": int, "hyper_scale": float,
              "reptile_inner": str}


def _ints(text: str, sep: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(sep) if v.strip())
    except ValueError as e:
        raise ConfigError(f"cannot parse '{text}' as integers") from e


def build_config(args, system: str | None = None, method: str | None = None) -> ExperimentConfig:
    """Preset defaults, then the optional config file, then explicit flags."""
    try:
        file_cfg = {}
        if getattr(args, "config", None):
            file_cfg = json.loads(Path(args.config).read_text())
        preset = getattr(args, "preset", None) or file_cfg.pop("preset", "paper")
        file_cfg.pop("preset", None)
        over = dict(file_cfg)
        meta = dict(over.pop("meta", {}) or {})
        flags = {
            "system": system or getattr(args, "system", None),
            "method": method or getattr(args, "method", None),
            "n_T": getattr(args, "n_t", None),
            "n_mu": getattr(args, "n_mu", None),
            "data_seed": getattr(args, "data_seed", None),
            "latent_dim": getattr(args, "latent_dim", None),
            "rank": getattr(args, "rank", None),
            "shots": getattr(args, "shots", None),
        }
        if getattr(args, "split", None):
            flags["counts"] = _ints(args.split, "/")
        if getattr(args, "hidden", None):
            flags["hidden"] = _ints(args.hidden, ",")
        if getattr(args, "seeds", None):
            flags["seeds"] = tuple(range(args.seeds))
        if getattr(args, "zero_init", False):
            flags["zero_init"] = True
        if getattr(args, "no_scaling", False):
            flags["scaling"] = False
        over.update({k: v for k, v in flags.items() if v is not None})
        for name in META_FLAGS:
            v = getattr(args, name, None)
            if v is not None:
                meta[name] = v
        if getattr(args, "first_order", False):
            meta["first_order"] = True
        for k in ("counts", "seeds", "hidden"):
            if over.get(k) is not None:
                over[k] = tuple(over[k])
        return resolve(preset, meta=meta, **over)
    except ConfigError:
        raise
    except (ValueError, TypeError, json.JSONDecodeError, OSError) as e:
        raise ConfigError(str(e)) from e


def _load_data(path) -> DatasetSplit:
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"cannot load dataset at {path}: {e}") from e


def _check_spec(cfg: ExperimentConfig, ds: DatasetSplit) -> ExperimentConfig:
    """The dataset fixes the system; its spec hash must match the configured one."""
    cfg = cfg.replace(system=ds.spec.system, n_T=ds.n_T)
    if cfg.spec().spec_hash() != ds.spec.spec_hash():
        raise DataError(f"dataset spec hash {ds.spec.spec_hash()} does not match configured "
                        f"{cfg.spec().spec_hash()}; regenerate the data or fix the config")
    n_mu = sum(ds.counts)
    return cfg.replace(n_mu=n_mu, counts=tuple(ds.counts), data_seed=ds.seed)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# ------------------------------------------------------------------ verbs

def cmd_generate(args) -> int:
    cfg = build_config(args)
    out = Path(args.out) if args.out else output_root() / "data" / f"{cfg.system}-nT{cfg.n_traj}-s{cfg.data_seed}"
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise DataError(f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    ds = build_dataset(cfg.spec(), cfg.n_mu, cfg.n_traj, seed=cfg.data_seed, counts=cfg.counts)
    save_dataset(ds, out)
    manifest = (out / "manifest.json").read_bytes()
    import hashlib
    print(json.dumps({"dataset": str(out), "counts": list(ds.counts), "n_T": ds.n_T,
                      "manifest_sha256": hashlib.sha256(manifest).hexdigest()}, sort_keys=True))
    return EXIT_OK


def _checkpoint_extra(cfg, ds, seed, trained: Trained) -> dict:
    return {"method": trained.method, "seed": seed, "config": cfg.to_dict(), "config_hash": cfg.config_hash(),
            "spec_hash": ds.spec.spec_hash(), "code_version": __version__,
            "best_iteration": trained.best_iteration,
            "train_tasks": [int(t.k) for t in ds.train]}


def cmd_train(args) -> int:
    ds = _load_data(args.data)
    cfg = _check_spec(build_config(args), ds)
    if cfg.method == "oracle":
        raise ConfigError("the oracle pseudo-method has nothing to train")
    seed = args.seed
    out = Path(args.out) if args.out else output_root() / "train" / f"{cfg.system}-{cfg.method}-s{seed}"
    out.mkdir(parents=True, exist_ok=True)
    log = out / "train_log.jsonl"
    if log.exists():
        log.unlink()
    trained = train(cfg, ds, seed, log_path=log)
    if cfg.method == "scratch":
        with open(log, "w") as fh:
            for rec in trained.history:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    save_checkpoint(out / "checkpoint.json", trained.model, trained.params, trained.latents,
                    _checkpoint_extra(cfg, ds, seed, trained))
    _write(out / "config.json", dumps(cfg.to_dict()))
    print(json.dumps({"checkpoint": str(out / "checkpoint.json"), "best_iteration": trained.best_iteration}))
    return EXIT_OK


def _load_trained(args, cfg: ExperimentConfig, ds: DatasetSplit) -> tuple[Trained, ExperimentConfig, int]:
    if args.method == "oracle" and not args.checkpoint:
        return Trained("oracle", None, None), cfg.replace(method="oracle"), args.seed
    if not args.checkpoint:
        raise ConfigError("evaluate needs --checkpoint (or --method oracle)")
    try:
        model, params, latents, extra = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    if extra.get("spec_hash") not in (None, ds.spec.spec_hash()):
        raise DataError("checkpoint was trained on a different system spec than this dataset")
    method = extra.get("method", cfg.method)
    if method in MODULATION and not latents:
        raise DataError("checkpoint has no latent codes for a modulation method")
    if "config" in extra:
        saved = ExperimentConfig.from_dict(extra["config"])
        cfg = saved.replace(shots=cfg.shots, zero_init=cfg.zero_init)
    cfg = cfg.replace(method=method)
    seed = extra.get("seed", args.seed)
    return Trained(method, model, params, latents, extra.get("best_iteration")), cfg, seed


def cmd_evaluate(args) -> int:
    ds = _load_data(args.data)
    cfg = _check_spec(build_config(args), ds)
    trained, cfg, seed = _load_trained(args, cfg, ds)
    res = evaluate(cfg, ds, trained, seed)
    report = {"header": report_header(cfg, ds.spec), "method": trained.method, "seed": seed,
              "shots": cfg.meta_config(seed).n_val, "init": cfg.meta_config(seed).init, **res}
    out = Path(args.out) if args.out else output_root() / "eval" / f"{cfg.system}-{trained.method}-s{seed}.json"
    _write(out, dumps(report))
    if args.rasters:
        _export_rasters(cfg, ds, trained, seed, Path(args.rasters))
    print(json.dumps({"report": str(out), **res["summary"]}, sort_keys=True))
    return EXIT_OK


def _raster_for(cfg, ds, trained, seed, tasks, mesh: MeshSpec):
    pred = adapted_predictor(cfg, trained, ds.spec, tasks, seed)
    pts = mesh.points()
    out = []
    for b, task in enumerate(tasks):
        model_f = pred.task(b).field(pts[None])[0]
        truth = true_field(ds.spec, pts, task.mu)
        out.append(FieldRaster(ds.spec.system, np.asarray(task.mu), mesh, pts, model_f, truth))
    return out


def _export_rasters(cfg, ds, trained, seed, root: Path) -> None:
    mesh = default_mesh(ds.spec.system)
    if mesh is None or mesh.dim != 2:
        print(f"no 2-D mesh for {ds.spec.system}; rasters skipped", file=sys.stderr)
        return
    for task, r in zip(ds.test, _raster_for(cfg, ds, trained, seed, ds.test, mesh)):
        export_raster(root / f"task_{task.k}.raster", r)


def cmd_export_field(args) -> int:
    ds = _load_data(args.data)
    cfg = _check_spec(build_config(args), ds)
    trained, cfg, seed = _load_trained(args, cfg, ds)
    tasks = [t for t in ds.test if args.task is None or t.k == args.task]
    if not tasks:
        raise DataError(f"task {args.task} is not in the test split")
    tasks = tasks[:1]
    mesh = default_mesh(ds.spec.system)
    if args.counts:
        if mesh is None:
            raise ConfigError(f"{ds.spec.system} has no default mesh ranges")
        mesh = MeshSpec(mesh.ranges, _ints(args.counts, ","))
    if mesh is None:
        raise ConfigError(f"{ds.spec.system} has no evaluation mesh")
    (r,) = _raster_for(cfg, ds, trained, seed, tasks, mesh)
    if not args.truth:
        r = FieldRaster(r.system, r.mu, r.mesh, r.points, r.model, None)
    out = Path(args.out) if args.out else output_root() / "fields" / f"{ds.spec.system}-{trained.method}-task{tasks[0].k}.raster"
    export_raster(out, r)
    print(json.dumps({"raster": str(out), "points": int(mesh.n_points)}))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    if args.table not in TABLE_IDS:
        raise ConfigError(f"unknown table {args.table}; available {list(TABLE_IDS)}")
    base = build_config(args, system="mass_spring", method="mr")
    overrides = {"meta": dict(base.meta), "latent_dim": base.latent_dim, "rank": base.rank,
                 "hidden": base.hidden, "scaling": base.scaling, "data_seed": base.data_seed}
    if args.n_mu is not None or args.split:
        overrides.update(n_mu=base.n_mu, counts=base.counts)
    seeds = base.seeds if args.seeds else None

    def progress(method, system, n_t, results):
        vals = {k: round(float(np.mean([r["summary"].get(k, np.nan) for r in results])), 4)
                for k in ("eps_traj", "eps_field", "ssim")}
        print(f"{method} {system}({n_t}) {vals}", file=sys.stderr, flush=True)

    table = run_table(args.table, base.preset, seeds=seeds, methods=args.method, systems=args.system,
                      overrides=overrides, progress=progress)
    head = report_header(base)
    head["config"].pop("system"), head["config"].pop("method")
    out = Path(args.out) if args.out else output_root() / "tables"
    _write(out / f"table_{args.table}.json", dumps({"header": head, "table": table.to_dict()}))
    text = [f"# table {args.table} ({base.preset} preset, config {head['config_hash']}, "
            f"spec {head['spec_hash']}, version {__version__})"]
    text += [f"# {r}" for r in head.get("reductions", [])]
    _write(out / f"table_{args.table}.txt", "\n".join(text) + "\n" + table.render())
    print(table.render(), end="")
    return EXIT_OK


def cmd_print_config(args) -> int:
    cfg = build_config(args)
    d = {"experiment": cfg.to_dict(), "meta": cfg.meta_config(cfg.seeds[0]).to_dict(),
         "config_hash": cfg.config_hash(), "spec": cfg.spec().to_dict()}
    if cfg.preset == "desk":
        d["reductions"] = report_header(cfg)["reductions"]
    sys.stdout.write(dumps(d))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _common(p, data=False):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="JSON file with experiment config keys")
    if data:
        p.add_argument("--data", required=True, help="dataset directory")


def _model_flags(p):
    p.add_argument("--hidden", help="comma separated hidden widths, e.g. 64,64,64")
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--no-scaling", action="store_true", help="disable fixed input/energy normalisation")
    for name, typ in META_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)
    p.add_argument("--first-order", action="store_true", help="first-order MAML/ANIL meta-gradients")


def _eval_flags(p):
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=METHODS + ("oracle",))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-init", action="store_true", help="start test latents at zero instead of the mean")
    p.add_argument("--shots", type=int, help="adaptation steps at test time (0 = unadapted meta-model)")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="modmeta", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="simulate a task dataset")
    _common(p)
    p.add_argument("--system", choices=SYSTEM_IDS, default=None)
    p.add_argument("--n-mu", type=int)
    p.add_argument("--n-t", type=int)
    p.add_argument("--split", help="train/val/test task counts, e.g. 70/20/10")
    p.add_argument("--data-seed", "--seed", type=int, dest="data_seed")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one method on a dataset")
    _common(p, data=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="adapt to test tasks and compute metrics")
    _common(p, data=True)
    _eval_flags(p)
    p.add_argument("--out", help="report path")
    p.add_argument("--rasters", help="directory for per-task field rasters (2-D systems)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-field", help="write one adapted field on the evaluation mesh")
    _common(p, data=True)
    _eval_flags(p)
    p.add_argument("--task", type=int, help="test task index (default: first test task)")
    p.add_argument("--counts", help="mesh point counts per dimension, e.g. 20,20")
    p.add_argument("--truth", action="store_true", help="include the ground-truth field")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_field)

    p = sub.add_parser("reproduce", help="run a results table grid over seeds")
    _common(p)
    p.add_argument("--table", type=int, required=True)
    p.add_argument("--seeds", type=int, help="number of seeds (default from preset)")
    p.add_argument("--method", action="append", choices=METHODS)
    p.add_argument("--system", action="append", choices=SYSTEM_IDS)
    p.add_argument("--n-mu", type=int)
    p.add_argument("--split")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--out", help="output directory")
    _model_flags(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("print-config", help="dump the fully resolved configuration")
    _common(p)
    p.add_argument("--system", choices=SYSTEM_IDS)
    p.add_argument("--method", choices=METHODS + ("oracle",))
    p.add_argument("--n-t", type=int)
    p.add_argument("--n-mu", type=int)
    p.add_argument("--split")
    p.add_argument("--seeds", type=int)
    _model_flags(p)
    p.set_defaults(func=cmd_print_config)
    return ap


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, IntegrationError, NonFiniteError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
