import json

import numpy as np
import pytest

from modmeta.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main
from modmeta.experiment import METHODS, table_layout
from modmeta.models import load_checkpoint, save_checkpoint

TINY = ["--preset", "desk", "--hidden", "8,8", "--n-out", "3", "--n-cert", "2", "--n-val", "2", "--n-in", "1"]


@pytest.fixture
def data(tmp_path, monkeypatch):
    monkeypatch.setenv("MODMETA_OUTPUT", str(tmp_path / "out"))
    d = tmp_path / "d"
    assert main(["generate", "--system", "mass_spring", "--n-mu", "6", "--split", "4/1/1", "--n-t", "2",
                 "--out", str(d)]) == 0
    return d


def test_generate_layout_and_refusal(data, capsys):
    files = sorted(p.name for p in data.rglob("task_*.jsonl"))
    assert len(files) == 6
    assert main(["generate", "--system", "mass_spring", "--n-mu", "6", "--split", "4/1/1", "--n-t", "2",
                 "--out", str(data)]) == EXIT_DATA
    capsys.readouterr()
    assert main(["generate", "--system", "mass_spring", "--n-mu", "6", "--split", "4/1/1", "--n-t", "2",
                 "--out", str(data), "--force"]) == 0


def test_generate_default_pendulum(tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["generate", "--system", "pendulum", "--out", str(out)]) == 0
    first = json.loads(capsys.readouterr().out)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 70, "val": 20, "test": 10}
    assert manifest["n_T"] == 10
    assert main(["generate", "--system", "pendulum", "--out", str(out), "--force"]) == 0
    assert json.loads(capsys.readouterr().out)["manifest_sha256"] == first["manifest_sha256"]


def test_bad_split_is_config_error(tmp_path):
    assert main(["generate", "--n-mu", "6", "--split", "4/1/2", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["train", "--data", str(tmp_path), "--method", "nope"]) == EXIT_CONFIG


def test_train_evaluate_deterministic(data, tmp_path, capsys):
    for run in ("a", "b"):
        assert main(["train", "--data", str(data), "--method", "shift", "--out", str(tmp_path / run)] + TINY) == 0
        assert main(["evaluate", "--data", str(data), "--checkpoint", str(tmp_path / run / "checkpoint.json"),
                     "--out", str(tmp_path / f"{run}.json")]) == 0
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    report = json.loads((tmp_path / "a.json").read_text())
    head = report["header"]
    assert {"config_hash", "spec_hash", "code_version"} <= set(head)
    assert "reductions" in head and report["init"] == "mean"


def test_spec_hash_mismatch_refused(data, tmp_path):
    m = json.loads((data / "manifest.json").read_text())
    m["spec_hash"] = "0" * 16
    (data / "manifest.json").write_text(json.dumps(m))
    assert main(["train", "--data", str(data), "--method", "shift", "--out", str(tmp_path / "t")] + TINY) == EXIT_DATA


def test_spec_option_mismatch_refused(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"system_options": {"velocity": "literal"}}))
    rc = main(["train", "--data", str(data), "--method", "shift", "--config", str(cfg)] + TINY)
    assert rc == EXIT_DATA


def test_scratch_trains_one_model_per_task(data, tmp_path):
    assert main(["train", "--data", str(data), "--method", "scratch", "--out", str(tmp_path / "s")] + TINY) == 0
    model, params, latents, extra = load_checkpoint(tmp_path / "s" / "checkpoint.json")
    assert latents == {}
    for name, shape in model.param_shapes().items():
        assert params[name].shape == (4,) + shape


def test_mr_logs_penalty(data, tmp_path):
    assert main(["train", "--data", str(data), "--method", "mr", "--out", str(tmp_path / "m")] + TINY) == 0
    recs = [json.loads(line) for line in (tmp_path / "m" / "train_log.jsonl").read_text().splitlines()]
    assert all("penalty" in r and "residual" in r for r in recs)


def test_oracle_zero_init_and_shots(data, tmp_path, capsys):
    assert main(["evaluate", "--data", str(data), "--method", "oracle", "--out", str(tmp_path / "o.json")]) == 0
    s = json.loads((tmp_path / "o.json").read_text())["summary"]
    assert s == {"eps_traj": 0.0, "eps_field": 0.0, "ssim": 1.0}

    assert main(["train", "--data", str(data), "--method", "ro", "--out", str(tmp_path / "r")] + TINY) == 0
    ck = str(tmp_path / "r" / "checkpoint.json")
    assert main(["evaluate", "--data", str(data), "--checkpoint", ck, "--zero-init", "--out",
                 str(tmp_path / "z.json")]) == 0
    assert json.loads((tmp_path / "z.json").read_text())["init"] == "zero"
    assert main(["evaluate", "--data", str(data), "--checkpoint", ck, "--shots", "0", "--out",
                 str(tmp_path / "s0.json")]) == 0
    assert json.loads((tmp_path / "s0.json").read_text())["shots"] == 0


def test_missing_latents_is_data_error(data, tmp_path):
    assert main(["train", "--data", str(data), "--method", "ro", "--out", str(tmp_path / "r")] + TINY) == 0
    model, params, latents, extra = load_checkpoint(tmp_path / "r" / "checkpoint.json")
    save_checkpoint(tmp_path / "bare.json", model, params, None, extra)
    assert main(["evaluate", "--data", str(data), "--checkpoint", str(tmp_path / "bare.json")]) == EXIT_DATA


def test_numerical_failure_exit_code(data, tmp_path):
    path = data / "train" / "task_0.jsonl"
    lines = path.read_text().splitlines()
    row = json.loads(lines[1])
    row[3] = float("nan")
    lines[1] = json.dumps(row)
    path.write_text("\n".join(lines) + "\n")
    cfg = TINY + ["--batch-size", "4"]
    assert main(["train", "--data", str(data), "--method", "shift", "--out", str(tmp_path / "t")] + cfg) == EXIT_NUMERIC


def test_export_field_point_count(data, tmp_path, capsys):
    out = tmp_path / "f.raster"
    assert main(["export-field", "--data", str(data), "--method", "oracle", "--counts", "6,5", "--truth",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 30
    row = json.loads(lines[1])
    assert np.allclose(row[2:4], row[4:6])


def test_reproduce_single_cell(tmp_path, capsys):
    out = tmp_path / "tab"
    args = ["reproduce", "--table", "1", "--method", "ro", "--system", "mass_spring", "--seeds", "2",
            "--n-mu", "6", "--split", "4/1/1", "--out", str(out)] + TINY
    assert main(args) == 0
    t = json.loads((out / "table_1.json").read_text())["table"]
    assert [r["method"] for r in t["rows"]] == ["ro"]
    assert len(t["rows"][0]["cells"]) == 1
    cell = t["rows"][0]["cells"][0]
    assert cell["n"] == 2 and cell["std"] is not None
    first = (out / "table_1.json").read_bytes()
    assert main(args) == 0
    assert (out / "table_1.json").read_bytes() == first


def test_table_layouts():
    title, methods, cols = table_layout(1)
    assert methods == list(METHODS) and len(methods) == 8
    assert [c[0] for c in cols] == ["mass_spring", "pendulum", "duffing", "kepler"]
    assert [c[1] for c in cols] == [20, 10, 10, 10]
    title, methods, cols = table_layout(9)
    assert methods == ["shift", "shift@zero", "fw", "fw@zero", "ro", "ro@zero", "mr", "mr@zero"]
    with pytest.raises(ValueError):
        table_layout(5)
    assert main(["reproduce", "--table", "5"]) == EXIT_CONFIG


def test_print_config_paper_defaults(capsys):
    assert main(["print-config", "--system", "pendulum", "--method", "mr"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["experiment"]["hidden"] == [100, 100, 100, 100]
    assert d["experiment"]["n_mu"] == 100 and len(d["experiment"]["seeds"]) == 7
    m = d["meta"]
    assert (m["n_out"], m["n_val"], m["lr_out"], m["lr_in"], m["batch_size"]) == (10000, 100, 1e-3, 2e-3, 5)
    assert main(["print-config", "--preset", "desk", "--method", "reptile"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert (d["meta"]["lr_out"], d["meta"]["lr_in"]) == (0.01, 0.02)
    assert d["experiment"]["counts"] == [20, 5, 5] and d["reductions"]
