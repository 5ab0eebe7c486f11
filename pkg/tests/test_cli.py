import csv
import json
import os

import pytest

from cwmstream import __version__
from cwmstream.cli import QUICK, REPRODUCE_COLUMNS, main, reproduce, resolve_config, build_parser


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_masks_schedule(capsys):
    code, out, _ = run(capsys, "masks", "--channels", "8", "--rho", "0.25")
    assert code == 0
    first, *diagram = out.splitlines()
    assert json.loads(first) == {"total": 8, "rho": 0.25, "masks": [{"start": 0, "end": 5}, {"start": 3, "end": 8}]}
    assert diagram[:2] == ["t=1 |#####...|", "t=2 |...#####|"]


def test_masks_random(capsys):
    code, out, _ = run(capsys, "masks", "--channels", "8", "--random", "--count", "5", "--seed", "42")
    assert code == 0
    assert json.loads(out.splitlines()[0])["masks"][0] == {"start": 1, "end": 6}


def test_unknown_flag_exits_1(capsys):
    code, _, err = run(capsys, "masks", "--channels", "8", "--bogus")
    assert code == 1
    assert "usage" in err


def test_unknown_subcommand_exits_1(capsys):
    assert run(capsys, "frobnicate")[0] == 1


def test_config_error_names_field(capsys):
    code, _, err = run(capsys, "masks", "--channels", "1")
    assert code == 1 and "--channels" in err
    code, _, err = run(capsys, "flops", "--alpha", "1.5")
    assert code == 1 and "net.alpha" in err


def test_config_file_unknown_field(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lr": 0.1, "bogus": 1}}))
    code, _, err = run(capsys, "flops", "--config", str(cfg))
    assert code == 1 and "train.bogus" in err


def test_runtime_failure_exits_2(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--data", str(tmp_path / "nope"), "--weights", str(tmp_path / "w"))
    assert code == 2 and err


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lr": 0.1, "epochs": 3}}))
    args = build_parser().parse_args(["train", "--config", str(cfg), "--lr", "0.2",
                                      "--data", "d", "--out", "o", "--bptt", "true"])
    r = resolve_config(args)
    assert r.train.lr == 0.2 and r.train.epochs == 3 and r.train.bptt is True


def test_quick_preset_applies():
    args = build_parser().parse_args(["reproduce", "--quick", "--out", "o"])
    r = resolve_config(args, quick=True)
    for section, vals in QUICK.items():
        for k, v in vals.items():
            assert getattr(getattr(r, section), k) == v


def test_flops_output_with_config(tmp_path, capsys):
    out = tmp_path / "f.json"
    code, stdout, _ = run(capsys, "flops", "--base-width", "16", "--rho", "0", "--size", "32", "--out", str(out))
    assert code == 0
    data = json.loads(out.read_text())
    assert data["convention"].startswith("1 MAC = 2 FLOPs")
    side = json.loads((tmp_path / "f.json.run_config.json").read_text())
    assert side["version"] == __version__ and side["config"]["net"]["rho"] == 0.0


def test_pipeline_gen_train_eval_bench(tmp_path, capsys):
    data, model = tmp_path / "data", tmp_path / "model"
    small = ["--height", "16", "--width", "16", "--min-size", "1", "--max-size", "3",
             "--n-train", "3", "--n-val", "2"]
    assert run(capsys, "gen-data", "--out", str(data), *small)[0] == 0
    assert (data / "index.json").exists() and (data / "run_config.json").exists()
    code, out, _ = run(capsys, "train", "--data", str(data), "--out", str(model), "--base-width", "8",
                       "--alpha", "0.5", "--rho", "0.25", "--epochs", "1", "--j", "3")
    assert code == 0
    assert json.loads(out)["weights"].endswith("weights")
    for f in ("train_report.json", "learning_curve.csv", "run_config.json", "weights/manifest.json"):
        assert (model / f).exists()
    code, out, _ = run(capsys, "eval", "--data", str(data), "--weights", str(model / "weights"),
                       "--k", "5", "--average-pair", "--out", str(tmp_path / "e.json"))
    assert code == 0
    assert 0 <= json.loads(out)["miou"] <= 1
    code, out, _ = run(capsys, "eval", "--data", str(data), "--weights", str(model / "weights"),
                       "--sweep", "3:5", "--out", str(tmp_path / "s.csv"))
    assert code == 0
    assert out.splitlines()[0] == "k,miou" and len(out.splitlines()) == 4
    assert (tmp_path / "s.csv.run_config.json").exists()
    code, out, _ = run(capsys, "bench", "--weights", str(model / "weights"), "--size", "16",
                       "--steps", "30", "--out", str(tmp_path / "b.csv"))
    assert code == 0
    assert (tmp_path / "b.csv").read_text().startswith("config,warmup,iterations")
    code, out, _ = run(capsys, "bench", "--contiguity", "--channels", "8", "--size", "8", "--steps", "30")
    assert code == 0 and "contiguous_over_scattered" in out


def test_bad_sweep(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--data", "d", "--weights", "w", "--sweep", "5")
    assert code == 1 and "--sweep" in err


def test_reproduce_tiny(tmp_path):
    args = build_parser().parse_args(["reproduce", "--quick", "--out", str(tmp_path)])
    cfg = resolve_config(args, quick=True)
    from cwmstream.cli import merge_config
    merge_config(cfg, {"synth": {"n_train": 2, "n_val": 2}, "train": {"epochs": 1}})
    rows = reproduce(cfg, str(tmp_path), alphas=(0.5,), log=lambda m: None)
    assert [r["model"] for r in rows] == ["baseline", "0-BG", "0.25-BG"]
    with open(tmp_path / "reproduce.csv") as f:
        table = list(csv.DictReader(f))
    assert list(table[0]) == REPRODUCE_COLUMNS
    assert table[0]["rho"] == "1.0"
    assert int(table[1]["per_step_flops"]) < int(table[0]["per_step_flops"])
    assert os.path.exists(tmp_path / "run_config.json")
    assert os.path.exists(tmp_path / "models" / "0-BG_a0.5" / "weights" / "manifest.json")
