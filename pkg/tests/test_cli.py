"""End-to-end command tests; every invocation goes through cli.main so the
documented exit codes (0 ok, 2 input error, 3 degenerate geometry) are what
is actually asserted."""

import json
import subprocess
import sys

import numpy as np
import pytest

from parereg.cli import main
from parereg.report import read_benchmark_csv, strip_timings

SMALL_CONFIG = {
    "backbone": {
        "voxel": 0.05,
        "k": 8,
        "kernels": 2,
        "stage_channels": [4, 8, 8],
        "decoder_channels": [8, 4],
        "corr_vn_channels": [4],
        "corr_mlp_hidden": [4],
    },
    "attention": {"width": 8, "out_width": 8, "rounds": 2, "heads": 2, "n_buckets": 3},
    "scene": {"n_points": 300, "generator": "box-room"},
    "matching": {"n_coarse": 16, "n_fine": 100},
}


@pytest.fixture()
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return str(path)


def _read(path):
    return path.read_bytes()


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "register" in capsys.readouterr().out


def test_unknown_option_is_input_error(capsys):
    assert main(["register", "--nope"]) == 2


def test_unknown_estimator_rejected(small_config, tmp_path):
    rc = main(
        ["register", "--config", small_config, "--scene-seed", "1",
         "--estimator", "icp", "--out", str(tmp_path / "o")]
    )
    assert rc == 2


def test_gen_writes_expected_files(small_config, tmp_path):
    out = tmp_path / "scenes"
    rc = main(
        ["gen", "--config", small_config, "--seed", "4", "--count", "2",
         "--oracle-channels", "3", "--out", str(out)]
    )
    assert rc == 0
    for seed in (4, 5):
        d = out / f"scene{seed:06d}"
        for name in ("p.ply", "q.ply", "t_gt.json", "corr.csv", "meta.json",
                     "features_p.npy", "features_q.npy"):
            assert (d / name).exists(), name
        meta = json.loads((d / "meta.json").read_text())
        assert abs(meta["overlap"] - 0.5) <= 0.05 + 1e-12
        assert meta["seed"] == seed
        feats = np.load(d / "features_p.npy")
        assert feats.shape == (meta["n_p"], 3, 3)


def test_gen_is_deterministic(small_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen", "--config", small_config, "--seed", "9", "--out", str(out)]) == 0
    for name in ("p.ply", "q.ply", "t_gt.json", "corr.csv", "meta.json"):
        assert _read(a / "scene000009" / name) == _read(b / "scene000009" / name), name


def test_register_from_generated_scene(small_config, tmp_path):
    out = tmp_path / "reg"
    rc = main(
        ["register", "--config", small_config, "--scene-seed", "2", "--seed", "1",
         "--estimator", "feature", "--out", str(out)]
    )
    assert rc == 0
    for name in ("report.json", "correspondences.csv", "p_down.ply", "q_down.ply",
                 "p_aligned.ply", "register.png"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert report["estimator"] == "feature"
    assert report["metrics"] is not None
    assert set(report["timings_ms"]) == {"backbone", "matching", "hypothesis", "total"}
    assert (out / "register.png").read_bytes().startswith(b"\x89PNG")


def test_register_from_files_without_gt(small_config, tmp_path):
    scenes = tmp_path / "scenes"
    assert main(["gen", "--config", small_config, "--seed", "3", "--out", str(scenes)]) == 0
    d = scenes / "scene000003"
    out = tmp_path / "reg"
    rc = main(
        ["register", "--config", small_config, "--p", str(d / "p.ply"),
         "--q", str(d / "q.ply"), "--estimator", "lgr", "--out", str(out)]
    )
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert report["metrics"] is None
    assert report["pair"] == "p:q"


@pytest.mark.parametrize("estimator", ["ransac", "lgr"])
def test_register_estimator_dispatch(small_config, tmp_path, estimator):
    out = tmp_path / estimator
    rc = main(
        ["register", "--config", small_config, "--scene-seed", "6", "--budget", "30",
         "--estimator", estimator, "--out", str(out)]
    )
    assert rc == 0
    assert json.loads((out / "report.json").read_text())["estimator"] == estimator


def test_register_repeat_is_identical_modulo_timings(small_config, tmp_path):
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for out in outs:
        rc = main(
            ["register", "--config", small_config, "--scene-seed", "5", "--seed", "7",
             "--out", str(out)]
        )
        assert rc == 0
    a = strip_timings(json.loads((outs[0] / "report.json").read_text()))
    b = strip_timings(json.loads((outs[1] / "report.json").read_text()))
    assert a == b
    for name in ("correspondences.csv", "p_down.ply", "p_aligned.ply", "register.png"):
        assert _read(outs[0] / name) == _read(outs[1] / name), name


def test_register_requires_an_input(tmp_path):
    assert main(["register", "--out", str(tmp_path / "o")]) == 2


def test_register_missing_file_is_input_error(tmp_path):
    rc = main(
        ["register", "--p", "/nonexistent/a.ply", "--q", "/nonexistent/b.ply",
         "--out", str(tmp_path / "o")]
    )
    assert rc == 2


def test_register_tiny_cloud_is_input_error(small_config, tmp_path):
    from parereg.geom import PointCloud
    from parereg.io import write_ply

    few = PointCloud(np.random.default_rng(0).normal(size=(5, 3)))
    write_ply(few, tmp_path / "few.ply")
    rc = main(
        ["register", "--config", small_config, "--p", str(tmp_path / "few.ply"),
         "--q", str(tmp_path / "few.ply"), "--out", str(tmp_path / "o")]
    )
    assert rc == 2


def test_benchmark_small_sweep(small_config, tmp_path):
    out = tmp_path / "bench"
    args = [
        "benchmark", "--config", small_config, "--seed", "0", "--scenes", "4",
        "--estimators", "feature,ransac", "--budgets", "10,40", "--n-corr", "50",
        "--oracle-channels", "4", "--out", str(out),
    ]
    assert main(args) == 0
    rows = read_benchmark_csv(out / "benchmark.csv")
    assert {(r["estimator"], r["budget"]) for r in rows} == {
        ("feature", 10), ("feature", 40), ("ransac", 10), ("ransac", 40)
    }
    assert (out / "benchmark.png").exists()
    assert (out / "meta.json").exists()

    # repeat: identical once the timing column is dropped
    out2 = tmp_path / "bench2"
    assert main(args[:-1] + [str(out2)]) == 0
    rows2 = read_benchmark_csv(out2 / "benchmark.csv")
    strip = lambda rs: [{k: v for k, v in r.items() if k != "ms"} for r in rs]
    assert strip(rows) == strip(rows2)
    assert _read(out / "benchmark.png") == _read(out2 / "benchmark.png")


def test_benchmark_rejects_bad_lists(small_config, tmp_path):
    base = ["benchmark", "--config", small_config, "--out", str(tmp_path / "o")]
    assert main(base + ["--estimators", " , "]) == 2
    assert main(base + ["--estimators", "icp"]) == 2
    assert main(base + ["--budgets", "ten"]) == 2
    assert main(base + ["--budgets", "0"]) == 2
    assert main(base + ["--inlier-ratio", "0.0"]) == 2


def test_benchmark_unreachable_inliers_is_degenerate(small_config, tmp_path):
    rc = main(
        ["benchmark", "--config", small_config, "--scenes", "1", "--n-corr", "5000",
         "--inlier-ratio", "1.0", "--out", str(tmp_path / "o")]
    )
    assert rc == 3


def _eval_inputs(tmp_path):
    ident = {"r": list(np.eye(3).reshape(-1)), "t": [0.0, 0.0, 0.0]}
    pts = np.random.default_rng(0).normal(size=(20, 3))
    good = {
        "id": "good",
        "transform": ident,
        "correspondences": {"src": pts.tolist(), "dst": pts.tolist()},
    }
    rot = {
        "r": [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        "t": [5.0, 0.0, 0.0],
    }
    bad = {
        "id": "bad",
        "transform": rot,
        "correspondences": {"src": pts.tolist(), "dst": (pts + 3.0).tolist()},
    }
    pred = tmp_path / "pred.json"
    gt = tmp_path / "gt.json"
    pred.write_text(json.dumps({"pairs": [good, bad]}))
    gt.write_text(
        json.dumps({"pairs": [{"id": "good", "transform": ident}, {"id": "bad", "transform": ident}]})
    )
    return pred, gt


def test_eval_end_to_end(tmp_path):
    pred, gt = _eval_inputs(tmp_path)
    out = tmp_path / "eval"
    rc = main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(out)])
    assert rc == 0
    result = json.loads((out / "eval.json").read_text())
    assert result["per_pair"]["good"]["ir"] == 1.0
    assert result["per_pair"]["good"]["re_deg"] == pytest.approx(0.0, abs=1e-9)
    assert result["per_pair"]["bad"]["re_deg"] == pytest.approx(90.0, abs=1e-9)
    # one perfect pair out of two
    assert result["aggregate"]["fmr"] == 0.5
    assert result["aggregate"]["rr"] == 0.5
    assert result["aggregate"]["tr"] == 0.5
    assert (out / "eval_pairs.csv").read_text().splitlines()[0] == "id,ir,rmse,re_deg,te_m"
    assert (out / "eval.png").exists()


def test_eval_missing_pair_is_input_error(tmp_path):
    pred, gt = _eval_inputs(tmp_path)
    doc = json.loads(gt.read_text())
    doc["pairs"] = doc["pairs"][:1]
    gt.write_text(json.dumps(doc))
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "o")]) == 2


def test_eval_rejects_malformed_documents(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"not_pairs": []}))
    ok = tmp_path / "ok.json"
    ok.write_text(json.dumps({"pairs": []}))
    assert main(["eval", "--pred", str(bad), "--gt", str(ok), "--out", str(tmp_path / "o")]) == 2


def test_weights_write_then_check(small_config, tmp_path):
    out = tmp_path / "w"
    assert main(["weights", "--config", small_config, "--seed", "3", "--out", str(out)]) == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["n_records"] > 0 and meta["seed"] == 3
    rc = main(
        ["weights", "--config", small_config, "--check", str(out / "weights.bin"),
         "--out", str(tmp_path / "unused")]
    )
    assert rc == 0
    # truncated container fails the check
    blob = (out / "weights.bin").read_bytes()
    (out / "weights.bin").write_bytes(blob[: len(blob) - 3])
    rc = main(
        ["weights", "--config", small_config, "--check", str(out / "weights.bin"),
         "--out", str(tmp_path / "unused2")]
    )
    assert rc == 2


def test_weights_meta_deterministic(small_config, tmp_path):
    a, b = tmp_path / "wa", tmp_path / "wb"
    for out in (a, b):
        assert main(["weights", "--config", small_config, "--seed", "5", "--out", str(out)]) == 0
    assert _read(a / "weights.bin") == _read(b / "weights.bin")
    assert _read(a / "meta.json") == _read(b / "meta.json")


def test_register_with_weight_file(small_config, tmp_path):
    w = tmp_path / "w"
    assert main(["weights", "--config", small_config, "--seed", "8", "--out", str(w)]) == 0
    out = tmp_path / "reg"
    rc = main(
        ["register", "--config", small_config, "--scene-seed", "2",
         "--weights", str(w / "weights.bin"), "--out", str(out)]
    )
    assert rc == 0
    # wrong-shape container is rejected with the weights stage named
    other = json.dumps(dict(SMALL_CONFIG, attention=dict(SMALL_CONFIG["attention"], width=4)))
    cfg2 = tmp_path / "cfg2.json"
    cfg2.write_text(other)
    rc = main(
        ["register", "--config", str(cfg2), "--scene-seed", "2",
         "--weights", str(w / "weights.bin"), "--out", str(tmp_path / "reg2")]
    )
    assert rc == 2


def test_console_script_matches_module_main():
    proc = subprocess.run(
        [sys.executable, "-m", "parereg.cli", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "benchmark" in proc.stdout
