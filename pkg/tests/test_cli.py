import hashlib
import json
import shlex
import shutil
import sys
from pathlib import Path

import numpy as np
import pytest

from tumorbed.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, EXIT_PROTOCOL, main
from tumorbed.config import ConfigError, RunConfig, apply_overrides, load_config
from tumorbed.geometry import convex_hull, write_polygon
from tumorbed.mining import FeatureMatrix, read_plan, write_features

SMALL = {"n_slides": 4, "width": 2048, "height": 2048, "mpp": 8, "tumor_radius": [300, 450], "seed": 3, "tumor_free_fraction": 0.25}


def _spec(tmp, doc, name="spec.json"):
    p = Path(tmp) / name
    p.write_text(json.dumps(doc))
    return str(p)


def _hashes(d):
    return {
        p.relative_to(d).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(Path(d).rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", _spec(root, SMALL), "--out", str(root / "synth")]) == EXIT_OK
    assert main(["infer", str(root / "synth"), "--out", str(root / "pred")]) == EXIT_OK
    return root


def test_synth_manifest(cohort):
    doc = json.loads((cohort / "synth" / "manifest.json").read_text())
    assert len(doc["slides"]) == 4
    assert sum(e["label"] == "tumor-negative" for e in doc["slides"]) == 1
    assert (cohort / "synth" / "resolved_config.json").exists()
    assert not list((cohort / "synth").glob(".stage-*"))


def test_ten_slide_cohort_has_three_negatives(tmp_path):
    spec = {"n_slides": 10, "width": 1024, "height": 1024, "tumor_radius": [120, 200], "artifacts": 0}
    assert main(["synth", _spec(tmp_path, spec), "--seed", "1", "--out", str(tmp_path / "a")]) == EXIT_OK
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert sum(e["label"] == "tumor-negative" for e in doc["slides"]) == 3
    assert main(["synth", _spec(tmp_path, spec), "--seed", "1", "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


@pytest.mark.parametrize("content", ["", "{}", "[]", "{not json"])
def test_synth_bad_spec(tmp_path, content, capsys):
    p = tmp_path / "s.json"
    p.write_text(content)
    assert main(["synth", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "tumorbed:" in capsys.readouterr().err


def test_synth_unknown_key(tmp_path):
    assert main(["synth", _spec(tmp_path, {"n_slides": 2, "colour": 1}), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_infer_labels_match_manifest(cohort):
    manifest = json.loads((cohort / "synth" / "manifest.json").read_text())
    preds = json.loads((cohort / "pred" / "predictions.json").read_text())
    assert {e["slide_id"]: e["label"] for e in manifest["slides"]} == {e["slide_id"]: e["label"] for e in preds["slides"]}
    for e in manifest["slides"]:
        sid = e["slide_id"]
        for suffix in (".heatmap.png", ".heatmap.json", ".mask.png", ".mask.json", ".scores.txt", ".pred.json"):
            assert (cohort / "pred" / f"{sid}{suffix}").exists()


def test_stride_256_has_at_least_stride_512_votes(cohort, tmp_path):
    bundle = str(cohort / "synth" / "slide000.json")
    assert main(["infer", bundle, "--stride", "512", "--out", str(tmp_path / "s512")]) == EXIT_OK
    assert main(["infer", bundle, "--stride", "256", "--out", str(tmp_path / "s256")]) == EXIT_OK
    v512 = np.array(json.loads((tmp_path / "s512" / "slide000.heatmap.json").read_text())["vote_count"])
    v256 = np.array(json.loads((tmp_path / "s256" / "slide000.heatmap.json").read_text())["vote_count"])
    # compare on the common 512 px grid
    fine = v256.reshape(v512.shape[0], 2, v512.shape[1], 2).min(axis=(1, 3))
    assert np.all(fine >= v512)


def test_infer_missing_mpp(cohort, tmp_path):
    src = cohort / "synth"
    shutil.copy(src / "slide001.png", tmp_path / "slide001.png")
    meta = json.loads((src / "slide001.json").read_text())
    del meta["mpp"]
    (tmp_path / "slide001.json").write_text(json.dumps(meta))
    shutil.copy(src / "slide001.gt.json", tmp_path / "slide001.gt.json")
    assert main(["infer", str(tmp_path / "slide001.json"), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert main(["infer", str(tmp_path / "slide001.json"), "--mpp", "8", "--out", str(tmp_path / "o")]) == EXIT_OK


def test_infer_with_score_files(cohort, tmp_path):
    out = tmp_path / "replay"
    assert main(["infer", str(cohort / "synth"), "--classifier", f"scores:{cohort / 'pred'}", "--out", str(out)]) == EXIT_OK
    for p in (cohort / "pred").glob("*.pred.json"):
        assert (out / p.name).read_bytes() == p.read_bytes()


SCORER = r'''
import json, sys
mode = sys.argv[1]
for line in sys.stdin:
    req = json.loads(line)
    if mode == "fail":
        print(json.dumps({"id": req["id"], "error": "no model"}), flush=True)
    else:
        print(json.dumps({"id": req["id"], "p": 0.0}), flush=True)
'''


def test_infer_protocol_exit_codes(cohort, tmp_path):
    script = tmp_path / "scorer.py"
    script.write_text(SCORER)
    bundle = str(cohort / "synth" / "slide001.json")
    ok = "proto:stdio:" + shlex.join([sys.executable, str(script), "ok"])
    bad = "proto:stdio:" + shlex.join([sys.executable, str(script), "fail"])
    assert main(["infer", bundle, "--classifier", ok, "--out", str(tmp_path / "a")]) == EXIT_OK
    pred = json.loads((tmp_path / "a" / "slide001.pred.json").read_text())
    assert pred["label"] == "tumor-negative"
    assert main(["infer", bundle, "--classifier", bad, "--out", str(tmp_path / "b")]) == EXIT_PROTOCOL
    assert not (tmp_path / "b" / "slide001.pred.json").exists()


def test_config_errors(cohort, tmp_path):
    bundle = str(cohort / "synth" / "slide001.json")
    assert main(["infer", bundle, "--stride", "1024", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["infer", bundle, "--tau", "2", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["infer", bundle, "--classifier", "magic", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["infer", bundle, "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG
    (tmp_path / "c.json").write_text(json.dumps({"strid": 3}))
    assert main(["infer", bundle, "--config", str(tmp_path / "c.json")]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        main(["infer"])
    assert info.value.code == 2


def test_evaluate(cohort, tmp_path, capsys):
    out = tmp_path / "ev"
    assert main(["evaluate", str(cohort / "pred"), str(cohort / "synth"), "--sampling", "kmeans", "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["confusion"] == [[1, 0], [0, 3]]
    assert report["n_included"] == 3
    table = capsys.readouterr().out
    assert table.splitlines()[0].startswith("Sampling") and "[1 0]" in table and "[0 3]" in table


def test_evaluate_perfect_predictions(cohort, tmp_path):
    gt = cohort / "synth"
    preds = tmp_path / "perfect"
    preds.mkdir()
    for p in gt.glob("*.gt.json"):
        shutil.copy(p, preds / p.name.replace(".gt.json", ".pred.json"))
    assert main(["evaluate", str(preds), str(gt), "--out", str(tmp_path / "ev")]) == EXIT_OK
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["mean_dice"] == 1.0 and report["mean_dprim_error_mm"] == 0.0


def test_evaluate_unmatched_and_empty(cohort, tmp_path, capsys):
    preds = tmp_path / "partial"
    preds.mkdir()
    shutil.copy(cohort / "pred" / "slide000.pred.json", preds)
    assert main(["evaluate", str(preds), str(cohort / "synth"), "--out", str(tmp_path / "e")]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "slide001" in err and "mismatch" in err
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["evaluate", str(empty), str(empty), "--out", str(tmp_path / "e2")]) == EXIT_INPUT


def _features(path, n=30000, d=8, seed=0):
    x = np.random.default_rng(seed).normal(size=(n, d))
    write_features(path, FeatureMatrix(x, [(f"s{i // 1000}", (i % 1000) * 256, 0) for i in range(n)]))


@pytest.fixture(scope="module")
def features(tmp_path_factory):
    p = tmp_path_factory.mktemp("feat") / "f.bin"
    _features(p)
    return p


def test_mine_strategies(features, tmp_path):
    assert main(["mine", str(features), "--strategy", "random", "--m-total", "21000", "--out", str(tmp_path / "r")]) == EXIT_OK
    assert len(read_plan(tmp_path / "r" / "plan.txt")) == 21000
    assert main(["mine", str(features), "--strategy", "none", "--out", str(tmp_path / "n")]) == EXIT_OK
    assert len(read_plan(tmp_path / "n" / "plan.txt")) == 0
    assert main(["mine", str(features), "--strategy", "random", "--m-total", "40000", "--out", str(tmp_path / "x")]) == EXIT_INPUT


def test_mine_kmeans_full_scale(features, tmp_path):
    assert main(["mine", str(features), "--max-iters", "10", "--class-counts", "85,15", "--weighting", "inv_prop", "--out", str(tmp_path / "k")]) == EXIT_OK
    plan = read_plan(tmp_path / "k" / "plan.txt")
    assert plan.strategy == "kmeans" and 0 < len(plan) <= 21000
    assert plan.weights["positive"] / plan.weights["negative"] == pytest.approx(85 / 15)


def test_mine_bad_feature_file(tmp_path, capsys):
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + bytes(40))
    assert main(["mine", str(tmp_path / "bad.bin"), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert "byte offset 0" in capsys.readouterr().err


def test_extent_command(tmp_path, capsys):
    write_polygon(tmp_path / "sq.json", "sq", 1000.0, convex_hull([(0, 0), (1, 0), (1, 1), (0, 1)]))
    assert main(["extent", str(tmp_path / "sq.json")]) == EXIT_OK
    rec = json.loads(capsys.readouterr().out)
    assert rec["d_prim_mm"] == pytest.approx(2 ** 0.5, rel=1e-12)
    write_polygon(tmp_path / "r.json", "r", 1000.0, convex_hull([(0, 0), (2, 0), (2, 1), (0, 1)]))
    assert main(["extent", str(tmp_path / "r.json"), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert json.loads((tmp_path / "o" / "r.extent.json").read_text())["d_prim_mm"] == pytest.approx(2.5 ** 0.5, abs=1e-12)
    write_polygon(tmp_path / "line.json", "l", 1.0, convex_hull([(0, 0), (3, 3)]))
    assert main(["extent", str(tmp_path / "line.json")]) == EXIT_INPUT


def test_extent_over_ground_truth_matches_manifest(cohort, capsys):
    manifest = json.loads((cohort / "synth" / "manifest.json").read_text())
    planted, measured = [], []
    for e in manifest["slides"]:
        if e["gt_d_prim_mm"] is None:
            continue
        capsys.readouterr()
        assert main(["extent", str(cohort / "synth" / e["ground_truth"])]) == EXIT_OK
        measured.append(json.loads(capsys.readouterr().out)["d_prim_mm"])
        planted.append(e["gt_d_prim_mm"])
    assert np.mean(measured) == pytest.approx(np.mean(planted), rel=1e-12)


# --- determinism ------------------------------------------------------------------


def _rerun_matches(argv_first, out_dir, extra=()):
    """Run, set the output aside, re-run from its resolved config; compare hashes."""
    assert main(argv_first) == EXIT_OK
    first = _hashes(out_dir)
    kept = out_dir.with_name(out_dir.name + ".first")
    out_dir.rename(kept)
    assert main([argv_first[0], *extra, "--config", str(kept / "resolved_config.json")]) == EXIT_OK
    return first, _hashes(out_dir)


def test_rerun_with_resolved_config_is_bit_identical(cohort, features, tmp_path):
    spec = _spec(tmp_path, {**SMALL, "n_slides": 2})
    a, b = _rerun_matches(["synth", spec, "--seed", "7", "--out", str(tmp_path / "s")], tmp_path / "s", extra=[spec])
    assert a == b
    bundle = str(cohort / "synth" / "slide002.json")
    a, b = _rerun_matches(["infer", bundle, "--p-fp", "0.05", "--tau", "0.4", "--out", str(tmp_path / "i")], tmp_path / "i", extra=[bundle])
    assert a == b
    a, b = _rerun_matches(
        ["evaluate", str(cohort / "pred"), str(cohort / "synth"), "--dice-cell-size", "64", "--out", str(tmp_path / "e")],
        tmp_path / "e",
        extra=[str(cohort / "pred"), str(cohort / "synth")],
    )
    assert a == b
    a, b = _rerun_matches(
        ["mine", str(features), "--k", "50", "--m", "3", "--seed", "5", "--out", str(tmp_path / "m")],
        tmp_path / "m",
        extra=[str(features)],
    )
    assert a == b
    sq = tmp_path / "sq.json"
    write_polygon(sq, "sq", 2.0, convex_hull([(0, 0), (9, 0), (9, 4), (0, 4)]))
    a, b = _rerun_matches(["extent", str(sq), "--out", str(tmp_path / "x")], tmp_path / "x", extra=[str(sq)])
    assert a == b


# --- configuration ----------------------------------------------------------------


def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.side, cfg.stride, cfg.tau, cfg.fg_threshold) == (512, 256, 0.5, 0.25)
    assert (cfg.mining.k, cfg.mining.m) == (3000, 7)


def test_config_round_trip_and_overrides(tmp_path):
    cfg = apply_overrides(RunConfig(), stride=128, **{"oracle.p_fp": 0.1, "mining.k": 10})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = load_config(p)
    assert back.to_dict() == cfg.to_dict()
    assert back.oracle.p_fp == 0.1 and back.mining.k == 10 and back.stride == 128
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"hsv": {"h_lo": 0.1, "bogus": 1}})
