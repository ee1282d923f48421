"""Harness: configs, runners, artifacts, plots, and self-play."""

import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from evicast.decision import DecisionTranscript
from evicast.errors import ConfigError
from evicast.forecaster import Transcript
from evicast.harness import (ExperimentConfig, FixedSequenceNature,
                             config_from_dict, config_from_file, emit_plots,
                             random_affine_members, rps_game, run_experiment,
                             self_play_game)
from evicast.geometry import box, simplex


def _cfg(**kw):
    base = {"kind": "standard", "horizon": 40, "seed": 3,
            "body": {"kind": "simplex", "dim": 3},
            "family": {"kind": "affine", "count": 3, "seed": 1},
            "nature": {"kind": "iid", "seed": 11}}
    base.update(kw)
    return config_from_dict(base)


def test_config_validation_rejects_junk():
    with pytest.raises(ConfigError):
        config_from_dict({"kind": "standard", "horizon": 8, "bogus": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"kind": "nope", "horizon": 8})
    with pytest.raises(ConfigError):
        config_from_dict({"kind": "standard"})
    with pytest.raises(ConfigError):
        config_from_dict([1, 2])


def test_config_file_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        config_from_file(p)
    with pytest.raises(ConfigError):
        config_from_file(tmp_path / "missing.json")


def test_random_affine_members_closed_under_negation():
    body = simplex(3)
    members = random_affine_members(body, count=3, seed=2)
    assert len(members) == 6
    mats = [m.aff_mat for m in members]
    for i in range(0, 6, 2):
        assert np.array_equal(mats[i], -mats[i + 1])


def test_standard_run_writes_artifacts_and_passes(tmp_path):
    res = run_experiment(_cfg(), str(tmp_path / "run"))
    assert res.ok
    for name in ("transcript.json", "transcript.csv", "metrics.csv",
                 "report.json", "plots.svg"):
        assert os.path.exists(os.path.join(res.out_dir, name))
    tr = Transcript.from_json(os.path.join(res.out_dir, "transcript.json"))
    assert tr.sha256() == res.report["transcript_sha256"]
    assert len(tr) == 40
    with open(os.path.join(res.out_dir, "metrics.csv")) as fh:
        assert len(fh.read().strip().splitlines()) == 41
    assert all(row["ok"] for row in res.report["ledger"])
    assert res.report["per_round_evi_ok"]


def test_identical_seeds_reproduce_hashes(tmp_path):
    r1 = run_experiment(_cfg(), str(tmp_path / "a"))
    r2 = run_experiment(_cfg(), str(tmp_path / "b"))
    r3 = run_experiment(_cfg(seed=4), str(tmp_path / "c"))
    assert r1.report["transcript_sha256"] == r2.report["transcript_sha256"]
    assert r1.report["transcript_sha256"] != r3.report["transcript_sha256"]


def test_monomial_family_run(tmp_path):
    cfg = _cfg(body={"kind": "box", "lo": [0, 0], "hi": [1, 1]},
               family={"kind": "monomial", "degree": 1, "radius": 1.0},
               horizon=30)
    res = run_experiment(cfg, str(tmp_path / "mono"))
    assert res.ok


def test_fixed_sequence_and_mean_natures(tmp_path):
    outcomes = np.tile(np.array([[0.2, 0.3, 0.5]]), (20, 1)).tolist()
    cfg = _cfg(horizon=20, nature={"kind": "fixed_sequence",
                                   "outcomes": outcomes})
    res = run_experiment(cfg, str(tmp_path / "fixed"))
    assert res.ok
    tr = Transcript.from_json(os.path.join(res.out_dir, "transcript.json"))
    assert np.allclose(tr.rounds[0].y, [0.2, 0.3, 0.5])
    res2 = run_experiment(_cfg(horizon=20, nature={"kind": "mean"}),
                          str(tmp_path / "mean"))
    assert res2.ok


def test_adaptive_worstcase_nature(tmp_path):
    cfg = _cfg(horizon=24, nature={"kind": "adaptive_worstcase", "member": 0})
    res = run_experiment(cfg, str(tmp_path / "adv"))
    assert res.ok


def test_k29_run(tmp_path):
    cfg = config_from_dict({
        "kind": "k29", "horizon": 30, "seed": 2,
        "body": {"kind": "box", "lo": [0, 0], "hi": [1, 1]},
        "kernel": {"kind": "gaussian", "bandwidth": 0.6, "input_bound": 2.0},
        "radius": 1.0, "nature": {"kind": "iid", "seed": 5}})
    res = run_experiment(cfg, str(tmp_path / "k29"))
    assert res.ok
    assert res.report["per_round_evi_ok"]


def test_censored_run(tmp_path):
    cfg = config_from_dict({
        "kind": "censored", "horizon": 40, "seed": 6, "gamma": 0.5,
        "body": {"kind": "simplex", "dim": 3},
        "family": {"kind": "affine", "count": 2, "seed": 3},
        "nature": {"kind": "iid", "seed": 9}})
    res = run_experiment(cfg, str(tmp_path / "cens"))
    assert res.ok
    zs = [r.z for r in Transcript.from_json(
        os.path.join(res.out_dir, "transcript.json")).rounds]
    assert set(zs) <= {0, 1} and 0 in zs and 1 in zs


def test_censored_rejects_adaptive_nature(tmp_path):
    cfg = config_from_dict({
        "kind": "censored", "horizon": 10, "seed": 6, "gamma": 0.5,
        "body": {"kind": "simplex", "dim": 3},
        "nature": {"kind": "mean"}})
    with pytest.raises(ConfigError):
        run_experiment(cfg, str(tmp_path / "bad"))


def test_decision_run_and_reloadable_decision_transcript(tmp_path):
    cfg = config_from_dict({
        "kind": "decision", "horizon": 30, "seed": 1,
        "body": {"kind": "simplex", "dim": 3},
        "family": {"kind": "vertex_swap"},
        "nature": {"kind": "iid", "seed": 2}})
    res = run_experiment(cfg, str(tmp_path / "dec"))
    assert res.ok
    assert res.report["identity_ok"] and res.report["slack_ok"]
    dt = DecisionTranscript.from_json(os.path.join(res.out_dir, "decision.json"))
    assert dt.sha256() == res.report["decision_sha256"]
    assert len(dt) == 30


def test_decision_linear_family_run(tmp_path):
    cfg = config_from_dict({
        "kind": "decision", "horizon": 24, "seed": 1,
        "body": {"kind": "simplex", "dim": 2},
        "family": {"kind": "linear", "count": 4},
        "nature": {"kind": "iid", "seed": 2}})
    res = run_experiment(cfg, str(tmp_path / "declin"))
    assert res.ok


def test_omni_run_from_config(tmp_path):
    rng = np.random.default_rng(3)
    cfg = config_from_dict({
        "kind": "omni", "horizon": 60, "seed": 2,
        "losses": [{"name": f"l{i}",
                    "table": rng.uniform(0, 0.4, (3, 2)).tolist()}
                   for i in range(2)],
        "rules": [{"name": f"c{j}", "mapping": [j % 3] * 4}
                  for j in range(3)]})
    res = run_experiment(cfg, str(tmp_path / "omni"))
    assert res.ok
    assert "omni_regret" in res.report


def test_self_play_identity_between_ce_and_swap(tmp_path):
    A, B = rps_game()
    assert np.array_equal(B, A.T)
    assert np.allclose(A + A.T, np.ones((3, 3)))  # constant-sum game
    dt1, dt2, rep = self_play_game(A, B, horizon=60, seed=3)
    assert rep.identity_dev <= 1e-9
    assert rep.joint.shape == (3, 3)
    assert rep.joint.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(rep.joint >= -1e-12)
    assert rep.ce_gap >= -1e-12
    blob = json.dumps(rep.jsonable())
    assert "swap_regret" in blob
    cfg = config_from_dict({"kind": "self_play", "horizon": 30, "seed": 1})
    res = run_experiment(cfg, str(tmp_path / "sp"))
    assert res.ok
    assert os.path.exists(os.path.join(res.out_dir, "player1.json"))


def test_emit_plots_svg_roundtrip(tmp_path):
    xs = np.arange(1.0, 11.0)
    series = {"alpha": (xs, xs**2), "beta": (xs, np.sqrt(xs))}
    path = tmp_path / "p.svg"
    emit_plots(series, str(path), title="demo")
    tree = ET.parse(path)
    ns = {"svg": "http://www.w3.org/2000/svg"}
    lines = tree.getroot().findall(".//svg:polyline", ns)
    assert len(lines) == 2
    seen = {}
    for pl in lines:
        desc = pl.find("svg:desc", ns)
        data = json.loads(desc.text)
        seen[data["name"]] = data
    assert np.allclose(seen["alpha"]["y"], xs**2)
    assert np.allclose(seen["beta"]["x"], xs)
    emit_plots({}, str(tmp_path / "empty.svg"))
    assert (tmp_path / "empty.svg").exists()
