"""Optimizer, training loop, evaluation and ablation runner."""
import csv
import importlib
from dataclasses import replace

import numpy as np
import pytest

from tempalign import tensor as T
from tempalign.heatmaps import pck
from tempalign.synth import SynthConfig, gen_dataset
from tempalign.tensor import Tensor
train_mod = importlib.import_module("tempalign.train")
from tempalign.train import (METRICS_HEADER, AdamState, MetricsLogger, MetricsRow, TrainConfig, TrainingAborted,
                             ablate, ablation_cells, adam_step, evaluate, read_ablation, summarize, train)


# -- adam --------------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState()
    adam_step(p, {"w": np.array([3.0, 3.0])}, st, 0.1)
    before, m0, v0 = p["w"].copy(), st.m["w"].copy(), st.v["w"].copy()
    adam_step(p, {"w": np.zeros(2)}, st, 0.1)
    np.testing.assert_allclose(st.m["w"], 0.9 * m0, rtol=1e-15)
    np.testing.assert_allclose(st.v["w"], 0.999 * v0, rtol=1e-15)
    # decayed moments keep moving the parameter; a fresh state does not
    q = {"w": np.array([1.0, -2.0])}
    adam_step(q, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(q["w"], [1.0, -2.0])
    assert not np.array_equal(p["w"], before)


@pytest.mark.parametrize("g", [0.3, -7.0, 1e-3])
def test_adam_first_step_and_asymptote(g):
    lr = 1e-2
    p = {"w": np.array([0.5])}
    st = AdamState()
    adam_step(p, {"w": np.array([g])}, st, lr)
    assert p["w"][0] - 0.5 == pytest.approx(-lr * np.sign(g), abs=1e-6)
    for _ in range(500):
        prev = p["w"][0]
        adam_step(p, {"w": np.array([g])}, st, lr)
        assert abs(p["w"][0] - prev) <= lr * (1 + 1e-6)
    assert p["w"][0] - prev == pytest.approx(-lr * np.sign(g), rel=1e-4)


def test_adam_shape_mismatch():
    with pytest.raises(T.ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)
    with pytest.raises(KeyError):
        adam_step({"w": np.zeros(2)}, {}, AdamState(), 0.1)


def test_adam_updates_tensors_in_place():
    t = Tensor(np.ones(3, np.float32), requires_grad=True)
    adam_step({"t": t}, {"t": np.ones(3)}, AdamState(), 0.5)
    assert t.dtype == np.float32
    np.testing.assert_allclose(t.data, 0.5, atol=1e-6)


# -- config ------------------------------------------------------------------

def test_variant_gating_in_config():
    base = TrainConfig()
    r = replace(base, variant="baseline").resolved()
    assert r.window == () and r.beta == 0 and not r.model.use_gtm and not r.model.use_lcm
    r = replace(base, variant="gtm").resolved()
    assert r.beta == 0 and r.model.use_gtm and not r.model.use_lcm and r.window == (-2, -1, 1, 2)
    r = replace(base, variant="gtm+lcm").resolved()
    assert r.beta == 0 and r.model.use_lcm
    r = base.resolved()
    assert r.beta == 0.1 and r.alpha == 1.0


def test_config_json_roundtrip():
    cfg = replace(TrainConfig(), variant="gtm", window=(-1, 1), seed=4)
    again = TrainConfig.from_json(cfg.to_json())
    assert again == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_json({"not_a_field": 1})


@pytest.mark.parametrize("kw", [{"variant": "nope"}, {"batch": 1}, {"window": (3,)}, {"beta": float("nan")}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        replace(TrainConfig(), **kw).validate()


def test_metrics_row_identity():
    MetricsRow(0, 0, 1.0, None, 2.0, 1.2, 0.1).check()
    with pytest.raises(AssertionError):
        MetricsLogger().log(MetricsRow(0, 0, 1.0, None, 2.0, 1.3, 0.1))


# -- training ----------------------------------------------------------------

def _csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_training_outputs_and_identity(tiny, tmp_path):
    res = train(tiny(out_dir=str(tmp_path)))
    for name in ("metrics.csv", "config.json", "best.ckpt", "last.ckpt", "summary.json"):
        assert (tmp_path / name).exists(), name
    rows = _csv_rows(tmp_path / "metrics.csv")
    assert tuple(rows[0]) == METRICS_HEADER
    assert len(rows) == 1 + res.metrics.rows[-1].step + 1
    for r in rows[1:]:
        l_h, l_mi, l_total = float(r[2]), float(r[8]), float(r[9])
        assert l_total == pytest.approx(l_h + 0.1 * l_mi, abs=1e-6)
        assert r[-1] == ""            # wall clock stays out of the CSV unless asked for
    assert rows[-1][10] != ""


def test_bit_identical_metrics(tiny, tmp_path):
    for variant in ("baseline", "full"):
        a, b = tmp_path / f"{variant}_a", tmp_path / f"{variant}_b"
        train(tiny(variant=variant, epochs=2, out_dir=str(a)))
        train(tiny(variant=variant, epochs=2, out_dir=str(b)))
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_full_with_zero_beta_matches_gtm_lcm(tiny):
    ds = gen_dataset(SynthConfig(), 20, 1000)
    a = train(tiny(variant="full", beta=0.0, epochs=2), ds)
    b = train(tiny(variant="gtm+lcm", epochs=2), ds)
    assert [r.l_h for r in a.metrics.rows] == [r.l_h for r in b.metrics.rows]
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_baseline_skips_alignment(tiny):
    probe = T.Graph()
    train(tiny(variant="baseline"), graph_probe=probe)
    assert probe.count("grid_sample") == 0 and probe.count("deform_conv") == 0
    assert probe.count("conv2d") > 0
    probe = T.Graph()
    train(tiny(variant="gtm"), graph_probe=probe)
    assert probe.count("grid_sample") > 0 and probe.count("deform_conv") == 0


def test_non_finite_loss_aborts(tiny, tmp_path, monkeypatch):
    def broken(*a, **k):
        raise T.NonFiniteError("injected")
    monkeypatch.setattr(train_mod, "heatmap_loss", broken)
    with pytest.raises(TrainingAborted, match="clip seeds"):
        train(tiny(variant="baseline", out_dir=str(tmp_path)))
    assert (tmp_path / "abort.json").exists() and (tmp_path / "last_good.ckpt").exists()


# -- evaluation --------------------------------------------------------------

def test_train_split_scores_at_least_val(tmp_path):
    # the final checkpoint: the best one is picked on val and would flatter it
    wins = 0
    for seed in range(5):
        out = tmp_path / str(seed)
        train(TrainConfig(variant="baseline", epochs=8, n_clips=100, seed=seed, out_dir=str(out)))
        tr = evaluate(out / "last.ckpt", split="train")["results"]["0.1"]["mean_pck"]
        va = evaluate(out / "last.ckpt", split="val")["results"]["0.1"]["mean_pck"]
        wins += tr >= va
    assert wins >= 4


def test_evaluate_rejects_other_dataset(tiny, tmp_path):
    train(tiny(variant="baseline", out_dir=str(tmp_path)))
    rep = evaluate(tmp_path / "best.ckpt")
    assert set(rep["results"]) == {"0.05", "0.1", "0.2"}
    with pytest.raises(ValueError, match="hash"):
        evaluate(tmp_path / "best.ckpt", data_config=tiny(data_seed=5))


def test_trivial_predictors():
    val = gen_dataset(SynthConfig(), 375, 1000).split("val")
    gt = np.stack([c.key_ann.joints for c in val])
    vis = np.stack([c.key_ann.visible for c in val])
    assert pck(gt, gt, vis)[1] == 1.0
    center = np.broadcast_to([(48 - 1) / 2, (64 - 1) / 2], gt.shape)
    assert pck(center, gt, vis)[1] < 0.5


# -- ablation ----------------------------------------------------------------

def test_ablation_cells_layout():
    cells = ablation_cells(TrainConfig(), [0, 1, 2])
    assert len(cells) == 4 * 3 + 4 * 3
    assert [c[2].window for c in cells if c[0] == "window"][::3] == [(-1,), (-1, 1), (-2, -1, 1), (-2, -1, 1, 2)]
    with pytest.raises(ValueError):
        ablate(TrainConfig(), [0, 1])


def test_ablation_is_order_free(tiny, tmp_path):
    base = tiny(n_clips=16, gtm_warmup_steps=2)
    ds = gen_dataset(base.synth, base.n_clips, base.data_seed)
    a = ablate(base, [3, 1, 2], out_dir=str(tmp_path), dataset=ds)
    b = ablate(base, [2, 3, 1], dataset=ds)
    assert a == b and len(a) == 24
    assert read_ablation(tmp_path / "ablation.csv") == a
    s = summarize(a)
    assert len(s) == 8 and all(r["n"] == 3 for r in s)
    full4 = [r["val_pck"] for r in a if r["variant"] == "full" and r["window"] == "{-2,-1,+1,+2}"]
    assert full4[:3] == full4[3:]     # the shared cell is trained once


def test_failed_runs_are_marked(tiny, monkeypatch):
    def broken(*a, **k):
        raise T.NonFiniteError("injected")
    monkeypatch.setattr(train_mod, "heatmap_loss", broken)
    base = tiny(n_clips=16, gtm_warmup_steps=0)
    rows = ablate(base, [0, 1, 2])
    assert len(rows) == 24 and all(r["status"] == "failed" for r in rows)
