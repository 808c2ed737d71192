"""Heatmap rendering, head, losses, decoding and PCK."""
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tempalign.checks import head_check
from tempalign.heatmaps import (DetectionHead, PoseAnnotation, decode_heatmap, heatmap_loss, pck, pck_report,
                                render_heatmap, to_heatmap_coords, to_image_coords, total_loss, write_report)
from tempalign.tensor import NonFiniteError, Tensor


def test_render_gaussian_values():
    hm = render_heatmap(PoseAnnotation([[3, 4]], [True]), 10, 10, sigma=1.0)[0]
    assert hm[4, 3] == 1.0
    for v, u in ((3, 3), (5, 3), (4, 2), (4, 4)):
        assert hm[v, u] == pytest.approx(np.exp(-0.5), abs=1e-15)


def test_render_visibility_and_independence():
    ann = PoseAnnotation([[2, 2], [7, 5], [1, 1]], [True, True, False])
    hm = render_heatmap(ann, 8, 9, sigma=1.5)
    assert not hm[2].any()
    assert hm[0].max() == hm[1].max() == 1.0
    alone = render_heatmap(PoseAnnotation([[7, 5]], [True]), 8, 9, sigma=1.5)[0]
    np.testing.assert_array_equal(hm[1], alone)


def test_render_errors():
    with pytest.raises(ValueError):
        render_heatmap(PoseAnnotation([[20, 2]], [True]), 8, 8)
    with pytest.raises(ValueError):
        render_heatmap(PoseAnnotation([[2, 2]], [True]), 8, 8, sigma=0)
    render_heatmap(PoseAnnotation([[20, 2]], [False]), 8, 8)   # invisible joints may sit anywhere


def test_coordinate_scaling_roundtrip(rng):
    xy = rng.uniform(0, 60, (7, 2))
    np.testing.assert_allclose(to_image_coords(to_heatmap_coords(xy)), xy, atol=1e-12)
    assert to_heatmap_coords([1.5, 5.5]).tolist() == [0.0, 1.0]


def test_head_zero_and_shape(rng):
    head = DetectionHead(32, 5, rng=np.random.default_rng(0))
    out = head(Tensor(rng.standard_normal((1, 32, 12, 9)).astype(np.float32)))
    assert out.shape == (1, 5, 12, 9)
    for p in head.parameters().values():
        p.data[...] = 0
    assert not head(Tensor(np.zeros((1, 32, 12, 9), np.float32))).data.any()


def test_head_gradients():
    res = head_check()
    assert res.passed, res.line()


def test_heatmap_loss_examples(rng):
    h = rng.uniform(0, 1, (2, 3, 4, 5))
    vis = np.ones((2, 3), bool)
    assert heatmap_loss(Tensor(h), h, vis).item() == 0.0
    assert heatmap_loss(Tensor(h + 1), h, vis).item() == pytest.approx(1.0, abs=1e-12)
    pred = h.copy()
    pred[0, 1] += 5.0
    mask = vis.copy()
    mask[0, 1] = False
    assert heatmap_loss(Tensor(pred), h, mask).item() == 0.0
    pred[0, 0, 0, 0] += 1.0
    n = 5 * 20   # five visible channels of 4x5
    assert heatmap_loss(Tensor(pred), h, mask).item() == pytest.approx(1.0 / n, abs=1e-12)
    with pytest.raises(ValueError):
        heatmap_loss(Tensor(h), h, np.zeros((2, 3), bool))


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 2))
def test_total_loss(lh, lmi, beta):
    assert total_loss(lh, lmi, beta) == pytest.approx(lh + beta * lmi)
    assert total_loss(lh, lmi, 0.0) == lh
    assert total_loss(lh, 0.0, beta) == lh


def test_total_loss_examples():
    assert total_loss(1.0, 2.0, 0.1) == pytest.approx(1.2, abs=1e-15)
    t = total_loss(Tensor(np.array(1.0)), Tensor(np.array(2.0)), 0.1)
    assert t.item() == pytest.approx(1.2, abs=1e-15)
    with pytest.raises(NonFiniteError):
        total_loss(1.0, float("nan"), 0.1)


def test_decode_roundtrip_and_ties(rng):
    joints = np.stack([rng.integers(3, 13, 4), rng.integers(3, 9, 4)], axis=1)
    hm = render_heatmap(PoseAnnotation(joints, None), 12, 16, sigma=1.5)
    np.testing.assert_array_equal(decode_heatmap(hm), joints)
    assert decode_heatmap(np.ones((1, 5, 5))).tolist() == [[0.0, 0.0]]
    m = np.zeros((1, 5, 5))
    m[0, 1, 1] = m[0, 2, 2] = 3.0
    assert decode_heatmap(m).tolist() == [[1.0, 1.0]]


def test_pck_examples():
    gt = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], float)   # diagonal 14.14
    vis = np.ones(4, bool)
    assert pck(gt, gt, vis)[1] == 1.0
    assert pck(gt + 5, gt, vis)[1] == 0.0
    pred = gt.copy()
    pred[3] += 3.0
    per_joint, mean = pck(pred, gt, vis, 0.1)
    assert mean == 0.75 and per_joint.tolist() == [1, 1, 1, 0]
    vis[3] = False
    assert pck(pred, gt, vis)[1] == 1.0
    with pytest.raises(ValueError):
        pck(gt, np.zeros_like(gt), vis)


@given(st.integers(0, 1000))
def test_pck_bounded_and_monotone(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 50, (6, 4, 2))
    pred = gt + rng.normal(0, 5, gt.shape)
    vis = rng.uniform(size=(6, 4)) > 0.2
    vis[:, 0] = True
    vals = [pck(pred, gt, vis, t)[1] for t in (0.02, 0.05, 0.1, 0.2, 0.5)]
    assert all(0 <= v <= 1 for v in vals)
    assert vals == sorted(vals)


def test_report(tmp_path):
    gt = np.array([[[0, 0], [10, 10]]], float)
    rep = pck_report(gt, gt, np.ones((1, 2), bool))
    assert rep["sample_count"] == 1 and rep["results"]["0.1"]["mean_pck"] == 1.0
    write_report(rep, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text()) == rep
