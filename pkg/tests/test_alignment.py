"""Backbone stub, global transformation, local calibration, aggregation."""
import numpy as np
import pytest

from tempalign import tensor as T
from tempalign.alignment import (ModelConfig, PoseModel, aggregate, config_hash, global_transform,
                                 load_checkpoint, save_checkpoint)
from tempalign.checks import alignment_bench, end_to_end_check
from tempalign.tensor import ShapeError, Tensor

SMALL = ModelConfig(channels=8, backbone_widths=(4, 8, 8), gtm_hidden=8, lcm_blocks=1, n_joints=3,
                    dtype="float64")


@pytest.fixture(scope="module")
def model():
    return PoseModel(SMALL, seed=3)


def _feat(rng, n=2, c=8, h=4, w=3):
    return Tensor(rng.standard_normal((n, c, h, w)))


def test_zero_stub_gives_zero_feature():
    m = PoseModel(SMALL, seed=0)
    for p in m.backbone.parameters().values():
        p.data[...] = 0
    z = m.extract_features(np.random.default_rng(0).standard_normal((3, 16, 12)))
    assert z.shape == (8, 4, 3) and not z.data.any()


def test_features_deterministic_and_shaped(rng):
    img = rng.uniform(0, 1, (3, 64, 48))
    m = PoseModel(ModelConfig(), seed=0)
    a, b = m.extract_features(img).data, m.extract_features(img.copy()).data
    assert a.shape == (32, 16, 12)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        m.extract_features(rng.uniform(0, 1, (3, 30, 48)))


@pytest.mark.parametrize("antialias", [True, False])
def test_backbone_downsamples_by_four(antialias, rng):
    cfg = ModelConfig(channels=8, backbone_widths=(4, 8, 8), antialias=antialias)
    z = PoseModel(cfg, seed=1).extract_features(rng.uniform(0, 1, (2, 3, 32, 24)))
    assert z.shape == (2, 8, 8, 6)


def test_affine_estimate_is_identity_at_init(model, rng):
    for _ in range(3):
        th = model.estimate_affine(_feat(rng, 1)[0], _feat(rng, 1)[0]).data
        np.testing.assert_array_equal(th, [[1, 0, 0], [0, 1, 0]])
    with pytest.raises(ShapeError):
        model.estimate_affine(_feat(rng), _feat(rng, h=5))


def test_identity_transform_is_exact(rng):
    z = _feat(rng)
    out = global_transform(z, Tensor(np.broadcast_to(np.eye(2, 3), (2, 2, 3)).copy()))
    np.testing.assert_allclose(out.data, z.data, atol=1e-14)


def test_translation_of_constant_feature():
    z = Tensor(np.full((1, 2, 5, 6), 3.0))
    # one pixel to the right: output column j reads input column j+1
    out = global_transform(z, Tensor(np.array([[[1, 0, 2 / 6], [0, 1, 0]]]))).data
    np.testing.assert_allclose(out[..., :-1], 3.0, atol=1e-12)
    np.testing.assert_allclose(out[..., -1], 0.0, atol=1e-12)


def test_scale_two_magnifies_about_center():
    z = np.zeros((1, 1, 9, 9))
    z[0, 0, 4, 5] = 1.0          # one pixel right of center
    out = global_transform(Tensor(z), Tensor(np.array([[[0.5, 0, 0], [0, 0.5, 0]]]))).data[0, 0]
    assert np.unravel_index(out.argmax(), out.shape) == (4, 6)   # two pixels right
    assert out.max() == pytest.approx(1.0)


def test_degenerate_calibration_is_identity(model, rng):
    zb, zk = _feat(rng, 1)[0], _feat(rng, 1)[0]
    c = zb.shape[0]
    saved = model.lcm.weight.data.copy(), model.lcm.bias.data.copy()
    try:
        w = np.zeros((c, c, 3, 3))
        w[np.arange(c), np.arange(c), 1, 1] = 1.0
        model.lcm.weight.data, model.lcm.bias.data = w, np.zeros(c)
        field = (Tensor(np.zeros((18,) + zb.shape[1:])), Tensor(np.ones((9,) + zb.shape[1:])))
        np.testing.assert_allclose(model.local_calibrate(zb, zk, field).data, zb.data, atol=1e-14)
    finally:
        model.lcm.weight.data, model.lcm.bias.data = saved


def test_calibration_at_init(model, rng):
    zb, zk = _feat(rng), _feat(rng)
    out = model.local_calibrate(zb, zk).data
    ref = 0.5 * T.conv2d(zb, model.lcm.weight, model.lcm.bias, 1, 1).data + 0.5 * model.lcm.bias.data[:, None, None]
    np.testing.assert_allclose(out, ref, atol=1e-12)
    np.testing.assert_allclose(out, zb.data, atol=1e-12)   # the kernel starts at 2 x identity


def test_key_feature_reaches_output_only_through_field(model, rng):
    zb = _feat(rng)
    field = model.lcm.estimate_field(zb, _feat(rng))
    frozen = tuple(Tensor(f.data) for f in field)
    a = model.local_calibrate(zb, _feat(rng), frozen).data
    b = model.local_calibrate(zb, _feat(rng), frozen).data
    np.testing.assert_array_equal(a, b)


def test_aggregate(rng):
    zt = _feat(rng)
    assert aggregate(zt, {}) is zt
    sup = {d: _feat(rng) for d in (-2, -1, 1, 2)}
    shuffled = {d: sup[d] for d in (2, -1, 1, -2)}
    assert aggregate(zt, sup).data.tobytes() == aggregate(zt, shuffled).data.tobytes()
    half = Tensor(-zt.data / 2)
    np.testing.assert_allclose(aggregate(zt, {-1: half, 1: half}).data, 0.0, atol=1e-15)
    with pytest.raises(ShapeError):
        aggregate(zt, {1: _feat(rng, h=5)})


def _frames(rng, b=2, window=(-2, -1, 1, 2)):
    key = rng.uniform(0, 1, (b, 3, 16, 12))
    return key, {d: rng.uniform(0, 1, (b, 3, 16, 12)) for d in window}


def test_pipeline_windows(model, rng):
    key, sup = _frames(rng)
    z0, f0 = model.forward_pipeline(key, sup, ())
    np.testing.assert_array_equal(z0.data, f0.z_t.data)
    z4, f4 = model.forward_pipeline(key, sup, (-2, -1, 1, 2))
    assert sorted(f4.aligned) == [-2, -1, 1, 2] and len(f4.thetas) == 4
    with pytest.raises(KeyError, match="delta=3"):
        model.forward_pipeline(key, sup, (1, 3))


def test_single_identical_support_at_init(model, rng):
    key, _ = _frames(rng)
    z, f = model.forward_pipeline(key, {-1: key.copy()}, (-1,))
    zt = f.z_t.data
    ref = zt + 0.5 * T.conv2d(f.z_t, model.lcm.weight, None, 1, 1).data + model.lcm.bias.data[:, None, None]
    np.testing.assert_allclose(z.data, ref, atol=1e-12)


def test_variant_gating_skips_alignment(rng):
    m = PoseModel(ModelConfig(**{**SMALL.__dict__, "use_gtm": False, "use_lcm": False}), seed=0)
    key, sup = _frames(rng)
    with T.Graph() as g:
        m.forward_pipeline(key, sup, (-1, 1))
    assert g.count("grid_sample") == 0 and g.count("deform_conv") == 0
    assert not any(k.startswith(("gtm.", "lcm.")) for k in m.trainable())


def test_end_to_end_gradients():
    res = end_to_end_check()
    assert res.passed, res.line()


def test_checkpoint_roundtrip(tmp_path, model):
    params = model.state_dict()
    meta = {"config_hash": config_hash(SMALL.to_json()), "seed": 3}
    save_checkpoint(tmp_path / "m.ckpt", params, meta)
    loaded, manifest = load_checkpoint(tmp_path / "m.ckpt")
    assert manifest["seed"] == 3 and manifest["config_hash"] == meta["config_hash"]
    assert set(loaded) == set(params)
    for k in params:
        assert loaded[k].tobytes() == params[k].tobytes()
    other = PoseModel(SMALL, seed=99)
    other.load_state_dict(loaded)
    assert all(np.array_equal(other.state_dict()[k], params[k]) for k in params)


def test_config_hash_sensitivity():
    a = config_hash(SMALL.to_json())
    assert a == config_hash(SMALL.to_json())
    assert a != config_hash(ModelConfig(channels=9).to_json())


def test_trained_regressor_recovers_translation():
    (row,) = alignment_bench(seeds=[7], n_train=300, n_val=60, steps=600, log=None)
    assert row.t_within >= 0.8
