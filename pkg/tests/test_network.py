import numpy as np
import pytest

from mae_search.checkpoint import ConfigMismatchError
from mae_search.network import (
    NetworkConfig,
    calibration,
    forward_scene,
    fuse_embed,
    ga_block,
    init_params,
    lf_block,
    load_model,
    norm_aware_split,
    save_model,
    stem_forward,
    image_tensor,
)
from mae_search.scene import SceneConfig, make_identity_pool, render_scene
from mae_search.tensor import ConfigurationError, DimensionError, Tensor, conv2d, relu, batchnorm2d

TINY = dict(c1=8, c3=3, c5=4, roi=(4, 4), embed_dim=4, stem_stride=2)


def _scene(seed=0, h=32, w=32):
    pool = make_identity_pool(4, seed)
    return render_scene(SceneConfig(height=h, width=w, person_height=(16, 30), min_persons=1, max_persons=2), pool, [seed, 1], "s")


def test_ga_block_is_identity_mask_free_under_all_ones():
    cfg = NetworkConfig(**TINY)
    p = init_params(cfg)
    rng = np.random.default_rng(1)
    f1 = Tensor(rng.standard_normal((8, 6, 7)))
    out = ga_block(f1, np.ones((6, 7)), p)
    # the same computation with the masking step removed
    def c(name, x):
        w = p[f"{name}.w"]
        return conv2d(x, w, p[f"{name}.b"], 1, w.shape[-1] // 2)
    ref = relu(batchnorm2d(c("ga.g3", relu(c("ga.g2", c("ga.g1", f1)))), p.norms["ga.bn"]))
    assert np.array_equal(out.data, ref.data)


def test_ga_block_mask_zeroes_feed_the_convs():
    cfg = NetworkConfig(**TINY)
    p = init_params(cfg)
    p.set_training(False)
    f1 = Tensor(np.random.default_rng(2).standard_normal((8, 4, 4)))
    zero = ga_block(f1, np.zeros((4, 4)), p)
    blank = ga_block(Tensor(np.zeros((8, 4, 4))), np.ones((4, 4)), p)
    assert np.array_equal(zero.data, blank.data)
    with pytest.raises(DimensionError):
        ga_block(f1, np.ones((3, 4)), p)


@pytest.mark.parametrize("k", [3, 4, 5])
def test_local_block_input_has_k_times_c3_channels(k):
    cfg = NetworkConfig(**{**TINY, "k": k})
    p = init_params(cfg)
    assert p["lf.l1.w"].shape[1] == k * 3 == cfg.lf_in
    rng = np.random.default_rng(k)
    f3 = Tensor(rng.standard_normal((2, 3, 4, 4)))
    masks = (rng.random((2, k, 4, 4)) < 0.5).astype(float)
    f5, parts = lf_block(f3, masks, p, return_parts=True)
    assert parts["F4"].shape == (2, k * 3, 4, 4)
    assert f5.shape == (2, 4, 4, 4)
    with pytest.raises(DimensionError):
        lf_block(f3, masks[:, :-1], p)


@pytest.mark.parametrize("k", [3, 4, 5])
def test_published_widths(k):
    cfg = NetworkConfig.paper(k=k)
    assert cfg.lf_in == k * 154
    assert cfg.c5 == 256 and cfg.embed_dim == 128
    assert NetworkConfig.paper().lf_in == 770


def test_residual_identity_with_zeroed_middle_branch():
    cfg = NetworkConfig(**TINY)
    p = init_params(cfg)
    for name in ("lf.l4", "lf.l5", "lf.l6"):
        p[f"{name}.w"].data[:] = 0.0
        p[f"{name}.b"].data[:] = 0.0
    p.set_training(False)
    bn = p.norms["lf.bn2"]
    bn.running_mean[:] = 0.0
    bn.running_var[:] = 1.0
    bn.beta.data[:] = 0.0
    rng = np.random.default_rng(3)
    f3 = Tensor(rng.standard_normal((2, 3, 4, 4)))
    _, parts = lf_block(f3, (rng.random((2, 5, 4, 4)) < 0.5).astype(float), p, return_parts=True)
    assert np.array_equal(parts["F4''"].data, parts["F4'"].data)


def test_zero_local_features_leave_only_biases():
    cfg = NetworkConfig(**TINY)
    p = init_params(cfg)
    p.set_training(False)
    zeros = Tensor(np.zeros((1, 3, 4, 4)))
    f5 = lf_block(zeros, np.ones((1, 5, 4, 4)), p)
    # every spatial position sees the same input, so the output is spatially constant
    assert np.allclose(f5.data, f5.data[..., :1, :1])


def test_fuse_concatenates_global_then_local():
    g = Tensor(np.arange(4.0)[None])
    l = Tensor(np.arange(4.0, 8.0)[None])
    np.testing.assert_array_equal(fuse_embed(g, l).data, [np.arange(8.0)])
    with pytest.raises(DimensionError):
        fuse_embed(g, Tensor(np.zeros((1, 3))))


def test_norm_aware_split():
    rec = norm_aware_split([3.0, 4.0], (1.0, 5.0))
    assert rec.r == 5.0
    np.testing.assert_array_equal(rec.e_hat, [0.6, 0.8])
    assert rec.det_score == 0.5
    with pytest.raises(ValueError):
        norm_aware_split([0.0, 0.0], (1.0, 0.0))


def test_eval_detection_score_matches_calibration():
    cfg = NetworkConfig(**TINY)
    p = init_params(cfg)
    bn = p.norms["calib.bn"]
    bn.running_mean[:] = 2.0
    bn.running_var[:] = 0.5
    bn.gamma.data[:] = 1.5
    bn.beta.data[:] = -0.3
    p.set_training(False)
    s = _scene()
    out = forward_scene(s, [pp.box for pp in s.persons], p, cfg)
    cal = calibration(p)
    for rec in out.records():
        assert rec.det_score == pytest.approx(norm_aware_split(rec.e, cal).det_score, rel=1e-12)


def test_forward_shapes_and_variants():
    s = _scene()
    boxes = [pp.box for pp in s.persons]
    for kw, dim in [({}, 8), ({"use_local": False}, 4), ({"use_global_mask": False}, 8)]:
        cfg = NetworkConfig(**{**TINY, **kw})
        out = forward_scene(s, boxes, init_params(cfg), cfg, keep=True)
        assert out.e.shape == (len(boxes), dim)
        np.testing.assert_allclose(np.linalg.norm(out.e_hat.data, axis=1), 1.0, rtol=1e-12)
        if kw.get("use_global_mask") is False:
            assert out.intermediates["global_mask"].all()


def test_stem_rejects_indivisible_image_and_bad_configs():
    cfg = NetworkConfig(**{**TINY, "stem_stride": 4})
    p = init_params(cfg)
    assert stem_forward(image_tensor(np.zeros((3, 32, 32), np.uint8)), p, cfg).shape == (8, 8, 8)
    with pytest.raises(ConfigurationError):
        stem_forward(image_tensor(np.zeros((3, 30, 32), np.uint8)), p, cfg)
    for bad in ({"stem_stride": 3}, {"c1": 2}, {"roi": (5, 4)}, {"embed_dim": 1}):
        with pytest.raises(ConfigurationError):
            NetworkConfig(**{**TINY, **bad}).validate()


def test_init_is_seeded():
    a = init_params(NetworkConfig(**TINY, seed=4))
    b = init_params(NetworkConfig(**TINY, seed=4))
    c = init_params(NetworkConfig(**TINY, seed=5))
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.tensors)
    assert not np.array_equal(a["stem.conv1.w"].data, c["stem.conv1.w"].data)


def test_save_load_round_trip_and_mismatch(tmp_path):
    cfg = NetworkConfig(**TINY)
    p = init_params(cfg)
    p.norms["head.bn"].running_mean[:] = 0.25
    save_model(tmp_path / "m.ckpt", p, cfg)
    q, stored, meta = load_model(tmp_path / "m.ckpt", cfg)
    assert stored == cfg and meta["kind"] == "model"
    for n in p.tensors:
        assert np.array_equal(p[n].data, q[n].data)
    assert np.array_equal(q.norms["head.bn"].running_mean, p.norms["head.bn"].running_mean)
    with pytest.raises(ConfigMismatchError):
        load_model(tmp_path / "m.ckpt", NetworkConfig(**{**TINY, "k": 3}))
