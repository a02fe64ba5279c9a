import math

import numpy as np
import pytest

from m3dv.denoising import (
    NoiseConfig, NoisyObject, NoisyQueryEmbedder, VariationalParams, draw_noisy_sets, embed_draw, kl_loss,
    make_noisy_query_sets, perturb, sinusoidal_encoding, variational_sample,
)
from m3dv.geometry import Box2D
from m3dv.kitti_io import Scene, generate_scene
from m3dv.numeric import Tensor, check_gradients, ops

CATS = ("Car", "Pedestrian", "Cyclist")


@pytest.fixture
def gt():
    return generate_scene(12, 1).objects[0]


def test_zero_noise_is_identity(gt):
    n = perturb(gt, NoiseConfig(0.0, 0.0), np.random.default_rng(0))
    assert n.category == gt.category and n.center_proj == gt.center_proj
    assert n.lrtb == tuple(gt.box2d.as_array()) and n.dims == gt.dims and n.depth == gt.depth
    assert n.orientation_bin == gt.orientation_bin and n.orientation_residual == gt.orientation_residual


def test_wide_box_is_clipped_at_one(gt):
    from dataclasses import replace
    wide = replace(gt, box2d=Box2D(0.98, 0.0, 0.1, 0.1))
    rng = np.random.default_rng(1)
    ls = [perturb(wide, NoiseConfig(0.4, 0.0), rng).lrtb[0] for _ in range(200)]
    assert max(ls) == 1.0 and min(ls) >= 0.0


def test_forced_flip_always_changes(gt):
    rng = np.random.default_rng(2)
    for _ in range(500):
        n = perturb(gt, NoiseConfig(0.0, 1.0), rng)
        assert n.category != gt.category
        assert n.orientation_bin != gt.orientation_bin
        assert n.orientation_residual == gt.orientation_residual


def test_flip_rate_and_uniform_replacement(gt):
    rng = np.random.default_rng(3)
    cfg = NoiseConfig(0.4, 0.2)
    draws = [perturb(gt, cfg, rng) for _ in range(100_000)]
    cat_rate = np.mean([d.category != gt.category for d in draws])
    bin_rate = np.mean([d.orientation_bin != gt.orientation_bin for d in draws])
    assert abs(cat_rate - 0.2) <= 0.01 and abs(bin_rate - 0.2) <= 0.01
    others = [d.category for d in draws if d.category != gt.category]
    counts = [others.count(c) for c in CATS if c != gt.category]
    assert abs(counts[0] - counts[1]) / len(others) < 0.03


def test_depth_noise_bound(gt):
    rng = np.random.default_rng(4)
    cfg = NoiseConfig(0.4, 0.2)
    bound = 0.4 * gt.dims[0] / 2
    dev = max(abs(perturb(gt, cfg, rng).depth - gt.depth) for _ in range(100_000))
    # The only slack allowed is the rounding of d + delta itself.
    assert dev <= bound + math.ulp(gt.depth)
    assert dev > 0.99 * bound


def test_clip_idempotence(gt):
    rng = np.random.default_rng(5)
    cfg = NoiseConfig(0.4, 0.0)
    for _ in range(200):
        n = perturb(gt, cfg, rng)
        again = NoisyObject(n.category, n.center_proj, tuple(np.clip(n.lrtb, 0, 1)), n.dims, n.depth,
                            n.orientation_bin, n.orientation_residual)
        assert all(0.0 <= v <= 1.0 for v in again.lrtb)


def test_noise_config_validation():
    for bad in (dict(lambda_C=-0.1), dict(lambda_D=1.5), dict(C=0)):
        with pytest.raises(ValueError):
            NoiseConfig(**bad)


def test_sinusoid_of_zero_alternates():
    enc = sinusoidal_encoding(np.array(0.0), 8)
    assert np.array_equal(enc, [0, 1, 0, 1, 0, 1, 0, 1])


def test_embedding_is_deterministic(gt):
    emb = NoisyQueryEmbedder(16, CATS, 12, np.random.default_rng(0), variational=False)
    n = perturb(gt, NoiseConfig(), np.random.default_rng(0))
    a, _ = emb([n, n])
    assert np.array_equal(a.data[0], a.data[1])
    assert len(emb.mlp.layers) == 3


def test_embedding_gradcheck(gt):
    emb = NoisyQueryEmbedder(8, CATS, 12, np.random.default_rng(1), variational=True)
    objs = [perturb(gt, NoiseConfig(), np.random.default_rng(i)) for i in range(3)]
    eps = np.random.default_rng(9).standard_normal((3, 8))

    def f():
        q, p = emb(objs, eps)
        return ops.add(ops.sum(ops.mul(q, q)), kl_loss(p))
    assert check_gradients(f, emb.parameters()) <= 1e-6


# -- variational pieces ---------------------------------------------------------

def test_kl_closed_forms():
    z = np.zeros((1, 1))
    assert kl_loss(VariationalParams(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 3))))).item() == 0.0
    assert kl_loss(VariationalParams(Tensor(np.ones((1, 1))), Tensor(z))).item() == pytest.approx(0.5, abs=1e-15)
    val = kl_loss(VariationalParams(Tensor(z), Tensor(np.ones((1, 1))))).item()
    assert val == pytest.approx(0.5 * (math.e - 2), abs=1e-15)
    assert val == pytest.approx(0.3591, abs=1e-4)


def test_kl_nonnegative_and_zero_only_at_standard():
    rng = np.random.default_rng(6)
    for _ in range(50):
        mu, lv = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert kl_loss(VariationalParams(Tensor(mu), Tensor(lv))).item() > 0


def test_vanishing_sigma_returns_mu():
    rng = np.random.default_rng(7)
    mu = rng.normal(size=(4, 6))
    eps = rng.standard_normal((4, 6))
    z = variational_sample(VariationalParams(Tensor(mu), Tensor(np.full((4, 6), -10.0))), eps=eps)
    assert np.linalg.norm(z.data - mu) <= 1e-2 * np.linalg.norm(eps)


def test_sample_reproducible_and_mean():
    mu = np.array([[0.3, -1.2]])
    lv = np.array([[0.5, -0.7]])
    p = VariationalParams(Tensor(np.repeat(mu, 100_000, 0)), Tensor(np.repeat(lv, 100_000, 0)))
    z1 = variational_sample(p, np.random.default_rng(8)).data
    z2 = variational_sample(p, np.random.default_rng(8)).data
    assert np.array_equal(z1, z2)
    sigma = np.exp(lv / 2)
    assert np.all(np.abs(z1.mean(0) - mu) <= 3 * sigma / math.sqrt(100_000))


def test_sample_gradients_flow_to_mu_and_log_var():
    rng = np.random.default_rng(10)
    mu = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    lv = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    eps = rng.standard_normal((2, 3))
    f = lambda: ops.sum(ops.mul(variational_sample(VariationalParams(mu, lv), eps=eps), 1.0))  # noqa: E731
    assert check_gradients(f, [mu, lv]) <= 1e-6


# -- query sets ---------------------------------------------------------------------

def test_query_set_shapes_and_alignment():
    scene = generate_scene(3, 2)
    emb = NoisyQueryEmbedder(16, CATS, 12, np.random.default_rng(0), variational=True)
    qs = make_noisy_query_sets(scene, 11, 5, NoiseConfig(C=5), True, emb)
    assert qs.queries.shape == (11, 10, 16)
    assert qs.draw.anchors.shape == (11, 10, 6)
    assert len(qs.params) == 11
    for g in range(11):
        for j in range(5):
            for k in range(2):
                assert qs.draw.objects[g][j * 2 + k].source == k
    assert qs.targets(scene)[3] is scene.objects[1]


def test_autoencoder_mode_is_deterministic_embedding():
    scene = generate_scene(4, 2)
    emb = NoisyQueryEmbedder(16, CATS, 12, np.random.default_rng(0), variational=False)
    draw = draw_noisy_sets(scene, 2, NoiseConfig(C=2), np.random.default_rng(1))
    qs = embed_draw(draw, emb)
    direct = emb.embed(draw.objects[1])
    assert np.array_equal(qs.queries.data[1], direct.data) and qs.params == []


def test_empty_scene_skips_denoising():
    scene = Scene([])
    emb = NoisyQueryEmbedder(16, CATS, 12, np.random.default_rng(0), variational=False)
    qs = make_noisy_query_sets(scene, 3, 2, NoiseConfig(C=2), False, emb)
    assert qs.queries is None and qs.draw.empty
