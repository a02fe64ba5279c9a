import json

import numpy as np
import pytest

from m3dv.denoising import NoiseConfig, draw_noisy_sets
from m3dv.kitti_io import generate_scene, generate_scenes
from m3dv.matching import Assignment, MatchingConfig, TargetSet
from m3dv.model import (
    LossWeights, Mono3DV, TrainConfig, TrainingDiverged, VariantFlags, desk_decoder, detection_loss,
    distillation_loss, fix_targets, forward_scene, overall_loss, predict, reconstruction_loss, scene_loss, train,
)
from m3dv.numeric import Replay, Tape, Tensor, check_gradients, no_grad, numeric_gradients, ops, param
from m3dv.numeric import replay_numeric_gradients

CFG = desk_decoder(dim=16, ffn_dim=16, heads=2, G=2, N=4, C=2, feat_tokens=8)


def _setup(seed=0, K=2, variational=True):
    scene = generate_scene(seed + 1, K)
    model = Mono3DV(CFG, np.random.default_rng(seed), variational)
    draw = draw_noisy_sets(scene, CFG.G, NoiseConfig(C=CFG.C, categories=CFG.categories), np.random.default_rng(seed),
                           CFG.dim if variational else None)
    return scene, model, draw


def test_forward_shapes():
    scene, model, draw = _setup()
    outs = forward_scene(model, scene, draw).outs
    assert len(outs) == 3
    T_l, T_n = CFG.G * CFG.N, CFG.G * CFG.C * scene.K
    for o in outs:
        assert o.q_l.shape == (T_l, CFG.dim)
        assert o.q_n.shape == (T_n, CFG.dim)
    p = outs[-1].preds_l
    assert p["logits"].shape == (T_l, CFG.n_classes + 1)
    assert p["center"].shape == (T_l, 2) and p["lrtb"].shape == (T_l, 4)
    assert p["dims"].shape == (T_l, 3) and p["depth"].shape == (T_l,)
    assert p["bin_logits"].shape == p["residual"].shape == (T_l, CFG.num_bins)
    assert outs[-1].preds_n["center"].shape == (T_n, 2)


def test_feature_shape_mismatch():
    scene, model, _ = _setup()
    with pytest.raises(ValueError):
        model.forward(np.zeros((CFG.feat_tokens + 1, CFG.dim)))


def test_noisy_track_never_reaches_learnable_outputs():
    scene, model, draw = _setup()
    with no_grad():
        base = forward_scene(model, scene, draw).outs
        other = draw_noisy_sets(scene, CFG.G, NoiseConfig(C=CFG.C, lambda_C=1.0, lambda_D=0.5,
                                                          categories=CFG.categories),
                                np.random.default_rng(99), CFG.dim)
        moved = forward_scene(model, scene, other).outs
        plain = forward_scene(model, scene, None).outs
    for a, b, c in zip(base, moved, plain):
        assert np.array_equal(a.q_l.data, b.q_l.data)
        assert np.array_equal(a.q_l.data, c.q_l.data)
        for k in a.preds_l:
            assert np.array_equal(a.preds_l[k].data, c.preds_l[k].data)


def test_forward_deterministic():
    a = _setup(3)
    b = _setup(3)
    oa = forward_scene(a[1], a[0], a[2]).outs[-1]
    ob = forward_scene(b[1], b[0], b[2]).outs[-1]
    assert np.array_equal(oa.q_l.data, ob.q_l.data) and np.array_equal(oa.q_n.data, ob.q_n.data)


def _perfect_preds(targets: TargetSet, n_classes: int, num_bins: int):
    T = len(targets)
    logits = np.full((T, n_classes + 1), -20.0)
    logits[np.arange(T), targets.labels] = 20.0
    bins = np.full((T, num_bins), -30.0)
    bins[np.arange(T), targets.bins] = 30.0
    residual = np.zeros((T, num_bins))
    residual[np.arange(T), targets.bins] = targets.residual
    return {"logits": Tensor(logits), "center": Tensor(targets.center.copy()), "lrtb": Tensor(targets.lrtb.copy()),
            "dims": Tensor(targets.dims.copy()), "depth": Tensor(targets.depth.copy()),
            "bin_logits": Tensor(bins), "residual": Tensor(residual)}


def test_perfect_predictions_zero_regression():
    scene = generate_scene(4, 3)
    gts = TargetSet.from_objects(scene.objects, CFG.categories)
    preds = _perfect_preds(gts, CFG.n_classes, CFG.num_bins)
    assign = Assignment([(i, i) for i in range(3)], [], 0.0)
    _, parts = detection_loss(preds, assign, gts, CFG.n_classes)
    for k in ("center", "lrtb", "dims", "depth"):
        assert parts[k] == 0.0
    assert abs(parts["giou"]) < 1e-12 and parts["orien"] < 1e-12
    _, parts = reconstruction_loss(preds, gts, CFG.n_classes)
    assert parts["center"] == 0.0 and parts["depth"] == 0.0


def test_center_term_is_linear_in_error():
    scene = generate_scene(4, 2)
    gts = TargetSet.from_objects(scene.objects, CFG.categories)
    assign = Assignment([(0, 0), (1, 1)], [], 0.0)
    terms = []
    for scale in (1.0, 2.0):
        preds = _perfect_preds(gts, CFG.n_classes, CFG.num_bins)
        preds["center"] = Tensor(gts.center + scale * np.array([[0.01, -0.02], [0.03, 0.0]]))
        terms.append(detection_loss(preds, assign, gts, CFG.n_classes)[1]["center"])
    assert terms[1] == pytest.approx(2 * terms[0], rel=1e-12)


def test_unmatched_queries_only_see_background():
    scene = generate_scene(4, 1)
    gts = TargetSet.from_objects(scene.objects, CFG.categories)
    preds = _perfect_preds(gts.take(np.array([0, 0])), CFG.n_classes, CFG.num_bins)
    preds["center"] = Tensor(np.array([gts.center[0], [0.9, 0.9]]))
    assign = Assignment([(0, 0)], [1], 0.0)
    _, parts = detection_loss(preds, assign, gts, CFG.n_classes)
    assert parts["center"] == 0.0
    assert parts["cls"] > 0  # row 1 is confidently foreground but labelled background


def test_distillation_examples():
    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(size=(3, 4)))
    rows, w = np.arange(3), np.ones(3)
    assert float(distillation_loss([q, q], lambda x: x, rows, w).data) == 0.0
    far = Tensor(q.data + 100.0)
    gated = distillation_loss([far, q], lambda x: x, rows, np.array([0.0, 1.0, 0.0]))
    only_row1 = distillation_loss([far, q], lambda x: x, rows[1:2], np.array([1.0]), norm=3.0)
    assert float(gated.data) == float(only_row1.data)
    with pytest.raises(ValueError):
        distillation_loss([q], lambda x: x, rows, w)


def test_distillation_smooth_l1_boundary():
    target = Tensor(np.zeros((1, 2)))
    for d, expected in ((0.5, 0.125), (1.0, 0.5), (2.0, 1.5)):
        student = Tensor(np.full((1, 2), d))
        val = distillation_loss([student, target], lambda x: x, np.array([0]), np.array([1.0]))
        assert float(val.data) == pytest.approx(expected, abs=1e-15)


def test_stop_gradient_on_last_layer():
    rng = np.random.default_rng(1)
    q1 = param(rng.normal(size=(3, 4)))
    qD = param(rng.normal(size=(3, 4)))
    loss = distillation_loss([q1, qD], lambda x: x, np.arange(3), np.full(3, 0.7))
    tape = Tape(loss)
    assert qD.id not in {n.id for n in tape.nodes}
    loss.backward()
    assert qD.grad is None
    assert np.abs(q1.grad).max() > 0


def test_overall_loss_examples():
    zero = {k: Tensor(np.array(0.0)) for k in ("det", "res", "kl", "dis")}
    assert float(overall_loss(zero).data) == 0.0
    parts = {"det": Tensor(np.array(1.0)), "res": Tensor(np.array(2.0)), "kl": Tensor(np.array(3.0)),
             "dis": Tensor(np.array(4.0))}
    assert float(overall_loss(parts).data) == 1.0 + (2.0 + 4.0 * 3.0) + 0.5 * 4.0
    assert float(overall_loss(parts, LossWeights(beta=0.0)).data) == 1.0 + 2.0 + 2.0


def test_lambda3_zero_removes_distillation_gradient():
    scene, model, draw = _setup()
    with no_grad():
        fwd = forward_scene(model, scene, draw)
        fixed = fix_targets(model, scene, fwd.outs, draw, 50, MatchingConfig(categories=CFG.categories))
    for t in model.parameters():
        t.grad = None
    tc = TrainConfig(loss=LossWeights(lambda3=0.0))
    loss, parts = scene_loss(model, forward_scene(model, scene, draw), fixed, VariantFlags.of("full"), tc)
    assert "dis" not in parts
    loss.backward()
    assert all(p.grad is None or not p.grad.any() for p in model.f_q.parameters())


def test_variant_flags():
    assert VariantFlags.of("full") == VariantFlags()
    assert not VariantFlags.of("ae").variational
    f = VariantFlags.of("no-dn")
    assert not f.denoise and not f.variational
    assert not VariantFlags.of("no-3dm").match_3d
    assert not VariantFlags.of("no-fld").distill
    with pytest.raises(ValueError):
        VariantFlags.of("vae")


def _tiny_run(variant="full", seed=0, epochs=2, batch=2, **kw):
    scenes = generate_scenes(seed, 3, (1, 2))
    return train(scenes, CFG, TrainConfig(epochs=epochs, seed=seed, batch_size=batch, trigger_epoch=1, **kw),
                 variant, **{k: v for k, v in kw.items() if k == "out_dir"})


def test_train_same_seed_identical():
    a, b = _tiny_run(seed=5), _tiny_run(seed=5)
    assert a.metrics == b.metrics
    assert a.assignments == b.assignments
    c = _tiny_run(seed=6)
    assert c.metrics != a.metrics


def test_batches_and_step_log():
    r = _tiny_run(epochs=2, batch=2)
    assert len(r.step_losses) == 2 * 2  # 3 scenes in batches of 2
    assert [len(s["scenes"]) for s in r.step_losses[:2]] == [2, 1]
    assert {"L_total", "L_det", "L_res", "L_KL", "L_dis"} <= set(r.step_losses[0])
    assert len(r.metrics) == 2 and len(r.layer_entropy[0]) == CFG.layers


def test_no_dn_has_no_noisy_terms():
    r = _tiny_run("no-dn")
    for row in r.metrics:
        assert row["L_res"] == 0.0 and row["L_KL"] == 0.0
    ae = _tiny_run("ae")
    assert all(row["L_KL"] == 0.0 for row in ae.metrics)
    assert any(row["L_res"] > 0.0 for row in ae.metrics)


def test_save_run(tmp_path):
    scenes = generate_scenes(0, 2, (1, 2))
    train(scenes, CFG, TrainConfig(epochs=1, seed=0), "ae", out_dir=tmp_path)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0].split(",")
    assert header[:9] == ["epoch", "lr", "L_total", "L_det", "L_res", "L_KL", "L_dis", "entropy",
                          "assignment_flip_count"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["entropy_variant"] == "AE" and manifest["seed"] == 0
    weights = np.load(tmp_path / "weights.npz")
    assert "queries" in weights.files


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_dump(tmp_path):
    scenes = generate_scenes(0, 2, (1, 2))
    with pytest.raises(TrainingDiverged):
        train(scenes, CFG, TrainConfig(epochs=5, lr=1e300, seed=0, batch_size=1), "full", out_dir=tmp_path)
    dump = json.loads((tmp_path / "divergence.json").read_text())
    assert "error" in dump and "metrics_so_far" in dump


def test_train_rejects_empty_and_bad_config():
    with pytest.raises(ValueError):
        train([], CFG, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_predict_scores_and_threshold():
    r = _tiny_run(epochs=1)
    scene = generate_scene(1, 2)
    dets = predict(r.model, scene, tau=0.0)
    assert len(dets) == CFG.N
    assert all(0.0 <= d.score <= 1.0 for d in dets)
    assert all(d.score >= 0.2 for d in predict(r.model, scene))


# -- replayed finite differences ------------------------------------------------------

def _small_graph(seed=0):
    rng = np.random.default_rng(seed)
    x = param(rng.normal(size=(3, 4)))
    w = param(rng.normal(size=(4, 5)))
    b = param(rng.normal(size=5))
    target = rng.normal(size=(3, 5))

    def f():
        h = ops.gelu(ops.linear(x, w, b))
        z = ops.layernorm(h, np.ones(5), np.zeros(5))
        return ops.add(ops.sum(ops.smooth_l1(z, target)), ops.sum(ops.log_softmax(h, axis=-1)))
    return f, [x, w, b]


def test_linear_gradcheck():
    f, inputs = _small_graph(2)
    assert check_gradients(f, inputs) < 1e-7


def test_replay_matches_full_reevaluation():
    f, inputs = _small_graph(3)
    Replay(f()).verify()
    full = numeric_gradients(f, inputs)
    fast = replay_numeric_gradients(f, inputs)
    for a, b in zip(full, fast):
        assert np.array_equal(a, b)


def test_replay_on_decoder_coordinates():
    scene, model, draw = _setup(K=2)
    with no_grad():
        fwd = forward_scene(model, scene, draw)
        fixed = fix_targets(model, scene, fwd.outs, draw, 50, MatchingConfig(categories=CFG.categories), True)
    tc, flags = TrainConfig(), VariantFlags.of("full")

    def f():
        return scene_loss(model, forward_scene(model, scene, draw), fixed, flags, tc)[0]
    named = model.named_parameters()
    picks = [named[k] for k in ("queries", "heads.center.bias", "f_q.layers.0.bias")]
    fast = replay_numeric_gradients(f, picks)
    slow = numeric_gradients(f, picks)
    for a, b in zip(fast, slow):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_replay_rejects_nonscalar():
    with pytest.raises(Exception):
        Replay(param(np.zeros(3)))
