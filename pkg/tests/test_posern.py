import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debiaspose.errors import DimensionMismatch, EmptyDataset, NoPrediction, SkeletonMismatch
from debiaspose.geometry import Pose2D, Pose3D, Skeleton, project_points
from debiaspose.neuralnet import MlpModel, TrainConfig, backward, forward, mse_loss
from debiaspose.posern import (
    BiasPrediction,
    assemble_input,
    build_training_set,
    compute_target_bias,
    debias,
    input_dim,
    load_posern,
    predict_bias,
    save_posern,
    sidecar_path,
    train_posern,
)
from debiaspose.synthetic import BiasField, SceneConfig, generate_scene, render_observations, split_dataset

from conftest import canonical_camera, ring_cameras

DELTA = np.array([0.02, -0.01])


def zero_model(n):
    model = MlpModel.init(input_dim(n), 2 * n, hidden_dim=8, seed=0)
    model.W_out[:] = 0
    return model


def exact_views(gt, cams):
    return [Pose2D.full(c.id, project_points(gt.joints, c)) for c in cams]


def constant_bias_dataset(num_frames, noise=1.0, seed=0):
    scene = SceneConfig(num_frames=num_frames, seed=seed, noise_sigma=noise)
    cams, frames = generate_scene(scene)
    field = BiasField(np.tile(DELTA, (17, 1)), cap=1.0)
    return render_observations(frames, cams, field, noise, seed + 1, scene.skeleton)


@pytest.fixture(scope="module")
def const_ds():
    return constant_bias_dataset(120)


def toy3():
    return Skeleton(["pelvis", "spine", "thorax"], pelvis=0, spine_top=2, spine_bottom=1, bones=[(0, 1), (1, 2)])


def test_target_bias_examples(cams4, skel, rng):
    gt = Pose3D.full(rng.normal(0, 300, (17, 3)) + [0, 0, 900])
    obs = exact_views(gt, cams4)[0]
    bias, mask = compute_target_bias(obs, gt, cams4[0])
    assert mask.all() and np.allclose(bias, 0, atol=1e-9)
    obs.joints[5] += (3.0, -4.0)
    bias, _ = compute_target_bias(obs, gt, cams4[0])
    assert np.allclose(bias[5], [3, -4], atol=1e-9)
    assert np.allclose(np.delete(bias, 5, axis=0), 0, atol=1e-9)


def test_target_bias_masks(cams4, rng):
    gt = Pose3D(rng.normal(0, 300, (17, 3)) + [0, 0, 900], np.arange(17) != 3)
    obs = exact_views(gt, cams4)[0]
    obs.visible[4] = False
    _, mask = compute_target_bias(obs, gt, cams4[0])
    assert mask.tolist() == [j not in (3, 4) for j in range(17)]


def test_target_bias_matches_generator_record(const_ds):
    for f in const_ds.frames[:20]:
        for c, (v, cam) in enumerate(zip(f.views, const_ds.cameras)):
            bias, mask = compute_target_bias(v, f.gt3d, cam)
            assert mask.all()
            assert np.max(np.abs(bias - (f.applied_bias[c] + f.applied_noise[c]))) < 1e-9


def test_assemble_input_length_and_zero(cams4, skel):
    n = skel.num_joints
    x, valid = assemble_input(Pose3D.full(np.random.default_rng(0).normal(0, 300, (n, 3))),
                              Pose2D.full(0, np.zeros((n, 2))), cams4[0], skel)
    assert x.shape == (85,) and valid.all()
    # a zero spine is degenerate, so every joint sits on the pelvis except the two spine joints
    X = np.tile([10.0, 20.0, 30.0], (n, 1))
    X[skel.spine_bottom, 2] += 300
    X[skel.spine_top, 2] += 600
    x, _ = assemble_input(Pose3D.full(X), Pose2D.full(0, np.full((n, 2), 7.0)), cams4[0], skel)
    assert set(np.flatnonzero(x)) == {3 * skel.spine_top + 2, 3 * skel.spine_bottom + 2}


def test_assemble_input_manual_layout():
    s = toy3()
    cam = canonical_camera(640, 480)
    est = Pose3D.full([[100, 200, 300], [100, 200, 400], [100, 500, 700]])
    obs = Pose2D(0, [[50, 60], [98, 12], [290, 300]], [1, 1, 1], [True, True, False])
    x, valid = assemble_input(est, obs, cam, s)
    # spine length: |(0,300,300)| = 424.26..; scale = that / 3
    k = np.sqrt(300**2 + 300**2) / 3
    want = [0, 0, 0, 0, 0, 100 / k, 0, 300 / k, 400 / k,
            0, 0, 48 / 480, -48 / 480, 0, 0]
    assert valid.tolist() == [True, True, False]
    # joint 2 is invisible in 2D, so all of its entries are zero
    want[6:9] = [0, 0, 0]
    assert np.allclose(x, want, atol=1e-15)


def test_assemble_input_byte_stable(cams4, skel, rng):
    gt = Pose3D.full(rng.normal(0, 300, (17, 3)) + [0, 0, 900])
    obs = exact_views(gt, cams4)[1]
    a, _ = assemble_input(gt, obs, cams4[1], skel)
    b, _ = assemble_input(gt, obs, cams4[1], skel)
    assert a.tobytes() == b.tobytes()


def test_predict_zero_model(cams4, skel, rng):
    gt = Pose3D.full(rng.normal(0, 300, (17, 3)) + [0, 0, 900])
    obs = exact_views(gt, cams4)[2]
    pred = predict_bias(zero_model(17), gt, obs, cams4[2], skel)
    assert np.array_equal(pred.bias, np.zeros((17, 2))) and pred.camera == 2
    again = predict_bias(zero_model(17), gt, obs, cams4[2], skel)
    assert pred.bias.tobytes() == again.bias.tobytes()


def test_predict_errors(cams4, skel, rng):
    gt = Pose3D.full(rng.normal(0, 300, (17, 3)) + [0, 0, 900])
    obs = exact_views(gt, cams4)[0]
    with pytest.raises(DimensionMismatch):
        predict_bias(zero_model(16), gt, obs, cams4[0], skel)
    hidden = Pose2D(0, obs.joints, obs.confidence, np.arange(17) != skel.pelvis)
    with pytest.raises(NoPrediction):
        predict_bias(zero_model(17), gt, hidden, cams4[0], skel)


def test_per_camera_independence(cams4, skel, rng):
    gt = Pose3D.full(rng.normal(0, 300, (17, 3)) + [0, 0, 900])
    views = exact_views(gt, cams4)
    model = MlpModel.init(85, 34, hidden_dim=16, seed=3)
    before = predict_bias(model, gt, views[0], cams4[0], skel)
    views[1].joints += 40.0
    after = predict_bias(model, gt, views[0], cams4[0], skel)
    assert np.array_equal(before.bias, after.bias)


def test_debias_examples(cams4, rng):
    cam = cams4[0]
    obs = Pose2D.full(0, rng.uniform(0, 1000, (17, 2)), rng.uniform(0.5, 1, 17))
    same = debias(obs, BiasPrediction(np.zeros((17, 2)), 0), cam)
    assert np.array_equal(same.joints, obs.joints)
    assert np.array_equal(same.confidence, obs.confidence)
    px = rng.normal(0, 20, (17, 2))
    assert np.allclose((px / cam.scale) * cam.scale, px, atol=1e-10)
    out = debias(obs, BiasPrediction(px / cam.scale, 0), cam)
    assert np.allclose(out.joints, obs.joints - px, atol=1e-10)
    with pytest.raises(ValueError):
        debias(obs, BiasPrediction(px, 1), cam)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sign_convention_cancellation(seed):
    rng = np.random.default_rng(seed)
    cams = ring_cameras(4)
    gt = Pose3D(rng.normal(0, 300, (17, 3)) + [0, 0, 900], rng.random(17) > 0.1)
    c = int(rng.integers(4))
    cam = cams[c]
    obs = Pose2D(c, project_points(gt.joints, cam) + rng.normal(0, 15, (17, 2)),
                 rng.uniform(0, 1, 17), rng.random(17) > 0.1)
    bias, mask = compute_target_bias(obs, gt, cam)
    out = debias(obs, BiasPrediction(bias / cam.scale, c), cam)
    want = project_points(gt.joints, cam)
    assert np.max(np.abs(out.joints[mask] - want[mask]), initial=0) < 1e-9


def test_training_set_counting(const_ds, skel):
    frames = const_ds.pairs()[:10]
    samples = build_training_set(frames, const_ds.cameras, skel)
    assert len(samples) == 10 * 4
    assert all(s.input.shape == (85,) and s.target.shape == (34,) for s in samples)
    assert np.allclose(samples[0].target.reshape(-1, 2), DELTA, atol=0.01)
    views, gt = frames[3]
    broken = Pose3D(gt.joints, np.arange(17) != skel.pelvis)
    samples = build_training_set(frames[:3] + [(views, broken)], const_ds.cameras, skel)
    assert len(samples) == 12
    with pytest.raises(EmptyDataset):
        build_training_set([(views, broken)], const_ds.cameras, skel)


def test_training_set_zero_fills_invalid(const_ds, skel):
    views, gt = const_ds.pairs()[0]
    views = [v.copy() for v in views]
    views[0].visible[6] = False
    s = build_training_set([(views, gt)], const_ds.cameras, skel)[0]
    assert not s.valid_mask[6]
    assert not s.input[18:21].any() and not s.input[51 + 12:51 + 14].any()
    assert not s.target[12:14].any()


def test_training_set_triangulated_source(skel):
    scene = SceneConfig(num_frames=5, noise_sigma=0.0)
    cams, frames = generate_scene(scene)
    ds = render_observations(frames, cams, BiasField.zero(17), 0.0, 0, skel)
    samples = build_training_set(ds.pairs(), cams, skel, "triangulated")
    assert len(samples) == 20
    assert max(np.abs(s.target).max() for s in samples) < 1e-9
    gt_samples = build_training_set(ds.pairs(), cams, skel, "gt")
    assert max(np.abs(a.input - b.input).max() for a, b in zip(samples, gt_samples)) < 1e-8


def test_masked_loss_invariance(const_ds, skel):
    samples = build_training_set(const_ds.pairs()[:2], const_ds.cameras, skel)
    X = np.stack([s.input for s in samples])
    Y = np.stack([s.target for s in samples])
    M = np.stack([s.target_mask for s in samples])
    M[0, 4:6] = False
    model = MlpModel.init(85, 34, hidden_dim=8, dropout_rate=0.0)
    out, tape = forward(model, X, "train")
    l1, d1 = mse_loss(out, Y, M)
    Y2 = Y.copy()
    Y2[0, 4:6] += 5.0
    l2, d2 = mse_loss(out, Y2, M)
    assert l1 == l2
    g1, g2 = backward(model, tape, d1), backward(model, tape, d2)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_constant_bias_recovery(const_ds, skel):
    train, held = split_dataset(const_ds, 0.8, 0)
    samples = build_training_set(train.pairs(), train.cameras, skel)
    model, trace = train_posern(samples, TrainConfig(hidden_dim=256))
    assert len(trace) == 20
    errs = []
    for views, gt in held.pairs():
        for v in views:
            pred = predict_bias(model, gt, v, const_ds.camera_map[v.camera], skel)
            errs.append(np.linalg.norm(pred.bias - DELTA, axis=1) / np.linalg.norm(DELTA))
    assert np.mean(errs) < 0.25


def test_constant_bias_loss_trace(skel):
    # noise-free, so the target is exactly the constant offset
    ds = constant_bias_dataset(60, noise=0.0)
    samples = build_training_set(ds.pairs(), ds.cameras, skel)
    _, trace = train_posern(samples, TrainConfig(hidden_dim=128))
    assert trace[-1] < 0.1 * trace[0]


def test_zero_bias_predictions_small(skel):
    scene = SceneConfig(num_frames=80, seed=3)
    cams, frames = generate_scene(scene)
    ds = render_observations(frames, cams, BiasField.zero(17), 1.0, 4, skel)
    train, held = split_dataset(ds, 0.8, 0)
    model, _ = train_posern(build_training_set(train.pairs(), cams, skel), TrainConfig(hidden_dim=128))
    mags = [np.abs(predict_bias(model, gt, v, ds.camera_map[v.camera], skel).bias).mean()
            for views, gt in held.pairs() for v in views]
    assert np.mean(mags) < 0.05


def test_train_reproducible_and_empty(const_ds, skel, tmp_path):
    samples = build_training_set(const_ds.pairs()[:15], const_ds.cameras, skel)
    cfg = TrainConfig(hidden_dim=32, epochs=3)
    for k in range(2):
        model, _ = train_posern(samples, cfg)
        save_posern(tmp_path / f"m{k}.ckpt", model, skel, {"config_hash": "abc"})
    assert (tmp_path / "m0.ckpt").read_bytes() == (tmp_path / "m1.ckpt").read_bytes()
    with pytest.raises(EmptyDataset):
        train_posern([], cfg)


def test_sidecar_roundtrip_and_mismatch(skel, tmp_path):
    model = zero_model(17)
    path = tmp_path / "m.ckpt"
    save_posern(path, model, skel, {"config_hash": "abc"})
    side = json.loads(sidecar_path(path).read_text())
    assert side["num_joints"] == 17 and side["config_hash"] == "abc"
    back = load_posern(path, skel)
    assert np.array_equal(back.W_out, model.W_out)
    other = Skeleton(skel.joint_names[:16], skel.pelvis, skel.spine_top, skel.spine_bottom,
                     [b for b in skel.bones if 16 not in b])
    with pytest.raises(SkeletonMismatch):
        load_posern(path, other)
    renamed = Skeleton([n.upper() for n in skel.joint_names], skel.pelvis, skel.spine_top,
                       skel.spine_bottom, skel.bones)
    with pytest.raises(SkeletonMismatch):
        load_posern(path, renamed)
    sidecar_path(path).unlink()
    with pytest.raises(SkeletonMismatch):
        load_posern(path, skel)
