import io

import numpy as np
import pytest

from bulletgen.errors import (
    DataError,
    NearSingularBlend,
    SchemaVersionMismatch,
    ShapeMismatch,
    TimeOutOfRange,
)
from bulletgen.geometry import Quat, quat_normalize
from bulletgen.scene import (
    Gaussian,
    GaussianKind,
    GaussianScene,
    MotionBasisBank,
    blended_transform,
    load_scene,
    pose_all_at_time,
    pose_all_backward,
    pose_at_time,
    quantize_scene,
    save_scene,
    scene_hash,
)


def random_scene(rng, n=6, n_bases=3, n_frames=4, dynamic_frac=0.5):
    kinds = (rng.uniform(size=n) < dynamic_frac).astype(np.uint8)
    bank = MotionBasisBank(
        quats=quat_normalize(rng.normal(size=(n_bases, n_frames, 4))),
        trans=0.3 * rng.normal(size=(n_bases, n_frames, 3)),
    )
    return GaussianScene(
        positions=rng.normal(size=(n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.normal(size=(n, 3)) * 0.2 - 1.5,
        logit_opacities=rng.normal(size=n),
        colors=rng.uniform(size=(n, 3)),
        kinds=kinds,
        motion_logits=rng.normal(size=(n, n_bases)),
        bank=bank,
        background=rng.uniform(size=3),
        n_frames=n_frames,
    )


# ------------------------------------------------------------------- blending

def test_static_gaussian_ignores_time():
    rng = np.random.default_rng(0)
    bank = MotionBasisBank(quat_normalize(rng.normal(size=(2, 5, 4))),
                           rng.normal(size=(2, 5, 3)))
    g = Gaussian(position=[1, 2, 3], rotation=Quat.identity(),
                 log_scale=[0, 0, 0], logit_opacity=0.0, color=[1, 0, 0],
                 kind=GaussianKind.STATIC)
    p1, r1 = pose_at_time(g, np.zeros(2), bank, 1)
    p5, r5 = pose_at_time(g, np.zeros(2), bank, 5)
    assert np.allclose(p1, [1, 2, 3]) and np.allclose(p5, [1, 2, 3])
    assert np.allclose(r1.as_array(), r5.as_array())


def test_one_hot_weights_reproduce_basis_transform():
    rng = np.random.default_rng(1)
    bank = MotionBasisBank(quat_normalize(rng.normal(size=(3, 2, 4))),
                           rng.normal(size=(3, 2, 3)))
    logits = np.array([0.0, 40.0, 0.0])  # softmax ~ exactly one-hot in fp64
    tf = blended_transform(logits, bank, 2)
    expect = bank.transform(1, 2)
    # sign of the quaternion is irrelevant to the rotation
    assert np.allclose(np.abs(tf.rotation.as_array() @ expect.rotation.as_array()), 1.0,
                       atol=1e-12)
    assert np.allclose(tf.translation, expect.translation, atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(2)
    bank = MotionBasisBank(quat_normalize(rng.normal(size=(4, 1, 4))),
                           rng.normal(size=(4, 1, 3)))
    logits = rng.normal(size=4)
    a = blended_transform(logits, bank, 1)
    b = blended_transform(logits + 7.5, bank, 1)
    assert np.allclose(a.matrix(), b.matrix(), atol=1e-12)


def test_antipodal_bases_blend_consistently():
    # q and -q encode the same rotation; sign alignment must keep the blend
    # at that rotation instead of cancelling to zero
    q = quat_normalize(np.array([0.7, 0.1, -0.4, 0.2]))
    bank = MotionBasisBank(np.stack([q, -q])[:, None, :], np.zeros((2, 1, 3)))
    tf = blended_transform(np.array([0.3, 0.2]), bank, 1)
    assert np.allclose(np.abs(tf.rotation.as_array() @ q), 1.0, atol=1e-12)


def test_zero_basis_quat_raises_near_singular():
    bank = MotionBasisBank(np.zeros((1, 1, 4)), np.zeros((1, 1, 3)))
    with pytest.raises(NearSingularBlend):
        blended_transform(np.array([0.0]), bank, 1)


def test_time_out_of_range():
    bank = MotionBasisBank.identity(2, 3)
    with pytest.raises(TimeOutOfRange):
        blended_transform(np.zeros(2), bank, 0)
    with pytest.raises(TimeOutOfRange):
        blended_transform(np.zeros(2), bank, 4)


def test_weight_count_mismatch():
    bank = MotionBasisBank.identity(2, 3)
    with pytest.raises(ShapeMismatch):
        blended_transform(np.zeros(3), bank, 1)


def test_dynamic_pose_round_trip_through_inverse():
    rng = np.random.default_rng(3)
    bank = MotionBasisBank(quat_normalize(rng.normal(size=(3, 4, 4))),
                           rng.normal(size=(3, 4, 3)))
    logits = rng.normal(size=3)
    g = Gaussian(position=rng.normal(size=3), rotation=Quat.identity(),
                 log_scale=[0, 0, 0], logit_opacity=0.0, color=[0, 1, 0],
                 kind=GaussianKind.DYNAMIC)
    tf = blended_transform(logits, bank, 3)
    p, _ = pose_at_time(g, logits, bank, 3)
    assert np.allclose(tf.inverse().apply(p), g.position, atol=1e-9)


def test_pose_all_matches_single_gaussian_path():
    rng = np.random.default_rng(4)
    scene = random_scene(rng, n=8)
    pos, rot, _ = pose_all_at_time(scene, 2)
    assert np.allclose(np.linalg.norm(rot, axis=1), 1.0, atol=1e-9)
    for i in range(scene.n_gaussians):
        g = Gaussian(position=scene.positions[i],
                     rotation=Quat.from_array(scene.rotations[i]),
                     log_scale=scene.log_scales[i],
                     logit_opacity=scene.logit_opacities[i],
                     color=scene.colors[i],
                     kind=GaussianKind(int(scene.kinds[i])))
        p, r = pose_at_time(g, scene.motion_logits[i], scene.bank, 2)
        assert np.allclose(p, pos[i], atol=1e-12)
        assert np.allclose(r.as_array(), rot[i], atol=1e-12)


# ------------------------------------------------------------- pose gradients

def test_pose_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    scene = random_scene(rng, n=5, n_bases=3, n_frames=3)
    t = 2
    a_pos = rng.normal(size=(5, 3))
    a_rot = rng.normal(size=(5, 4))

    def scalar(s):
        pos, rot, _ = pose_all_at_time(s, t)
        return float(np.sum(a_pos * pos) + np.sum(a_rot * rot))

    pos, rot, cache = pose_all_at_time(scene, t)
    grads = pose_all_backward(scene, cache, a_pos.copy(), a_rot.copy())

    h = 1e-6
    checks = [
        ("positions", scene.positions, grads["positions"]),
        ("rotations", scene.rotations, grads["rotations"]),
        ("motion_logits", scene.motion_logits, grads["motion_logits"]),
        ("basis_quats", scene.bank.quats, grads["basis_quats"]),
        ("basis_trans", scene.bank.trans, grads["basis_trans"]),
    ]
    for name, arr, g in checks:
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idx = rng.choice(flat.size, size=min(12, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            f_plus = scalar(scene)
            flat[i] = keep - h
            f_minus = scalar(scene)
            flat[i] = keep
            fd = (f_plus - f_minus) / (2 * h)
            assert np.isclose(gflat[i], fd, rtol=1e-5, atol=1e-7), \
                f"{name}[{i}]: analytic {gflat[i]:.8g} vs fd {fd:.8g}"


# ---------------------------------------------------------------- persistence

def test_save_load_round_trip_bit_identical():
    rng = np.random.default_rng(6)
    scene = quantize_scene(random_scene(rng, n=50, n_bases=4, n_frames=6))
    buf = io.BytesIO()
    save_scene(scene, buf)
    buf.seek(0)
    back = load_scene(buf)
    assert back.n_frames == scene.n_frames
    for name in ("positions", "rotations", "log_scales", "logit_opacities",
                 "colors", "motion_logits", "background"):
        a, b = getattr(scene, name), getattr(back, name)
        assert a.shape == b.shape and np.array_equal(a, b), name
    assert np.array_equal(scene.kinds, back.kinds)
    assert np.array_equal(scene.bank.quats, back.bank.quats)
    assert np.array_equal(scene.bank.trans, back.bank.trans)


def test_save_load_idempotent_without_quantize():
    rng = np.random.default_rng(7)
    scene = random_scene(rng, n=10)
    b1 = io.BytesIO()
    save_scene(scene, b1)
    b1.seek(0)
    once = load_scene(b1)
    b2 = io.BytesIO()
    save_scene(once, b2)
    assert b1.getvalue() == b2.getvalue()


def test_bad_magic_raises_schema_mismatch():
    with pytest.raises(SchemaVersionMismatch):
        load_scene(io.BytesIO(b"NOPE" + b"\x00" * 64))


def test_bad_version_raises_schema_mismatch():
    rng = np.random.default_rng(8)
    buf = io.BytesIO()
    save_scene(random_scene(rng, n=2), buf)
    raw = bytearray(buf.getvalue())
    raw[4] = 99
    with pytest.raises(SchemaVersionMismatch):
        load_scene(io.BytesIO(bytes(raw)))


def test_truncated_file_raises_data_error():
    rng = np.random.default_rng(9)
    buf = io.BytesIO()
    save_scene(random_scene(rng, n=4), buf)
    with pytest.raises(DataError):
        load_scene(io.BytesIO(buf.getvalue()[:40]))


def test_scene_hash_deterministic_and_sensitive():
    rng = np.random.default_rng(10)
    scene = random_scene(rng, n=12)
    h1 = scene_hash(scene)
    h2 = scene_hash(scene.copy())
    assert h1 == h2
    scene.colors[0, 0] += 0.25
    assert scene_hash(scene) != h1


def test_empty_scene_round_trip():
    scene = GaussianScene.empty(n_frames=3, n_bases=2)
    buf = io.BytesIO()
    save_scene(scene, buf)
    buf.seek(0)
    back = load_scene(buf)
    assert back.n_gaussians == 0 and back.n_bases == 2 and back.n_frames == 3


def test_append_concatenates():
    rng = np.random.default_rng(11)
    a = random_scene(rng, n=3)
    b = random_scene(rng, n=2)
    b.bank = a.bank
    b.n_frames = a.n_frames
    merged = a.append(b)
    assert merged.n_gaussians == 5
    assert np.allclose(merged.positions[:3], a.positions)
    assert np.allclose(merged.positions[3:], b.positions)
