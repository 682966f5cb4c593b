import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptrecon.errors import DataError, DegenerateGeometryError
from promptrecon.evaluation import ate_rmse
from promptrecon.frontend import (
    FrontendConfig,
    Keyframe,
    KeyframeBuffer,
    Tracker,
    estimate_pose,
    fuse,
    is_keyframe,
    match_ratio,
)
from promptrecon.geometry import Sim3, random_rotation, rotation_angle
from promptrecon.predictor import PredictionPair
from promptrecon.world import Intrinsics, OraclePredictor, generate_scene, loop_trajectory, make_stream

INTR = Intrinsics(32, 32)


def random_sim3(rng, scale=(0.5, 2.0)) -> Sim3:
    return Sim3(rng.uniform(*scale), random_rotation(rng), rng.normal(size=3))


def make_kf(rng, H=6, W=5) -> Keyframe:
    X = rng.normal(size=(H, W, 3))
    C = rng.uniform(1.0, 5.0, size=(H, W))
    return Keyframe(0, np.zeros((H, W, 4)), X, C, Sim3.identity(), 0)


@pytest.mark.parametrize("case", range(20))
def test_sequential_fusion_equals_weighted_mean(case):
    rng = np.random.default_rng(1000 + case)
    kf = make_kf(rng)
    n_obs = int(rng.integers(1, 8))
    num = kf.C_canon[..., None] * kf.X_canon
    den = kf.C_canon.copy()
    for _ in range(n_obs):
        X = rng.normal(size=kf.X_canon.shape)
        C = rng.uniform(1.0, 5.0, size=kf.C_canon.shape)
        T = random_sim3(rng)
        kf = fuse(kf, X, C, T)
        num += C[..., None] * T.apply(X)
        den += C
    np.testing.assert_allclose(kf.X_canon, num / den[..., None], rtol=0, atol=1e-12)
    np.testing.assert_allclose(kf.C_canon, den, rtol=1e-15)
    assert kf.n_fused == n_obs


def test_fusion_with_identical_observation_is_a_fixed_point(rng):
    kf = make_kf(rng)
    out = fuse(kf, kf.X_canon, kf.C_canon, Sim3.identity())
    np.testing.assert_allclose(out.X_canon, kf.X_canon, atol=1e-15)


def test_fusion_rejects_non_finite(rng):
    kf = make_kf(rng)
    X = kf.X_canon.copy()
    X[0, 0, 0] = np.nan
    with pytest.raises(DataError):
        fuse(kf, X, kf.C_canon, Sim3.identity())
    with pytest.raises(DataError):
        fuse(kf, kf.X_canon, kf.C_canon, Sim3(np.inf, np.eye(3), np.zeros(3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_equal_confidence_fusion_is_midpoint(seed, c):
    rng = np.random.default_rng(seed)
    X0, X1 = rng.normal(size=(2, 4, 4, 3))
    kf = Keyframe(0, np.zeros((4, 4, 4)), X0, np.full((4, 4), c), Sim3.identity(), 0)
    out = fuse(kf, X1, np.full((4, 4), c), Sim3.identity())
    np.testing.assert_allclose(out.X_canon, 0.5 * (X0 + X1), atol=1e-12)


def test_estimate_pose_identity(rng):
    X = rng.normal(size=(6, 6, 3))
    T = estimate_pose(X, X, np.ones((6, 6)))
    assert abs(T.s - 1.0) < 1e-12
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.t, 0.0, atol=1e-12)


@pytest.mark.parametrize("huber", [0, 3])
def test_estimate_pose_recovers_known_transform(rng, huber):
    X_canon = rng.normal(size=(8, 8, 3))
    T = Sim3(2.0, random_rotation(rng), rng.normal(size=3))
    X_cross = T.inverse().apply(X_canon)
    est = estimate_pose(X_canon, X_cross, rng.uniform(1, 3, size=(8, 8)), huber_iters=huber)
    assert rotation_angle(est.R @ T.R.T) < 1e-9
    assert abs(est.s / T.s - 1.0) < 1e-9
    assert np.linalg.norm(est.t - T.t) < 1e-9


def test_estimate_pose_extent_mismatch(rng):
    with pytest.raises(DataError):
        estimate_pose(rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 5, 3)), np.ones((4, 4)))


def pair_with(X_cross, C_cross) -> PredictionPair:
    return PredictionPair(X_self=X_cross, X_cross=X_cross, C_self=C_cross, C_cross=C_cross)


def test_match_ratio_and_keyframe_rule(rng):
    kf = make_kf(rng)
    pred = pair_with(kf.X_canon.copy(), np.full(kf.C_canon.shape, 3.0))
    assert match_ratio(pred, kf, Sim3.identity(), 1.5, 0.05) == 1.0
    assert not is_keyframe(pred, kf, Sim3.identity(), 0.7)
    # half the pixels fall below the confidence floor
    C = pred.C_cross.copy()
    C[: C.shape[0] // 2] = 1.1
    low = pair_with(pred.X_cross, C)
    assert match_ratio(low, kf, Sim3.identity(), 1.5, 0.05) == 0.5
    assert is_keyframe(low, kf, Sim3.identity(), 0.7)
    with pytest.raises(DataError):
        is_keyframe(pred, kf, Sim3.identity(), 1.0)


def test_buffer_ids_must_increase(rng):
    buf = KeyframeBuffer()
    kf = make_kf(rng)
    buf.append(kf)
    with pytest.raises(DataError):
        buf.append(kf)
    with pytest.raises(KeyError):
        buf.by_id(5)


def oracle_stream(seed=3, n=40, rev=0.5):
    frames = make_stream(generate_scene(seed), loop_trajectory(seed, n, rev), INTR)
    return frames, OraclePredictor(frames, INTR)


def test_oracle_tracking_is_exact():
    frames, oracle = oracle_stream()
    tracker = Tracker(oracle, FrontendConfig())
    for f in frames:
        tracker.track(f.image)
    assert not tracker.failures
    assert ate_rmse(tracker.trajectory(), [f.gt_pose for f in frames]) < 1e-9
    # relative poses are exact, so the world pose of every frame matches ground truth up to frame 0
    base = frames[0].gt_pose
    for r, f in zip(tracker.results, frames):
        rel = base.inverse() @ f.gt_pose
        assert rotation_angle(r.T_world.R @ rel.R.T) < 1e-9
        np.testing.assert_allclose(r.T_world.t, rel.t, atol=1e-9)


def test_keyframes_follow_overlap():
    frames, oracle = oracle_stream(n=60, rev=1.0)
    hook_calls = []
    tracker = Tracker(oracle, FrontendConfig(), on_keyframe=lambda new, prev, buf: hook_calls.append((new.id, prev.id)))
    for f in frames:
        tracker.track(f.image)
    ids = tracker.buffer.ids()
    assert ids == list(range(len(ids)))
    assert len(ids) > 2
    assert hook_calls == [(i, i - 1) for i in ids[1:]]
    creation = [kf.creation_frame for kf in tracker.buffer]
    assert creation == sorted(set(creation))
    assert sum(r.is_new_keyframe for r in tracker.results) == len(ids)


def test_degenerate_prediction_falls_back_to_constant_velocity():
    frames, oracle = oracle_stream(n=6)
    calls = {"n": 0}

    def flaky(I, K):
        calls["n"] += 1
        pred = oracle(I, K)
        if calls["n"] == 4:
            # every reference pixel collapses onto one point
            X = np.zeros_like(pred.X_cross)
            return PredictionPair(pred.X_self, X, pred.C_self, pred.C_cross)
        return pred

    tracker = Tracker(flaky, FrontendConfig(confident_pose=False))
    for f in frames:
        tracker.track(f.image)
    assert [fl["frame"] for fl in tracker.failures] == [3]
    assert tracker.results[3].fallback
    r1, r2, r3 = (tracker.results[i].T_world for i in (1, 2, 3))
    expected = r2 @ (r1.inverse() @ r2)
    np.testing.assert_allclose(r3.matrix(), expected.matrix(), atol=1e-12)


def test_degenerate_pose_estimate_raises(rng):
    X = np.zeros((4, 4, 3))
    with pytest.raises(DegenerateGeometryError):
        estimate_pose(rng.normal(size=(4, 4, 3)), X, np.ones((4, 4)))
