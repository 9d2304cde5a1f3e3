import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from active_recon.geometry import CameraIntrinsics, look_at
from active_recon.keyframes import (Keyframe, KeyframeParams, KeyframeStore, coverage_ratio,
                                    frustum_iou, high_uncertainty_set, select_window,
                                    try_promote, viewpoint_divergence)
from active_recon.planning import PlannerParams
from active_recon.scene import Frame
from active_recon.uncertainty import UncertaintyVolume
from active_recon.volume import VoxelGrid

INTR = CameraIntrinsics.from_fov(32, 24, 90, 60, far=6.0)
angle = st.floats(-math.pi, math.pi, allow_nan=False)
coord = st.floats(-2, 2, allow_nan=False)


def pose_from(yaw, pitch=0.0, pos=(0.0, 0.0, 0.0)):
    pos = np.asarray(pos, float)
    fwd = np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw),
                    math.sin(pitch)])
    return look_at(pos, pos + fwd)


def frame_at(pose, fid):
    h, w = INTR.shape
    return Frame(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w), bool), pose, INTR, fid)


def uncertain_volume():
    grid = VoxelGrid([-3, -3, -1], 0.25, (24, 24, 8))
    vol = UncertaintyVolume.empty(grid)
    vol.occupancy[:] = 0.0
    vol.u_final[:] = 1.0
    vol.u_exp[:] = 1.0
    vol.u_imp[:] = 1.0
    return vol


# ----------------------------------------------------------------------------
# divergence


def test_divergence_of_a_pose_with_itself_is_zero():
    p = pose_from(0.3, 0.1, (0.5, 0.2, 0.0))
    assert frustum_iou(p, p, INTR) == pytest.approx(1.0)
    assert viewpoint_divergence(p, p, INTR) == pytest.approx(0.0, abs=1e-7)


def test_divergence_of_opposite_views():
    a, b = pose_from(0.0), pose_from(math.pi)
    assert frustum_iou(a, b, INTR) == 0.0
    assert viewpoint_divergence(a, b, INTR, theta_mix=0.5) == pytest.approx(0.5 * math.pi + 0.5)


def test_divergence_pure_angle_and_pure_overlap():
    a, b = pose_from(0.0), pose_from(0.4)
    assert viewpoint_divergence(a, b, INTR, theta_mix=1.0) == pytest.approx(0.4)
    iou = frustum_iou(a, b, INTR)
    assert 0 < iou < 1
    assert viewpoint_divergence(a, b, INTR, theta_mix=0.0) == pytest.approx(1 - iou)


@given(angle, angle, coord, coord)
def test_divergence_is_symmetric_and_non_negative(y1, y2, x, y):
    a, b = pose_from(y1), pose_from(y2, pos=(x, y, 0.0))
    d_ab = viewpoint_divergence(a, b, INTR)
    assert d_ab >= 0
    assert d_ab == pytest.approx(viewpoint_divergence(b, a, INTR), abs=1e-12)


# ----------------------------------------------------------------------------
# high-uncertainty set and coverage


def test_high_uncertainty_set_requires_every_layer():
    vol = UncertaintyVolume.empty(VoxelGrid([0, 0, 0], 1.0, (4, 1, 1)))
    vol.u_exp[:] = [0.9, 0.9, 0.1, 0.1]
    vol.u_imp[:] = [0.9, 0.1, 0.9, 0.1]
    assert_array_equal(high_uncertainty_set(vol, 0.5), [0])
    assert_array_equal(high_uncertainty_set(vol, 0.5, ("u_exp",)), [0, 1])
    assert len(high_uncertainty_set(vol, 0.5, ())) == 0


def test_coverage_ratio_examples():
    assert coverage_ratio(np.array([1, 2, 3, 4]), np.array([2, 4, 9])) == 0.5
    assert coverage_ratio(np.zeros(0, int), np.array([1])) == 0.0


# ----------------------------------------------------------------------------
# promotion


def test_first_informative_frame_is_promoted_and_duplicates_are_not():
    vol = uncertain_volume()
    store = KeyframeStore()
    kp, pp = KeyframeParams(), PlannerParams()
    ok, diag = try_promote(frame_at(pose_from(0.0), 0), store, vol, INTR, kp, pp)
    assert ok and diag["delta"] == "inf" and diag["rho"] == 1.0
    ok, diag = try_promote(frame_at(pose_from(0.0), 1), store, vol, INTR, kp, pp)
    assert not ok and diag["delta"] == pytest.approx(0.0, abs=1e-7)
    ok, _ = try_promote(frame_at(pose_from(math.pi / 2), 2), store, vol, INTR, kp, pp)
    assert ok and store.ids == [0, 2]


def test_low_information_blocks_promotion_unless_uncertainty_is_off():
    vol = uncertain_volume()
    vol.u_final[:] = 0.0
    vol.entropy[:] = 0.0
    pose = pose_from(0.0)
    ok, diag = try_promote(frame_at(pose, 0), KeyframeStore(), vol, INTR, KeyframeParams(),
                           PlannerParams())
    assert not ok and diag["gain"] == 0.0
    ok, _ = try_promote(frame_at(pose, 0), KeyframeStore(), vol, INTR,
                        KeyframeParams(use_uncertainty=False), PlannerParams())
    assert ok


def test_empty_high_uncertainty_set_blocks_promotion():
    vol = uncertain_volume()
    ok, diag = try_promote(frame_at(pose_from(0.0), 0), KeyframeStore(), vol, INTR,
                           KeyframeParams(), PlannerParams(), v_high=np.zeros(0, int))
    assert not ok and diag["rho"] == 0.0


@given(st.lists(st.tuples(angle, coord, coord), min_size=2, max_size=12))
def test_promoted_keyframes_are_pairwise_separated(views):
    vol = uncertain_volume()
    store = KeyframeStore()
    kp = KeyframeParams(use_uncertainty=False, n_iou_samples=64)
    for i, (yaw, x, y) in enumerate(views):
        try_promote(frame_at(pose_from(yaw, pos=(x, y, 0.0)), i), store, vol, INTR, kp,
                    PlannerParams(), visible=np.zeros(0, int))
    ks = store.keyframes
    for i in range(len(ks)):
        for j in range(i + 1, len(ks)):
            d = viewpoint_divergence(ks[i].pose, ks[j].pose, INTR, kp.theta_mix,
                                     kp.n_iou_samples, kp.frustum_depth)
            assert d > kp.tau_view


def test_keyframe_params_validation():
    with pytest.raises(ValueError):
        KeyframeParams(m=0)
    with pytest.raises(ValueError):
        KeyframeParams(theta_mix=1.5)
    with pytest.raises(ValueError):
        KeyframeParams(tau_view=0)


# ----------------------------------------------------------------------------
# window selection


def make_store(footprints):
    kfs = [Keyframe(i, pose_from(0.1 * i), np.asarray(fp, dtype=np.int64), order=i)
           for i, fp in enumerate(footprints)]
    return KeyframeStore(kfs)


def oracle_window(store, current, v_high, m):
    def key(k):
        return (len(set(k.footprint) & set(current)), len(set(k.footprint) & set(v_high)),
                k.order)

    ranked = sorted(store.keyframes, key=key, reverse=True)
    chosen = [k.id for k in ranked[:m]]
    if store.keyframes[-1].id not in chosen:
        chosen[-1] = store.keyframes[-1].id
    return chosen


footprint = st.lists(st.integers(0, 30), max_size=15, unique=True).map(sorted)


@given(st.lists(footprint, min_size=1, max_size=10), footprint, footprint, st.integers(1, 6))
def test_window_matches_brute_force_ranking(fps, current, v_high, m):
    store = make_store(fps)
    got = select_window(store, np.array(current, int), np.array(v_high, int), m)
    assert got == oracle_window(store, current, v_high, m)
    assert store.keyframes[-1].id in got
    assert len(got) == min(m, len(fps))


@given(st.lists(footprint, min_size=2, max_size=8), footprint, st.randoms())
def test_window_is_invariant_to_store_order(fps, current, rnd):
    store = make_store(fps)
    base = select_window(store, np.array(current, int), np.zeros(0, int), 3)
    head = store.keyframes[:-1]
    rnd.shuffle(head)
    shuffled = KeyframeStore(head + [store.keyframes[-1]])
    assert select_window(shuffled, np.array(current, int), np.zeros(0, int), 3) == base


def test_temporal_window_takes_the_latest():
    store = make_store([[1], [2], [3], [4]])
    assert select_window(store, np.zeros(0, int), np.zeros(0, int), 2, temporal=True) == [3, 2]
    with pytest.raises(ValueError):
        select_window(KeyframeStore(), np.zeros(0, int), np.zeros(0, int), 2)
