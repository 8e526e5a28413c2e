import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgo import diffcore as dc
from sgo.geometry import (Camera, CameraRig, default_rig, inv_rigid,
                          look_rotation, normalize_rows_t, quat_mul_np,
                          quat_mul_t, quat_to_rot_t, rot_to_quat, rot_z,
                          rt_to_mat)

rng = np.random.default_rng(3)


def random_quat(n=1):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def test_quat_to_rot_orthonormal():
    R = quat_to_rot_t(dc.constant(random_quat(20))).data
    for r in R:
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(r), 1.0)


def test_quat_rot_roundtrip():
    for q in random_quat(20):
        R = quat_to_rot_t(dc.constant(q[None])).data[0]
        q2 = rot_to_quat(R)
        # q and -q encode the same rotation
        assert np.allclose(q, q2, atol=1e-9) or np.allclose(q, -q2, atol=1e-9)


def test_quat_mul_matches_rotation_composition():
    a, b = random_quat(1)[0], random_quat(1)[0]
    Ra = quat_to_rot_t(dc.constant(a[None])).data[0]
    Rb = quat_to_rot_t(dc.constant(b[None])).data[0]
    ab = quat_mul_np(a, b)
    Rab = quat_to_rot_t(dc.constant(ab[None])).data[0]
    assert np.allclose(Rab, Ra @ Rb, atol=1e-12)


def test_quat_mul_t_matches_np():
    a, b = random_quat(5), random_quat(5)
    out = quat_mul_t(dc.constant(a), dc.constant(b)).data
    assert np.allclose(out, quat_mul_np(a, b), atol=1e-14)


def test_normalize_rows():
    v = rng.normal(size=(6, 4)) * 10
    out = normalize_rows_t(dc.constant(v)).data
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_inv_rigid():
    M = rt_to_mat(rot_z(0.7), np.array([1.0, -2.0, 0.5]))
    assert np.allclose(inv_rigid(M) @ M, np.eye(4), atol=1e-12)


def test_look_rotation_forward_axis():
    # optical axis (camera +z) must point along the requested ego yaw
    for yaw in (0.0, np.pi / 2, np.pi, -np.pi / 2, 0.3):
        cam_from_ego = look_rotation(yaw, pitch_down=0.0)
        ego_from_cam = cam_from_ego.T
        optical = ego_from_cam @ np.array([0.0, 0.0, 1.0])
        assert np.allclose(optical, [np.cos(yaw), np.sin(yaw), 0.0], atol=1e-12)
        # camera up (-y) points along ego +z when not pitched
        up = ego_from_cam @ np.array([0.0, -1.0, 0.0])
        assert np.allclose(up, [0, 0, 1], atol=1e-12)


def test_look_rotation_pitch():
    cam_from_ego = look_rotation(0.0, pitch_down=np.deg2rad(10))
    optical = cam_from_ego.T @ np.array([0.0, 0.0, 1.0])
    assert optical[2] < 0                      # tipped toward the ground
    assert np.isclose(optical[2], -np.sin(np.deg2rad(10)), atol=1e-12)


def test_default_rig():
    rig = default_rig()
    rig.validate()
    assert len(rig) == 4
    cam = rig[0]
    assert cam.width == 88 and cam.height == 48
    assert cam.fx == pytest.approx(44.0)       # 90 degree horizontal FoV
    K = cam.K
    assert K[0, 2] == pytest.approx(44.0) and K[1, 2] == pytest.approx(24.0)


def test_rig_validate_rejects_bad_focal():
    cam = default_rig()[0]
    bad = Camera(fx=-1.0, fy=cam.fy, cx=cam.cx, cy=cam.cy, width=cam.width,
                 height=cam.height, cam_from_ego=cam.cam_from_ego)
    with pytest.raises(ValueError):
        CameraRig([bad]).validate()


def test_rig_validate_rejects_non_orthonormal():
    cam = default_rig()[0]
    M = cam.cam_from_ego.copy()
    M[0, 0] += 0.01
    bad = Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, width=cam.width,
                 height=cam.height, cam_from_ego=M)
    with pytest.raises(ValueError):
        CameraRig([bad]).validate()


@given(st.floats(-3.0, 3.0))
@settings(max_examples=30, deadline=None)
def test_rot_z_is_rotation(theta):
    R = rot_z(theta)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)
