"""Rigid transforms, quaternions and pinhole cameras.

Numpy helpers operate on plain arrays; functions suffixed _t operate on
diffcore Tensors and are differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


# ------------------------------------------------------------------- numpy

def rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(pitch):
    c, s = np.cos(pitch), np.sin(pitch)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rt_to_mat(R, t):
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def inv_rigid(M):
    R = M[:3, :3]
    t = M[:3, 3]
    return rt_to_mat(R.T, -R.T @ t)


def apply_rigid(M, pts):
    """pts: (..., 3)."""
    return pts @ M[:3, :3].T + M[:3, 3]


def quat_to_rot(q):
    """Unit quaternion(s) (w, x, y, z) -> rotation matrix, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R):
    """Rotation matrix -> unit quaternion (w, x, y, z)."""
    R = np.asarray(R)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        return np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                         (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    i = int(np.argmax(np.diag(R)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
    q = np.empty(4)
    q[0] = (R[k, j] - R[j, k]) / s
    q[i + 1] = 0.25 * s
    q[j + 1] = (R[j, i] + R[i, j]) / s
    q[k + 1] = (R[k, i] + R[i, k]) / s
    return q / np.linalg.norm(q)


def quat_mul_np(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


# ------------------------------------------------------------------ tensors

def quat_to_rot_t(q):
    """Differentiable quaternion(s) (N, 4) -> (N, 3, 3). Assumes unit norm."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    two = 2.0
    r00 = 1.0 - two * (y * y + z * z)
    r01 = two * (x * y - w * z)
    r02 = two * (x * z + w * y)
    r10 = two * (x * y + w * z)
    r11 = 1.0 - two * (x * x + z * z)
    r12 = two * (y * z - w * x)
    r20 = two * (x * z - w * y)
    r21 = two * (y * z + w * x)
    r22 = 1.0 - two * (x * x + y * y)
    rows = dc.stack([r00, r01, r02, r10, r11, r12, r20, r21, r22], axis=1)
    return rows.reshape((-1, 3, 3))


def quat_mul_t(a, b):
    """Differentiable Hamilton product; a, b: (N, 4) Tensors (broadcast ok)."""
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return dc.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=1)


def normalize_rows_t(v, eps=1e-12):
    n2 = (v * v).sum(axis=1, keepdims=True)
    return v * (n2 + eps) ** -0.5


# ------------------------------------------------------------------ cameras

@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, extrinsic camera-from-ego."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_from_ego: np.ndarray  # 4x4

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def ego_from_cam(self):
        return inv_rigid(self.cam_from_ego)


@dataclass
class CameraRig:
    cameras: list

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]

    def validate(self):
        for cam in self.cameras:
            if cam.fx <= 0 or cam.fy <= 0:
                raise ValueError("focal lengths must be positive")
            R = cam.cam_from_ego[:3, :3]
            if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-9:
                raise ValueError("extrinsic rotation is not orthonormal")
        return self


def look_rotation(forward_yaw, pitch_down=0.0):
    """Camera-from-ego rotation for a camera with optical axis at the given
    ego-frame yaw, pitched down; camera convention x right, y down, z forward."""
    # ego axes: x forward, y left, z up; columns are cam axes in ego coords
    ego_from_cam_level = np.array([
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ])
    ego_from_cam = rot_z(forward_yaw) @ ego_from_cam_level @ rot_x_cam(-pitch_down)
    return ego_from_cam.T


def rot_x_cam(pitch_down):
    """Rotation of the camera frame about its x axis (pitch down positive)."""
    c, s = np.cos(pitch_down), np.sin(pitch_down)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def default_rig(width=88, height=48, cam_height=1.5, pitch_down=np.deg2rad(10.0)):
    """Four 90-degree-FoV cameras facing +x, +y, -x, -y."""
    fx = width / 2.0
    cams = []
    for yaw in (0.0, np.pi / 2, np.pi, -np.pi / 2):
        R_ce = look_rotation(yaw, pitch_down)
        t_ego = np.array([0.0, 0.0, cam_height])
        cam_from_ego = rt_to_mat(R_ce, -R_ce @ t_ego)
        cams.append(Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                           width=width, height=height, cam_from_ego=cam_from_ego))
    return CameraRig(cams).validate()
