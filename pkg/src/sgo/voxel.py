"""Analytic voxelization of Gaussian sets and the 3D-supervised CE loss.

Occupancy at a voxel center p accumulates exp(-0.5 (p-mu)^T Sigma^-1 (p-mu)) * o
over Gaussians; semantic logits accumulate the same kernel times the per-class
logits. Each Gaussian only touches voxels inside its truncation box.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .geometry import quat_to_rot, quat_to_rot_t

FREE = -1  # label sentinel for free space


@dataclass
class GridSpec:
    origin: np.ndarray          # minimum corner, meters
    voxel_size: float
    dims: tuple                 # (X, Y, Z)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if any(d <= 0 for d in self.dims) or self.voxel_size <= 0:
            raise ValueError("grid dims and voxel size must be positive")

    @property
    def n_voxels(self):
        return int(np.prod(self.dims))

    def centers(self):
        """(X*Y*Z, 3) voxel center coordinates, C-order over (X, Y, Z)."""
        axes = [self.origin[i] + (np.arange(self.dims[i]) + 0.5) * self.voxel_size
                for i in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def to_dict(self):
        return {"origin": self.origin.tolist(), "voxel_size": self.voxel_size,
                "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["origin"]), float(d["voxel_size"]), tuple(d["dims"]))


def desk_grid():
    return GridSpec(origin=np.array([-8.0, -8.0, -0.4]), voxel_size=0.4,
                    dims=(40, 40, 8))


def occ3d_grid():
    return GridSpec(origin=np.array([-40.0, -40.0, -1.0]), voxel_size=0.4,
                    dims=(200, 200, 16))


@dataclass
class VoxelGrid:
    spec: GridSpec
    occupancy: np.ndarray                 # (X, Y, Z) >= 0
    labels: np.ndarray                    # (X, Y, Z) int, FREE for free space
    logits: np.ndarray | None = None      # (X, Y, Z, C)
    class_count: int = 0

    def save(self, path_prefix):
        arrays = {"occupancy": self.occupancy, "labels": self.labels.astype(np.int32)}
        if self.logits is not None:
            arrays["logits"] = self.logits
        dc.write_arrays(str(path_prefix) + ".bin", arrays)
        meta = self.spec.to_dict()
        meta["class_count"] = self.class_count
        with open(str(path_prefix) + ".json", "w") as f:
            json.dump(meta, f, indent=2)

    @classmethod
    def load(cls, path_prefix):
        arrays = dc.read_arrays(str(path_prefix) + ".bin")
        with open(str(path_prefix) + ".json") as f:
            meta = json.load(f)
        return cls(GridSpec.from_dict(meta), arrays["occupancy"], arrays["labels"],
                   arrays.get("logits"), meta.get("class_count", 0))

    def dump_xyz(self, path):
        """ASCII dump of occupied voxel centers with labels."""
        centers = self.spec.centers().reshape(self.spec.dims + (3,))
        occ = self.labels != FREE
        pts = centers[occ]
        labs = self.labels[occ]
        with open(path, "w") as f:
            for p, l in zip(pts, labs):
                f.write(f"{p[0]:.3f} {p[1]:.3f} {p[2]:.3f} {int(l)}\n")


def _truncation_pairs(means, scales, spec, trunc_sigmas):
    """Flat (gaussian_index, voxel_index) pairs inside each truncation box."""
    dims = np.array(spec.dims)
    radius = trunc_sigmas * scales.max(axis=1)
    lo = np.floor((means - radius[:, None] - spec.origin) / spec.voxel_size).astype(int)
    hi = np.floor((means + radius[:, None] - spec.origin) / spec.voxel_size).astype(int)
    lo = np.clip(lo, 0, dims - 1)
    hi = np.clip(hi, 0, dims - 1)
    inside = np.all((means >= spec.origin - radius[:, None]) &
                    (means <= spec.origin + dims * spec.voxel_size + radius[:, None]),
                    axis=1)
    gi_list, vi_list = [], []
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    for g in np.nonzero(inside)[0]:
        xs = np.arange(lo[g, 0], hi[g, 0] + 1)
        ys = np.arange(lo[g, 1], hi[g, 1] + 1)
        zs = np.arange(lo[g, 2], hi[g, 2] + 1)
        if xs.size == 0 or ys.size == 0 or zs.size == 0:
            continue
        vv = (xs[:, None, None] * strides[0] + ys[None, :, None] * strides[1]
              + zs[None, None, :]).reshape(-1)
        vi_list.append(vv)
        gi_list.append(np.full(vv.size, g, dtype=np.int64))
    if not gi_list:
        return (np.zeros(0, dtype=np.int64),) * 2
    return np.concatenate(gi_list), np.concatenate(vi_list)


def accumulate(gset, spec, trunc_sigmas=6.0):
    """Differentiable (v_o, v_c) accumulation at voxel centers.

    gset: heads.GaussianSet (Tensor fields). Returns flat Tensors
    v_o (V,) and v_c (V, C).
    """
    means, scales = gset.means, gset.scales
    C = gset.logits.shape[1]
    V = spec.n_voxels
    gi, vi = _truncation_pairs(means.data, scales.data, spec, trunc_sigmas)
    if gi.size == 0:
        zero = dc.constant(np.zeros(V))
        return zero, dc.constant(np.zeros((V, C)))
    centers = spec.centers()
    R = quat_to_rot_t(gset.rotations)                       # (N,3,3)
    inv_s = gset.scales ** -1.0                             # (N,3)
    # rows of A = diag(1/s) R^T  give Sigma^-1 = A^T A
    A = R.transpose((0, 2, 1)) * dc.reshape(inv_s, (-1, 3, 1))
    Ag = A[gi]                                              # (P,3,3)
    delta = dc.constant(centers[vi]) - means[gi]            # (P,3)
    y = dc.matmul(Ag, dc.reshape(delta, (-1, 3, 1)))        # (P,3,1)
    q = (y * y).sum(axis=(1, 2))                            # (P,)
    w = dc.exp(q * -0.5)
    v_o = dc.scatter_add(vi, w * gset.opacities[gi], (V,))
    v_c = dc.scatter_add(vi, dc.reshape(w, (-1, 1)) * gset.logits[gi], (V, C))
    return v_o, v_c


def voxelize(gset, spec, tau_free=0.3, trunc_sigmas=6.0):
    """GaussianSet -> VoxelGrid (plain arrays; argmax labels, free below tau)."""
    v_o, v_c = accumulate(gset, spec, trunc_sigmas)
    occ = v_o.data.reshape(spec.dims)
    logits = v_c.data.reshape(spec.dims + (v_c.data.shape[1],))
    labels = np.where(occ > tau_free, np.argmax(logits, axis=-1), FREE)
    return VoxelGrid(spec, occ, labels, logits, class_count=logits.shape[-1])


def voxel_ce_loss(gset, gt, tau_free=0.3, kappa=10.0, trunc_sigmas=6.0):
    """Softmax cross-entropy between accumulated voxel logits and GT labels.

    The free class is scored with the synthetic logit kappa * (tau_free - v_o),
    monotone in accumulated opacity.
    """
    C = gset.logits.shape[1]
    if gt.class_count and gt.class_count != C:
        raise ValueError(f"class count mismatch: set has {C}, grid {gt.class_count}")
    if tuple(gt.spec.dims) != tuple(gt.labels.shape):
        raise ValueError("grid label shape does not match spec dims")
    v_o, v_c = accumulate(gset, gt.spec, trunc_sigmas)
    free_logit = (dc.constant(np.full(v_o.shape, tau_free)) - v_o) * kappa
    logits = dc.concat([v_c, dc.reshape(free_logit, (-1, 1))], axis=1)  # (V, C+1)
    target = gt.labels.reshape(-1).copy()
    target[target == FREE] = C
    # log-softmax cross entropy
    m = logits.data.max(axis=1, keepdims=True)
    z = logits - m
    lse = dc.log(dc.exp(z).sum(axis=1))
    picked = z[np.arange(target.size), target]
    return (lse - picked).mean()


def eval_full(gset, spec):
    """Untruncated v_o oracle: every Gaussian against every voxel (small grids)."""
    centers = spec.centers()
    means = gset.means.data
    scales = gset.scales.data
    R = quat_to_rot(gset.rotations.data)
    A = np.swapaxes(R, 1, 2) / scales[:, :, None]
    d = centers[None, :, :] - means[:, None, :]             # (N,V,3)
    y = np.einsum("nij,nvj->nvi", A, d)
    q = np.sum(y * y, axis=-1)
    w = np.exp(-0.5 * q)
    v_o = (w * gset.opacities.data[:, None]).sum(axis=0)
    v_c = np.einsum("nv,nc->vc", w, gset.logits.data)
    return v_o, v_c
