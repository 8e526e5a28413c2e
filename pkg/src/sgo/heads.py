"""Gaussian property heads, per-Gaussian temporal flow, and recurrent memory."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .geometry import normalize_rows_t
from .nn import LayerNorm, Linear, MLP

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class GaussianSet:
    """Complete scene representation; all fields are Tensors."""
    means: dc.Tensor       # (N, 3) m
    opacities: dc.Tensor   # (N,) in [0, 1]
    scales: dc.Tensor      # (N, 3) m, >= s_min
    rotations: dc.Tensor   # (N, 4) unit quaternions
    logits: dc.Tensor      # (N, C)
    features: dc.Tensor    # (N, D), retained for flow and memory

    @property
    def n(self):
        return self.means.shape[0]

    def detached(self):
        return GaussianSet(*(f.detach() for f in
                             (self.means, self.opacities, self.scales,
                              self.rotations, self.logits, self.features)))

    def export_ply(self, path):
        """ASCII PLY-style point dump for visualization."""
        n = self.n
        cls = np.argmax(self.logits.data, axis=1)
        top = np.max(self.logits.data, axis=1)
        cols = np.column_stack([self.means.data, self.opacities.data,
                                self.scales.data, self.rotations.data,
                                cls.astype(np.float64), top])
        names = ["x", "y", "z", "opacity", "sx", "sy", "sz",
                 "qw", "qx", "qy", "qz", "cls", "cls_logit"]
        with open(path, "w") as f:
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {n}\n")
            for name in names:
                f.write(f"property float {name}\n")
            f.write("end_header\n")
            for row in cols:
                f.write(" ".join(f"{v:.6g}" for v in row) + "\n")


@dataclass
class TemporalMemory:
    """Previous-step prediction carried across frames (gradients truncated)."""
    means: np.ndarray       # (N, 3), already in the *new* ego frame
    features: np.ndarray    # (N, D)
    flow_next: np.ndarray   # (N, 3), the t=+1 flow used for the correction
    ego_from_world: np.ndarray


class GaussianHeads:
    """Single linear layers decoding opacity, scale, rotation and semantics."""

    def __init__(self, ps, dim, class_count, s_min=0.02, s_max=1.0, o_min=0.01,
                 extents=None):
        self.s_min = s_min
        self.s_max = s_max
        # soft box constraint keeping means inside the modeled volume;
        # without it gradient noise walks Gaussians out of every frustum
        # and they never come back
        if extents is not None:
            ext = np.asarray(extents, dtype=np.float64)
            self.box_center = ext.mean(axis=1)
            self.box_half = (ext[:, 1] - ext[:, 0]) / 2.0
        else:
            self.box_center = None
        # keep opacity above the rasterizer's skip threshold (1/255): a
        # Gaussian whose alpha drops below it stops receiving gradient, so
        # without a floor early optimization can cull the whole set for good
        self.o_min = o_min
        # the transformer blocks are pre-norm residual, so feature magnitude
        # grows with depth; normalize before decoding
        self.norm = LayerNorm(ps, "heads.ln", dim)
        self.head_o = Linear(ps, "heads.opacity", dim, 1)
        self.head_s = Linear(ps, "heads.scale", dim, 3)
        self.head_r = Linear(ps, "heads.rotation", dim, 4)
        self.head_c = Linear(ps, "heads.semantics", dim, class_count)

    def __call__(self, state, fixed=()):
        """state: transformer.GaussianState; fixed: subset of
        {"opacity","scale","rotation"} pinned to the ablation constants."""
        f = self.norm(state.features)
        n = f.shape[0]
        if "opacity" in fixed:
            o = dc.constant(np.ones(n))
        else:
            o = dc.sigmoid(self.head_o(f)[:, 0]) * (1.0 - self.o_min) + self.o_min
        if "scale" in fixed:
            s = dc.constant(np.full((n, 3), 0.3))
        else:
            # bounded range [s_min, s_max]; the -1 shift starts scales near
            # 0.3 m, and the cap stops runaway footprints that blur geometry
            # and dominate rasterization cost
            s = dc.sigmoid(self.head_s(f) - 1.0) * (self.s_max - self.s_min) \
                + self.s_min
        if "rotation" in fixed:
            r = dc.constant(np.tile(IDENTITY_QUAT, (n, 1)))
        else:
            raw = self.head_r(f)
            norms = np.linalg.norm(raw.data, axis=1)
            degenerate = norms < 1e-8
            if degenerate.any():
                raw = dc.where(degenerate[:, None], np.tile(IDENTITY_QUAT, (n, 1)), raw)
            r = normalize_rows_t(raw)
        c = self.head_c(f)
        means = state.means
        if self.box_center is not None:
            m_local = (means - self.box_center) * (1.0 / self.box_half)
            means = dc.tanh(m_local) * self.box_half + self.box_center
        return GaussianSet(means=means, opacities=o, scales=s,
                           rotations=r, logits=c, features=f)


class TemporalModule:
    """Learnable time tokens + 3-layer flow MLP, zero-initialized output."""

    def __init__(self, ps, dim, horizon):
        if horizon < 0:
            raise ValueError("horizon must be >= 0")
        self.horizon = horizon
        self.dim = dim
        rows = max(2 * horizon, 1)
        self.tokens = ps.param("temporal.tokens", (rows, dim), init="normal", scale=0.02)
        self.mlp = MLP(ps, "temporal.flow", (2 * dim, dim, dim, 3), zero_init_last=True)

    def token_index(self, t):
        if t == 0 or abs(t) > self.horizon:
            raise ValueError(f"relative step {t} outside horizon +-{self.horizon}")
        return t + self.horizon if t < 0 else self.horizon + t - 1

    def flow(self, features, t):
        """3D motion offsets (N, 3) for relative step t."""
        n = features.shape[0]
        tok = self.tokens[self.token_index(t)]
        tok_rows = dc.reshape(tok, (1, self.dim)) + np.zeros((n, 1))
        return self.mlp(dc.concat([features, tok_rows], axis=1))


def apply_flow(gset: GaussianSet, flow):
    """Copy of the set with means translated by the flow; other fields shared."""
    if isinstance(flow, np.ndarray):
        flow = dc.constant(flow)
    if flow.shape != gset.means.shape:
        raise ValueError("flow shape must match means")
    return GaussianSet(means=gset.means + flow, opacities=gset.opacities,
                       scales=gset.scales, rotations=gset.rotations,
                       logits=gset.logits, features=gset.features)


def advance_memory(gset: GaussianSet, flow_next, pose_prev, pose_curr):
    """Memory for the next step: flow-corrected means moved into the new ego
    frame. Gradients are truncated at the step boundary."""
    flow = flow_next.data if isinstance(flow_next, dc.Tensor) else np.asarray(flow_next)
    rel = pose_curr.ego_from_world @ pose_prev.world_from_ego  # curr-ego <- prev-ego
    moved = (gset.means.data + flow) @ rel[:3, :3].T + rel[:3, 3]
    return TemporalMemory(means=moved, features=gset.features.data.copy(),
                          flow_next=np.asarray(flow).copy(),
                          ego_from_world=pose_curr.ego_from_world.copy())
