"""Differentiable splatting of Gaussian sets into depth / semantic images.

Projection (mean, screen covariance, culling) is expressed with generic tape
ops; the front-to-back alpha compositing is a single custom primitive with a
hand-derived backward pass. A brute-force per-Gaussian reference compositor
serves as the correctness oracle for the tiled path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore.tensor import _record
from .geometry import quat_mul_t, quat_to_rot_t, rot_to_quat

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
LAMBDA_LOWPASS = 0.3    # px^2 anti-aliasing floor added to screen covariance
NEAR_PLANE = 0.1
EPS_ACC = 1e-4
TILE = 16


@dataclass
class RenderedView:
    depth: dc.Tensor     # (H, W) meters
    sem: dc.Tensor       # (H, W, C) composited channel values
    alpha: dc.Tensor     # (H, W) accumulated alpha in [0, 1]


def build_covariance(scales, rotations):
    """Sigma = R diag(s)^2 R^T, differentiable; (N,3) and (N,4) -> (N,3,3)."""
    R = quat_to_rot_t(rotations)
    Rs = R * dc.reshape(scales, (-1, 1, 3))
    return dc.matmul(Rs, Rs.transpose((0, 2, 1)))


def project_rig(gset, cams, lambda_lp=LAMBDA_LOWPASS, near=NEAR_PLANE):
    """Project all Gaussians into every camera at once.

    Returns (pix, conic, depth, opa, valid, radius) with a leading camera
    axis: pix (L, N, 2), conic (L, N, 3), depth (L, N) are Tensors, valid a
    bool mask and radius a per-Gaussian pixel reach bound (both (L, N)).
    """
    n = gset.n
    L = len(cams)
    M = np.stack([cam.cam_from_ego for cam in cams])            # (L,4,4)
    fx = np.array([cam.fx for cam in cams])[:, None]
    fy = np.array([cam.fy for cam in cams])[:, None]
    cx = np.array([cam.cx for cam in cams])[:, None]
    cy = np.array([cam.cy for cam in cams])[:, None]
    wpx = np.array([cam.width for cam in cams])[:, None]
    hpx = np.array([cam.height for cam in cams])[:, None]

    RT = dc.constant(M[:, :3, :3].transpose(0, 2, 1))           # (L,3,3)
    p_cam = dc.matmul(dc.reshape(gset.means, (1, n, 3)), RT) \
        + dc.constant(M[:, None, :3, 3])                        # (L,N,3)
    z = p_cam[:, :, 2]
    valid = z.data > near
    z_safe = dc.where(valid, z, np.ones_like(z.data))
    x, y = p_cam[:, :, 0], p_cam[:, :, 1]
    u = x / z_safe * fx + cx
    v = y / z_safe * fy + cy
    pix = dc.stack([u, v], axis=2)

    R = quat_to_rot_t(gset.rotations)
    WR = dc.matmul(dc.constant(M[:, None, :3, :3]),
                   dc.reshape(R, (1, n, 3, 3)))                 # (L,N,3,3)
    Ms = WR * dc.reshape(gset.scales, (1, n, 1, 3))             # W R diag(s)
    sigma_cam = dc.matmul(Ms, Ms.transpose((0, 1, 3, 2)))

    iz = z_safe ** -1.0
    iz2 = iz * iz
    zero = dc.constant(np.zeros((L, n)))
    j0 = dc.stack([iz * fx, zero, x * iz2 * -1.0 * fx], axis=2)
    j1 = dc.stack([zero, iz * fy, y * iz2 * -1.0 * fy], axis=2)
    J = dc.stack([j0, j1], axis=2)                              # (L,N,2,3)
    cov2 = dc.matmul(dc.matmul(J, sigma_cam), J.transpose((0, 1, 3, 2)))
    a = cov2[:, :, 0, 0] + lambda_lp
    b = cov2[:, :, 0, 1]
    c = cov2[:, :, 1, 1] + lambda_lp
    det = a * c - b * b
    conic = dc.stack([c / det, -b / det, a / det], axis=2)

    # culling from detached values
    ad, bd, cd = a.data, b.data, c.data
    lam_max = 0.5 * (ad + cd) + np.sqrt(np.maximum(0.25 * (ad - cd) ** 2 + bd * bd, 0.0))
    o_clamped = np.minimum(gset.opacities.data, ALPHA_CLAMP)
    reach2 = 2.0 * np.log(np.maximum(o_clamped, 1e-12) / ALPHA_SKIP)
    radius = np.sqrt(np.maximum(lam_max, 0.0)) \
        * np.maximum(3.0, np.sqrt(np.maximum(reach2, 0.0)))[None, :]
    valid = valid & (o_clamped > ALPHA_SKIP)[None, :]
    ud, vd = pix.data[..., 0], pix.data[..., 1]
    valid = valid & (ud + radius > 0) & (ud - radius < wpx) \
                  & (vd + radius > 0) & (vd - radius < hpx)
    return pix, conic, z, gset.opacities, valid, radius


def project_set(gset, cam, lambda_lp=LAMBDA_LOWPASS, near=NEAR_PLANE):
    """Single-camera projection; see project_rig."""
    pix, conic, z, opa, valid, radius = project_rig(gset, [cam], lambda_lp, near)
    return pix[0], conic[0], z[0], opa, valid[0], radius[0]


def _check_finite_inputs(gset):
    for name, t in (("means", gset.means), ("opacities", gset.opacities),
                    ("scales", gset.scales), ("rotations", gset.rotations),
                    ("logits", gset.logits)):
        bad = ~np.isfinite(t.data)
        if bad.any():
            idx = int(np.nonzero(bad.reshape(t.data.shape[0], -1).any(axis=1))[0][0])
            raise ValueError(f"non-finite {name} at Gaussian index {idx}")


def _composite_forward_tile(pixd, conicd, depthd, opad, chand, order, radius,
                            H, W, tile):
    """Tiled forward pass; returns image (H, W, K+2) and per-tile state."""
    K = chand.shape[1]
    img = np.zeros((H, W, K + 2))
    states = []
    if order.size == 0:
        return img, states
    # bin gaussians (in global sorted order) into tiles their reach box touches
    n_tx = -(-W // tile)
    n_ty = -(-H // tile)
    px, py = pixd[order, 0], pixd[order, 1]
    r = radius[order]
    tx0 = np.clip(((px - r) // tile).astype(int), 0, n_tx - 1)
    tx1 = np.clip(((px + r) // tile).astype(int), 0, n_tx - 1)
    ty0 = np.clip(((py - r) // tile).astype(int), 0, n_ty - 1)
    ty1 = np.clip(((py + r) // tile).astype(int), 0, n_ty - 1)
    bins = [[[] for _ in range(n_tx)] for _ in range(n_ty)]
    for k in range(order.size):
        for ty in range(ty0[k], ty1[k] + 1):
            for tx in range(tx0[k], tx1[k] + 1):
                bins[ty][tx].append(k)
    for ty in range(n_ty):
        y_lo = ty * tile
        ys = np.arange(y_lo, min(y_lo + tile, H))
        for tx in range(n_tx):
            sel = bins[ty][tx]
            if not sel:
                continue
            sel = np.asarray(sel)
            sub = order[sel]
            x_lo = tx * tile
            xs = np.arange(x_lo, min(x_lo + tile, W))
            pxs = (xs + 0.5)[None, :]
            pys = (ys + 0.5)[:, None]
            dx = pxs[None, :, :] - pixd[sub, 0][:, None, None]   # (n, th, tw)
            dy = pys[None, :, :] - pixd[sub, 1][:, None, None]
            ia = conicd[sub, 0][:, None, None]
            ib = conicd[sub, 1][:, None, None]
            ic = conicd[sub, 2][:, None, None]
            q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
            g = np.exp(-0.5 * q)
            alpha_raw = opad[sub][:, None, None] * g
            clamped = alpha_raw > ALPHA_CLAMP
            alpha = np.minimum(alpha_raw, ALPHA_CLAMP)
            skip = alpha < ALPHA_SKIP
            alpha[skip] = 0.0
            T = np.cumprod(1.0 - alpha, axis=0)
            T_in = np.concatenate([np.ones_like(T[:1]), T[:-1]], axis=0)
            w = T_in * alpha                                      # (n, th, tw)
            nflat = w.reshape(w.shape[0], -1)
            chan_img = (nflat.T @ chand[sub]).reshape(len(ys), len(xs), K)
            img[y_lo:y_lo + len(ys), x_lo:x_lo + len(xs), :K] += chan_img
            img[y_lo:y_lo + len(ys), x_lo:x_lo + len(xs), K] += nflat.sum(axis=0).reshape(len(ys), len(xs))
            img[y_lo:y_lo + len(ys), x_lo:x_lo + len(xs), K + 1] += (
                nflat * depthd[sub][:, None]).sum(axis=0).reshape(len(ys), len(xs))
            states.append((sub, ys, xs, dx, dy, g, alpha, T_in, w, clamped, skip))
    return img, states


def _composite_backward_tile(grad, states, pixd, conicd, depthd, opad, chand):
    N, K = chand.shape
    gpix = np.zeros_like(pixd)
    gconic = np.zeros_like(conicd)
    gdepth = np.zeros_like(depthd)
    gopa = np.zeros_like(opad)
    gchan = np.zeros_like(chand)
    for (sub, ys, xs, dx, dy, g, alpha, T_in, w, clamped, skip) in states:
        gtile = grad[np.ix_(ys, xs)]                 # (th, tw, K+2)
        dchan = gtile[..., :K].reshape(-1, K)        # (tp, K)
        dalpha = gtile[..., K].reshape(-1)
        ddraw = gtile[..., K + 1].reshape(-1)
        n = sub.size
        tp = dchan.shape[0]
        wf = w.reshape(n, tp)
        # dL/dw for every (gaussian, pixel) pair
        dw = chand[sub] @ dchan.T + dalpha[None, :] + depthd[sub][:, None] * ddraw[None, :]
        gchan[sub] += wf @ dchan
        gdepth[sub] += (wf * ddraw[None, :]).sum(axis=1)
        S = dw * wf
        suffix = np.flip(np.cumsum(np.flip(S, 0), 0), 0) - S
        af = alpha.reshape(n, tp)
        dalpha_eff = T_in.reshape(n, tp) * dw - suffix / (1.0 - af)
        live = ~(clamped.reshape(n, tp) | skip.reshape(n, tp))
        dalpha_eff = np.where(live, dalpha_eff, 0.0)
        gf = g.reshape(n, tp)
        gopa[sub] += (dalpha_eff * gf).sum(axis=1)
        dg = dalpha_eff * opad[sub][:, None]
        dq = -0.5 * gf * dg
        dxf = np.broadcast_to(dx, alpha.shape).reshape(n, tp)
        dyf = np.broadcast_to(dy, alpha.shape).reshape(n, tp)
        ia = conicd[sub, 0][:, None]
        ib = conicd[sub, 1][:, None]
        ic = conicd[sub, 2][:, None]
        gconic[sub, 0] += (dq * dxf * dxf).sum(axis=1)
        gconic[sub, 1] += (dq * 2.0 * dxf * dyf).sum(axis=1)
        gconic[sub, 2] += (dq * dyf * dyf).sum(axis=1)
        ddx = dq * (2.0 * ia * dxf + 2.0 * ib * dyf)
        ddy = dq * (2.0 * ib * dxf + 2.0 * ic * dyf)
        gpix[sub, 0] += -ddx.sum(axis=1)             # d = pixel - mean
        gpix[sub, 1] += -ddy.sum(axis=1)
    return gpix, gconic, gdepth, gopa, gchan


def composite(pix, conic, depth, opa, chan, valid, radius, H, W, tile=TILE):
    """Custom differentiable primitive: (H, W, K+2) image whose channels are
    [composited chan..., accumulated alpha, alpha-weighted depth sum]."""
    pixd, conicd = pix.data, conic.data
    depthd, opad, chand = depth.data, opa.data, chan.data
    idx = np.nonzero(valid)[0]
    order = idx[np.argsort(depthd[idx], kind="stable")]
    img, states = _composite_forward_tile(pixd, conicd, depthd, opad, chand,
                                          order, radius, H, W, tile)

    def bwd(grad):
        return _composite_backward_tile(grad, states, pixd, conicd, depthd,
                                        opad, chand)

    flops = sum(st[3].size * 30 for st in states)
    return _record("composite", img, (pix, conic, depth, opa, chan), bwd,
                   flops=flops)


def composite_reference(pixd, conicd, depthd, opad, chand, valid, H, W):
    """Oracle: sequential front-to-back loop over the globally sorted list,
    no tiling; only the alpha < 1/255 skip rule applies."""
    K = chand.shape[1]
    idx = np.nonzero(valid)[0]
    order = idx[np.argsort(depthd[idx], kind="stable")]
    pxs, pys = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    chan_img = np.zeros((H, W, K))
    acc = np.zeros((H, W))
    draw = np.zeros((H, W))
    T = np.ones((H, W))
    for i in order:
        dx = pxs - pixd[i, 0]
        dy = pys - pixd[i, 1]
        q = conicd[i, 0] * dx * dx + 2 * conicd[i, 1] * dx * dy + conicd[i, 2] * dy * dy
        alpha = np.minimum(opad[i] * np.exp(-0.5 * q), ALPHA_CLAMP)
        alpha[alpha < ALPHA_SKIP] = 0.0
        w = T * alpha
        chan_img += w[..., None] * chand[i]
        acc += w
        draw += w * depthd[i]
        T = T * (1.0 - alpha)
    out = np.concatenate([chan_img, acc[..., None], draw[..., None]], axis=-1)
    return out


def rasterize_rig(gset, cams, channels=None, reference=False,
                  lambda_lp=LAMBDA_LOWPASS, near=NEAR_PLANE, eps_acc=EPS_ACC,
                  bg_depth=0.0, tile=TILE, reference_cap=4096):
    """Splat a GaussianSet into each camera; fully differentiable unless
    reference=True (oracle path, plain arrays wrapped as constants)."""
    _check_finite_inputs(gset)
    chan = channels if channels is not None else gset.logits
    K = chan.shape[1]
    pix, conic, z, opa, valid, radius = project_rig(gset, cams, lambda_lp, near)
    views = []
    for li, cam in enumerate(cams):
        if reference:
            if gset.n > reference_cap:
                raise ValueError(
                    f"reference rasterizer capped at {reference_cap} Gaussians")
            img = dc.constant(composite_reference(
                pix.data[li], conic.data[li], z.data[li], opa.data,
                chan.data, valid[li], cam.height, cam.width))
        else:
            img = composite(pix[li], conic[li], z[li], opa, chan, valid[li],
                            radius[li], cam.height, cam.width, tile)
        sem = img[:, :, :K]
        acc = img[:, :, K]
        draw = img[:, :, K + 1]
        depth = draw / dc.maximum(acc, eps_acc)
        depth = dc.where(acc.data > eps_acc, depth, np.full(acc.shape, bg_depth))
        views.append(RenderedView(depth=depth, sem=sem, alpha=acc))
    return views


def rasterize(gset, cam, **kw):
    return rasterize_rig(gset, [cam], **kw)[0]


def transform_set(gset, rel):
    """Rigid transform (4x4) of a GaussianSet: means and rotations move."""
    from .heads import GaussianSet
    R, t = rel[:3, :3], rel[:3, 3]
    means = dc.matmul(gset.means, dc.constant(R.T)) + t
    q_rel = rot_to_quat(R)
    rot = quat_mul_t(dc.constant(np.tile(q_rel, (gset.n, 1))), gset.rotations)
    return GaussianSet(means=means, opacities=gset.opacities, scales=gset.scales,
                       rotations=rot, logits=gset.logits, features=gset.features)


def temporal_render(gset, flows, rig, poses, channels=None, t0=0, **kw):
    """Render the set into every camera at each requested relative step.

    flows: dict t -> (N,3) Tensor/array for t != 0; poses: dict t -> EgoPose.
    Returns dict t -> list of RenderedView per camera.
    """
    from .heads import apply_flow
    if t0 not in poses:
        raise ValueError("poses must include the current frame t=0")
    base_pose = poses[t0]
    out = {}
    for t in sorted(poses):
        if t == t0:
            moved = gset
        else:
            if t not in flows:
                raise ValueError(f"no flow provided for relative step {t}")
            moved = apply_flow(gset, flows[t])
        rel = poses[t].ego_from_world @ base_pose.world_from_ego
        if np.allclose(rel, np.eye(4), atol=1e-14) and t == t0:
            placed = moved
        else:
            placed = transform_set(moved, rel)
        ch = channels if channels is not None else placed.logits
        out[t] = rasterize_rig(placed, list(rig), channels=ch, **kw)
    return out


# ----------------------------------------------------------------- exports

def export_view(view, path_prefix, class_count=None, palette=None):
    """Raw blobs plus a 16-bit millimeter PGM for depth and an argmax PNG."""
    dc.write_arrays(str(path_prefix) + ".bin", {
        "depth": view.depth.data, "sem": view.sem.data, "alpha": view.alpha.data})
    depth_mm = np.clip(view.depth.data * 1000.0, 0, 65535).astype(">u2")
    h, w = depth_mm.shape
    with open(str(path_prefix) + "_depth.pgm", "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(depth_mm.tobytes())
    try:
        from PIL import Image
    except ImportError:
        return
    C = view.sem.data.shape[-1] if class_count is None else class_count
    if palette is None:
        rng = np.random.default_rng(0)
        palette = (rng.uniform(0.2, 1.0, (C, 3)) * 255).astype(np.uint8)
    arg = np.argmax(view.sem.data, axis=-1)
    img = palette[arg]
    img[view.alpha.data < 0.5] = 0
    Image.fromarray(img.astype(np.uint8)).save(str(path_prefix) + "_sem.png")
