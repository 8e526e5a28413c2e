"""Training loop and evaluation for the sparse-Gaussian occupancy model.

Supervision is 2D only: rendered depth against ray-cast depth and rendered
per-class probabilities against label images, summed over a short temporal
horizon. Occupancy quality is measured after training by voxelizing the
Gaussian set and comparing against the analytic occupancy of the scene.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from .encoder import ImageEncoder
from .heads import GaussianHeads, TemporalModule, advance_memory
from .scenegen import SKY, world_occupancy
from .splat import temporal_render
from .transformer import GaussianTransformer, TransformerConfig, DEFAULT_ORDER
from .voxel import FREE, desk_grid, voxelize

PROB_EPS = 1e-6
DEPTH_FLOOR = 1e-3
MAX_DEPTH = 20.0    # supervision/eval cap; the ground plane extends to the horizon


class DivergenceError(RuntimeError):
    """Raised when the training loss blows up or turns non-finite."""

    def __init__(self, step, value):
        super().__init__(f"training diverged at step {step}: loss={value!r}")
        self.step = step
        self.value = value


@dataclass
class ModelConfig:
    n_gaussians: int = 512
    m_inducing: int = 64
    latent_dim: int = 64
    n_blocks: int = 2
    heads: int = 4
    gica_points: int = 4
    class_count: int = 6
    horizon: int = 1
    extents: tuple = ((-8.0, 8.0), (-8.0, 8.0), (-0.4, 2.8))
    attention: str = "induced"
    order: tuple = DEFAULT_ORDER
    encoder_channels: tuple = (16, 32)
    s_min: float = 0.02
    s_max: float = 0.5
    fixed_heads: tuple = ()
    temporal: bool = True
    # keep temporal rendering but force every predicted flow to zero;
    # isolates the contribution of the motion estimate itself
    zero_flow: bool = False


@dataclass
class TrainConfig:
    steps: int = 400
    lr: float = 2e-3
    batch_size: int = 2
    seed: int = 0
    w_depth: float = 1.0
    w_sem: float = 1.0
    w_alpha: float = 1.0
    # pull toward the initial grid: rendering losses cannot recruit a
    # Gaussian back into a camera it has left (zero gradient once culled),
    # so unanchored means slowly evacuate entire views
    w_anchor: float = 0.05
    grad_clip: float = 5.0
    loss_ceiling: float = 1e4
    log_every: int = 25


class OccupancyModel:
    """Encoder + Gaussian transformer + property heads (+ temporal flow)."""

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        self.ps = dc.ParamStore(seed=seed)
        self.encoder = ImageEncoder(self.ps, latent_dim=cfg.latent_dim,
                                    channels=cfg.encoder_channels)
        tcfg = TransformerConfig(
            n_gaussians=cfg.n_gaussians, latent_dim=cfg.latent_dim,
            n_blocks=cfg.n_blocks, m_inducing=cfg.m_inducing, heads=cfg.heads,
            gica_points=cfg.gica_points, extents=cfg.extents,
            order=cfg.order, attention=cfg.attention)
        self.transformer = GaussianTransformer(self.ps, tcfg)
        self.heads = GaussianHeads(self.ps, cfg.latent_dim, cfg.class_count,
                                   s_min=cfg.s_min, s_max=cfg.s_max,
                                   extents=cfg.extents)
        self.temporal = None
        if cfg.temporal and cfg.horizon > 0:
            self.temporal = TemporalModule(self.ps, cfg.latent_dim, cfg.horizon)

    def forward(self, images, rig, memory=None):
        """images (L, H, W, 3) -> GaussianSet. memory: TemporalMemory or None."""
        feats = self.encoder(images)
        mem = None
        if memory is not None:
            mem = (memory.means, memory.features)
        state = self.transformer.run_blocks(feats, rig, self.encoder.stride,
                                            memory=mem)
        return self.heads(state, fixed=self.cfg.fixed_heads)

    def flows_for(self, gset, offsets):
        """Per-Gaussian displacement for each requested relative step."""
        flows = {}
        for t in offsets:
            if t == 0:
                continue
            if self.temporal is None or self.cfg.zero_flow:
                flows[t] = dc.constant(np.zeros((gset.n, 3)))
            else:
                flows[t] = self.temporal.flow(gset.features, t)
        return flows

    def save(self, path):
        self.ps.save(str(path))
        with open(str(path) + ".json", "w") as f:
            json.dump(asdict(self.cfg), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(str(path) + ".json") as f:
            raw = json.load(f)
        for key in ("extents", "order", "encoder_channels", "fixed_heads"):
            raw[key] = tuple(tuple(v) if isinstance(v, list) else v
                             for v in raw[key]) if key == "extents" else tuple(raw[key])
        model = cls(ModelConfig(**raw))
        model.ps.load(str(path))
        return model


# -------------------------------------------------------------------- losses

def masked_depth_loss(pred, gt, mask, confidence=None):
    """Mean squared relative depth error over pixels where mask is true.

    confidence: optional detached per-pixel weight in [0, 1], typically the
    rendered alpha. Normalized depth divides by accumulated alpha, so its
    gradient carries a 1/alpha factor that explodes on barely covered
    pixels; weighting by alpha cancels it and leaves coverage to its own
    loss term."""
    m = mask.astype(np.float64)
    if confidence is not None:
        m = m * np.clip(confidence, 0.0, 1.0)
    count = max(m.sum(), 1.0)
    # relative error: squared absolute error lets the far ground plane
    # dominate and leaves nearby objects underfit
    inv = m / np.maximum(gt, DEPTH_FLOOR)
    diff = (pred - dc.constant(gt)) * dc.constant(inv)
    return dc.sum_(diff * diff) * (1.0 / count)


def semantic_bce_loss(probs, gt_sem, class_count, mask, balanced=True):
    """Per-channel binary cross entropy of composited class probabilities
    against one-hot labels, averaged over unmasked pixels and channels.

    balanced: reweight pixels by inverse label frequency within the image.
    The ground plane owns most rays, and an unweighted average collapses
    every semantic head onto that single class."""
    onehot = np.zeros(gt_sem.shape + (class_count,))
    valid = gt_sem >= 0
    yy, xx = np.nonzero(valid)
    onehot[yy, xx, gt_sem[valid]] = 1.0
    m = (mask & valid).astype(np.float64)
    if balanced:
        freq = np.bincount(gt_sem[valid & mask].ravel(),
                           minlength=class_count).astype(np.float64)
        inv = np.where(freq > 0, 1.0 / np.maximum(freq, 1.0), 0.0)
        pix_w = np.zeros(gt_sem.shape)
        pix_w[yy, xx] = inv[gt_sem[valid]]
        m = m * pix_w
    m = m[..., None]
    count = max(m.sum() * class_count, 1e-12)
    w = np.broadcast_to(m / count, onehot.shape)
    return dc.bce_loss(probs, onehot, weight=w, eps=PROB_EPS)


def alpha_coverage_loss(alpha, gt_sem):
    """BCE of accumulated alpha against ray-hit indicators. Sky rays push
    transmittance up (free space empties out); hit rays push coverage up.
    Without this term empty regions receive no supervision at all."""
    target = (gt_sem != SKY).astype(np.float64)
    w = np.full(target.shape, 1.0 / target.size)
    return dc.bce_loss(dc.clip(alpha, 0.0, 1.0 - PROB_EPS), target,
                       weight=w, eps=PROB_EPS)


def frame_loss(model, gset, rig, frames_by_t, w_depth=1.0, w_sem=1.0,
               w_alpha=1.0):
    """Rendering loss for one sample over its temporal horizon.

    frames_by_t: dict relative step -> FrameRecord (0 must be present).
    """
    offsets = sorted(frames_by_t)
    flows = model.flows_for(gset, offsets)
    poses = {t: frames_by_t[t].pose for t in offsets}
    probs = dc.sigmoid(gset.logits)
    views = temporal_render(gset, flows, rig, poses, channels=probs)
    total = None
    n_terms = 0
    for t in offsets:
        frame = frames_by_t[t]
        for li, view in enumerate(views[t]):
            gt_depth = frame.depth[li]
            gt_sem = frame.sem[li]
            mask = gt_sem != SKY
            term = None
            if w_depth:
                dmask = mask & (gt_depth <= MAX_DEPTH)
                term = masked_depth_loss(view.depth, gt_depth, dmask,
                                         confidence=view.alpha.data) * w_depth
            if w_sem:
                s = semantic_bce_loss(view.sem, gt_sem,
                                      model.cfg.class_count, mask) * w_sem
                term = s if term is None else term + s
            if w_alpha:
                a = alpha_coverage_loss(view.alpha, gt_sem) * w_alpha
                term = a if term is None else term + a
            total = term if total is None else total + term
            n_terms += 1
    return total * (1.0 / n_terms), flows


# ------------------------------------------------------------------ training

class Trainer:
    """Streams scene frames in order, carrying recurrent Gaussian memory."""

    def __init__(self, model, scenes, train_cfg: TrainConfig):
        if not scenes:
            raise ValueError("need at least one training scene")
        self.model = model
        self.scenes = scenes
        self.cfg = train_cfg
        self.rig = scenes[0].rig
        n = len(scenes)
        self.slots = [{"scene": i % n, "cursor": 0, "memory": None}
                      for i in range(train_cfg.batch_size)]
        self.step_index = 0
        self.history = []
        # frozen copy: the live init_means parameter keeps training
        self._anchor = model.transformer.init_means.data.copy()

    def _sample(self, slot):
        scene = self.scenes[slot["scene"]]
        horizon = self.model.cfg.horizon if self.model.temporal else 0
        if slot["cursor"] + horizon >= scene.n_frames:
            slot["cursor"] = 0
            slot["memory"] = None
        cur = slot["cursor"]
        frames = {t: scene.frame(cur + t) for t in range(horizon + 1)}
        return scene, frames

    def step(self):
        cfg = self.cfg
        losses = []
        updates = []
        with dc.recording() as tape:
            total = None
            for slot in self.slots:
                scene, frames = self._sample(slot)
                images = dc.constant(frames[0].images.astype(np.float64))
                gset = self.model.forward(images, self.rig,
                                          memory=slot["memory"])
                loss, flows = frame_loss(self.model, gset, self.rig, frames,
                                         w_depth=cfg.w_depth, w_sem=cfg.w_sem,
                                         w_alpha=cfg.w_alpha)
                if cfg.w_anchor:
                    drift = gset.means - dc.constant(self._anchor)
                    loss = loss + (drift * drift).mean() * cfg.w_anchor
                total = loss if total is None else total + loss
                losses.append(float(loss.data))
                updates.append((slot, gset, flows, frames))
            total = total * (1.0 / len(self.slots))
            value = float(total.data)
            if not np.isfinite(value) or value > cfg.loss_ceiling:
                raise DivergenceError(self.step_index, value)
            self.model.ps.zero_grad()
            dc.backward(tape, output=total)
        gnorm = self.model.ps.grad_global_norm()
        if not np.isfinite(gnorm):
            raise DivergenceError(self.step_index, gnorm)
        if cfg.grad_clip:
            self.model.ps.clip_grad_norm(cfg.grad_clip)
        self.model.ps.adam_step(cfg.lr)
        for slot, gset, flows, frames in updates:
            if self.model.temporal is not None:
                flow_next = flows.get(1)
                if flow_next is None:
                    flow_next = dc.constant(np.zeros((gset.n, 3)))
                scene = self.scenes[slot["scene"]]
                nxt = min(slot["cursor"] + 1, scene.n_frames - 1)
                slot["memory"] = advance_memory(
                    gset, flow_next, frames[0].pose, scene.frame(nxt).pose)
            slot["cursor"] += 1
        self.step_index += 1
        record = {"step": self.step_index, "loss": value,
                  "grad_norm": float(gnorm)}
        self.history.append(record)
        return record

    def run(self, steps=None, log=None):
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            rec = self.step()
            if log is not None and rec["step"] % self.cfg.log_every == 0:
                log(rec)
        return self.history


# ---------------------------------------------------------------- evaluation

def depth_metrics(pred, gt, mask):
    p = np.maximum(pred[mask], DEPTH_FLOOR)
    g = np.maximum(gt[mask], DEPTH_FLOOR)
    if p.size == 0:
        return {k: 0.0 for k in ("abs_rel", "sq_rel", "rmse", "rmse_log",
                                 "delta1", "delta2", "delta3")}
    ratio = np.maximum(p / g, g / p)
    return {
        "abs_rel": float(np.mean(np.abs(p - g) / g)),
        "sq_rel": float(np.mean((p - g) ** 2 / g)),
        "rmse": float(np.sqrt(np.mean((p - g) ** 2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25 ** 2)),
        "delta3": float(np.mean(ratio < 1.25 ** 3)),
    }


def occupancy_metrics(pred_labels, gt_labels, class_count):
    """IoU per class over the voxel grid; free space is its own class."""
    per_class = {}
    ious = []
    for c in range(class_count):
        inter = int(np.sum((pred_labels == c) & (gt_labels == c)))
        union = int(np.sum((pred_labels == c) | (gt_labels == c)))
        if np.any(gt_labels == c):
            iou = inter / union if union else 0.0
            per_class[str(c)] = iou
            ious.append(iou)
    free_inter = int(np.sum((pred_labels == FREE) & (gt_labels == FREE)))
    free_union = int(np.sum((pred_labels == FREE) | (gt_labels == FREE)))
    out = {
        "iou_per_class": per_class,
        "miou": float(np.mean(ious)) if ious else 0.0,
        "iou_free": free_inter / free_union if free_union else 0.0,
        "voxel_acc": float(np.mean(pred_labels == gt_labels)),
    }
    return out


def evaluate_model(model, scene, grid_spec=None, frames=None, tau_free=0.3):
    """Run the model over a scene, measuring rendered depth quality, semantic
    pixel accuracy, and voxel occupancy IoU against the analytic world."""
    if grid_spec is None:
        grid_spec = desk_grid()
    rig = scene.rig
    indices = range(scene.n_frames) if frames is None else frames
    memory = None
    depth_accum = []
    pix_correct = 0
    pix_total = 0
    occ_accum = []
    for fi in indices:
        frame = scene.frame(fi)
        with dc.recording():
            gset = model.forward(dc.constant(frame.images.astype(np.float64)),
                                 rig, memory=memory)
            probs = dc.sigmoid(gset.logits)
            views = temporal_render(gset, {}, rig, {0: frame.pose},
                                    channels=probs)[0]
        for li, view in enumerate(views):
            mask = frame.sem[li] != SKY
            dmask = mask & (frame.depth[li] <= MAX_DEPTH)
            depth_accum.append(depth_metrics(view.depth.data,
                                             frame.depth[li], dmask))
            pred_cls = np.argmax(view.sem.data, axis=-1)
            pix_correct += int(np.sum(pred_cls[mask] == frame.sem[li][mask]))
            pix_total += int(mask.sum())
        grid = voxelize(gset.detached(), grid_spec, tau_free=tau_free)
        gt = world_occupancy(scene.world, grid_spec, frame.pose,
                             frame.pose.timestamp)
        occ_accum.append(occupancy_metrics(grid.labels, gt.labels,
                                           model.cfg.class_count))
        if model.temporal is not None and fi + 1 < scene.n_frames:
            with dc.recording():
                flow_next = model.flows_for(gset, (1,))[1]
                memory = advance_memory(gset, flow_next, frame.pose,
                                        scene.frame(fi + 1).pose)
        else:
            memory = None
    depth_avg = {k: float(np.mean([d[k] for d in depth_accum]))
                 for k in depth_accum[0]}
    miou = float(np.mean([o["miou"] for o in occ_accum]))
    metrics = {
        "depth": depth_avg,
        "pixel_acc": pix_correct / max(pix_total, 1),
        "miou": miou,
        "iou_free": float(np.mean([o["iou_free"] for o in occ_accum])),
        "voxel_acc": float(np.mean([o["voxel_acc"] for o in occ_accum])),
        "n_frames": len(occ_accum),
    }
    return metrics


def write_metrics(path, metrics):
    """Deterministic metrics serialization (stable key order, full floats)."""
    with open(path, "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")


def write_history_csv(path, history):
    import csv
    with open(path, "w", newline="") as f:
        if not history:
            f.write("")
            return
        writer = csv.DictWriter(f, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)
