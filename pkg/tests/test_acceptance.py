"""End-to-end acceptance suite.

Each test checks one system-level contract and prints a single PASS/FAIL
summary line (visible with pytest -s, or in the captured output on
failure). The training-based checks share datasets through session
fixtures and use budgets small enough for a laptop CPU.
"""
import json
import time

import numpy as np
import pytest

from sgo import diffcore as dc
from sgo.bench import doubling_ratios, run_bench
from sgo.cli import EXIT_DIVERGED, main
from sgo.geometry import Camera, CameraRig, look_rotation, normalize_rows_t, quat_to_rot, rt_to_mat
from sgo.heads import GaussianSet, TemporalModule
from sgo.scenegen import SceneConfig, TrajectoryConfig, generate_dataset, world_occupancy
from sgo.splat import composite, composite_reference, project_set
from sgo.trainer import (ModelConfig, OccupancyModel, TrainConfig, Trainer,
                         evaluate_model, frame_loss, occupancy_metrics,
                         write_metrics)
from sgo.transformer import GaussianTransformer, TransformerConfig
from sgo.voxel import FREE, GridSpec, VoxelGrid, accumulate, eval_full, voxel_ce_loss, voxelize


def report(name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" | {detail}" if detail else "")
    print("\n" + line, flush=True)
    assert ok, line


# ----------------------------------------------------------------- helpers

def forward_cam(width=56, height=32, f=30.0):
    cam = Camera(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width,
                 height=height,
                 cam_from_ego=rt_to_mat(look_rotation(0.0), [0, 0, 0]))
    return CameraRig([cam]).validate()[0]


def random_set(n, seed, class_count=3):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-3.0, 3.0, size=(n, 3))
    pos[:, 0] = rng.uniform(1.5, 8.0, size=n)
    pos[:, 2] = rng.uniform(-0.5, 1.5, size=n)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        means=dc.constant(pos),
        opacities=dc.constant(rng.uniform(0.1, 0.95, size=n)),
        scales=dc.constant(rng.uniform(0.08, 0.5, size=(n, 3))),
        rotations=dc.constant(q),
        logits=dc.constant(rng.normal(size=(n, class_count))),
        features=dc.constant(rng.normal(size=(n, 8))),
    )


EVAL_FRAMES = range(0, 12, 3)

# reduced model/budget for the ablation sweeps; every compared run inside a
# test uses the identical seed and budget, only the ablated switch differs
ABL_MODEL = dict(n_gaussians=256, m_inducing=32, latent_dim=32, n_blocks=2,
                 heads=4, gica_points=4, class_count=6, horizon=2,
                 encoder_channels=(8, 16))
ABL_TRAIN = dict(steps=250, lr=1e-3, batch_size=2, seed=0)


def train_and_eval(dataset, model_kw, train_kw, eval_frames=EVAL_FRAMES):
    model = OccupancyModel(ModelConfig(**model_kw), seed=0)
    trainer = Trainer(model, [dataset], TrainConfig(**train_kw))
    trainer.run()
    metrics = evaluate_model(model, dataset, frames=eval_frames)
    return model, trainer, metrics


def temporal_render_loss(model, scene, frame_indices=(0, 3, 6)):
    """Rendering loss over each frame's temporal window, without any
    regularizers, as a comparable goodness-of-fit number."""
    horizon = model.cfg.horizon
    total = 0.0
    for fi in frame_indices:
        frames = {t: scene.frame(fi + t) for t in range(horizon + 1)}
        with dc.recording():
            gset = model.forward(
                dc.constant(frames[0].images.astype(np.float64)), scene.rig)
            loss, _ = frame_loss(model, gset, scene.rig, frames)
        total += float(loss.data)
    return total / len(frame_indices)


@pytest.fixture(scope="session")
def static_scene(tmp_path_factory):
    path = tmp_path_factory.mktemp("acc") / "static"
    return generate_dataset(path, seed=0,
                            scene_config=SceneConfig(n_movers=0),
                            traj_config=TrajectoryConfig(n_frames=12))


@pytest.fixture(scope="session")
def dynamic_scene(tmp_path_factory):
    path = tmp_path_factory.mktemp("acc") / "dynamic"
    return generate_dataset(path, seed=0,
                            scene_config=SceneConfig(n_movers=1),
                            traj_config=TrajectoryConfig(n_frames=12))


# ------------------------------------------------- 1. renderer equivalence

def test_renderer_matches_reference_on_many_scenes():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    H, W = 32, 56
    for i in range(200):
        n = int(rng.integers(8, 65))
        cam = forward_cam(W, H)
        gset = random_set(n, seed=1000 + i)
        pix, conic, z, opa, valid, radius = project_set(gset, cam)
        chan = dc.concat([gset.logits,
                          dc.reshape(gset.opacities, (n, 1))], axis=1)
        tiled = composite(pix, conic, z, opa, chan, valid, radius, H, W)
        ref = composite_reference(pix.data, conic.data, z.data, opa.data,
                                  chan.data, valid, H, W)
        worst = max(worst, float(np.max(np.abs(tiled.data - ref))))
    dt = time.time() - t0
    report("renderer: tiled vs reference, 200 scenes",
           worst <= 1e-9 and dt < 60.0,
           f"max |diff| = {worst:.3e} (<= 1e-9), {dt:.1f}s (< 60s)")


# ------------------------------------------------------- 2. gradient suite

def _splat_program(n, seed, H=24, W=32):
    rng = np.random.default_rng(seed + 999)
    cam = forward_cam(W, H, f=20.0)
    weights = rng.normal(size=(H, W, 4 + 2))   # logits+opacity, +depth/alpha
    base = random_set(n, seed=seed)

    def program(means, opac_raw, scales_raw, rot_raw, logits):
        gset = GaussianSet(means, dc.sigmoid(opac_raw),
                           dc.softplus(scales_raw) + 0.05,
                           normalize_rows_t(rot_raw), logits, base.features)
        pix, conic, z, opa, valid, radius = project_set(gset, cam)
        chan = dc.concat([gset.logits,
                          dc.reshape(gset.opacities, (n, 1))], axis=1)
        img = composite(pix, conic, z, opa, chan, valid, radius, H, W)
        return (img * weights).sum()

    point = {
        "means": base.means.data,
        "opac_raw": rng.normal(size=n),
        "scales_raw": rng.normal(size=(n, 3)) - 1.0,
        "rot_raw": base.rotations.data * 2.0,
        "logits": base.logits.data,
    }
    return program, point


def _voxel_ce_program(seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec(origin=(-1.0, -1.0, -1.0), voxel_size=1.0, dims=(2, 2, 2))
    labels = rng.integers(-1, 3, size=(2, 2, 2))
    gt = VoxelGrid(spec, (labels != FREE).astype(float), labels, class_count=3)
    n = 5
    point = {
        "m": rng.uniform(-1, 1, size=(n, 3)),
        "o": rng.normal(size=n),
        "s": rng.normal(size=(n, 3)),
        "r": rng.normal(size=(n, 4)) + np.array([2.0, 0, 0, 0]),
        "c": rng.normal(size=(n, 3)),
    }

    def program(m, o, s, r, c):
        gset = GaussianSet(m, dc.sigmoid(o), dc.softplus(s) + 0.3,
                           normalize_rows_t(r), c,
                           dc.constant(np.zeros((n, 2))))
        return voxel_ce_loss(gset, gt, trunc_sigmas=50.0)

    return program, point


def _network_program(seed):
    """Encoder + transformer + heads + temporal flow in one scalar program."""
    from sgo.encoder import ImageEncoder
    from sgo.heads import GaussianHeads

    ps = dc.ParamStore(seed=seed)
    dim = 8
    enc = ImageEncoder(ps, latent_dim=dim, channels=(4,))
    cfg = TransformerConfig(n_gaussians=10, latent_dim=dim, n_blocks=1,
                            m_inducing=4, heads=2, gica_points=2,
                            extents=((-4, 4), (-4, 4), (-1, 2)))
    tr = GaussianTransformer(ps, cfg)
    heads = GaussianHeads(ps, dim, 3, extents=cfg.extents)
    temporal = TemporalModule(ps, dim, 1)
    rig = CameraRig([forward_cam(16, 8, f=6.0)]).validate()
    rng = np.random.default_rng(seed)
    wm = rng.normal(size=(10, 3))
    ws = rng.normal(size=(10, 3))
    wf = rng.normal(size=(10, 3))

    def program(images):
        feats = enc(images)
        state = tr.run_blocks(feats, rig, enc.stride)
        g = heads(state)
        flow = temporal.flow(g.features, 1)
        return ((g.means * wm).sum() + g.opacities.sum()
                + (g.scales * ws).sum() + g.logits.sum()
                + (flow * wf).sum())

    point = {"images": rng.uniform(size=(1, 9, 9, 3))}
    return program, point


def test_gradient_suite():
    t0 = time.time()
    failures = []
    for seed in range(20):
        program, point = _splat_program(6, seed)
        rep = dc.grad_check(program, point, eps=1e-6, tol_rel=1e-3)
        if not rep.passed:
            failures.append(("splat", seed, rep.failures[:2]))
    for seed in range(20):
        program, point = _voxel_ce_program(seed)
        rep = dc.grad_check(program, point, tol_rel=1e-4)
        if not rep.passed:
            failures.append(("voxel_ce", seed, rep.failures[:2]))
    for seed in range(20):
        program, point = _network_program(seed)
        # floor: image pixels barely sampled by the cross-attention carry
        # gradients ~1e-7 where central differences are pure roundoff
        rep = dc.grad_check(program, point, tol_rel=1e-4, floor=1e-5)
        if not rep.passed:
            failures.append(("network", seed, rep.failures[:2]))
    dt = time.time() - t0
    report("gradients: splat/voxel/network suites, 20 instances each",
           not failures and dt < 300.0,
           f"{len(failures)} failures, {dt:.1f}s (< 300s)" +
           (f" first={failures[:1]}" if failures else ""))


# ----------------------------------------------------- 3. attention scaling

def test_attention_cost_scaling():
    t0 = time.time()
    rows = run_bench(sizes=(1000, 2000, 4000), dim=64, m_inducing=500)
    ratios = doubling_ratios(rows)
    induced = [r["bytes_ratio"] for r in ratios["induced"]]
    full = [r["bytes_ratio"] for r in ratios["full"]]
    dt = time.time() - t0
    ok = (all(1.8 <= r <= 2.2 for r in induced)
          and all(3.6 <= r <= 4.4 for r in full) and dt < 120.0)
    report("attention: memory doubling ratios",
           ok,
           f"induced {[f'{r:.2f}' for r in induced]} in [1.8,2.2], "
           f"full {[f'{r:.2f}' for r in full]} in [3.6,4.4], {dt:.1f}s (< 120s)")


# ----------------------------------------- 4. static end-to-end training

@pytest.fixture(scope="session")
def static_run(static_scene):
    model_kw = dict(n_gaussians=512, m_inducing=64, latent_dim=64, n_blocks=2,
                    class_count=6, horizon=2)
    train_kw = dict(steps=STATIC_STEPS, lr=1e-3, batch_size=2, seed=0)
    t0 = time.time()
    model, trainer, metrics = train_and_eval(static_scene, model_kw, train_kw)
    metrics["_minutes"] = (time.time() - t0) / 60.0
    return model, trainer, metrics


STATIC_STEPS = 600


def test_static_training_reaches_targets(static_run):
    _, _, m = static_run
    ok = (m["depth"]["abs_rel"] < 0.15 and m["pixel_acc"] > 0.80
          and m["miou"] > 0.30 and m["_minutes"] <= 30.0)
    report("static training: depth/semantics/occupancy targets", ok,
           f"abs_rel {m['depth']['abs_rel']:.3f} (< 0.15), "
           f"pixel_acc {m['pixel_acc']:.3f} (> 0.80), "
           f"miou {m['miou']:.3f} (> 0.30), {m['_minutes']:.1f} min (<= 30)")


# ------------------------------------------------- 5. temporal flow ablation

def test_temporal_flow_beats_zero_flow(dynamic_scene):
    t0 = time.time()
    kw = dict(ABL_MODEL)
    with_flow = train_and_eval(dynamic_scene, kw, ABL_TRAIN)
    without = train_and_eval(dynamic_scene, dict(kw, zero_flow=True), ABL_TRAIN)
    loss_w = temporal_render_loss(with_flow[0], dynamic_scene)
    loss_z = temporal_render_loss(without[0], dynamic_scene)
    miou_w = with_flow[2]["miou"]
    miou_z = without[2]["miou"]
    dt = (time.time() - t0) / 60.0
    ok = loss_w < loss_z and miou_w > miou_z and dt <= 60.0
    report("temporal flow vs zero-flow on a dynamic scene", ok,
           f"loss {loss_w:.4f} < {loss_z:.4f}, "
           f"miou {miou_w:.3f} > {miou_z:.3f}, {dt:.1f} min (<= 60)")


# ----------------------------------- 6. horizon sweep and divergence guard

def test_horizon_helps_and_divergence_aborts(static_scene, tmp_path):
    results = {}
    for horizon in (0, 2, 4):
        kw = dict(ABL_MODEL, horizon=horizon)
        results[horizon] = train_and_eval(static_scene, kw, ABL_TRAIN)[2]
    miou = {h: results[h]["miou"] for h in results}

    code = main([
        "train", "--out", str(tmp_path / "div"), "--data",
        str(static_scene.path),
        "--set", f"train.lr={ABL_TRAIN['lr'] * 50}",
        "--set", "train.steps=80", "--set", "train.batch_size=2",
        "--set", "model.n_gaussians=256", "--set", "model.m_inducing=32",
        "--set", "model.latent_dim=32", "--set", "model.encoder_channels=[8,16]",
    ])
    ok = (miou[2] > miou[0] and miou[4] > miou[0] and code == EXIT_DIVERGED)
    report("temporal supervision horizon sweep + divergence guard", ok,
           f"miou T0 {miou[0]:.3f}, T2 {miou[2]:.3f}, T4 {miou[4]:.3f} "
           f"(T>0 beats T=0), lr x50 exit code {code} (== {EXIT_DIVERGED})")


# ----------------------------------------------- 7. per-head parameter sweep

def test_learned_heads_improve_monotonically(static_scene):
    configs = [
        ("mean-only", ("opacity", "scale", "rotation")),
        ("+opacity", ("scale", "rotation")),
        ("+opacity+scale", ("rotation",)),
        ("all", ()),
    ]
    mious = []
    for _, fixed in configs:
        kw = dict(ABL_MODEL, fixed_heads=fixed)
        mious.append(train_and_eval(static_scene, kw, ABL_TRAIN)[2]["miou"])
    ok = all(a < b for a, b in zip(mious, mious[1:]))
    detail = ", ".join(f"{name} {v:.3f}" for (name, _), v in zip(configs, mious))
    report("head ablation: each learned property helps", ok, detail)


# --------------------------------------------------- 8. voxelizer closed form

def test_voxelizer_closed_form_and_invariances():
    rng = np.random.default_rng(11)
    worst = 0.0
    for dims in ((4, 4, 4), (6, 6, 6), (8, 8, 8)):
        spec = GridSpec(origin=(-2.0, -2.0, -2.0), voxel_size=4.0 / dims[0],
                        dims=dims)
        gset = random_set(12, seed=int(rng.integers(1 << 30)))
        gset.means.data[:] = rng.uniform(-1.8, 1.8, size=(12, 3))
        vo, vc = accumulate(gset, spec)
        fo, fc = eval_full(gset, spec)
        worst = max(worst, float(np.max(np.abs(vo.data - fo))),
                    float(np.max(np.abs(vc.data - fc))))

    # single isotropic Gaussian: kernel value has a closed form
    spec = GridSpec(origin=(-1.0, -1.0, -1.0), voxel_size=0.5, dims=(4, 4, 4))
    mu = np.array([0.2, -0.1, 0.3])
    sig, opa = 0.4, 0.7
    g1 = GaussianSet(dc.constant(mu[None]), dc.constant(np.array([opa])),
                     dc.constant(np.full((1, 3), sig)),
                     dc.constant(np.array([[1.0, 0, 0, 0]])),
                     dc.constant(np.zeros((1, 2))),
                     dc.constant(np.zeros((1, 2))))
    vo1, _ = accumulate(g1, spec, trunc_sigmas=50.0)
    d2 = np.sum((spec.centers() - mu) ** 2, axis=-1)
    expect = opa * np.exp(-0.5 * d2 / sig ** 2)
    kernel_err = float(np.max(np.abs(vo1.data - expect)))

    # argmax labels are invariant to a common positive rescale of logits
    big = random_set(30, seed=99, class_count=4)
    grid_a = voxelize(big, spec)
    big2 = GaussianSet(big.means, big.opacities, big.scales, big.rotations,
                       big.logits * 7.3, big.features)
    grid_b = voxelize(big2, spec)
    rescale_ok = np.array_equal(grid_a.labels, grid_b.labels)

    ok = worst <= 1e-6 and kernel_err <= 1e-12 and rescale_ok
    report("voxelizer: truncation error, kernel closed form, label invariance",
           ok,
           f"trunc err {worst:.2e} (<= 1e-6), kernel err {kernel_err:.2e} "
           f"(<= 1e-12), rescale invariant {rescale_ok}")


# ------------------------------------------------ 9. depth supervision value

def test_depth_supervision_helps(static_scene):
    from sgo.voxel import desk_grid
    with_depth = train_and_eval(static_scene, ABL_MODEL, ABL_TRAIN)[2]
    no_depth = train_and_eval(static_scene, ABL_MODEL,
                              dict(ABL_TRAIN, w_depth=0.0))[2]
    # baseline that declares every voxel free
    spec = desk_grid()
    frees = []
    for fi in EVAL_FRAMES:
        pose = static_scene.frame(fi).pose
        gt = world_occupancy(static_scene.world, spec, pose, pose.timestamp)
        pred = np.full(spec.dims, FREE)
        frees.append(occupancy_metrics(pred, gt.labels, 6)["miou"])
    baseline = float(np.mean(frees))
    ok = (with_depth["miou"] >= no_depth["miou"]
          and no_depth["miou"] > baseline)
    report("depth supervision ablation", ok,
           f"with-depth miou {with_depth['miou']:.3f} >= "
           f"no-depth {no_depth['miou']:.3f} > all-free {baseline:.3f}")


# ------------------------------------------------------- 10. determinism

def test_training_is_bit_deterministic(static_scene, dynamic_scene, tmp_path):
    short = dict(ABL_TRAIN, steps=40)
    pairs = []
    for name, scene in (("static", static_scene), ("dynamic", dynamic_scene)):
        outs = []
        for rep in range(2):
            metrics = train_and_eval(scene, ABL_MODEL, short,
                                     eval_frames=range(0, 6, 3))[2]
            path = tmp_path / f"{name}_{rep}.json"
            write_metrics(path, metrics)
            outs.append(path.read_bytes())
        pairs.append((name, outs[0] == outs[1]))
    ok = all(same for _, same in pairs)
    report("determinism: identical seeds give identical metrics files", ok,
           ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in pairs))
