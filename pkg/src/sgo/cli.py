"""Command line interface.

Subcommands: gen, train, eval, render, voxelize, bench-attention.
Exit codes: 0 ok, 2 bad usage or configuration, 3 missing input,
4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, diffcore as dc
from .config import apply_overrides, load_config
from .scenegen import (Dataset, SceneConfig, TrajectoryConfig,
                       generate_dataset, world_occupancy)
from .splat import export_view, temporal_render
from .trainer import (DivergenceError, ModelConfig, OccupancyModel,
                      TrainConfig, Trainer, evaluate_model, write_history_csv,
                      write_metrics)
from .voxel import GridSpec, voxelize

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


def _build_parser():
    p = argparse.ArgumentParser(prog="sgo",
                                description="sparse-Gaussian occupancy toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--set", dest="sets", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override a configuration value")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen", help="generate a synthetic scene dataset")
    common(g)
    g.add_argument("--seed", type=int, default=None,
                   help="base seed (overrides scene.seed)")

    t = sub.add_parser("train", help="train an occupancy model")
    common(t)
    t.add_argument("--data", required=True, action="append",
                   help="dataset directory (repeatable)")

    e = sub.add_parser("eval", help="evaluate a trained model")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True, help="checkpoint path prefix")

    r = sub.add_parser("render", help="render model views for one frame")
    common(r)
    r.add_argument("--data", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--frame", type=int, default=0)

    v = sub.add_parser("voxelize", help="voxelize the model's Gaussian set")
    common(v)
    v.add_argument("--data", required=True)
    v.add_argument("--model", required=True)
    v.add_argument("--frame", type=int, default=0)

    b = sub.add_parser("bench-attention",
                       help="measure induced vs full attention cost")
    common(b)
    b.add_argument("--sizes", default="1000,2000,4000",
                   help="comma separated token counts")
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--inducing", type=int, default=500)
    return p


def _load_cfg(args):
    cfg = load_config(args.config)
    return apply_overrides(cfg, args.sets)


def _write_manifest(out, args, cfg):
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": cfg,
        "version": __version__,
        "numpy": np.__version__,
    }
    with open(Path(out) / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _model_cfg(cfg):
    m = dict(cfg["model"])
    m["fixed_heads"] = tuple(m.get("fixed_heads", []))
    m["encoder_channels"] = tuple(m.get("encoder_channels", (16, 32)))
    return ModelConfig(**m)


def _load_dataset(path):
    p = Path(path)
    if not (p / "meta.json").exists():
        raise FileNotFoundError(f"no dataset at {path} (meta.json missing)")
    return Dataset(str(p))


def _load_model(path):
    if not Path(str(path) + ".json").exists():
        raise FileNotFoundError(f"no model checkpoint at {path}")
    return OccupancyModel.load(str(path))


def _grid_spec(cfg):
    g = cfg["grid"]
    return GridSpec(origin=tuple(g["origin"]), voxel_size=g["voxel_size"],
                    dims=tuple(g["dims"]))


def _forward_frame(model, scene, frame_index):
    """One inference pass over frames 0..frame_index carrying memory."""
    if not 0 <= frame_index < scene.n_frames:
        raise FileNotFoundError(
            f"frame {frame_index} out of range (scene has {scene.n_frames})")
    from .heads import advance_memory
    memory = None
    for fi in range(frame_index + 1):
        frame = scene.frame(fi)
        with dc.recording():
            gset = model.forward(dc.constant(frame.images.astype(np.float64)),
                                 scene.rig, memory=memory)
            if model.temporal is not None and fi < frame_index:
                flow = model.flows_for(gset, (1,))[1]
                memory = advance_memory(gset, flow, frame.pose,
                                        scene.frame(fi + 1).pose)
    return gset.detached(), frame


def cmd_gen(args, cfg, out):
    sc = cfg["scene"]
    seed = args.seed if args.seed is not None else sc["seed"]
    scene_config = SceneConfig(n_boxes=sc["n_boxes"], n_movers=sc["n_movers"],
                               n_poles=sc["n_poles"],
                               n_ellipsoids=sc["n_ellipsoids"],
                               n_walls=sc["n_walls"])
    traj = TrajectoryConfig(n_frames=sc["n_frames"], dt=sc["dt"])
    n_scenes = sc["n_scenes"]
    for i in range(n_scenes):
        target = out if n_scenes == 1 else out / f"scene_{i:03d}"
        target.mkdir(parents=True, exist_ok=True)
        generate_dataset(str(target), seed + i, scene_config, traj)
    print(f"wrote {n_scenes} scene(s) under {out}")
    return 0


def cmd_train(args, cfg, out):
    scenes = [_load_dataset(d) for d in args.data]
    model = OccupancyModel(_model_cfg(cfg), seed=cfg["train"]["seed"])
    tcfg = TrainConfig(**cfg["train"])
    trainer = Trainer(model, scenes, tcfg)
    trainer.run(log=lambda rec: print(
        f"step {rec['step']:5d}  loss {rec['loss']:.6f}  "
        f"grad {rec['grad_norm']:.4f}"))
    model.save(str(out / "model.bin"))
    write_history_csv(out / "history.csv", trainer.history)
    metrics = evaluate_model(model, scenes[0], _grid_spec(cfg),
                             tau_free=cfg["grid"]["tau_free"])
    write_metrics(out / "metrics.json", metrics)
    print(f"final loss {trainer.history[-1]['loss']:.6f}  "
          f"miou {metrics['miou']:.4f}")
    return 0


def cmd_eval(args, cfg, out):
    scene = _load_dataset(args.data)
    model = _load_model(args.model)
    metrics = evaluate_model(model, scene, _grid_spec(cfg),
                             tau_free=cfg["grid"]["tau_free"])
    write_metrics(out / "metrics.json", metrics)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_render(args, cfg, out):
    scene = _load_dataset(args.data)
    model = _load_model(args.model)
    gset, frame = _forward_frame(model, scene, args.frame)
    with dc.recording():
        probs = dc.sigmoid(gset.logits)
        views = temporal_render(gset, {}, scene.rig, {0: frame.pose},
                                channels=probs)[0]
    for li, view in enumerate(views):
        export_view(view, out / f"frame{args.frame:05d}_cam{li}")
    gset.export_ply(out / f"frame{args.frame:05d}.ply")
    print(f"wrote {len(views)} views to {out}")
    return 0


def cmd_voxelize(args, cfg, out):
    scene = _load_dataset(args.data)
    model = _load_model(args.model)
    spec = _grid_spec(cfg)
    gset, frame = _forward_frame(model, scene, args.frame)
    grid = voxelize(gset, spec, tau_free=cfg["grid"]["tau_free"])
    grid.save(str(out / f"frame{args.frame:05d}_grid"))
    grid.dump_xyz(out / f"frame{args.frame:05d}_grid.xyz")
    gt = world_occupancy(scene.world, spec, frame.pose, frame.pose.timestamp)
    from .trainer import occupancy_metrics
    metrics = occupancy_metrics(grid.labels, gt.labels, model.cfg.class_count)
    write_metrics(out / f"frame{args.frame:05d}_occupancy.json", metrics)
    print(f"miou {metrics['miou']:.4f}  voxel acc {metrics['voxel_acc']:.4f}")
    return 0


def cmd_bench(args, cfg, out):
    from .bench import doubling_ratios, run_bench, write_bench_csv
    sizes = tuple(int(s) for s in args.sizes.split(","))
    rows = run_bench(sizes=sizes, dim=args.dim, m_inducing=args.inducing)
    write_bench_csv(out / "bench.csv", rows)
    ratios = doubling_ratios(rows)
    write_metrics(out / "bench_ratios.json", ratios)
    for row in rows:
        print(f"{row['kind']:8s} n={row['n']:6d}  flops={row['flops']:.3e}  "
              f"bytes={row['bytes']:.3e}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "render": cmd_render, "voxelize": cmd_voxelize,
            "bench-attention": cmd_bench}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_cfg(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, args, cfg)
        return COMMANDS[args.command](args, cfg, out)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, TypeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
