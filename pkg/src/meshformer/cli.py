"""Command-line entry points: data generation, clustering, statistics, training, evaluation and analysis."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
STATS_NAME = "norm_stats.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _report(kind: str, message: str):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _read_json(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


# --------------------------------------------------------------------------- commands


def cmd_gen(args):
    from .datagen import generate_dataset

    fractions = tuple(float(x) for x in args.split.split(","))
    manifest = generate_dataset(args.family, args.n_traj, args.steps, args.nodes, args.dt, args.out, args.seed,
                                fractions)
    print(json.dumps({"out": str(args.out), "split": {k: len(v) for k, v in manifest.split.items()}}))


def _all_ids(manifest):
    return [tid for split in ("train", "valid", "test") for tid in manifest.split[split]]


def cmd_cluster(args):
    from .clustering import cache_name, precompute_clusters
    from .mesh import Manifest, load_trajectory, trajectory_path

    manifest = Manifest.load(args.data)
    for tid in _all_ids(manifest):
        path = trajectory_path(args.data, tid)
        traj = load_trajectory(path)
        precompute_clusters(traj, args.size, args.seed, path.parent / cache_name(args.size, args.seed))
    print(json.dumps({"clustered": len(_all_ids(manifest)), "size": args.size, "seed": args.seed}))


def cmd_stats(args):
    from .mesh import compute_norm_stats, load_split

    stats = compute_norm_stats(load_split(args.data, "train").values())
    Path(args.out).write_text(json.dumps(stats.to_dict(), indent=2))
    print(json.dumps(stats.to_dict()))


def _load_stats(data_dir, explicit=None):
    from .mesh import NormStats, compute_norm_stats, load_split

    path = Path(explicit) if explicit else Path(data_dir) / STATS_NAME
    if path.exists():
        return NormStats.from_dict(json.loads(path.read_text()))
    return compute_norm_stats(load_split(data_dir, "train").values())


def _clusters_for(data_dir, tid, traj, size, seed):
    from .clustering import cache_name, load_clusters, precompute_clusters
    from .mesh import trajectory_path

    cache = trajectory_path(data_dir, tid).parent / cache_name(size, seed)
    if cache.exists():
        return load_clusters(traj, cache, size)
    return precompute_clusters(traj, size, seed)


def cmd_train(args):
    from .mesh import load_split
    from .model import ModelConfig
    from .training import Episodes, TrainConfig, load_checkpoint, train

    mc = ModelConfig.from_dict(_read_json(args.model_config))
    td = _read_json(args.train_config)
    for flag, key in (("steps", "steps"), ("seed", "seed"), ("horizon", "horizon"), ("lr", "learning_rate"),
                      ("precision", "precision")):
        if getattr(args, flag) is not None:
            td[key] = getattr(args, flag)
    tc = TrainConfig.from_dict(td)
    trajs = load_split(args.data, "train")
    if not trajs:
        raise ValueError("the train split is empty")
    clusters = [_clusters_for(args.data, tid, t, mc.cluster_size, args.cluster_seed) for tid, t in trajs.items()]
    episodes = Episodes(list(trajs.values()), clusters)
    norm = _load_stats(args.data, args.stats)
    resume = load_checkpoint(args.resume, mc) if args.resume else None
    ckpt = train(episodes, mc, tc, norm, log_path=args.log, resume=resume, checkpoint_path=args.out,
                 deterministic=args.deterministic)
    print(json.dumps({"out": str(args.out), "step": ckpt.step}))


def _model_from_ckpt(path, ablation=None):
    from dataclasses import replace

    from .training import ConfigMismatchError, load_checkpoint

    ckpt = load_checkpoint(path)
    if ablation:
        mode = ablation.replace("-", "_")
        current = ckpt.model_config.attention_mode
        if mode != current and "gnn_coarse" in (mode, current):
            raise ConfigMismatchError(
                f"checkpoint uses attention mode {current!r}; {mode!r} needs a model trained with that mode"
            )
        ckpt.model_config = replace(ckpt.model_config, attention_mode=mode)
    return ckpt.build_model(), ckpt


def cmd_eval(args):
    from .mesh import load_split
    from .metrics import evaluate

    horizons = sorted(int(h) for h in args.horizons.split(","))
    model, ckpt = _model_from_ckpt(args.ckpt, args.ablation)
    trajs = load_split(args.data, args.split)
    if not trajs:
        raise ValueError(f"the {args.split} split is empty")
    clusters = None
    if args.downsample is None:
        clusters = [_clusters_for(args.data, tid, t, model.config.cluster_size, args.cluster_seed)
                    for tid, t in trajs.items()]
    report = evaluate(model, list(trajs.values()), ckpt.norm, horizons, start_stride=args.start_stride,
                      downsample=args.downsample, clusters=clusters)
    report.to_json(args.out)
    if args.csv:
        report.to_csv(args.csv)
    print(report.to_json())


def cmd_rollout(args):
    from .mesh import Trajectory, load_trajectory, save_trajectory
    from .model import rollout

    model, _ = _model_from_ckpt(args.ckpt)
    traj = load_trajectory(args.traj)
    if args.start + args.steps >= len(traj.frames):
        raise ValueError(f"trajectory has {len(traj.frames)} frames; cannot roll {args.steps} steps from {args.start}")
    frames = traj.frames[args.start:args.start + args.steps + 1]
    preds = rollout(model, frames[0], frames[1:], args.steps, order_seed=args.seed)
    out = Trajectory([frames[0]] + [p.astype(np.float32) for p in preds], traj.dt, traj.geometry_tag, traj.seed,
                     {"source": str(args.traj), "start": args.start, "predicted": True})
    save_trajectory(out, args.out)
    print(json.dumps({"out": str(args.out), "frames": len(out.frames)}))


def cmd_attn(args):
    from .clustering import cluster_geometry, same_size_kmeans
    from .mesh import load_trajectory
    from .metrics import attention_dump, save_attention_images
    from .model import forward_step

    model, _ = _model_from_ckpt(args.ckpt)
    traj = load_trajectory(args.traj)
    if not 0 <= args.step < len(traj.frames):
        raise ValueError(f"step {args.step} outside the trajectory's {len(traj.frames)} frames")
    frame = traj.frames[args.step]
    a = same_size_kmeans(frame.positions, model.config.cluster_size, args.cluster_seed)
    geom = cluster_geometry(frame, a)
    _, info = forward_step(model, frame, a, geom, args.seed)
    dump = attention_dump(info["attention"], args.step, model.config.attention_mode, geom.barycenters, geom.adjacency)
    Path(args.out).write_text(json.dumps(dump))
    if args.images:
        save_attention_images(info["attention"], args.images)
    print(json.dumps({"out": str(args.out), "blocks": len(info["attention"]), "clusters": int(a.num_clusters)}))


def cmd_gradcheck(args):
    from .model import ModelConfig
    from .training import run_gradcheck

    mc = ModelConfig.from_dict(_read_json(args.model_config))
    report = run_gradcheck(mc, args.seed, samples=args.samples, epsilon=args.epsilon)
    print(json.dumps(report.to_dict()))
    print(f"max relative error {report.max_rel_error:.3e} over {report.checked} parameters")
    return EXIT_OK if report.max_rel_error < args.tolerance else EXIT_RUNTIME


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meshformer", description="Mesh transformer flow forecasting toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--family", required=True, choices=["taylor-green", "vortex", "rotor-wake", "mixed"])
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--n-traj", type=int, default=10)
    g.add_argument("--steps", type=int, default=60, help="frames per trajectory")
    g.add_argument("--nodes", type=int, default=300)
    g.add_argument("--dt", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="0.8,0.1,0.1", help="train,valid,test fractions")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("cluster", help="precompute cluster caches for every trajectory")
    c.add_argument("--data", required=True, type=Path)
    c.add_argument("--size", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_cluster)

    s = sub.add_parser("stats", help="normalization statistics of the train split")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--model-config", type=Path, help="JSON with ModelConfig fields (defaults when omitted)")
    t.add_argument("--train-config", type=Path, help="JSON with TrainConfig fields (defaults when omitted)")
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--resume", type=Path)
    t.add_argument("--log", type=Path, help="JSON-lines training log")
    t.add_argument("--stats", type=Path, help="statistics JSON (default: DATA/norm_stats.json or computed)")
    t.add_argument("--cluster-seed", type=int, default=0)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--horizon", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--precision", choices=["f32", "f64"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against persistence")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--horizons", default="1,10", help="comma-separated horizons")
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--ablation", choices=["full", "one-ring", "average", "gnn-coarse"])
    e.add_argument("--downsample", type=float, help="fraction of interior nodes kept")
    e.add_argument("--split", default="test", choices=["train", "valid", "test"])
    e.add_argument("--csv", type=Path)
    e.add_argument("--start-stride", type=int, default=0)
    e.add_argument("--cluster-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="autoregressive forecast of one trajectory")
    r.add_argument("--ckpt", required=True, type=Path)
    r.add_argument("--traj", required=True, type=Path)
    r.add_argument("--steps", required=True, type=int)
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--start", type=int, default=0)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_rollout)

    a = sub.add_parser("attn", help="dump attention maps and k-numbers of one frame")
    a.add_argument("--ckpt", required=True, type=Path)
    a.add_argument("--traj", required=True, type=Path)
    a.add_argument("--step", required=True, type=int)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--images", type=Path)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--cluster-seed", type=int, default=0)
    a.set_defaults(func=cmd_attn)

    k = sub.add_parser("gradcheck", help="finite-difference gradient check")
    k.add_argument("--model-config", type=Path)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--samples", type=int, default=200)
    k.add_argument("--epsilon", type=float, default=1e-5)
    k.add_argument("--tolerance", type=float, default=1e-4)
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .datagen import TrackingDivergence
    from .mesh import FormatError
    from .training import ConfigMismatchError, TrainingError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _report("usage", str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        code = args.func(args)
        return EXIT_OK if code is None else code
    except (TrainingError, TrackingDivergence, FloatingPointError) as exc:
        _report("runtime", str(exc))
        return EXIT_RUNTIME
    except (FormatError, ConfigMismatchError, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        _report("data", f"{type(exc).__name__}: {exc}")
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        _report("runtime", f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
