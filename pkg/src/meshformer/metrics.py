"""Forecast metrics, the persistence baseline, evaluation reports and attention analysis."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import cluster_geometry, same_size_kmeans
from .mesh import MeshFrame, NormStats, Trajectory, downsample_frame
from .model import MeshTransformer, rollout, transfer_fields

Rollout = Sequence[MeshFrame]


def _as_batch(pred, truth) -> tuple[list[Rollout], list[Rollout]]:
    """Accept one rollout or a list of rollouts for both arguments."""
    if len(pred) and isinstance(pred[0], MeshFrame):
        pred, truth = [pred], [truth]
    if len(pred) != len(truth):
        raise ValueError(f"{len(pred)} predicted rollouts vs {len(truth)} ground-truth rollouts")
    return list(pred), list(truth)


def _check_horizons(horizons, length: int) -> list[int]:
    hs = [int(h) for h in horizons]
    if not hs or any(h < 1 for h in hs):
        raise ValueError("horizons must be positive")
    if any(b <= a for a, b in zip(hs, hs[1:])):
        raise ValueError("horizons must be strictly increasing")
    if hs[-1] > length:
        raise ValueError(f"horizon {hs[-1]} exceeds rollout length {length}")
    return hs


def _step_rms(a: MeshFrame, b: MeshFrame) -> tuple[float, float]:
    if a.num_nodes != b.num_nodes or a.pressure_channels != b.pressure_channels:
        raise ValueError("predicted and true frames differ in shape")
    dv = np.asarray(a.velocity, np.float64) - np.asarray(b.velocity, np.float64)
    dp = np.asarray(a.pressure, np.float64) - np.asarray(b.pressure, np.float64)
    return math.sqrt(float(np.mean(dv * dv))), math.sqrt(float(np.mean(dp * dp)))


def _per_step(pred, truth) -> np.ndarray:
    """(trajectories, steps, 2) array of per-step velocity/pressure RMS errors."""
    pred, truth = _as_batch(pred, truth)
    lengths = {len(p) for p in pred} | {len(t) for t in truth}
    if len(lengths) != 1:
        raise ValueError(f"rollout lengths differ: {sorted(lengths)}")
    return np.array([[_step_rms(a, b) for a, b in zip(p, t)] for p, t in zip(pred, truth)]).reshape(
        len(pred), lengths.pop(), 2)


def n_rmse(pred, truth, stats: NormStats, horizons) -> dict[int, float]:
    """Normalized RMSE averaged over steps 1..H and trajectories, for every H in ``horizons``."""
    if stats is None:
        raise ValueError("normalization statistics are required")
    err = _per_step(pred, truth)
    hs = _check_horizons(horizons, err.shape[1])
    per_step = err[..., 0] / stats.v_std + err[..., 1] / stats.p_std
    return {h: float(per_step[:, :h].mean()) for h in hs}


def rmse_fields(pred, truth, horizons) -> dict[int, tuple[float, float]]:
    """Unnormalized (velocity, pressure) RMSE averaged over steps 1..H and trajectories."""
    err = _per_step(pred, truth)
    hs = _check_horizons(horizons, err.shape[1])
    return {h: (float(err[:, :h, 0].mean()), float(err[:, :h, 1].mean())) for h in hs}


def k_number(row, threshold: float = 0.9) -> int:
    """Fewest largest attention weights whose sum reaches ``threshold``."""
    w = np.asarray(row, dtype=np.float64).reshape(-1)
    if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError(f"attention row is not a probability vector (sum {w.sum():.8g})")
    c = np.cumsum(np.sort(w)[::-1])
    return int(min(np.searchsorted(c, threshold - 1e-12, side="left") + 1, w.size))


def attention_summary(records: Sequence[np.ndarray], threshold: float = 0.9) -> np.ndarray:
    """k-number of every attention row: (blocks, heads, K) integers."""
    out = []
    for a in records:
        a = np.asarray(a)
        if a.ndim == 2:
            a = a[None]
        out.append([[k_number(r, threshold) for r in head] for head in a])
    return np.asarray(out, dtype=np.int64)


def persistence_forecast(frame: MeshFrame, geometries: Sequence[MeshFrame], h: int) -> list[MeshFrame]:
    """Current fields carried unchanged onto each of the next ``h`` geometries."""
    if len(geometries) < h:
        raise ValueError(f"need {h} geometries, got {len(geometries)}")
    out, cur = [], frame
    for g in geometries[:h]:
        cur = transfer_fields(cur, g)
        out.append(cur)
    return out


# --------------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    horizons: list[int]
    n_rmse: list[float]
    rmse_velocity: list[float]
    rmse_pressure: list[float]
    trajectories: int
    config_digest: str = ""
    baseline_n_rmse: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise ValueError("horizons must be strictly increasing")
        for name in ("n_rmse", "rmse_velocity", "rmse_pressure", "baseline_n_rmse"):
            if any(v < 0 for v in getattr(self, name)):
                raise ValueError(f"{name} holds negative entries")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["horizon", "n_rmse", "rmse_velocity", "rmse_pressure"]
        if self.baseline_n_rmse:
            cols.append("persistence_n_rmse")
        w.writerow(cols)
        for i, h in enumerate(self.horizons):
            row = [h, self.n_rmse[i], self.rmse_velocity[i], self.rmse_pressure[i]]
            if self.baseline_n_rmse:
                row.append(self.baseline_n_rmse[i])
            w.writerow(row)
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluation_windows(trajectories: Sequence[Trajectory], horizon: int, start_stride: int = 0):
    """(trajectory index, start frame) pairs; a stride of 0 uses only frame 0."""
    out = []
    for i, t in enumerate(trajectories):
        last = len(t.frames) - 1 - horizon
        if last < 0:
            raise ValueError(f"trajectory {i} has {len(t.frames)} frames, horizon {horizon} needs more")
        starts = range(0, last + 1, start_stride) if start_stride else [0]
        out.extend((i, s) for s in starts)
    return out


def _downsampled(traj: Trajectory, keep: float, seed: int) -> Trajectory:
    """Downsample every frame; frames sharing a mesh keep sharing the downsampled mesh."""
    boundary = traj.meta.get("boundary")
    cache: dict[bytes, MeshFrame] = {}
    frames = []
    for k, f in enumerate(traj.frames):
        key = np.ascontiguousarray(f.positions).tobytes()
        if key not in cache:
            cache[key] = downsample_frame(f, keep, seed + k, boundary)
        g = cache[key]
        frames.append(transfer_fields(f, g))
    return Trajectory(frames, traj.dt, traj.geometry_tag, traj.seed, dict(traj.meta))


def evaluate(model: MeshTransformer | None, trajectories: Sequence[Trajectory], stats: NormStats, horizons,
             start_stride: int = 0, downsample: float | None = None, downsample_seed: int = 0,
             order_seed: int = 0, cluster_seed: int = 0, clusters=None) -> EvalReport:
    """Roll out ``model`` (or persistence when None) and score against ground truth.

    ``clusters[i]`` optionally holds per-frame clusterings for trajectory i.
    """
    hs = sorted(int(h) for h in horizons)
    hmax = hs[-1]
    if downsample is not None and downsample < 1.0:
        trajectories = [_downsampled(t, downsample, downsample_seed + 1000 * i) for i, t in enumerate(trajectories)]
        clusters = None
    memo: dict = {}

    def clustering(frame: MeshFrame):
        key = np.ascontiguousarray(frame.positions).tobytes()
        if key not in memo:
            a = same_size_kmeans(frame.positions, model.config.cluster_size, cluster_seed)
            memo[key] = (a, cluster_geometry(frame, a))
        return memo[key]

    preds, base, truths = [], [], []
    for i, s in evaluation_windows(trajectories, hmax, start_stride):
        t = trajectories[i]
        future = t.frames[s + 1:s + 1 + hmax]
        truths.append(future)
        base.append(persistence_forecast(t.frames[s], future, hmax))
        if model is None:
            preds.append(base[-1])
        else:
            if clusters is not None:
                cl = clusters[i][s:s + hmax]
            else:
                cl = [clustering(f) for f in t.frames[s:s + hmax]]
            preds.append(rollout(model, t.frames[s], future, hmax, cl, order_seed + 7919 * i + s, cluster_seed))
    nr = n_rmse(preds, truths, stats, hs)
    rf = rmse_fields(preds, truths, hs)
    nb = n_rmse(base, truths, stats, hs)
    digest = config_digest(model.config.to_dict() if model is not None else {"persistence": True})
    return EvalReport(
        horizons=hs,
        n_rmse=[nr[h] for h in hs],
        rmse_velocity=[rf[h][0] for h in hs],
        rmse_pressure=[rf[h][1] for h in hs],
        trajectories=len(trajectories),
        config_digest=digest,
        baseline_n_rmse=[nb[h] for h in hs],
        extra={"windows": len(truths), "downsample": downsample},
    )


# --------------------------------------------------------------------------- attention dumps


def attention_dump(records: Sequence[np.ndarray], step: int = 0, mode: str = "full", barycenters=None,
                   adjacency: np.ndarray | None = None, threshold: float = 0.9) -> dict:
    """JSON-ready attention maps of one frame, with per-row k-numbers alongside."""
    knum = attention_summary(records, threshold) if len(records) else np.zeros((0, 0, 0), np.int64)
    return {
        "step": int(step),
        "mode": mode,
        "blocks": [{"heads": np.asarray(a).tolist(), "k_numbers": knum[b].tolist()} for b, a in enumerate(records)],
        "barycenters": [] if barycenters is None else np.asarray(barycenters, dtype=np.float64).tolist(),
        "adjacency": None if adjacency is None else np.asarray(adjacency, dtype=int).tolist(),
        "threshold": threshold,
    }


def save_attention_images(records: Sequence[np.ndarray], out_dir, prefix: str = "attn") -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for b, a in enumerate(records):
        a = np.asarray(a)
        for h in range(a.shape[0]):
            fig, ax = plt.subplots(figsize=(4, 4))
            im = ax.imshow(a[h], cmap="viridis", vmin=0)
            ax.set_xlabel("key cluster")
            ax.set_ylabel("query cluster")
            ax.set_title(f"block {b}, head {h}")
            fig.colorbar(im, ax=ax, fraction=0.046)
            p = out / f"{prefix}_b{b}_h{h}.png"
            fig.savefig(p, dpi=80, bbox_inches="tight")
            plt.close(fig)
            paths.append(p)
    return paths
