"""Dynamic triangle meshes: data model, validation, binary I/O and statistics."""

from __future__ import annotations

import enum
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"EGL1"
VERSION = 1
META_NAME = "meta.json"
MANIFEST_NAME = "manifest.json"


class NodeType(enum.IntEnum):
    INTERIOR = 0
    WALL = 1
    INLET = 2
    OUTLET = 3


NUM_NODE_TYPES = len(NodeType)


class FormatError(ValueError):
    """Raised when a file does not follow the expected binary layout."""


class TruncationError(FormatError):
    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message)
        self.frame_index = frame_index


@dataclass
class MeshFrame:
    """One time step of a dynamic mesh.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``.
    """

    positions: np.ndarray  # (N, 2)
    node_types: np.ndarray  # (N,) uint8
    velocity: np.ndarray  # (N, 2)
    pressure: np.ndarray  # (N, Pc)
    edges: np.ndarray  # (E, 2)

    def __post_init__(self):
        self.positions = np.asarray(self.positions).reshape(-1, 2)
        self.node_types = np.asarray(self.node_types, dtype=np.uint8).reshape(-1)
        self.velocity = np.asarray(self.velocity).reshape(-1, 2)
        p = np.asarray(self.pressure)
        self.pressure = p.reshape(len(p), -1) if p.ndim != 2 else p
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    @property
    def num_nodes(self) -> int:
        return len(self.positions)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def pressure_channels(self) -> int:
        return self.pressure.shape[1]

    def with_fields(self, velocity, pressure) -> "MeshFrame":
        """Same geometry, new fields."""
        return MeshFrame(self.positions, self.node_types, velocity, pressure, self.edges)

    def astype(self, dtype) -> "MeshFrame":
        return MeshFrame(
            self.positions.astype(dtype),
            self.node_types,
            self.velocity.astype(dtype),
            self.pressure.astype(dtype),
            self.edges,
        )


@dataclass
class Trajectory:
    frames: list[MeshFrame]
    dt: float
    geometry_tag: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a trajectory needs at least 2 frames")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        channels = {f.pressure_channels for f in self.frames}
        if len(channels) != 1:
            raise ValueError(f"pressure channel count differs across frames: {sorted(channels)}")

    def __len__(self):
        return len(self.frames)

    @property
    def pressure_channels(self) -> int:
        return self.frames[0].pressure_channels


@dataclass(frozen=True)
class NormStats:
    v_mean: np.ndarray
    v_std: float
    p_mean: np.ndarray
    p_std: float

    def __post_init__(self):
        if not (self.v_std > 0 and self.p_std > 0):
            raise ValueError("normalization standard deviations must be positive")

    def to_dict(self) -> dict:
        return {
            "v_mean": [float(x) for x in np.asarray(self.v_mean).reshape(-1)],
            "v_std": float(self.v_std),
            "p_mean": [float(x) for x in np.asarray(self.p_mean).reshape(-1)],
            "p_std": float(self.p_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            np.asarray(d["v_mean"], dtype=np.float64),
            float(d["v_std"]),
            np.asarray(d["p_mean"], dtype=np.float64),
            float(d["p_std"]),
        )

    @classmethod
    def identity(cls, pressure_channels: int = 1) -> "NormStats":
        return cls(np.zeros(2), 1.0, np.zeros(pressure_channels), 1.0)


# --------------------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    invariant: str
    index: int
    message: str


def validate_frame(frame: MeshFrame) -> list[Violation]:
    """List every broken ``MeshFrame`` invariant; empty when the frame is well formed."""
    out: list[Violation] = []
    n = frame.num_nodes
    for name, arr in (("velocity", frame.velocity), ("pressure", frame.pressure), ("node_types", frame.node_types)):
        if len(arr) != n:
            out.append(Violation("field_length", -1, f"{name} has length {len(arr)}, expected {n}"))

    bad_types = np.flatnonzero(frame.node_types >= NUM_NODE_TYPES)
    for i in bad_types:
        out.append(Violation("node_type", int(i), f"invalid node type code {int(frame.node_types[i])}"))

    edges = frame.edges
    seen: dict[tuple[int, int], int] = {}
    for k, (a, b) in enumerate(edges.tolist()):
        if not (0 <= a < n and 0 <= b < n):
            out.append(Violation("edge_index", k, f"edge {k} = ({a}, {b}) references a missing node"))
            continue
        if a == b:
            out.append(Violation("self_loop", k, f"edge {k} is a self-loop on node {a}"))
            continue
        if a > b:
            out.append(Violation("edge_order", k, f"edge {k} = ({a}, {b}) is not stored smaller index first"))
        key = (min(a, b), max(a, b))
        if key in seen:
            out.append(Violation("duplicate_edge", k, f"edge {k} repeats edge {seen[key]}"))
        else:
            seen[key] = k

    if n > 1:
        # sort so equal positions become neighbours; stable sort keeps the lower index first
        order = np.lexsort(frame.positions.T[::-1])
        pos = frame.positions[order]
        dup = np.flatnonzero(np.all(pos[1:] == pos[:-1], axis=1)) + 1
        for j in sorted(int(order[d]) for d in dup):
            out.append(Violation("duplicate_position", j, f"node {j} duplicates another node's position"))
    return out


# --------------------------------------------------------------------------- binary I/O


def _write_frame(buf: list[bytes], frame: MeshFrame, pc: int):
    n, e = frame.num_nodes, frame.num_edges
    buf.append(struct.pack("<II", n, e))
    buf.append(np.ascontiguousarray(frame.positions, dtype="<f4").tobytes())
    buf.append(np.ascontiguousarray(frame.node_types, dtype="u1").tobytes())
    buf.append(np.ascontiguousarray(frame.velocity, dtype="<f4").tobytes())
    buf.append(np.ascontiguousarray(frame.pressure.reshape(n, pc), dtype="<f4").tobytes())
    buf.append(np.ascontiguousarray(frame.edges, dtype="<u4").tobytes())


def trajectory_bytes(traj: Trajectory) -> bytes:
    pc = traj.pressure_channels
    buf = [MAGIC, struct.pack("<III", VERSION, len(traj.frames), pc)]
    for frame in traj.frames:
        _write_frame(buf, frame, pc)
    return b"".join(buf)


def save_trajectory(traj: Trajectory, path) -> Path:
    """Write ``traj`` to ``path`` plus a ``meta.json`` sidecar in the same directory.

    Arrays are stored as little-endian float32, so saving a trajectory that
    already holds float32 arrays is lossless.
    """
    for k, frame in enumerate(traj.frames):
        problems = validate_frame(frame)
        if problems:
            raise ValueError(f"frame {k} fails validation: {problems[0].message}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(trajectory_bytes(traj))
    meta = {"dt": float(traj.dt), "geometry_tag": traj.geometry_tag, "seed": int(traj.seed)}
    meta.update({k: v for k, v in traj.meta.items() if k not in meta})
    (path.parent / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, nbytes: int, frame_index: int | None) -> bytes:
        end = self.pos + nbytes
        if end > len(self.data):
            where = "header" if frame_index is None else f"frame {frame_index}"
            raise TruncationError(
                f"file truncated in {where}: needed {nbytes} bytes at offset {self.pos}, "
                f"{len(self.data) - self.pos} left",
                frame_index,
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def array(self, dtype: str, count: int, frame_index: int | None) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, frame_index), dtype=dt).copy()


def parse_trajectory_bytes(data: bytes) -> tuple[list[MeshFrame], int]:
    r = _Reader(data)
    magic = r.take(4, None)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}: expected {MAGIC!r}")
    version, num_steps, pc = struct.unpack("<III", r.take(12, None))
    if version != VERSION:
        raise FormatError(f"unsupported trajectory version {version}, expected {VERSION}")
    frames = []
    for k in range(num_steps):
        n, e = struct.unpack("<II", r.take(8, k))
        pos = r.array("<f4", 2 * n, k).reshape(n, 2)
        types = r.array("u1", n, k)
        vel = r.array("<f4", 2 * n, k).reshape(n, 2)
        pres = r.array("<f4", pc * n, k).reshape(n, pc)
        edges = r.array("<u4", 2 * e, k).reshape(e, 2).astype(np.int64)
        frames.append(MeshFrame(pos, types, vel, pres, edges))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after {num_steps} frames")
    return frames, pc


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    frames, _ = parse_trajectory_bytes(path.read_bytes())
    meta_path = path.parent / META_NAME
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"dt": 1.0}
    extra = {k: v for k, v in meta.items() if k not in ("dt", "geometry_tag", "seed")}
    return Trajectory(frames, float(meta["dt"]), meta.get("geometry_tag", ""), int(meta.get("seed", 0)), extra)


# --------------------------------------------------------------------------- datasets on disk


TRAJECTORY_FILE = "trajectory.egl"


@dataclass
class Manifest:
    split: dict[str, list[str]]
    pressure_channels: int = 1
    version: int = 1

    def to_dict(self) -> dict:
        return {"version": self.version, "split": self.split, "pressure_channels": self.pressure_channels}

    def save(self, root) -> Path:
        path = Path(root) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, root) -> "Manifest":
        d = json.loads((Path(root) / MANIFEST_NAME).read_text())
        split = {k: list(d["split"].get(k, [])) for k in ("train", "valid", "test")}
        return cls(split, int(d.get("pressure_channels", 1)), int(d.get("version", 1)))


def trajectory_path(root, traj_id: str) -> Path:
    return Path(root) / traj_id / TRAJECTORY_FILE


def load_split(root, split: str) -> dict[str, Trajectory]:
    manifest = Manifest.load(root)
    return {tid: load_trajectory(trajectory_path(root, tid)) for tid in manifest.split[split]}


# --------------------------------------------------------------------------- statistics


def compute_norm_stats(trajectories: Iterable[Trajectory], std_floor: float = 1e-8) -> NormStats:
    """Train-set statistics: per-component means, pooled scalar standard deviations.

    Each standard deviation is taken over all components of the field pooled
    together (about their pooled mean). Sums are exactly rounded, so the result
    does not depend on trajectory order.
    """
    vel, pres = [], []
    for traj in trajectories:
        for frame in traj.frames:
            vel.append(np.asarray(frame.velocity, dtype=np.float64))
            pres.append(np.asarray(frame.pressure, dtype=np.float64))
    if not vel:
        raise ValueError("cannot compute normalization statistics of an empty split")
    v = np.concatenate(vel)
    p = np.concatenate(pres)

    def mean(x):
        return math.fsum(x) / len(x)

    def pooled_std(x, name):
        m = mean(x)
        var = math.fsum((x - m) ** 2) / len(x)
        std = math.sqrt(var)
        if std < std_floor:
            warnings.warn(f"{name} field has (near) zero variance; std clamped to {std_floor}", RuntimeWarning)
            std = std_floor
        return std

    v_mean = np.array([mean(v[:, c]) for c in range(2)])
    p_mean = np.array([mean(p[:, c]) for c in range(p.shape[1])])
    return NormStats(v_mean, pooled_std(v.ravel(), "velocity"), p_mean, pooled_std(p.ravel(), "pressure"))


# --------------------------------------------------------------------------- downsampling


def downsample_frame(
    frame: MeshFrame,
    keep_fraction: float,
    seed: int,
    boundary: Sequence[Sequence[float]] | None = None,
) -> MeshFrame:
    """Keep a random share of interior nodes and re-triangulate.

    Non-interior nodes are always kept. ``boundary`` is the domain polygon used
    to discard triangles outside the domain; without it the convex hull is used.
    """
    from .delaunay import delaunay_triangulate

    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    interior = np.flatnonzero(frame.node_types == NodeType.INTERIOR)
    n_keep = int(round(keep_fraction * len(interior)))
    rng = np.random.default_rng(seed)
    kept_interior = rng.choice(interior, size=n_keep, replace=False) if n_keep < len(interior) else interior
    keep = np.sort(np.concatenate([np.flatnonzero(frame.node_types != NodeType.INTERIOR), kept_interior]))
    if len(keep) < 3:
        raise ValueError(f"downsampling leaves {len(keep)} nodes, at least 3 are needed")
    pos = frame.positions[keep]
    edges, _ = delaunay_triangulate(np.asarray(pos, dtype=np.float64), boundary)
    return MeshFrame(pos, frame.node_types[keep], frame.velocity[keep], frame.pressure[keep], edges)


def directed_edges(edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(receivers, senders) with both directions of every undirected edge."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    recv = np.concatenate([edges[:, 0], edges[:, 1]])
    send = np.concatenate([edges[:, 1], edges[:, 0]])
    return recv, send
