"""Same-size k-means over mesh node positions and derived cluster geometry."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .mesh import MeshFrame, Trajectory, TruncationError, FormatError

CACHE_MAGIC = b"EGLC"
CACHE_VERSION = 1


@dataclass
class ClusterAssignment:
    assignment: np.ndarray  # (N,) cluster index per node
    num_clusters: int
    target_size: int
    objective_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_clusters)

    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.cumsum(self.sizes)[:-1]
        return np.split(order, bounds)


@dataclass
class ClusterGeometry:
    barycenters: np.ndarray  # (K, 2)
    adjacency: np.ndarray  # (K, K) bool


def num_clusters(n: int, target_size: int) -> int:
    return math.ceil(n / target_size)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * x @ c.T
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, 2))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[j] = x[idx]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(1))
    return centers


def _objective(x, labels, k) -> float:
    cent = _centroids(x, labels, k)
    return float(((x - cent[labels]) ** 2).sum())


def _centroids(x, labels, k):
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sx = np.bincount(labels, weights=x[:, 0], minlength=k)
    sy = np.bincount(labels, weights=x[:, 1], minlength=k)
    return np.stack([sx, sy], axis=1) / np.maximum(counts, 1)[:, None]


def _farthest_sq(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # the farthest centroid from any point is a vertex of the centroids' convex hull
    try:
        verts = centers[ConvexHull(centers).vertices] if len(centers) > 3 else centers
    except QhullError:
        verts = centers
    return _sq_dists(x, verts).max(1)


def _greedy_assign(x: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Most decided points first, each to its nearest centroid with room left."""
    n = len(x)
    q, extra = divmod(n, k)  # every cluster holds q points, `extra` of them q + 1
    m = min(k, 32)
    near_d, near_i = cKDTree(centers).query(x, k=m)
    near_d = near_d.reshape(n, m) ** 2
    near_i = near_i.reshape(n, m)
    priority = _farthest_sq(x, centers) - near_d[:, 0]
    order = np.argsort(-priority, kind="stable")
    labels = np.empty(n, dtype=np.int64)
    sizes = [0] * k
    full = np.zeros(k, dtype=bool)
    near_rows = near_i.tolist()
    for i in order.tolist():
        c = next((j for j in near_rows[i] if not full[j]), -1)
        if c < 0:
            d = ((x[i] - centers) ** 2).sum(1)
            c = int(np.argmin(np.where(full, np.inf, d)))
        labels[i] = c
        sizes[c] += 1
        if sizes[c] == q + 1:
            full[c] = True
            extra -= 1
            if extra == 0:
                full |= np.asarray(sizes) >= q
        elif sizes[c] == q and extra == 0:
            full[c] = True
    return labels


def same_size_kmeans(positions, target_size: int, seed: int = 0, max_iter: int = 100) -> ClusterAssignment:
    """Partition points into ``ceil(N / target_size)`` clusters whose sizes differ by at most one.

    Centroids start from k-means++. Points are then assigned greedily, most
    decided first (largest gap between farthest and nearest centroid), to the
    nearest centroid that still has room. Refinement alternates centroid updates
    with pairwise swaps between clusters that strictly lower the within-cluster
    squared distance, until an iteration makes no swap.
    """
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = len(x)
    if n < 1:
        raise ValueError("need at least one point")
    if target_size < 1:
        raise ValueError(f"target_size must be >= 1, got {target_size}")
    k = num_clusters(n, target_size)
    if k == 1:
        labels = np.zeros(n, dtype=np.int64)
        return ClusterAssignment(labels, 1, target_size, [_objective(x, labels, 1)])

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)

    labels = _greedy_assign(x, centers, k)

    history = [_objective(x, labels, k)]
    for _ in range(max_iter):
        centers = _centroids(x, labels, k)
        swaps = _swap_pass(x, labels, centers, k)
        if swaps == 0:
            break
        history.append(_objective(x, labels, k))
    return ClusterAssignment(labels, k, target_size, history)


def _candidates(x, labels, centers, k):
    """(point, cluster, gain) for every cluster centroid closer than the point's own."""
    own = ((x - centers[labels]) ** 2).sum(1)
    m = min(k, 16)
    dist, idx = cKDTree(centers).query(x, k=m)
    dist = dist.reshape(len(x), m) ** 2
    idx = idx.reshape(len(x), m)
    pts, cols = np.nonzero(dist < own[:, None])
    cls = idx[pts, cols]
    gain = dist[pts, cols] - own[pts]
    # rows whose own centroid is not among the m nearest may have more closer clusters
    incomplete = np.flatnonzero(~np.any(idx == labels[:, None], axis=1))
    if m < k and len(incomplete):
        d = _sq_dists(x[incomplete], centers)
        rows, cl = np.nonzero(d < own[incomplete, None])
        extra_pts = incomplete[rows]
        keep = ~np.any(idx[extra_pts] == cl[:, None], axis=1)
        pts = np.concatenate([pts, extra_pts[keep]])
        cls = np.concatenate([cls, cl[keep]])
        gain = np.concatenate([gain, d[rows, cl][keep] - own[extra_pts[keep]]])
    keep = cls != labels[pts]
    return pts[keep], cls[keep], gain[keep]


@njit(cache=True)
def _swap_kernel(x, labels, centers, pts, cls, members, counts):
    swaps = 0
    for idx in range(len(pts)):
        a, target = pts[idx], cls[idx]
        source = labels[a]
        if source == target:
            continue
        sx, sy = centers[source, 0], centers[source, 1]
        tx, ty = centers[target, 0], centers[target, 1]
        a_here = (x[a, 0] - sx) ** 2 + (x[a, 1] - sy) ** 2
        cost_a = (x[a, 0] - tx) ** 2 + (x[a, 1] - ty) ** 2 - a_here
        best, best_slot, best_here = 0.0, -1, 0.0
        for slot in range(counts[target]):
            b = members[target, slot]
            b_here = (x[b, 0] - tx) ** 2 + (x[b, 1] - ty) ** 2
            cost_b = (x[b, 0] - sx) ** 2 + (x[b, 1] - sy) ** 2 - b_here
            if best_slot < 0 or cost_b < best:
                best, best_slot, best_here = cost_b, slot, b_here
        if best_slot < 0:
            continue
        if cost_a + best < -1e-12 * max(a_here + best_here, 1e-300):
            b = members[target, best_slot]
            labels[a] = target
            labels[b] = source
            members[target, best_slot] = a
            for slot in range(counts[source]):
                if members[source, slot] == a:
                    members[source, slot] = b
                    break
            swaps += 1
    return swaps


def _swap_pass(x, labels, centers, k) -> int:
    """One sweep of strictly improving pairwise swaps with centroids held fixed."""
    pts, cls, gain = _candidates(x, labels, centers, k)
    if len(pts) == 0:
        return 0
    order = np.argsort(gain, kind="stable")
    counts = np.bincount(labels, minlength=k)
    members = np.full((k, counts.max()), -1, dtype=np.int64)
    sorted_idx = np.argsort(labels, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(labels)) - np.repeat(starts, counts)
    members[labels[sorted_idx], slot] = sorted_idx
    return int(_swap_kernel(x, labels, centers, pts[order].astype(np.int64), cls[order].astype(np.int64), members, counts))


def barycenters(positions, assignment: ClusterAssignment | np.ndarray, k: int | None = None) -> np.ndarray:
    if isinstance(assignment, ClusterAssignment):
        labels, k = assignment.assignment, assignment.num_clusters
    else:
        labels = np.asarray(assignment, dtype=np.int64)
        k = int(labels.max()) + 1 if k is None else k
    return _centroids(np.asarray(positions, dtype=np.float64).reshape(-1, 2), labels, k)


def cluster_adjacency(assignment: ClusterAssignment | np.ndarray, edges, k: int | None = None) -> np.ndarray:
    """Clusters are adjacent when a mesh edge joins them; every cluster is adjacent to itself."""
    if isinstance(assignment, ClusterAssignment):
        labels, k = assignment.assignment, assignment.num_clusters
    else:
        labels = np.asarray(assignment, dtype=np.int64)
        k = int(labels.max()) + 1 if k is None else k
    adj = np.eye(k, dtype=bool)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges):
        a, b = labels[edges[:, 0]], labels[edges[:, 1]]
        adj[a, b] = True
        adj[b, a] = True
    return adj


def cluster_geometry(frame: MeshFrame, assignment: ClusterAssignment) -> ClusterGeometry:
    return ClusterGeometry(barycenters(frame.positions, assignment), cluster_adjacency(assignment, frame.edges))


# --------------------------------------------------------------------------- per-trajectory cache


def cache_name(target_size: int, seed: int) -> str:
    return f"clusters_s{target_size}_seed{seed}.bin"


def cluster_cache_bytes(assignments: list[ClusterAssignment]) -> bytes:
    buf = [CACHE_MAGIC, struct.pack("<II", CACHE_VERSION, len(assignments))]
    for a in assignments:
        buf.append(struct.pack("<II", len(a.assignment), a.num_clusters))
        buf.append(np.ascontiguousarray(a.assignment, dtype="<u4").tobytes())
    return b"".join(buf)


def save_cluster_cache(assignments: list[ClusterAssignment], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(cluster_cache_bytes(assignments))
    return path


def load_cluster_cache(path, target_size: int = 0) -> list[ClusterAssignment]:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}: expected {CACHE_MAGIC!r}")
    if len(data) < 12:
        raise TruncationError("cluster cache truncated in header")
    version, steps = struct.unpack_from("<II", data, 4)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cluster cache version {version}")
    pos, out = 12, []
    for k in range(steps):
        if pos + 8 > len(data):
            raise TruncationError(f"cluster cache truncated in frame {k}", k)
        n, kk = struct.unpack_from("<II", data, pos)
        pos += 8
        if pos + 4 * n > len(data):
            raise TruncationError(f"cluster cache truncated in frame {k}", k)
        labels = np.frombuffer(data, dtype="<u4", count=n, offset=pos).astype(np.int64)
        pos += 4 * n
        out.append(ClusterAssignment(labels, kk, target_size))
    return out


def precompute_clusters(
    traj: Trajectory, target_size: int, seed: int = 0, path=None
) -> list[tuple[ClusterAssignment, ClusterGeometry]]:
    """Cluster every frame; frames with identical positions share one result."""
    memo: dict[bytes, ClusterAssignment] = {}
    result = []
    for frame in traj.frames:
        key = np.ascontiguousarray(frame.positions).tobytes()
        if key not in memo:
            memo[key] = same_size_kmeans(frame.positions, target_size, seed)
        a = memo[key]
        result.append((a, cluster_geometry(frame, a)))
    if path is not None:
        save_cluster_cache([a for a, _ in result], path)
    return result


def load_clusters(traj: Trajectory, path, target_size: int = 0) -> list[tuple[ClusterAssignment, ClusterGeometry]]:
    assignments = load_cluster_cache(path, target_size)
    if len(assignments) != len(traj.frames):
        raise FormatError(f"cache has {len(assignments)} frames, trajectory has {len(traj.frames)}")
    return [(a, cluster_geometry(f, a)) for a, f in zip(assignments, traj.frames)]
