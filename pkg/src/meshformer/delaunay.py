"""Bowyer-Watson Delaunay triangulation with polygon clipping."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

_INCIRCLE_TOL = 1e-12
_COCIRCULAR_TOL = 1e-9


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd ray casting. Points exactly on the boundary may land on either side."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    poly = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    x, y = points[:, 0:1], points[:, 1:2]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    straddle = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    hits = straddle & (x < x_cross)
    return (hits.sum(axis=1) % 2) == 1


def _segments_cross(p1, p2, q1, q2) -> np.ndarray:
    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 <= 0) & (d3 * d4 <= 0)


def is_simple_polygon(polygon: np.ndarray) -> bool:
    poly = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    m = len(poly)
    if m < 3:
        return False
    if len(np.unique(poly, axis=0)) != m:
        return False
    a, b = poly, np.roll(poly, -1, axis=0)
    i, j = np.triu_indices(m, k=2)
    keep = ~((i == 0) & (j == m - 1))  # first and last segments share a vertex
    i, j = i[keep], j[keep]
    return not np.any(_segments_cross(a[i], b[i], a[j], b[j]))


def _circumcircles(pts: np.ndarray, tris: np.ndarray):
    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    bx, by = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    cx, cy = c[:, 0] - a[:, 0], c[:, 1] - a[:, 1]
    d = 2.0 * (bx * cy - by * cx)
    b2, c2 = bx * bx + by * by, cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / d
    uy = (bx * c2 - cx * b2) / d
    return np.stack([ux + a[:, 0], uy + a[:, 1]], axis=1), ux * ux + uy * uy


def _signed_area(pts, tris):
    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def bowyer_watson(points: np.ndarray) -> np.ndarray:
    """Delaunay triangles (CCW index triples) of a 2D point set.

    Co-circular configurations are resolved afterwards by preferring the
    diagonal incident to the lowest point index.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    center = (pts.min(axis=0) + pts.max(axis=0)) / 2
    scale = max(float(np.max(pts.max(axis=0) - pts.min(axis=0))) / 2, 1e-300)
    work = (pts - center) / scale  # inside [-1, 1]^2

    big = 1e3
    allpts = np.vstack([work, [[0.0, 4 * big], [-4 * big, -2 * big], [4 * big, -2 * big]]])
    cap = 8 * n + 16
    tris = np.zeros((cap, 3), dtype=np.int64)
    cen = np.zeros((cap, 2))
    rad2 = np.full(cap, -1.0)  # negative radius marks a dead slot
    tris[0] = (n, n + 1, n + 2)
    cen[:1], rad2[:1] = _circumcircles(allpts, tris[:1])
    count = 1

    for p in range(n):
        px, py = work[p]
        d2 = (cen[:count, 0] - px) ** 2 + (cen[:count, 1] - py) ** 2
        bad = np.flatnonzero(d2 < rad2[:count] * (1 - _INCIRCLE_TOL))
        edge_count: dict[tuple[int, int], int] = defaultdict(int)
        oriented = []
        for t in bad:
            a, b, c = tris[t]
            for u, v in ((a, b), (b, c), (c, a)):
                edge_count[(min(u, v), max(u, v))] += 1
                oriented.append((u, v))
        rad2[bad] = -1.0
        new = [(u, v, p) for u, v in oriented if edge_count[(min(u, v), max(u, v))] == 1]
        if count + len(new) > cap:
            alive = np.flatnonzero(rad2[:count] >= 0)
            k = len(alive)
            cap = max(2 * cap, k + len(new) + 16)
            tris = np.concatenate([tris[alive], np.zeros((cap - k, 3), dtype=np.int64)])
            cen = np.concatenate([cen[alive], np.zeros((cap - k, 2))])
            rad2 = np.concatenate([rad2[alive], np.full(cap - k, -1.0)])
            count = k
        new_arr = np.asarray(new, dtype=np.int64).reshape(-1, 3)
        tris[count:count + len(new_arr)] = new_arr
        cen[count:count + len(new_arr)], rad2[count:count + len(new_arr)] = _circumcircles(allpts, new_arr)
        count += len(new_arr)

    alive = rad2[:count] >= 0
    out = tris[:count][alive]
    out = out[np.all(out < n, axis=1)]
    area = _signed_area(work, out)
    out = out[area > 1e-14]
    out = _break_cocircular_ties(work, out)
    return out


def _break_cocircular_ties(pts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    tris = [tuple(int(v) for v in t) for t in tris]
    for _ in range(4 * len(tris) + 4):
        owner: dict[tuple[int, int], list[int]] = defaultdict(list)
        for ti, (a, b, c) in enumerate(tris):
            for u, v in ((a, b), (b, c), (c, a)):
                owner[(min(u, v), max(u, v))].append(ti)
        flipped = False
        for (u, v), ts in owner.items():
            if len(ts) != 2:
                continue
            t1, t2 = ts
            a = next(x for x in tris[t1] if x not in (u, v))
            b = next(x for x in tris[t2] if x not in (u, v))
            if min(a, b) > min(u, v):
                continue  # current diagonal already touches the lowest index
            c, r2 = _circumcircles(pts, np.array([tris[t1]]))
            d2 = float(np.sum((pts[b] - c[0]) ** 2))
            if abs(d2 - r2[0]) > _COCIRCULAR_TOL * r2[0]:
                continue
            new1 = np.array([[a, b, u]])
            new2 = np.array([[b, a, v]])
            if _signed_area(pts, new1)[0] < 0:
                new1 = new1[:, [1, 0, 2]]
            if _signed_area(pts, new2)[0] < 0:
                new2 = new2[:, [1, 0, 2]]
            if min(abs(_signed_area(pts, new1)[0]), abs(_signed_area(pts, new2)[0])) <= 1e-14:
                continue
            tris[t1] = tuple(int(x) for x in new1[0])
            tris[t2] = tuple(int(x) for x in new2[0])
            flipped = True
            break
        if not flipped:
            break
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def triangle_edges(tris: np.ndarray) -> np.ndarray:
    tris = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def delaunay_triangulate(points, boundary=None) -> tuple[np.ndarray, np.ndarray]:
    """Triangulate ``points`` and clip to ``boundary``.

    Returns ``(edges, triangles)``: edges as sorted ``(i, j)`` pairs with
    ``i < j``, triangles as counter-clockwise index triples. Triangles whose
    centroid falls outside the boundary polygon are dropped.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points, got {len(pts)}")
    if len(np.unique(pts, axis=0)) != len(pts):
        raise ValueError("points contain duplicates")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        raise ValueError("all points are collinear")
    if boundary is not None and not is_simple_polygon(boundary):
        raise ValueError("boundary polygon is not simple")

    tris = bowyer_watson(pts)
    if boundary is not None and len(tris):
        centroids = pts[tris].mean(axis=1)
        tris = tris[points_in_polygon(centroids, boundary)]
    return triangle_edges(tris), tris
