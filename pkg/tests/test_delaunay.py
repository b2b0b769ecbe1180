import numpy as np
import pytest

from meshformer.delaunay import delaunay_triangulate, is_simple_polygon, points_in_polygon


def brute_force_empty_circumcircle(pts, tris, tol=1e-9):
    """O(n*T) oracle: no point lies strictly inside any circumcircle."""
    for t in tris:
        a, b, c = pts[t]
        ax, ay = a
        bx, by = b
        cx, cy = c
        d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
        ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / d
        uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / d
        r2 = (ax - ux) ** 2 + (ay - uy) ** 2
        others = np.setdiff1d(np.arange(len(pts)), t)
        d2 = (pts[others, 0] - ux) ** 2 + (pts[others, 1] - uy) ** 2
        if np.any(d2 < r2 * (1 - tol)):
            return False
    return True


def test_unit_square():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    edges, tris = delaunay_triangulate(sq, boundary=sq)
    assert len(tris) == 2 and len(edges) == 5
    assert np.all(edges[:, 0] < edges[:, 1])


def test_three_points():
    edges, tris = delaunay_triangulate([[0, 0], [1, 0], [0, 1]])
    assert tris.shape == (1, 3)
    assert edges.tolist() == [[0, 1], [0, 2], [1, 2]]


def test_triangles_are_counter_clockwise():
    pts = np.random.default_rng(3).random((40, 2))
    _, tris = delaunay_triangulate(pts)
    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    assert np.all(cross > 0)


@pytest.mark.parametrize("seed", range(6))
def test_empty_circumcircle_random_disk(seed):
    rng = np.random.default_rng(seed)
    n = 30 if seed < 3 else 60
    r = np.sqrt(rng.random(n))
    th = rng.random(n) * 2 * np.pi
    pts = np.stack([r * np.cos(th), r * np.sin(th)], 1)
    edges, tris = delaunay_triangulate(pts)
    assert brute_force_empty_circumcircle(pts, tris)
    # Euler: convex hull triangulation has 2n - 2 - h triangles, so every point is used
    assert set(np.unique(tris)) == set(range(n))
    assert len(edges) == len(tris) + n - 1


def test_boundary_clipping_of_l_shape():
    poly = np.array([[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]], float)
    rng = np.random.default_rng(0)
    inner = rng.random((80, 2)) * 2
    inner = inner[points_in_polygon(inner, poly)]
    pts = np.concatenate([poly, inner])
    _, tris = delaunay_triangulate(pts, boundary=poly)
    centroids = pts[tris].mean(axis=1)
    assert np.all(points_in_polygon(centroids, poly))
    _, all_tris = delaunay_triangulate(pts)
    assert len(all_tris) > len(tris)


def test_errors():
    with pytest.raises(ValueError, match="at least 3"):
        delaunay_triangulate([[0, 0], [1, 1]])
    with pytest.raises(ValueError, match="duplicate"):
        delaunay_triangulate([[0, 0], [1, 1], [0, 0], [1, 0]])
    with pytest.raises(ValueError, match="collinear"):
        delaunay_triangulate([[0, 0], [1, 1], [2, 2]])
    bowtie = [[0, 0], [1, 1], [1, 0], [0, 1]]
    assert not is_simple_polygon(bowtie)
    with pytest.raises(ValueError, match="simple"):
        delaunay_triangulate([[0, 0], [1, 0], [0, 1]], boundary=bowtie)
