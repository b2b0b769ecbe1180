import numpy as np
import pytest
import torch

from meshformer.delaunay import delaunay_triangulate
from meshformer.mesh import MeshFrame, NodeType, Trajectory


def random_frame(n=20, seed=0, pc=1, dtype=np.float64):
    rng = np.random.default_rng(seed)
    pos = rng.random((n, 2))
    edges, _ = delaunay_triangulate(pos)
    types = np.full(n, NodeType.INTERIOR, dtype=np.uint8)
    types[: min(4, n)] = NodeType.WALL
    return MeshFrame(pos.astype(dtype), types, rng.normal(size=(n, 2)).astype(dtype),
                     rng.normal(size=(n, pc)).astype(dtype), edges)


def random_trajectory(n=20, frames=3, seed=0, pc=1, dtype=np.float32):
    base = random_frame(n, seed, pc)
    rng = np.random.default_rng(seed + 100)
    fr = [base.with_fields(rng.normal(size=(n, 2)), rng.normal(size=(n, pc))).astype(dtype) for _ in range(frames)]
    return Trajectory(fr, 0.1, "random", seed)


@pytest.fixture
def frame():
    return random_frame()


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
