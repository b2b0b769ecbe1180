import math
import os

import numpy as np
import pytest

from meshformer.datagen import (
    DroneParams,
    DroneState,
    ROTOR_DOMAIN,
    VortexSystem,
    drone_rates,
    drone_step,
    generate_dataset,
    generate_trajectory,
    poisson_disk_downsample,
    sample_domain_mesh,
    sample_domain_points,
    split_ids,
    taylor_green,
    track_trajectory,
    vortex_field,
    vortex_system_step,
)
from meshformer.mesh import Manifest, NodeType, load_trajectory, trajectory_path, validate_frame

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


# ----------------------------------------------------------------- Taylor-Green


def test_taylor_green_values():
    v, p = taylor_green([0.5, 0.5], 0.0, 1.0)
    np.testing.assert_allclose(v, [0, 0], atol=1e-15)
    assert p == pytest.approx(-0.5)
    v, p = taylor_green([0.25, 0.25], 0.0, 1.0)
    np.testing.assert_allclose(v, [0.5, -0.5], atol=1e-15)
    assert p == pytest.approx(0.0, abs=1e-15)


def test_taylor_green_divergence_free_and_decay():
    rng = np.random.default_rng(0)
    pts = rng.random((50, 2))
    h = 1e-4
    dx, dy = np.array([h, 0]), np.array([0, h])
    div = ((taylor_green(pts + dx, 0.3)[0][:, 0] - taylor_green(pts - dx, 0.3)[0][:, 0])
           + (taylor_green(pts + dy, 0.3)[0][:, 1] - taylor_green(pts - dy, 0.3)[0][:, 1])) / (2 * h)
    assert np.max(np.abs(div)) < 1e-6
    nu, t, dt = 0.02, 0.4, 1e-5
    dvdt = (taylor_green(pts, t + dt, nu=nu)[0] - taylor_green(pts, t - dt, nu=nu)[0]) / (2 * dt)
    np.testing.assert_allclose(dvdt, -2 * nu * math.pi**2 * taylor_green(pts, t, nu=nu)[0], atol=1e-8)


# ----------------------------------------------------------------- vortices


def test_vortex_center_and_symmetry():
    one = VortexSystem([[0.3, -0.2]], [1.0], [0.05])
    np.testing.assert_allclose(vortex_field([0.3, -0.2], one)[0], [0, 0], atol=1e-15)
    pair = VortexSystem([[-0.4, 0.0], [0.4, 0.0]], [1.0, -1.0], [0.1, 0.1])
    axis = np.stack([np.zeros(9), np.linspace(-2, 2, 9)], 1)
    v, p = vortex_field(axis, pair)
    np.testing.assert_allclose(v[:, 0], 0, atol=1e-14)
    assert np.all(np.abs(v[:, 1]) > 0)
    np.testing.assert_allclose(p, -0.5 * np.sum(v * v, 1))


def test_vortex_far_field():
    rc = 0.01
    sys = VortexSystem([[0.0, 0.0], [0.001, 0.0]], [0.7, 0.5], [rc, rc])
    r = 1e3 * rc
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    pts = r * np.stack([np.cos(ang), np.sin(ang)], 1)
    speed = np.linalg.norm(vortex_field(pts, sys)[0], axis=1)
    np.testing.assert_allclose(speed, 1.2 / (2 * np.pi * r), rtol=1e-4)


def test_single_vortex_is_stationary():
    sys = VortexSystem([[0.2, 0.3]], [2.0], [0.05])
    np.testing.assert_array_equal(vortex_system_step(sys, 0.1).centers, sys.centers)


def test_co_rotating_pair_conserves_center_of_circulation():
    sys = VortexSystem([[-0.1, 0.0], [0.1, 0.0]], [1.0, 1.0], [0.005, 0.005])
    c0 = (sys.circulation[:, None] * sys.centers).sum(0) / sys.circulation.sum()
    r0 = np.linalg.norm(sys.centers[0] - sys.centers[1])
    for _ in range(100):
        sys = vortex_system_step(sys, 0.01)
    c1 = (sys.circulation[:, None] * sys.centers).sum(0) / sys.circulation.sum()
    assert np.max(np.abs(c1 - c0)) < 1e-9
    assert np.linalg.norm(sys.centers[0] - sys.centers[1]) == pytest.approx(r0, rel=1e-6)
    assert not np.allclose(sys.centers[0], [-0.1, 0.0])


def test_dipole_speed():
    gamma, d = 1.0, 0.2
    sys = VortexSystem([[-d / 2, 0.0], [d / 2, 0.0]], [gamma, -gamma], [0.005, 0.005])
    dt = 1e-3 * 2 * math.pi * d * d / gamma
    start = sys.centers.mean(0)
    for _ in range(100):
        sys = vortex_system_step(sys, dt)
    speed = np.linalg.norm(sys.centers.mean(0) - start) / (100 * dt)
    assert speed == pytest.approx(gamma / (2 * math.pi * d), rel=5e-3)


# ----------------------------------------------------------------- sampling and meshing


def _pairwise_ok(pts, radii):
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    bound = np.minimum(radii[:, None], radii[None])
    np.fill_diagonal(d, np.inf)
    return np.all(d >= bound)


def test_poisson_examples():
    assert len(poisson_disk_downsample([[0, 0], [0.1, 0]], 0.5, 0)) == 1
    g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0)), -1).reshape(-1, 2)
    assert len(poisson_disk_downsample(g, 0.9, 3)) == 25
    with pytest.raises(ValueError):
        poisson_disk_downsample(g, 0.0)


def test_poisson_min_distance_oracle():
    rng = np.random.default_rng(0)
    pts = rng.random((1000, 2))
    keep = poisson_disk_downsample(pts, 0.05, 1)
    assert _pairwise_ok(pts[keep], np.full(len(keep), 0.05))
    radii = 0.02 + 0.06 * pts[:, 0]
    keep = poisson_disk_downsample(pts, radii, 2)
    assert _pairwise_ok(pts[keep], radii[keep])


def test_sample_domain_mesh_properties():
    a = sample_domain_mesh(SQUARE, 100, seed=4)
    b = sample_domain_mesh(SQUARE, 100, seed=4)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.edges, b.edges)
    assert validate_frame(a) == []
    assert abs(a.num_nodes - 100) <= 10
    on_edge = (np.min(np.abs(np.concatenate([a.positions, 1 - a.positions], 1)), axis=1) < 1e-6)
    assert np.all(a.node_types[on_edge] != NodeType.INTERIOR)
    assert np.all(a.node_types[~on_edge] == NodeType.INTERIOR)
    s = sample_domain_points(SQUARE, 300, seed=1)
    interior = s.node_types == NodeType.INTERIOR
    assert _pairwise_ok(s.positions[interior], s.interior_radius)


def test_sample_domain_unachievable():
    with pytest.raises(ValueError, match="boundary"):
        sample_domain_points(SQUARE, 5)
    with pytest.raises(ValueError):
        sample_domain_points(SQUARE, 2)


# ----------------------------------------------------------------- drone


def test_free_fall():
    s = DroneState()
    for _ in range(100):
        s = drone_step(s, (0, 0), 0.01)
    assert s.y == pytest.approx(-4.905, abs=1e-6)
    assert s.x == 0 and s.theta == 0


def test_hover_equilibrium():
    p = DroneParams()
    assert p.hover_speed == pytest.approx(221.47, abs=0.01)
    rates = drone_rates(DroneState().vector(), p.hover_speed, p.hover_speed)
    assert np.max(np.abs(rates[3:])) <= 1e-9


def test_rk4_fourth_order():
    def run(dt):
        s = DroneState(vx=0.3, vy=-0.2, omega=0.4)
        for _ in range(int(round(1.0 / dt))):
            s = drone_step(s, (223.0, 220.0), dt)
        return s.vector()

    dt = 0.1
    ref = run(dt / 64)
    ratio = np.linalg.norm(run(dt) - ref) / np.linalg.norm(run(dt / 2) - ref)
    assert 12 < ratio < 20


def test_tracking_hover_converges():
    ref = np.tile([[0.5, 0.5]], (301, 1))
    r = track_trajectory(ref, 0.02, initial=DroneState(0.4, 0.45))
    hover = DroneParams().hover_speed
    np.testing.assert_allclose(r.commands[-20:], hover, rtol=0.02)
    assert np.hypot(*(r.states[-1, :2] - [0.5, 0.5])) < 1e-3


def test_tracking_ramp_tilt_sign():
    dt = 0.02
    t = np.arange(151) * dt
    for direction in (1.0, -1.0):
        ref = np.stack([0.5 + direction * 0.2 * t, np.full_like(t, 0.5)], 1)
        r = track_trajectory(ref, dt)
        accel_phase = r.states[1:15, 2]
        assert np.all(np.sign(accel_phase) == -direction)


def test_tracking_rejects_zero_horizon():
    with pytest.raises(ValueError):
        track_trajectory(np.zeros((5, 2)), 0.02, horizon=0)


# ----------------------------------------------------------------- datasets


def test_generate_dataset_valid_and_deterministic(tmp_path):
    m = generate_dataset("taylor_green", 2, 10, 50, 0.05, tmp_path / "a", seed=3)
    generate_dataset("taylor_green", 2, 10, 50, 0.05, tmp_path / "b", seed=3)
    ids = m.split["train"] + m.split["valid"] + m.split["test"]
    assert len(ids) == 2
    for tid in ids:
        traj = load_trajectory(trajectory_path(tmp_path / "a", tid))
        assert len(traj.frames) == 10
        assert all(validate_frame(f) == [] for f in traj.frames)
    for root, _, files in os.walk(tmp_path / "a"):
        for name in files:
            pa = os.path.join(root, name)
            pb = pa.replace(str(tmp_path / "a"), str(tmp_path / "b"))
            assert open(pa, "rb").read() == open(pb, "rb").read(), name
    assert Manifest.load(tmp_path / "a").split == m.split


def test_split_fractions():
    s = split_ids([f"t{i}" for i in range(10)])
    assert [len(s[k]) for k in ("train", "valid", "test")] == [8, 1, 1]
    with pytest.raises(ValueError):
        split_ids(["a"], (0.5, 0.6, 0.1))


def test_vortex_and_mixed_families():
    v = generate_trajectory("vortex", 4, 60, 0.05, seed=0)
    assert all(validate_frame(f) == [] for f in v.frames)
    np.testing.assert_allclose(v.frames[0].pressure[:, 0], -0.5 * np.sum(v.frames[0].velocity.astype(float) ** 2, 1),
                               rtol=1e-5, atol=1e-7)
    families = [generate_trajectory("mixed", 3, 40, 0.05, 0, index=i).meta["family"] for i in range(2)]
    assert families == ["taylor_green", "vortex"]
    with pytest.raises(ValueError):
        generate_trajectory("plasma", 3, 40, 0.05, 0)


def test_rotor_wake_moves_near_drone_only():
    traj = generate_trajectory("rotor_wake", 6, 150, 0.05, seed=0)
    assert all(validate_frame(f) == [] for f in traj.frames)
    states = np.asarray(traj.meta["drone_states"])
    a, b = traj.frames[0], traj.frames[-1]
    sa = {tuple(p) for p in a.positions}
    sb = {tuple(p) for p in b.positions}
    assert sa != sb
    far = [p for p in sa if min(np.hypot(p[0] - s[0], p[1] - s[1]) for s in states) > 0.3]
    assert far and all(p in sb for p in far)
    near = [p for p in sa if np.hypot(p[0] - states[0, 0], p[1] - states[0, 1]) < 0.1]
    assert near and not all(p in sb for p in near)
    assert np.all(a.positions[:, 0] <= ROTOR_DOMAIN[:, 0].max() + 1e-6)
