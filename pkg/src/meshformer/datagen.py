"""Synthetic flow datasets: analytic flows, Poisson-disk meshes and a 2D drone with a tracking controller."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.spatial import cKDTree

from .delaunay import delaunay_triangulate, points_in_polygon
from .mesh import Manifest, MeshFrame, NodeType, Trajectory, save_trajectory, trajectory_path

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
# bottom, right, top, left
CHANNEL_LABELS = (NodeType.WALL, NodeType.OUTLET, NodeType.WALL, NodeType.INLET)


# --------------------------------------------------------------------------- analytic flows


def taylor_green(points, t: float, U: float = 1.0, nu: float = 0.01, phase=(0.0, 0.0)):
    """Decaying Taylor-Green vortex: returns velocity (N, 2) and pressure (N,)."""
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    x = np.pi * (pts[:, 0] + phase[0])
    y = np.pi * (pts[:, 1] + phase[1])
    decay = math.exp(-2.0 * nu * math.pi**2 * t)
    v = np.stack([U * np.sin(x) * np.cos(y), -U * np.cos(x) * np.sin(y)], axis=1) * decay
    p = (U * U / 4.0) * (np.cos(2 * x) + np.cos(2 * y)) * decay**2
    if squeeze:
        return v[0], p[0]
    return v, p


@dataclass
class VortexSystem:
    centers: np.ndarray  # (J, 2)
    circulation: np.ndarray  # (J,)
    core_radius: np.ndarray  # (J,)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        self.circulation = np.asarray(self.circulation, dtype=np.float64).reshape(-1)
        self.core_radius = np.asarray(self.core_radius, dtype=np.float64).reshape(-1)
        if not (len(self.centers) == len(self.circulation) == len(self.core_radius)):
            raise ValueError("vortex arrays differ in length")
        if np.any(self.core_radius <= 0):
            raise ValueError("core radii must be positive")


def _lamb_oseen_kernel(dx, dy, rc):
    """Velocity factor Γ-free: (1 - exp(-r²/rc²)) / (2π r²), finite at r = 0."""
    r2 = dx * dx + dy * dy
    s = r2 / (rc * rc)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(s > 1e-8, -np.expm1(-s) / np.where(r2 > 0, r2, 1.0), (1.0 - 0.5 * s) / (rc * rc))
    return f / (2 * np.pi)


def vortex_velocity(points, system: VortexSystem, exclude_self: bool = False) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    dx = pts[:, None, 0] - system.centers[None, :, 0]
    dy = pts[:, None, 1] - system.centers[None, :, 1]
    k = _lamb_oseen_kernel(dx, dy, system.core_radius[None]) * system.circulation[None]
    if exclude_self:
        np.fill_diagonal(k, 0.0)
    return np.stack([-(k * dy).sum(axis=1), (k * dx).sum(axis=1)], axis=1)


def vortex_field(points, system: VortexSystem):
    """Superposed Lamb-Oseen velocity and the synthetic pseudo-pressure -|v|²/2."""
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    v = vortex_velocity(pts, system)
    p = -0.5 * np.sum(v * v, axis=1)
    if squeeze:
        return v[0], p[0]
    return v, p


def vortex_system_step(system: VortexSystem, dt: float) -> VortexSystem:
    """Advance every center with the velocity induced by the other vortices (RK4)."""

    def rate(c):
        return vortex_velocity(c, replace(system, centers=c), exclude_self=True)

    c = system.centers
    k1 = rate(c)
    k2 = rate(c + 0.5 * dt * k1)
    k3 = rate(c + 0.5 * dt * k2)
    k4 = rate(c + dt * k3)
    return replace(system, centers=c + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))


# --------------------------------------------------------------------------- meshing


def poisson_disk_downsample(points, radius, seed: int = 0) -> np.ndarray:
    """Indices kept by random-order dart throwing with per-point radii.

    A kept point removes every remaining point within its own radius, so any two
    kept points are at least ``min(R(p), R(q))`` apart.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    r = np.broadcast_to(np.asarray(radius, dtype=np.float64), (n,))
    if np.any(r <= 0):
        raise ValueError("radii must be positive")
    order = np.random.default_rng(seed).permutation(n)
    tree = cKDTree(pts)
    alive = np.ones(n, dtype=bool)
    kept = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(i)
        alive[tree.query_ball_point(pts[i], r[i])] = False
    return np.sort(np.asarray(kept, dtype=np.int64))


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _distance_to_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a, b = poly, np.roll(poly, -1, axis=0)
    ab = b - a
    ap = points[:, None, :] - a[None]
    t = np.clip((ap * ab[None]).sum(-1) / (ab * ab).sum(-1)[None], 0, 1)
    closest = a[None] + t[..., None] * ab[None]
    return np.sqrt(((points[:, None, :] - closest) ** 2).sum(-1)).min(axis=1)


def densify_boundary(polygon, spacing: float, labels: Sequence[int] | None = None):
    """Polygon vertices plus evenly spaced points on every edge, with node types."""
    poly = np.asarray(polygon, dtype=np.float64)
    labels = list(labels) if labels is not None else [NodeType.WALL] * len(poly)
    pts, types = [], []
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        m = max(1, int(math.ceil(np.linalg.norm(b - a) / spacing)))
        for j in range(m):
            pts.append(a + (b - a) * j / m)
            # corners take the label of the edge that starts there
            types.append(int(labels[k]))
    return np.asarray(pts), np.asarray(types, dtype=np.uint8)


@dataclass
class DomainSample:
    positions: np.ndarray
    node_types: np.ndarray
    interior_radius: np.ndarray  # disk radius used for each interior node
    spacing: float


def sample_domain_points(polygon, n_points: int, seed: int = 0, labels: Sequence[int] | None = None,
                         density: Callable[[np.ndarray], np.ndarray] | None = None,
                         oversample: int = 12, tolerance: float = 0.1) -> DomainSample:
    """Boundary nodes plus Poisson-disk interior nodes, about ``n_points`` in total.

    ``density`` gives a relative node density; the disk radius at p is
    R0 * density(p)^(-1/2), with R0 found by bisection.
    """
    if n_points < 3:
        raise ValueError(f"n_points must be >= 3, got {n_points}")
    poly = np.asarray(polygon, dtype=np.float64)
    area = _polygon_area(poly)
    h = math.sqrt(area / n_points)
    bpts, btypes = densify_boundary(poly, h, labels if labels is not None else CHANNEL_LABELS[: len(poly)]
                                    if len(poly) == 4 else None)
    n_int = n_points - len(bpts)
    if n_int < 0:
        raise ValueError(f"cannot place {n_points} nodes: the boundary alone needs {len(bpts)}")
    rng = np.random.default_rng(seed)
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    cand = lo + rng.random((oversample * max(n_int, 1) * 2, 2)) * (hi - lo)
    cand = cand[points_in_polygon(cand, poly)]
    cand = cand[_distance_to_polygon(cand, poly) > 0.5 * h]
    rel = np.ones(len(cand)) if density is None else np.asarray(density(cand), dtype=np.float64)
    if np.any(rel <= 0):
        raise ValueError("density must be positive")
    rel = rel ** -0.5
    sub_seed = int(rng.integers(2**31))

    def count(r0):
        return len(poisson_disk_downsample(cand, r0 * rel, sub_seed)) if len(cand) else 0

    if n_int == 0:
        keep = np.zeros(0, dtype=np.int64)
        r0 = h
    else:
        a, b = 0.05 * h, 4.0 * h
        for _ in range(40):
            mid = 0.5 * (a + b)
            if count(mid) > n_int:
                a = mid
            else:
                b = mid
        r0 = b if abs(count(b) - n_int) <= abs(count(a) - n_int) else a
        keep = poisson_disk_downsample(cand, r0 * rel, sub_seed)
        if abs(len(keep) - n_int) > max(2, tolerance * n_points):
            raise ValueError(
                f"cannot reach {n_points} nodes in this domain: achieved {len(keep) + len(bpts)}"
            )
    pos = np.concatenate([bpts, cand[keep]])
    types = np.concatenate([btypes, np.full(len(keep), NodeType.INTERIOR, dtype=np.uint8)])
    return DomainSample(pos, types, r0 * rel[keep], h)


def sample_domain_mesh(polygon, n_points: int, seed: int = 0, labels: Sequence[int] | None = None,
                       density: Callable[[np.ndarray], np.ndarray] | None = None) -> MeshFrame:
    """Triangulated mesh of the domain with zero fields."""
    s = sample_domain_points(polygon, n_points, seed, labels, density)
    return mesh_from_points(s.positions, s.node_types, polygon)


def mesh_from_points(positions, node_types, polygon=None, pressure_channels: int = 1) -> MeshFrame:
    pos = np.asarray(positions, dtype=np.float32)
    edges, _ = delaunay_triangulate(pos.astype(np.float64), polygon)
    n = len(pos)
    return MeshFrame(pos, node_types, np.zeros((n, 2), np.float32), np.zeros((n, pressure_channels), np.float32),
                     edges)


# --------------------------------------------------------------------------- drone


@dataclass(frozen=True)
class DroneParams:
    K1: float = 1e-4
    K2: float = 5e-5
    K3: float = 5.5e-3
    g: float = 9.81

    def __post_init__(self):
        if self.K1 <= 0 or self.K3 <= 0:
            raise ValueError("K1 and K3 must be positive")

    @property
    def hover_speed(self) -> float:
        return math.sqrt(self.g / (2 * self.K1))


@dataclass(frozen=True)
class DroneState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0
    rotor1: float = 0.0
    rotor2: float = 0.0

    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.vx, self.vy, self.omega])

    @classmethod
    def from_vector(cls, s, rotors=(0.0, 0.0)) -> "DroneState":
        return cls(*(float(v) for v in s[:6]), float(rotors[0]), float(rotors[1]))


def drone_rates(s: np.ndarray, w1: float, w2: float, params: DroneParams = DroneParams()) -> np.ndarray:
    _, _, th, vx, vy, om = s
    thrust = params.K1 * (w1 * w1 + w2 * w2)
    drag = params.K2 * (w1 + w2)
    return np.array([
        vx,
        vy,
        om,
        -thrust * math.sin(th) + drag * vx,
        thrust * math.cos(th) - params.g + drag * vy,
        params.K3 * (w2 * w2 - w1 * w1),
    ])


def drone_step(state: DroneState, commands, dt: float, params: DroneParams = DroneParams()) -> DroneState:
    """One RK4 step with rotor speeds held constant over the step."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    w1, w2 = (float(c) for c in commands)
    if w1 < 0 or w2 < 0:
        raise ValueError("rotor speeds must be non-negative")
    s = state.vector()
    k1 = drone_rates(s, w1, w2, params)
    k2 = drone_rates(s + 0.5 * dt * k1, w1, w2, params)
    k3 = drone_rates(s + 0.5 * dt * k2, w1, w2, params)
    k4 = drone_rates(s + dt * k3, w1, w2, params)
    return DroneState.from_vector(s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), (w1, w2))


class TrackingDivergence(RuntimeError):
    def __init__(self, message: str, states: list, commands: list):
        super().__init__(message)
        self.states = states
        self.commands = commands


@dataclass
class TrackingResult:
    times: np.ndarray
    states: np.ndarray  # (T + 1, 6)
    commands: np.ndarray  # (T, 2)
    reference: np.ndarray  # (T + 1, 2)


def hover_linearization(dt: float, params: DroneParams = DroneParams()):
    """Discrete (A, B) of the dynamics linearized at hover, zero-order hold on the commands."""
    w = params.hover_speed
    a = np.zeros((6, 6))
    a[0, 3] = a[1, 4] = a[2, 5] = 1.0
    a[3, 2] = -2 * params.K1 * w * w
    a[3, 3] = a[4, 4] = 2 * params.K2 * w
    b = np.zeros((6, 2))
    b[4, :] = 2 * params.K1 * w
    b[5, 0], b[5, 1] = -2 * params.K3 * w, 2 * params.K3 * w
    m = np.zeros((8, 8))
    m[:6, :6], m[:6, 6:] = a, b
    e = expm(m * dt)
    return e[:6, :6], e[:6, 6:]


def track_trajectory(reference, dt: float, params: DroneParams = DroneParams(), horizon: int = 20,
                     state_weights=(10.0, 10.0, 1.0, 1.0, 1.0, 1.0), command_weight: float = 1e-4,
                     initial: DroneState | None = None, max_error: float = 5.0) -> TrackingResult:
    """Receding-horizon LQ tracking of a sampled 2D path.

    ``reference`` is (T + 1, 2): positions at times k * dt. Every step solves
    the condensed finite-horizon problem of the hover-linearized model and
    applies the first command to the nonlinear dynamics.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, 2)
    if len(ref) < 2:
        raise ValueError("reference needs at least two samples")
    steps = len(ref) - 1
    vel = np.gradient(ref, dt, axis=0)
    ref_states = np.concatenate([ref[:, :1], ref[:, 1:], np.zeros((len(ref), 1)), vel, np.zeros((len(ref), 1))], 1)
    a, b = hover_linearization(dt, params)
    nh = horizon
    phi = np.zeros((6 * nh, 6))
    gam = np.zeros((6 * nh, 2 * nh))
    ak = np.eye(6)
    powers = [np.eye(6)]
    for k in range(nh):
        ak = a @ ak
        powers.append(ak)
        phi[6 * k:6 * k + 6] = ak
    for k in range(nh):
        for j in range(k + 1):
            gam[6 * k:6 * k + 6, 2 * j:2 * j + 2] = powers[k - j] @ b
    qbar = np.kron(np.eye(nh), np.diag(state_weights))
    rbar = command_weight * np.eye(2 * nh)
    gain = np.linalg.solve(gam.T @ qbar @ gam + rbar, gam.T @ qbar)[:2]  # first command only
    w_hover = params.hover_speed

    state = initial or DroneState(ref[0, 0], ref[0, 1])
    states, commands = [state.vector()], []
    for k in range(steps):
        idx = np.minimum(np.arange(k + 1, k + 1 + nh), steps)
        target = ref_states[idx].reshape(-1)
        u = w_hover + gain @ (target - phi @ state.vector())
        u = np.maximum(u, 0.0)
        state = drone_step(state, u, dt, params)
        states.append(state.vector())
        commands.append(u)
        err = float(np.hypot(state.x - ref[k + 1, 0], state.y - ref[k + 1, 1]))
        if not np.all(np.isfinite(state.vector())) or err > max_error:
            raise TrackingDivergence(f"tracking diverged at step {k + 1}: position error {err:.3g}",
                                     states, commands)
    return TrackingResult(np.arange(steps + 1) * dt, np.asarray(states), np.asarray(commands), ref)


# --------------------------------------------------------------------------- flow families


FAMILIES = ("taylor_green", "vortex", "rotor_wake", "mixed")


@dataclass
class TaylorGreen:
    U: float = 1.0
    nu: float = 0.01
    phase: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("nu must be >= 0")


@dataclass
class RotorWake:
    drone: TrackingResult
    arm: float = 0.08
    emit_gamma: float = 0.02
    core_radius: float = 0.03
    lifetime: float = 1.5
    pair_gap: float = 0.03


def _finalize(frames_raw, dt, tag, seed, meta) -> Trajectory:
    frames = []
    for pos, types, edges, vel, pres in frames_raw:
        # adding zero turns -0.0 into +0.0
        frames.append(MeshFrame(pos, types, np.asarray(vel, np.float32) + np.float32(0),
                                np.asarray(pres, np.float32).reshape(len(pos), -1) + np.float32(0), edges))
    return Trajectory(frames, dt, tag, seed, meta)


def taylor_green_trajectory(rng: np.random.Generator, steps: int, nodes: int, dt: float, seed: int) -> Trajectory:
    flow = TaylorGreen(U=float(rng.uniform(0.5, 1.5)), nu=float(0.01 * rng.uniform(0.95, 1.05)),
                       phase=(float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.5, 0.5))))
    mesh = sample_domain_mesh(UNIT_SQUARE, nodes, int(rng.integers(2**31)))
    x = mesh.positions.astype(np.float64)
    raw = []
    for k in range(steps):
        v, p = taylor_green(x, k * dt, flow.U, flow.nu, flow.phase)
        raw.append((mesh.positions, mesh.node_types, mesh.edges, v, p))
    meta = {"family": "taylor_green", "params": {"U": flow.U, "nu": flow.nu, "phase": list(flow.phase)},
            "boundary": UNIT_SQUARE.tolist()}
    return _finalize(raw, dt, "unit_square", seed, meta)


def random_vortex_system(rng: np.random.Generator, count: int | None = None) -> VortexSystem:
    j = int(count or rng.integers(2, 5))
    centers = rng.uniform(0.2, 0.8, size=(j, 2))
    gamma = rng.uniform(0.2, 0.5, size=j) * rng.choice([-1.0, 1.0], size=j)
    radius = rng.uniform(0.08, 0.15, size=j)
    return VortexSystem(centers, gamma, radius)


def vortex_trajectory(rng: np.random.Generator, steps: int, nodes: int, dt: float, seed: int) -> Trajectory:
    system = random_vortex_system(rng)
    initial = system
    mesh = sample_domain_mesh(UNIT_SQUARE, nodes, int(rng.integers(2**31)))
    x = mesh.positions.astype(np.float64)
    raw = []
    substeps = 4
    for k in range(steps):
        v, p = vortex_field(x, system)
        raw.append((mesh.positions, mesh.node_types, mesh.edges, v, p))
        for _ in range(substeps):
            system = vortex_system_step(system, dt / substeps)
    meta = {"family": "vortex", "params": {"centers": initial.centers.tolist(),
                                           "circulation": initial.circulation.tolist(),
                                           "core_radius": initial.core_radius.tolist()},
            "pressure": "synthetic pseudo-pressure -|v|^2/2", "boundary": UNIT_SQUARE.tolist()}
    return _finalize(raw, dt, "unit_square", seed, meta)


ROTOR_DOMAIN = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]])


def drone_reference(rng: np.random.Generator, steps: int, dt: float) -> np.ndarray:
    t = np.arange(steps + 1) * dt
    total = max(t[-1], dt)
    x0, x1 = rng.uniform(0.4, 0.6), rng.uniform(1.4, 1.6)
    y0 = rng.uniform(0.45, 0.6)
    amp, freq = rng.uniform(0.05, 0.15), rng.uniform(0.5, 1.5)
    s = 0.5 - 0.5 * np.cos(np.pi * t / total)  # smooth start and stop
    return np.stack([x0 + (x1 - x0) * s, y0 + amp * np.sin(2 * np.pi * freq * s)], axis=1)


def rotor_positions(state, arm: float) -> np.ndarray:
    x, y, th = state[0], state[1], state[2]
    d = arm * np.array([math.cos(th), math.sin(th)])
    return np.array([[x, y] - d, [x, y] + d])


def rotor_wake_trajectory(rng: np.random.Generator, steps: int, nodes: int, dt: float, seed: int) -> Trajectory:
    """Drone flown by the tracking controller, shedding a downwash vortex pair per rotor each frame."""
    ref = drone_reference(rng, steps, dt)
    track = track_trajectory(ref, dt)
    wake = RotorWake(track)
    n_dyn = 8
    base = sample_domain_points(ROTOR_DOMAIN, max(nodes - n_dyn, 8), int(rng.integers(2**31)))
    clear = 2.0 * wake.arm
    hover = DroneParams().hover_speed
    centers = np.zeros((0, 2))
    gammas = np.zeros(0)
    radii = np.zeros(0)
    ages = np.zeros(0)
    raw = []
    ring_angles = np.linspace(0, 2 * np.pi, n_dyn - 2, endpoint=False)
    for k in range(steps):
        s = track.states[k]
        rotors = rotor_positions(s, wake.arm)
        body = np.array([s[0], s[1]])
        far = np.hypot(*(base.positions - body).T) > clear
        far |= base.node_types != NodeType.INTERIOR
        ring = body + 0.75 * clear * np.stack([np.cos(ring_angles + s[2]), np.sin(ring_angles + s[2])], 1)
        pos = np.concatenate([base.positions[far], rotors, ring])
        types = np.concatenate([base.node_types[far], [NodeType.WALL, NodeType.WALL],
                                np.full(len(ring), NodeType.INTERIOR)]).astype(np.uint8)
        inside = points_in_polygon(pos, ROTOR_DOMAIN) | (types != NodeType.INTERIOR)
        pos, types = pos[inside], types[inside]
        frame = mesh_from_points(pos, types, ROTOR_DOMAIN)

        strength = wake.emit_gamma * (track.commands[min(k, len(track.commands) - 1)] / hover if len(track.commands)
                                      else np.ones(2))
        normal = np.array([-math.sin(s[2]), math.cos(s[2])])  # thrust direction
        side = np.array([math.cos(s[2]), math.sin(s[2])])
        new_c, new_g = [], []
        for r, g in zip(rotors, strength):
            origin = r - 0.5 * wake.core_radius * normal
            new_c += [origin - wake.pair_gap * side, origin + wake.pair_gap * side]
            new_g += [-g, g]
        centers = np.concatenate([centers, new_c])
        gammas = np.concatenate([gammas, new_g])
        radii = np.concatenate([radii, np.full(len(new_g), wake.core_radius)])
        ages = np.concatenate([ages, np.zeros(len(new_g))])
        fade = np.exp(-ages / wake.lifetime)
        system = VortexSystem(centers, gammas * fade, radii)
        v, p = vortex_field(frame.positions.astype(np.float64), system)
        raw.append((frame.positions, frame.node_types, frame.edges, v, p))
        moved = vortex_system_step(system, dt)
        centers = moved.centers
        ages = ages + dt
        radii = np.sqrt(radii**2 + 4 * 1e-4 * dt)  # viscous core growth
        alive = ages < 3 * wake.lifetime
        centers, gammas, radii, ages = centers[alive], gammas[alive], radii[alive], ages[alive]
    meta = {"family": "rotor_wake", "pressure": "synthetic pseudo-pressure -|v|^2/2",
            "note": "synthetic rotor-wake analog built from emitted Lamb-Oseen pairs, not a Navier-Stokes solution",
            "drone_states": track.states.round(6).tolist(), "boundary": ROTOR_DOMAIN.tolist()}
    return _finalize(raw, dt, "rotor_channel", seed, meta)


_GENERATORS = {
    "taylor_green": taylor_green_trajectory,
    "vortex": vortex_trajectory,
    "rotor_wake": rotor_wake_trajectory,
}


def generate_trajectory(family: str, steps: int, nodes: int, dt: float, seed: int, index: int = 0) -> Trajectory:
    """One trajectory of ``steps`` frames; the RNG stream depends on (seed, index) only."""
    family = family.replace("-", "_")
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}, expected one of {FAMILIES}")
    if family == "mixed":
        family = ("taylor_green", "vortex")[index % 2]
    if steps < 2 or nodes < 3 or not dt > 0:
        raise ValueError("need steps >= 2, nodes >= 3 and dt > 0")
    rng = np.random.default_rng([int(seed), int(index)])
    return _GENERATORS[family](rng, steps, nodes, dt, seed)


def split_ids(ids: Sequence[str], fractions=(0.8, 0.1, 0.1)) -> dict[str, list[str]]:
    """Contiguous split by trajectory index."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_valid = min(n_valid, n - n_train)
    return {"train": list(ids[:n_train]), "valid": list(ids[n_train:n_train + n_valid]),
            "test": list(ids[n_train + n_valid:])}


def generate_dataset(family: str, n_traj: int, steps: int, nodes: int, dt: float, out_dir, seed: int = 0,
                     fractions=(0.8, 0.1, 0.1)) -> Manifest:
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [f"traj_{i:04d}" for i in range(n_traj)]
    for i, tid in enumerate(ids):
        traj = generate_trajectory(family, steps, nodes, dt, seed, i)
        traj.meta["generator"] = {"family": family.replace("-", "_"), "n_traj": n_traj, "steps": steps,
                                  "nodes": nodes, "dt": dt, "seed": seed, "index": i}
        save_trajectory(traj, trajectory_path(out, tid))
    manifest = Manifest(split_ids(ids, fractions), pressure_channels=1)
    manifest.save(out)
    return manifest
