"""MLS-MPM elastic solver on [0, 1]^3 with quadratic B-splines and fixed-corotated stress."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from ..conditioning import PhysicsAttributes

BOUND = 3  # boundary layer thickness in cells
MIN_PARTICLES = 64


class SimulationError(RuntimeError):
    pass


class ElementInversionError(SimulationError):
    pass


class OutOfDomainError(SimulationError):
    pass


def lame_params(E: float, nu: float) -> tuple[float, float]:
    """(mu, lambda) from Young's modulus and Poisson's ratio."""
    if not -1.0 < nu < 0.5:
        raise ValueError(f"Poisson's ratio {nu} outside (-1, 0.5)")
    if E <= 0:
        raise ValueError("Young's modulus must be positive")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


@dataclass
class SceneSpec:
    shape: str = "sphere"
    size: tuple = (0.12,)
    center: tuple[float, float, float] = (0.5, 0.7, 0.5)
    attrs: PhysicsAttributes = field(
        default_factory=lambda: PhysicsAttributes((0.0, -9.8, 0.0), (0.0, 0.0, 0.0), 1000.0, 5e4, 0.3)
    )
    grid: int = 32
    dt: float | None = None
    frames: int = 16
    frame_dt: float = 0.03
    stride: int | None = None
    seed: int = 0
    image_size: int = 64
    elastic: bool = True

    def __post_init__(self):
        if self.shape not in ("sphere", "box", "composite"):
            raise ValueError(f"unknown shape {self.shape!r}")
        self.size = tuple(self.size)
        self.center = tuple(float(c) for c in self.center)
        if self.frames < 1:
            raise ValueError("frames must be at least 1")
        lo, hi = self.bounding_box()
        margin = BOUND / self.grid
        if np.any(lo < margin) or np.any(hi > 1.0 - margin):
            raise ValueError("object does not fit inside the domain with margin")
        if self.dt is not None and self.dt > self.cfl_dt():
            raise ValueError(f"dt {self.dt} violates the CFL bound {self.cfl_dt()}")

    @property
    def dx(self) -> float:
        return 1.0 / self.grid

    def lame(self) -> tuple[float, float]:
        if not self.elastic:
            return 0.0, 0.0
        return lame_params(self.attrs.youngs_modulus, self.attrs.poisson_ratio)

    def cfl_dt(self) -> float:
        mu, lam = lame_params(self.attrs.youngs_modulus, self.attrs.poisson_ratio)
        c = math.sqrt((lam + 2.0 * mu) / self.attrs.density)
        return min(2e-4, 0.1 * self.dx / c)

    def step_dt(self) -> float:
        return self.dt if self.dt is not None else self.cfl_dt()

    def frame_stride(self) -> int:
        if self.stride is not None:
            return self.stride
        # multiple of five so frames can be densified exactly by 4 in-betweens
        return max(5, 5 * round(self.frame_dt / self.step_dt() / 5))

    def spheres(self) -> list[tuple[np.ndarray, float]]:
        c = np.asarray(self.center)
        if self.shape == "sphere":
            return [(c, float(self.size[0]))]
        if self.shape == "composite":
            # size: flat list of (dx, dy, dz, r) quadruples relative to center
            vals = np.asarray(self.size, dtype=np.float64).reshape(-1, 4)
            return [(c + v[:3], float(v[3])) for v in vals]
        return []

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        if self.shape == "box":
            half = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,))
            return c - half, c + half
        sph = self.spheres()
        lo = np.min([p - r for p, r in sph], axis=0)
        hi = np.max([p + r for p, r in sph], axis=0)
        return lo, hi

    def contains(self, x: np.ndarray) -> np.ndarray:
        if self.shape == "box":
            half = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,))
            return np.all(np.abs(x - np.asarray(self.center)) <= half, axis=-1)
        inside = np.zeros(x.shape[0], dtype=bool)
        for p, r in self.spheres():
            inside |= np.sum((x - p) ** 2, axis=-1) <= r * r
        return inside

    def volume(self, count: int, spacing: float) -> float:
        if self.shape == "sphere":
            return 4.0 / 3.0 * math.pi * float(self.size[0]) ** 3
        if self.shape == "box":
            half = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,))
            return float(np.prod(2.0 * half))
        return count * spacing**3


@dataclass
class ParticleState:
    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    mass: np.ndarray
    volume: np.ndarray
    step: int = 0
    contact: bool = False

    def copy(self) -> "ParticleState":
        return replace(
            self,
            x=self.x.copy(), v=self.v.copy(), F=self.F.copy(), C=self.C.copy(),
            mass=self.mass.copy(), volume=self.volume.copy(),
        )

    @property
    def count(self) -> int:
        return self.x.shape[0]

    def total_mass(self) -> float:
        return float(np.sum(self.mass))

    def momentum(self) -> np.ndarray:
        return np.sum(self.mass[:, None] * self.v, axis=0)

    def centroid(self) -> np.ndarray:
        return np.sum(self.mass[:, None] * self.x, axis=0) / np.sum(self.mass)


def init_scene(spec: SceneSpec) -> ParticleState:
    """Jittered-lattice sampling (two particles per cell per axis) inside the shape."""
    rng = np.random.default_rng(spec.seed)
    spacing = spec.dx / 2.0
    lo, hi = spec.bounding_box()
    axes = [np.arange(lo[i] + spacing / 2, hi[i], spacing) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    grid = grid + rng.uniform(-0.25, 0.25, size=grid.shape) * spacing
    x = grid[spec.contains(grid)]
    n = x.shape[0]
    if n < MIN_PARTICLES:
        raise SimulationError(f"only {n} particles sampled; need at least {MIN_PARTICLES}")
    vol = spec.volume(n, spacing)
    mass = np.full(n, spec.attrs.density * vol / n)
    v = np.tile(np.asarray(spec.attrs.velocity, dtype=np.float64), (n, 1))
    F = np.tile(np.eye(3), (n, 1, 1))
    C = np.zeros((n, 3, 3))
    return ParticleState(x, v, F, C, mass, np.full(n, vol / n))


def det3(F: np.ndarray) -> np.ndarray:
    return (
        F[:, 0, 0] * (F[:, 1, 1] * F[:, 2, 2] - F[:, 1, 2] * F[:, 2, 1])
        - F[:, 0, 1] * (F[:, 1, 0] * F[:, 2, 2] - F[:, 1, 2] * F[:, 2, 0])
        + F[:, 0, 2] * (F[:, 1, 0] * F[:, 2, 1] - F[:, 1, 1] * F[:, 2, 0])
    )


def _inv3(F: np.ndarray) -> np.ndarray:
    a, b, c = F[:, 0, 0], F[:, 0, 1], F[:, 0, 2]
    d, e, f = F[:, 1, 0], F[:, 1, 1], F[:, 1, 2]
    g, h, i = F[:, 2, 0], F[:, 2, 1], F[:, 2, 2]
    adj = np.stack(
        [
            np.stack([e * i - f * h, c * h - b * i, b * f - c * e], axis=-1),
            np.stack([f * g - d * i, a * i - c * g, c * d - a * f], axis=-1),
            np.stack([d * h - e * g, b * g - a * h, a * e - b * d], axis=-1),
        ],
        axis=1,
    )
    return adj / det3(F)[:, None, None]


def _polar_rotation(F: np.ndarray, tol: float = 1e-13, max_iter: int = 30) -> np.ndarray:
    """Rotation factor of F (det F > 0) by Newton iteration R <- (R + R^-T) / 2."""
    R = F.copy()
    for _ in range(max_iter):
        nxt = 0.5 * (R + np.swapaxes(_inv3(R), 1, 2))
        done = np.max(np.abs(nxt - R)) < tol
        R = nxt
        if done:
            break
    return R


def kirchhoff_stress(F: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """Fixed-corotated Kirchhoff stress P F^T = 2 mu (F - R) F^T + lam (J - 1) J I."""
    if mu == 0.0 and lam == 0.0:
        return np.zeros_like(F)
    R = _polar_rotation(F)
    J = det3(F)
    tau = 2.0 * mu * (F - R) @ np.swapaxes(F, -1, -2)
    tau += (lam * (J - 1.0) * J)[:, None, None] * np.eye(3)
    return tau


def elastic_energy(state: ParticleState, mu: float, lam: float) -> float:
    if mu == 0.0 and lam == 0.0:
        return 0.0
    R = _polar_rotation(state.F)
    J = det3(state.F)
    psi = mu * np.sum((state.F - R) ** 2, axis=(1, 2)) + 0.5 * lam * (J - 1.0) ** 2
    return float(np.sum(state.volume * psi))


def total_energy(state: ParticleState, spec: SceneSpec) -> float:
    """Kinetic + potential (uniform acceleration) + elastic energy."""
    mu, lam = spec.lame()
    a = np.asarray(spec.attrs.acceleration)
    kinetic = 0.5 * np.sum(state.mass * np.sum(state.v**2, axis=1))
    potential = -np.sum(state.mass * (state.x @ a))
    return float(kinetic + potential + elastic_energy(state, mu, lam))


@njit(cache=True)
def _weights(fx):
    w = np.empty((3, 3))
    for d in range(3):
        f = fx[d]
        w[0, d] = 0.5 * (1.5 - f) ** 2
        w[1, d] = 0.75 - (f - 1.0) ** 2
        w[2, d] = 0.5 * (f - 0.5) ** 2
    return w


@njit(cache=True)
def _p2g(x, v, affine, mass, n):
    gm = np.zeros((n, n, n))
    gp = np.zeros((n, n, n, 3))
    inv_dx = float(n)
    dx = 1.0 / n
    fx = np.empty(3)
    base = np.empty(3, np.int64)
    for p in range(x.shape[0]):
        for d in range(3):
            X = x[p, d] * inv_dx
            base[d] = int(np.floor(X - 0.5))
            fx[d] = X - base[d]
        w = _weights(fx)
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    weight = w[i, 0] * w[j, 1] * w[k, 2]
                    d0 = (i - fx[0]) * dx
                    d1 = (j - fx[1]) * dx
                    d2 = (k - fx[2]) * dx
                    a, b, c = base[0] + i, base[1] + j, base[2] + k
                    gm[a, b, c] += weight * mass[p]
                    for e in range(3):
                        mom = mass[p] * v[p, e] + affine[p, e, 0] * d0 + affine[p, e, 1] * d1 + affine[p, e, 2] * d2
                        gp[a, b, c, e] += weight * mom
    return gm, gp


@njit(cache=True)
def _g2p(x, gv, n):
    N = x.shape[0]
    new_v = np.zeros((N, 3))
    new_C = np.zeros((N, 3, 3))
    inv_dx = float(n)
    dx = 1.0 / n
    fx = np.empty(3)
    base = np.empty(3, np.int64)
    for p in range(N):
        for d in range(3):
            X = x[p, d] * inv_dx
            base[d] = int(np.floor(X - 0.5))
            fx[d] = X - base[d]
        w = _weights(fx)
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    weight = w[i, 0] * w[j, 1] * w[k, 2]
                    dpos = ((i - fx[0]) * dx, (j - fx[1]) * dx, (k - fx[2]) * dx)
                    a, b, c = base[0] + i, base[1] + j, base[2] + k
                    for e in range(3):
                        g = gv[a, b, c, e]
                        new_v[p, e] += weight * g
                        for f in range(3):
                            new_C[p, e, f] += 4.0 * inv_dx * inv_dx * weight * g * dpos[f]
    return new_v, new_C


def _grid_update(gm, gp, dt, acc):
    """Velocities from momenta plus acceleration, then boundary conditions. Returns contact flag."""
    n = gm.shape[0]
    gv = np.zeros_like(gp)
    act = gm > 0
    gv[act] = gp[act] / gm[act][:, None] + dt * acc
    lo, hi = slice(0, BOUND), slice(n - BOUND, n)
    contact = bool(
        act[lo].any() or act[hi].any() or act[:, lo].any() or act[:, hi].any()
        or act[:, :, lo].any() or act[:, :, hi].any()
    )
    # sticky floor: nodes moving into it stop entirely; they may still separate
    floor = gv[:, lo]
    floor[floor[..., 1] < 0] = 0.0
    ceil = gv[:, hi, :, 1]
    ceil[ceil > 0] = 0.0
    for axis in (0, 2):
        low = gv[(slice(None),) * axis + (lo,)][..., axis]
        low[low < 0] = 0.0
        gv[(slice(None),) * axis + (lo,) + (Ellipsis, axis)] = low
        high = gv[(slice(None),) * axis + (hi,)][..., axis]
        high[high > 0] = 0.0
        gv[(slice(None),) * axis + (hi,) + (Ellipsis, axis)] = high
    return gv, contact


def mpm_step(state: ParticleState, spec: SceneSpec) -> ParticleState:
    """Advance one timestep: P2G, grid update with acceleration and boundaries, G2P."""
    n = spec.grid
    dt = spec.step_dt()
    mu, lam = spec.lame()
    x, v, F, C, m = state.x, state.v, state.F, state.C, state.mass

    J = det3(F)
    if np.any(J <= 0):
        raise ElementInversionError(f"det(F) <= 0 for {int(np.sum(J <= 0))} particles")
    Xp = x * n
    if Xp.min() < 0.5 or np.floor(Xp.max() - 0.5) + 2 > n - 1:
        raise OutOfDomainError("particle stencil leaves the grid")

    stress = (-dt * 4.0 * n * n) * state.volume[:, None, None] * kirchhoff_stress(F, mu, lam)
    affine = stress + m[:, None, None] * C
    gm, gp = _p2g(x, v, affine, m, n)
    gv, contact = _grid_update(gm, gp, dt, np.asarray(spec.attrs.acceleration, dtype=np.float64))
    new_v, new_C = _g2p(x, gv, n)
    # trapezoidal drift: exact for uniform acceleration
    new_x = x + dt * 0.5 * (v + new_v)
    new_F = (np.eye(3) + dt * new_C) @ F
    if np.any(det3(new_F) <= 0):
        raise ElementInversionError("element inverted during step")
    return ParticleState(new_x, new_v, new_F, new_C, m, state.volume, state.step + 1, state.contact or contact)


@dataclass
class Trajectory:
    states: list[ParticleState]
    spec: SceneSpec
    stride: int
    dt: float
    contact_frame: int

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.stride * self.dt

    def centroids(self) -> np.ndarray:
        return np.array([s.centroid() for s in self.states])


def simulate(spec: SceneSpec, stride: int | None = None, frames: int | None = None) -> Trajectory:
    """Step the scene, keeping a copy of the state every ``stride`` steps."""
    stride = stride or spec.frame_stride()
    frames = frames or spec.frames
    state = init_scene(spec)
    states = [state]
    contact_frame = frames
    step = 0
    for f in range(1, frames):
        for _ in range(stride):
            try:
                state = mpm_step(state, spec)
            except SimulationError as exc:
                raise type(exc)(f"step {step}: {exc}") from exc
            step += 1
            if state.contact and contact_frame == frames:
                contact_frame = f
        states.append(state)
    return Trajectory(states, spec, stride, spec.step_dt(), contact_frame)
