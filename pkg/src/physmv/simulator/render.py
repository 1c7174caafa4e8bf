"""Orthographic particle splatting: intensity, coverage mask, nearest depth and exact flow."""

from __future__ import annotations

import numpy as np

from ..geometry import CameraView
from .mpm import ParticleState

SPLAT_RADIUS = 1.0  # pixels
SPLAT_INTENSITY = 0.35


def _footprint(u, v, depth, h: int, w: int, radius: float):
    """Pixels covered by each disc: (particle index, flat pixel index, depth)."""
    R = int(np.ceil(radius))
    offs = np.arange(-R, R + 1)
    cu, cv = np.round(u).astype(np.int64), np.round(v).astype(np.int64)
    cols = cu[:, None, None] + offs[None, None, :]
    rows = cv[:, None, None] + offs[None, :, None]
    cols, rows = np.broadcast_arrays(cols, rows)
    inside = (cols - u[:, None, None]) ** 2 + (rows - v[:, None, None]) ** 2 <= radius * radius
    inside &= (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    pid = np.broadcast_to(np.arange(u.size)[:, None, None], inside.shape)[inside]
    pix = rows[inside] * w + cols[inside]
    return pid, pix, depth[pid]


def _nearest(pid, pix, dep, npix: int):
    """For each covered pixel, the particle with the smallest depth (ties -> lower index)."""
    order = np.lexsort((pid, dep, pix))
    pix_s = pix[order]
    first = np.ones(pix_s.size, dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    return pix_s[first], pid[order][first]


def render_view(
    state: ParticleState | None,
    cam: CameraView,
    extents: tuple[int, int] | None = None,
    radius: float = SPLAT_RADIUS,
    intensity: float = SPLAT_INTENSITY,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Splat particles as discs; returns (frame, mask, depth) with depth = inf where uncovered.

    Splats accumulate additively and saturate at 1, so the front-to-back order
    does not change the frame; the nearest splat decides the depth.
    """
    if radius <= 0:
        raise ValueError("splat radius must be positive")
    h, w = extents if extents is not None else (cam.height, cam.width)
    frame = np.zeros(h * w)
    depth = np.full(h * w, np.inf)
    if state is None or state.count == 0:
        return frame.reshape(h, w), np.zeros((h, w), dtype=bool), depth.reshape(h, w)
    u, v, z = cam.project_ortho(state.x)
    pid, pix, dep = _footprint(u, v, z, h, w, radius)
    frame += np.bincount(pix, minlength=h * w) * intensity
    frame = np.minimum(frame, 1.0)
    px, near = _nearest(pid, pix, dep, h * w)
    depth[px] = z[near]
    mask = np.isfinite(depth)
    return frame.reshape(h, w), mask.reshape(h, w), depth.reshape(h, w)


def exact_flow(
    state_t: ParticleState,
    state_next: ParticleState,
    cam: CameraView,
    extents: tuple[int, int] | None = None,
    radius: float = SPLAT_RADIUS,
) -> np.ndarray:
    """Per-pixel image displacement (du, dv) of the nearest covering particle; zero elsewhere."""
    h, w = extents if extents is not None else (cam.height, cam.width)
    flow = np.zeros((h * w, 2))
    if state_t.count == 0:
        return flow.reshape(h, w, 2)
    if state_next.count != state_t.count:
        raise ValueError("flow needs the same particles in both states")
    u0, v0, z0 = cam.project_ortho(state_t.x)
    u1, v1, _ = cam.project_ortho(state_next.x)
    pid, pix, dep = _footprint(u0, v0, z0, h, w, radius)
    px, near = _nearest(pid, pix, dep, h * w)
    flow[px, 0] = u1[near] - u0[near]
    flow[px, 1] = v1[near] - v0[near]
    return flow.reshape(h, w, 2)


def background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth static backdrop: a vertical ramp plus a low-frequency ripple."""
    fy, fx = rng.uniform(0.5, 2.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = 0.2 + 0.15 * yy + 0.08 * np.sin(2 * np.pi * fx * xx + phase[0]) * np.cos(2 * np.pi * fy * yy + phase[1])
    return np.clip(img, 0.0, 1.0)


def composite(frame: np.ndarray, backdrop: np.ndarray) -> np.ndarray:
    """Foreground intensity used as alpha over a static backdrop (foreground is white)."""
    return frame + (1.0 - frame) * backdrop
