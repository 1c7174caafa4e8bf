"""Cameras, depth lifting and the depth-derived attention bias between views."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import io
from .nn import Module, param, zeros, linear
from .tensor import Tensor, ShapeError, _make, clamp_min, concat, reshape, softplus

VIEW_NAMES = ("front", "left", "back", "right")

# Defaults for the geometry prior (all overridable from the CLI config).
TAU = 0.5
CONF_FLOOR = 0.1
EPS = 1e-6
FLOOR_LOGIT = -20.0
DEPTH_FLOOR = 1e-3


@dataclass
class CameraView:
    """Pinhole intrinsics plus a world-to-camera pose.

    ``ortho_scale`` (pixels per world unit) is used by the orthographic
    renderer; lifting always goes through ``K``.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    view_index: int
    width: int
    height: int
    ortho_scale: float = field(default=0.0)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not 0 <= int(self.view_index) <= 3:
            raise ValueError(f"view_index {self.view_index} outside 0..3")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.det(self.K)) < 1e-12:
            raise ValueError("singular intrinsics")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def world_to_camera(self, X: np.ndarray) -> np.ndarray:
        return X @ self.R.T + self.t

    def project_ortho(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthographic pixel coordinates (u, v) and depth of world points."""
        xc = self.world_to_camera(X)
        u = self.K[0, 2] + self.ortho_scale * xc[..., 0]
        v = self.K[1, 2] + self.ortho_scale * xc[..., 1]
        return u, v, xc[..., 2]

    def scaled(self, factor: int) -> "CameraView":
        """Camera for a grid downsampled by ``factor`` (pixel centres at integers)."""
        K = self.K.copy()
        K[0, 0] /= factor
        K[1, 1] /= factor
        K[0, 2] = (K[0, 2] + 0.5) / factor - 0.5
        K[1, 2] = (K[1, 2] + 0.5) / factor - 0.5
        return replace(
            self,
            K=K,
            width=self.width // factor,
            height=self.height // factor,
            ortho_scale=self.ortho_scale / factor,
        )

    def pose_vector(self) -> np.ndarray:
        return np.concatenate([self.R.reshape(-1), self.t])

    def save(self, path) -> None:
        io.write_kv(
            path,
            {
                "fx": self.K[0, 0],
                "fy": self.K[1, 1],
                "cx": self.K[0, 2],
                "cy": self.K[1, 2],
                "rotation": self.R.reshape(-1),
                "translation": self.t,
                "view_index": int(self.view_index),
                "width": int(self.width),
                "height": int(self.height),
                "ortho_scale": self.ortho_scale,
            },
        )

    @classmethod
    def load(cls, path) -> "CameraView":
        kv = io.read_kv(path)
        K = np.array(
            [[float(kv["fx"]), 0, float(kv["cx"])], [0, float(kv["fy"]), float(kv["cy"])], [0, 0, 1]]
        )
        return cls(
            K=K,
            R=io.floats(kv["rotation"]),
            t=io.floats(kv["translation"]),
            view_index=int(kv["view_index"]),
            width=int(kv.get("width", 0)),
            height=int(kv.get("height", 0)),
            ortho_scale=float(kv.get("ortho_scale", 0.0)),
        )


def yaw(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def orthogonal_views(
    width: int = 64,
    height: int = 64,
    distance: float = 2.0,
    center=(0.5, 0.5, 0.5),
    extent: float = 1.0,
) -> list[CameraView]:
    """Front, left, back and right cameras, 90 degrees of yaw apart.

    Camera axes: x to the image right, y down (world -y), z forward into the
    scene. The orthographic footprint spans ``extent`` world units.
    """
    center = np.asarray(center, dtype=np.float64)
    # cyclic rotation of the world axes: the front camera looks down -z
    base = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    scale = width / extent
    cams = []
    for k in range(4):
        # exact quarter turns; avoids cos(pi/2) residue
        quarter = np.round(yaw(k * np.pi / 2.0))
        R = base @ quarter.T
        C = center + quarter @ np.array([0.0, 0.0, distance])
        t = -R @ C
        K = np.array(
            [
                [scale * distance, 0.0, (width - 1) / 2.0],
                [0.0, scale * distance, (height - 1) / 2.0],
                [0.0, 0.0, 1.0],
            ]
        )
        cams.append(CameraView(K, R, t, k, width, height, ortho_scale=scale))
    return cams


def relative_rotation(a: CameraView, b: CameraView) -> np.ndarray:
    """Rotation taking camera-``a`` coordinates to camera-``b`` coordinates."""
    return b.R @ a.R.T


# -- depth head and lifting -------------------------------------------------------


class DepthHead(Module):
    """Per-location linear map followed by softplus and a positive floor."""

    def __init__(self, width: int, rng: np.random.Generator | None = None, floor: float = DEPTH_FLOOR):
        if rng is None:
            self.weight = zeros(width, 1)
        else:
            self.weight = param(rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, 1)))
        self.bias = zeros(1)
        self.floor = floor

    def __call__(self, H: Tensor) -> Tensor:
        return predict_depth(H, self.weight, self.bias, self.floor)


def predict_depth(H: Tensor, weight: Tensor, bias: Tensor, floor: float = DEPTH_FLOOR) -> Tensor:
    """Map features ``(..., h, w, c)`` to a strictly positive depth ``(..., h, w)``."""
    if H.shape[-1] != weight.shape[0]:
        raise ShapeError(f"depth head expects {weight.shape[0]} channels, got {H.shape[-1]}")
    z = linear(H, weight, bias)
    d = softplus(z) + floor
    return reshape(d, d.shape[:-1])


def pixel_rays(cam: CameraView, h: int, w: int) -> np.ndarray:
    """K^-1 [u, v, 1] for every grid location, row-major, shape (h*w, 3)."""
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    uv1 = np.stack([uu.ravel(), vv.ravel(), np.ones(h * w)], axis=-1)
    return lift_rays(uv1, cam.K)


def lift_rays(uv1: np.ndarray, K: np.ndarray) -> np.ndarray:
    if abs(np.linalg.det(K)) < 1e-12:
        raise ValueError("singular intrinsics")
    return uv1 @ np.linalg.inv(K).T


def lift_to_camera(D, cam: CameraView) -> Tensor:
    """Back-project a depth map ``(..., h, w)`` to camera points ``(..., h*w, 3)``."""
    D = D if isinstance(D, Tensor) else Tensor(D)
    h, w = D.shape[-2:]
    rays = pixel_rays(cam, h, w)
    flat = reshape(D, D.shape[:-2] + (h * w, 1))
    return flat * rays


def camera_to_world(points: Tensor, cam: CameraView) -> Tensor:
    # X = R^T (x - t), written as (x - t) R for row vectors
    return (points - cam.t) @ cam.R


def pairwise_sq_distance(pa: Tensor, pb: Tensor) -> Tensor:
    pa = pa if isinstance(pa, Tensor) else Tensor(pa)
    pb = pb if isinstance(pb, Tensor) else Tensor(pb)
    a = reshape(pa, pa.shape[:-1] + (1, pa.shape[-1]))
    b = reshape(pb, pb.shape[:-2] + (1,) + pb.shape[-2:])
    diff = a - b
    return (diff * diff).sum(axis=-1)


def pairwise_distance(pa, pb) -> Tensor:
    return pairwise_sq_distance(pa, pb).sqrt()


def geometric_affinity(d, tau: float = TAU) -> Tensor:
    """exp(-d^2 / tau) for a distance matrix ``d``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = d if isinstance(d, Tensor) else Tensor(d)
    return (d * d * (-1.0 / tau)).exp()


def depth_gradient_norm(D: Tensor) -> Tensor:
    """||grad D|| by forward differences; the last row/column repeats the border (zero diff)."""
    h, w = D.shape[-2:]
    lead = D.shape[:-2]
    parts_x = [D[..., :, 1:] - D[..., :, :-1]] if w > 1 else []
    gx = concat(parts_x + [Tensor(np.zeros(lead + (h, 1)))], axis=-1)
    parts_y = [D[..., 1:, :] - D[..., :-1, :]] if h > 1 else []
    gy = concat(parts_y + [Tensor(np.zeros(lead + (1, w)))], axis=-2)
    return (gx * gx + gy * gy).sqrt()


class ConfidenceMap(Module):
    """f(x) = 1 - exp(-s x) with s = softplus(raw) >= 0, s = 1 at initialisation."""

    def __init__(self, slope: float = 1.0):
        self.raw = param(np.array([slope + np.log(-np.expm1(-slope))]))  # stable softplus inverse

    @property
    def slope(self) -> Tensor:
        return softplus(self.raw)

    def __call__(self, x: Tensor) -> Tensor:
        return 1.0 - (x * (-1.0) * self.slope).exp()


def _outer_ratio(D: Tensor, eps: float) -> Tensor:
    """(|grad D_i| + |grad D_j|) / (|D_i| + |D_j| + eps) over flattened locations."""
    h, w = D.shape[-2:]
    n = h * w
    g = reshape(depth_gradient_norm(D), D.shape[:-2] + (n,))
    d = reshape(D, D.shape[:-2] + (n,))
    gi, gj = reshape(g, g.shape + (1,)), reshape(g, g.shape[:-1] + (1, n))
    di, dj = reshape(d, d.shape + (1,)), reshape(d, d.shape[:-1] + (1, n))
    return (gi + gj) / (_abs(di) + _abs(dj) + eps)


def _abs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return x * sign


def depth_confidence(D, alpha: float = CONF_FLOOR, eps: float = EPS, fmap: ConfidenceMap | None = None) -> Tensor:
    """Pairwise confidence alpha + (1 - alpha)(1 - f(ratio)), shape (..., N, N)."""
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    D = D if isinstance(D, Tensor) else Tensor(D)
    fmap = fmap or ConfidenceMap()
    return alpha + (1.0 - alpha) * (1.0 - fmap(_outer_ratio(D, eps)))


def log_clamped(w, floor: float = FLOOR_LOGIT) -> Tensor:
    """max(log w, floor); zero entries map to ``floor``."""
    w = w if isinstance(w, Tensor) else Tensor(w)
    x = w.data
    with np.errstate(divide="ignore"):
        lg = np.log(np.where(x > 0, x, 0.0))
    keep = lg > floor
    out = np.where(keep, lg, floor)

    def rule(g):
        return (np.where(keep, g / np.where(keep, x, 1.0), 0.0),)

    return _make(out, (w,), rule, "log_clamped")


def affinity_log_bias(w, floor_logit: float = FLOOR_LOGIT) -> Tensor:
    return log_clamped(w, floor_logit)


@dataclass
class GeometryPrior:
    tau: float = TAU
    alpha: float = CONF_FLOOR
    eps: float = EPS
    floor_logit: float = FLOOR_LOGIT
    within_view: bool = True


def multiview_points(D: Tensor, cams: list[CameraView]) -> Tensor:
    """Lift per-view depth ``(..., V, h, w)`` into world points ``(..., V*h*w, 3)``."""
    V = len(cams)
    if D.shape[-3] != V:
        raise ShapeError(f"depth has {D.shape[-3]} views, got {V} cameras")
    pts = []
    for k, cam in enumerate(cams):
        pk = lift_to_camera(D[..., k, :, :], cam)
        pts.append(camera_to_world(pk, cam))
    return concat(pts, axis=-2)


def affinity_matrix(D: Tensor, cams: list[CameraView], prior: GeometryPrior, fmap: ConfidenceMap) -> Tensor:
    """Combined affinity w = w_d * w_conf over all locations of all views."""
    pts = multiview_points(D, cams)
    wd = geometric_affinity(pairwise_sq_distance(pts, pts).sqrt(), prior.tau)
    wc = _multiview_confidence(D, prior, fmap)
    return wd * wc


def _multiview_confidence(D: Tensor, prior: GeometryPrior, fmap: ConfidenceMap) -> Tensor:
    V, h, w = D.shape[-3:]
    n = h * w
    g = reshape(depth_gradient_norm(D), D.shape[:-3] + (V * n,))
    d = reshape(D, D.shape[:-3] + (V * n,))
    gi, gj = reshape(g, g.shape + (1,)), reshape(g, g.shape[:-1] + (1, V * n))
    di, dj = reshape(d, d.shape + (1,)), reshape(d, d.shape[:-1] + (1, V * n))
    ratio = (gi + gj) / (_abs(di) + _abs(dj) + prior.eps)
    return prior.alpha + (1.0 - prior.alpha) * (1.0 - fmap(ratio))


def geometry_bias(D: Tensor, cams: list[CameraView], prior: GeometryPrior, fmap: ConfidenceMap) -> Tensor:
    """Attention log-bias ``(..., V*N, V*N)`` from per-view depth ``(..., V, h, w)``.

    Distances are taken in world coordinates, which equals mapping view-j
    points into view-i's frame (rigid maps preserve distance). The bias is
    formed in the log domain so tiny affinities clamp to the floor instead
    of underflowing.
    """
    pts = multiview_points(D, cams)
    d2 = pairwise_sq_distance(pts, pts)
    wc = _multiview_confidence(D, prior, fmap)
    logw = d2 * (-1.0 / prior.tau) + wc.log()
    bias = clamp_min(logw, prior.floor_logit)
    if not prior.within_view:
        V, h, w = D.shape[-3:]
        n = h * w
        same = np.kron(np.eye(V), np.ones((n, n))).astype(bool)
        bias = bias * (~same)
    return bias


class PoseFusion(Module):
    """Concatenate a learnable per-view pose embedding and fuse with a residual 1x1 map."""

    def __init__(self, width: int, embed_width: int = 8, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.table = param(rng.normal(0.0, 1.0, size=(4, embed_width)))
        self.pose_proj = param(rng.normal(0.0, 0.3, size=(12, embed_width)))
        self.weight = zeros(width + embed_width, width)
        self.bias = zeros(width)
        self.embed_width = embed_width

    def embedding(self, cam: CameraView) -> Tensor:
        if not 0 <= cam.view_index <= 3:
            raise ValueError(f"view_index {cam.view_index} outside 0..3")
        pose = Tensor(cam.pose_vector().reshape(1, 12))
        e = self.table[cam.view_index : cam.view_index + 1] + pose @ self.pose_proj
        return reshape(e, (self.embed_width,))

    def __call__(self, H: Tensor, cam: CameraView) -> Tensor:
        return fuse_pose(H, cam, self)


def fuse_pose(H: Tensor, cam: CameraView, fusion: PoseFusion) -> Tensor:
    """Pose-aware features with the same shape as ``H`` (channels last)."""
    if fusion.weight.shape[0] != H.shape[-1] + fusion.embed_width:
        raise ShapeError("pose fusion width does not match the latent")
    e = fusion.embedding(cam)
    tiled = e * Tensor(np.ones(H.shape[:-1] + (1,)))
    joined = concat([H, tiled], axis=-1)
    return H + linear(joined, fusion.weight, fusion.bias)
