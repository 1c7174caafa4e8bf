"""Conditioning inputs: prior videos, patch codec, gated fusion, injection, physics and prompt tokens."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import io
from .nn import Module, zeros, param
from .tensor import Tensor, ShapeError, DomainError, concat

# Normalisation ranges shared with the dataset generator.
RHO_RANGE = (1e2, 1e4)
E_RANGE = (1e3, 1e7)
NU_RANGE = (0.1, 0.45)
ACC_SCALE = 20.0
VEL_SCALE = 4.0
N_FREQ = 8
TOKEN_COUNT = 5


@dataclass
class PhysicsAttributes:
    acceleration: tuple[float, float, float]
    velocity: tuple[float, float, float]
    density: float
    youngs_modulus: float
    poisson_ratio: float

    def __post_init__(self):
        self.acceleration = tuple(float(x) for x in self.acceleration)
        self.velocity = tuple(float(x) for x in self.velocity)
        if len(self.acceleration) != 3 or len(self.velocity) != 3:
            raise ValueError("acceleration and velocity are 3-vectors")
        if not self.density > 0:
            raise ValueError("density must be positive")
        if not self.youngs_modulus > 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson's ratio must lie in (-1, 0.5)")

    def as_kv(self) -> dict:
        ax, ay, az = self.acceleration
        vx, vy, vz = self.velocity
        return {
            "ax": ax, "ay": ay, "az": az,
            "vx": vx, "vy": vy, "vz": vz,
            "rho": self.density, "E": self.youngs_modulus, "nu": self.poisson_ratio,
        }

    def save(self, path) -> None:
        io.write_kv(path, self.as_kv())

    @classmethod
    def from_kv(cls, kv: dict) -> "PhysicsAttributes":
        g = lambda k, d=0.0: float(kv.get(k, d))  # noqa: E731
        return cls(
            (g("ax"), g("ay"), g("az")),
            (g("vx"), g("vy"), g("vz")),
            g("rho"), g("E"), g("nu"),
        )

    @classmethod
    def load(cls, path) -> "PhysicsAttributes":
        return cls.from_kv(io.read_kv(path))


# -- prior videos -------------------------------------------------------------------


def build_foreground_video(frame0, mask, T: int) -> np.ndarray:
    """Masked first frame repeated ``T`` times; background pixels are zero."""
    frame0 = np.asarray(frame0, dtype=np.float64)
    mask = np.asarray(mask)
    if T < 1:
        raise ValueError("T must be at least 1")
    if mask.shape != frame0.shape[: mask.ndim] or mask.ndim != 2:
        raise ShapeError(f"mask {mask.shape} does not match frame {frame0.shape}")
    m = (mask > 0).reshape(mask.shape + (1,) * (frame0.ndim - 2))
    masked = np.where(m, frame0, 0.0)
    return np.repeat(masked[None], T, axis=0)


def static_video(frame0, T: int) -> np.ndarray:
    return np.repeat(np.asarray(frame0, dtype=np.float64)[None], T, axis=0)


# -- linear patch codec ----------------------------------------------------------------


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (i + 0.5) * k / n) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def dct_basis(pt: int, p: int, count: int) -> np.ndarray:
    """Lowest-frequency ``count`` separable DCT-II atoms over a (pt, p, p) patch."""
    dt, ds = _dct_matrix(pt), _dct_matrix(p)
    freqs = sorted(product(range(pt), range(p), range(p)), key=lambda f: (sum(f), f))
    if count > len(freqs):
        raise ValueError("more coefficients than patch entries")
    rows = [np.einsum("a,b,c->abc", dt[a], ds[b], ds[c]).ravel() for a, b, c in freqs[:count]]
    return np.array(rows)


class PatchCodec:
    """Fixed linear map from (pt x p x p x channels) patches to latent channels.

    The basis has orthonormal rows, so ``decode`` (the transpose) is the exact
    pseudo-inverse of ``encode``.
    """

    def __init__(self, patch: int = 8, patch_t: int = 4, channels: int = 1, latent: int = 24,
                 basis: str = "dct", seed: int = 0):
        self.patch, self.patch_t, self.channels, self.latent = patch, patch_t, channels, latent
        dim = patch_t * patch * patch * channels
        if latent > dim:
            raise ValueError("latent width exceeds patch size")
        if basis == "dct":
            if latent % channels:
                raise ValueError("latent width must split evenly across channels")
            per = dct_basis(patch_t, patch, latent // channels)  # (n, pt*p*p)
            W = np.zeros((latent, dim))
            n = per.shape[0]
            for c in range(channels):
                # patch vectors are laid out (pt, p, p, channels)
                W[c * n : (c + 1) * n, c::channels] = per
            self.W = W
        elif basis == "random":
            rng = np.random.default_rng(seed)
            q, _ = np.linalg.qr(rng.normal(size=(dim, latent)))
            self.W = q.T.copy()
        else:
            raise ValueError(f"unknown basis {basis!r}")

    def _check(self, shape):
        T, H, W = shape[:3]
        if T % self.patch_t or H % self.patch or W % self.patch:
            raise ShapeError(f"video extents {shape[:3]} not divisible by patch ({self.patch_t}, {self.patch}, {self.patch})")

    def encode(self, video) -> np.ndarray:
        """(T, H, W[, c]) -> (T/pt, H/p, W/p, latent)."""
        v = np.asarray(video, dtype=np.float64)
        if v.ndim == 3:
            v = v[..., None]
        if v.shape[-1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {v.shape[-1]}")
        self._check(v.shape)
        T, H, W, c = v.shape
        pt, p = self.patch_t, self.patch
        x = v.reshape(T // pt, pt, H // p, p, W // p, p, c).transpose(0, 2, 4, 1, 3, 5, 6)
        x = x.reshape(T // pt, H // p, W // p, pt * p * p * c)
        return x @ self.W.T

    def decode(self, latent) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        t, h, w, _ = z.shape
        pt, p, c = self.patch_t, self.patch, self.channels
        x = (z @ self.W).reshape(t, h, w, pt, p, p, c).transpose(0, 3, 1, 4, 2, 5, 6)
        x = x.reshape(t * pt, h * p, w * p, c)
        return x[..., 0] if c == 1 else x


def encode_prior(video, codec: PatchCodec) -> np.ndarray:
    return codec.encode(video)


# -- gated fusion and injection -------------------------------------------------------------


class GateProjector(Module):
    """Pointwise projector producing the fusion gate from [H_f, H_m]."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        if rng is None:
            self.weight = zeros(2 * channels, channels)
        else:
            self.weight = param(rng.normal(0.0, 0.1, size=(2 * channels, channels)))
        self.bias = zeros(channels)


def gate_fusion(H_f, H_m, proj: GateProjector) -> tuple[Tensor, Tensor]:
    """H_v = G * H_f + (1 - G) * H_m with G = sigmoid(Proj(H_f ++ H_m))."""
    H_f = H_f if isinstance(H_f, Tensor) else Tensor(H_f)
    H_m = H_m if isinstance(H_m, Tensor) else Tensor(H_m)
    if H_f.shape != H_m.shape:
        raise ShapeError(f"fusion inputs differ: {H_f.shape} vs {H_m.shape}")
    joined = concat([H_f, H_m], axis=-1)
    G = (joined @ proj.weight + proj.bias).sigmoid()
    H_v = G * H_f + (1.0 - G) * H_m
    return H_v, G


def inject(H_i, H_v, channel_slice: tuple[int, int] | None = None) -> Tensor:
    """Overwrite channels [start, stop) of ``H_i`` with ``H_v``."""
    H_i = H_i if isinstance(H_i, Tensor) else Tensor(H_i)
    H_v = H_v if isinstance(H_v, Tensor) else Tensor(H_v)
    C = H_i.shape[-1]
    start, stop = channel_slice if channel_slice is not None else (0, C // 2)
    if not (0 <= start <= stop <= C):
        raise ShapeError(f"channel slice {(start, stop)} outside [0, {C}]")
    if stop - start != H_v.shape[-1]:
        raise ShapeError(f"slice width {stop - start} != injected width {H_v.shape[-1]}")
    if H_v.shape[:-1] != H_i.shape[:-1]:
        raise ShapeError(f"injected latent {H_v.shape} does not align with {H_i.shape}")
    parts = []
    if start > 0:
        parts.append(H_i[..., :start])
    if stop > start:
        parts.append(H_v)
    if stop < C:
        parts.append(H_i[..., stop:])
    return concat(parts, axis=-1)


# -- physics tokens ----------------------------------------------------------------------


def _log_unit(x: float, lo: float, hi: float, name: str) -> float:
    if x <= 0:
        raise DomainError(f"{name} must be positive for log normalisation")
    return (np.log10(x) - np.log10(lo)) / (np.log10(hi) - np.log10(lo))


def normalized_scalars(attrs: PhysicsAttributes) -> list[np.ndarray]:
    """Per-token arrays of normalised scalars: [a (3), v (3), rho, E, nu]."""
    a = np.asarray(attrs.acceleration) / ACC_SCALE
    v = np.asarray(attrs.velocity) / VEL_SCALE
    return [
        a,
        v,
        np.array([_log_unit(attrs.density, *RHO_RANGE, "density")]),
        np.array([_log_unit(attrs.youngs_modulus, *E_RANGE, "Young's modulus")]),
        np.array([_log_unit(attrs.poisson_ratio, *NU_RANGE, "Poisson's ratio")]),
    ]


def sinusoid(x: np.ndarray, n_freq: int) -> np.ndarray:
    """[sin(w_k x), cos(w_k x)] interleaved over k with w_k = 2^(k-1) pi."""
    w = (2.0 ** np.arange(n_freq)) * np.pi
    ang = np.asarray(x, dtype=np.float64)[..., None] * w
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(ang.shape[:-1] + (2 * n_freq,))


def physics_tokenize(attrs: PhysicsAttributes, width: int = 48, n_freq: int = N_FREQ) -> np.ndarray:
    """Five parameter-free tokens (a, v, rho, E, nu), zero-padded to ``width``."""
    if not isinstance(attrs, PhysicsAttributes):
        raise TypeError("expected PhysicsAttributes")
    groups = normalized_scalars(attrs)
    need = 3 * 2 * n_freq
    if width < need:
        raise ShapeError(f"token width {width} below the {need} needed for 3 scalars")
    out = np.zeros((TOKEN_COUNT, width))
    for i, g in enumerate(groups):
        enc = sinusoid(g, n_freq).reshape(-1)
        out[i, : enc.size] = enc
    return out


# -- prompt tokens -----------------------------------------------------------------------

VOCAB = (
    "<bos>", "<unk>", "<pad>",
    "a", "the", "is", "and", "to", "of", "on", "in",
    "ball", "sphere", "box", "cube", "cluster", "blob", "block", "object",
    "jelly", "rubber", "wood", "wooden", "metal", "foam", "clay", "soft", "stiff", "elastic",
    "falls", "drops", "bounces", "flies", "slides", "rolls", "tossed", "thrown", "launched",
    "left", "right", "up", "down", "forward", "backward", "floor", "ground", "air",
)
_INDEX = {w: i for i, w in enumerate(VOCAB)}
BOS, UNK, PAD = 0, 1, 2
_EMBED_SEED = 20240917


def _embedding_table(width: int) -> np.ndarray:
    rng = np.random.default_rng(_EMBED_SEED)
    return rng.normal(0.0, 1.0 / np.sqrt(width), size=(len(VOCAB), width))


def position_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / (10000.0 ** ((i // 2 * 2) / width))
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)) * 0.1


def prompt_ids(prompt: str) -> list[int]:
    return [BOS] + [_INDEX.get(w, UNK) for w in prompt.lower().split()]


def prompt_tokenize(prompt: str, width: int = 48) -> np.ndarray:
    """Fixed embeddings of <bos> + lowercased words, plus a sinusoidal position."""
    ids = prompt_ids(prompt)
    table = _embedding_table(width)
    return table[ids] + position_encoding(len(ids), width)


def pad_prompts(prompts: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack token matrices with <pad> rows; returns (tokens, mask)."""
    L = max(p.shape[0] for p in prompts)
    width = prompts[0].shape[1]
    pad = _embedding_table(width)[PAD]
    out = np.tile(pad, (len(prompts), L, 1))
    mask = np.zeros((len(prompts), L), dtype=bool)
    for i, p in enumerate(prompts):
        out[i, : p.shape[0]] = p
        mask[i, : p.shape[0]] = True
    return out, mask


def describe_scene(shape: str, attrs: PhysicsAttributes) -> str:
    """Closed-language prompt: material, object, motion verb."""
    E = attrs.youngs_modulus
    material = "jelly" if E < 3e4 else "rubber" if E < 3e5 else "wooden" if E < 3e6 else "metal"
    obj = {"sphere": "ball", "box": "box", "composite": "cluster"}.get(shape, "object")
    vx, vy, vz = attrs.velocity
    if abs(vx) + abs(vz) > 1e-9:
        verb = "flies"
    elif vy > 0:
        verb = "tossed"
    else:
        verb = "falls"
    return f"{material} {obj} {verb}"
