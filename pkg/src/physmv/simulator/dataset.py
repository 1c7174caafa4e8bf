"""Deterministic four-view scene records: simulate, render, and write to disk."""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import io
from ..conditioning import PhysicsAttributes, describe_scene
from ..geometry import CameraView, orthogonal_views
from .mpm import SceneSpec, Trajectory, simulate
from .render import background, composite, exact_flow, render_view

# keys whose values form the cartesian scene grid
GRID_KEYS = ("shape", "E", "rho", "nu", "vx", "vy", "vz", "ay", "replicate")
DEFAULTS = {
    "shape": "sphere",
    "E": "5e4",
    "rho": "1000",
    "nu": "0.3",
    "vx": "0",
    "vy": "0",
    "vz": "0",
    "ay": "-9.8",
    "replicate": "0",
    "radius": "0.11",
    "height": "0.7",
    "jitter": "0.05",
    "frames": "16",
    "image_size": "64",
    "grid": "32",
    "frame_dt": "0.03",
}
FAR_DEPTH = 3.0  # reference depth assigned to background pixels


class DatasetError(ValueError):
    pass


def parse_config(cfg: dict | str | Path | None) -> dict[str, str]:
    """Merge a key=value file (or dict) over the defaults; values stay strings."""
    if cfg is None:
        raw = {}
    elif isinstance(cfg, dict):
        raw = {k: io.format_value(v) for k, v in cfg.items()}
    else:
        raw = io.read_kv(cfg)
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise DatasetError(f"unknown config keys: {sorted(unknown)}")
    out = dict(DEFAULTS)
    out.update(raw)
    return out


def scene_grid(config: dict[str, str]) -> list[dict[str, str]]:
    """Cartesian product of the whitespace-separated lists in ``GRID_KEYS``, in key order."""
    axes = [config[k].split() for k in GRID_KEYS]
    for k, vals in zip(GRID_KEYS, axes):
        if not vals:
            raise DatasetError(f"empty grid entry {k!r}")
    return [dict(zip(GRID_KEYS, combo)) for combo in itertools.product(*axes)]


def shape_size(shape: str, radius: float) -> tuple:
    if shape == "sphere":
        return (radius,)
    if shape == "box":
        return (0.8 * radius,) * 3
    if shape == "composite":
        # two spheres stacked on the vertical axis
        r = 0.7 * radius
        return (0.0, -0.6 * r, 0.0, r, 0.0, 0.6 * r, 0.0, 0.8 * r)
    raise DatasetError(f"invalid shape {shape!r}")


def scene_spec(entry: dict[str, str], config: dict[str, str], seed: int) -> SceneSpec:
    """Build one scene; the placement jitter comes from the scene's own seed."""
    try:
        attrs = PhysicsAttributes(
            (0.0, float(entry["ay"]), 0.0),
            (float(entry["vx"]), float(entry["vy"]), float(entry["vz"])),
            float(entry["rho"]),
            float(entry["E"]),
            float(entry["nu"]),
        )
        rng = np.random.default_rng(seed)
        jitter = float(config["jitter"])
        dx, dz = rng.uniform(-jitter, jitter, size=2)
        return SceneSpec(
            shape=entry["shape"],
            size=shape_size(entry["shape"], float(config["radius"])),
            center=(0.5 + dx, float(config["height"]), 0.5 + dz),
            attrs=attrs,
            grid=int(config["grid"]),
            frames=int(config["frames"]),
            frame_dt=float(config["frame_dt"]),
            seed=seed,
            image_size=int(config["image_size"]),
        )
    except (ValueError, KeyError) as exc:
        raise DatasetError(f"invalid grid entry {entry}: {exc}") from exc


def scene_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


@dataclass
class SceneRecord:
    frames: np.ndarray  # (4, T, h, w) in [0, 1]
    masks: np.ndarray  # (4, T, h, w) bool
    depth: np.ndarray  # (4, T, h, w), inf where uncovered
    flow: np.ndarray  # (T-1, h, w, 2), view 0
    centroid: np.ndarray  # (T, 3) world coordinates
    full: np.ndarray  # (T, h, w) view 0 over a static backdrop
    spec: SceneSpec
    cams: list[CameraView]
    prompt: str
    contact_frame: int
    path: Path | None = None

    @property
    def attrs(self) -> PhysicsAttributes:
        return self.spec.attrs

    @property
    def T(self) -> int:
        return self.frames.shape[1]

    def reference_depth(self, far: float = FAR_DEPTH) -> np.ndarray:
        return np.where(self.masks, self.depth, far)


def render_trajectory(traj: Trajectory, cams: list[CameraView]):
    h = w = traj.spec.image_size
    frames = np.zeros((4, len(traj.states), h, w))
    masks = np.zeros(frames.shape, dtype=bool)
    depth = np.zeros(frames.shape)
    for k, cam in enumerate(cams):
        for t, state in enumerate(traj.states):
            frames[k, t], masks[k, t], depth[k, t] = render_view(state, cam, (h, w))
    return frames, masks, depth


def build_record(spec: SceneSpec) -> SceneRecord:
    traj = simulate(spec)
    n = spec.image_size
    cams = orthogonal_views(n, n)
    frames, masks, depth = render_trajectory(traj, cams)
    flow = np.stack([exact_flow(a, b, cams[0]) for a, b in zip(traj.states[:-1], traj.states[1:])]) if len(
        traj.states
    ) > 1 else np.zeros((0, n, n, 2))
    backdrop = background(n, n, np.random.default_rng(spec.seed))
    full = np.stack([composite(f, backdrop) for f in frames[0]])
    return SceneRecord(
        frames, masks, depth, flow, traj.centroids(), full, spec, cams,
        describe_scene(spec.shape, spec.attrs), traj.contact_frame,
    )


def spec_kv(spec: SceneSpec, contact_frame: int) -> dict:
    return {
        "shape": spec.shape,
        "size": list(spec.size),
        "center": list(spec.center),
        "grid": spec.grid,
        "dt": spec.step_dt(),
        "frames": spec.frames,
        "frame_dt": spec.frame_dt,
        "stride": spec.frame_stride(),
        "seed": spec.seed,
        "image_size": spec.image_size,
        "contact_frame": contact_frame,
    }


def _spec_from_kv(kv: dict, attrs: PhysicsAttributes) -> tuple[SceneSpec, int]:
    spec = SceneSpec(
        shape=kv["shape"],
        size=tuple(io.floats(kv["size"])),
        center=tuple(io.floats(kv["center"])),
        attrs=attrs,
        grid=int(kv["grid"]),
        dt=float(kv["dt"]),
        frames=int(kv["frames"]),
        frame_dt=float(kv["frame_dt"]),
        stride=int(kv["stride"]),
        seed=int(kv["seed"]),
        image_size=int(kv["image_size"]),
    )
    return spec, int(kv["contact_frame"])


def write_record(record: SceneRecord, directory: Path, precision: str = "f32") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.write_kv(d / "spec.txt", spec_kv(record.spec, record.contact_frame))
    record.attrs.save(d / "attrs.txt")
    (d / "prompt.txt").write_text(record.prompt + "\n", encoding="utf-8")
    for k, cam in enumerate(record.cams):
        cam.save(d / f"camera_{k}.txt")
        vdir = d / f"view{k}"
        vdir.mkdir(exist_ok=True)
        for t in range(record.T):
            io.save_pgm(vdir / f"frame_{t:03d}.pgm", record.frames[k, t])
    fdir = d / "full"
    fdir.mkdir(exist_ok=True)
    for t in range(record.T):
        io.save_pgm(fdir / f"frame_{t:03d}.pgm", record.full[t])
    io.save_pmv(d / "masks.pmv", record.masks.astype(np.float64), precision)
    io.save_pmv(d / "depth.pmv", np.where(record.masks, record.depth, 0.0), precision)
    io.save_pmv(d / "flow.pmv", record.flow, precision)
    # centroids feed the ballistic check, keep them at full precision
    io.save_pmv(d / "centroid.pmv", record.centroid, "f64")


def _frames_from_pgm(directory: Path, T: int) -> np.ndarray:
    return np.stack([io.load_pgm(directory / f"frame_{t:03d}.pgm") for t in range(T)])


def load_record(directory) -> SceneRecord:
    d = Path(directory)
    try:
        attrs = PhysicsAttributes.load(d / "attrs.txt")
        spec, contact = _spec_from_kv(io.read_kv(d / "spec.txt"), attrs)
        T = spec.frames
        cams = [CameraView.load(d / f"camera_{k}.txt") for k in range(4)]
        frames = np.stack([_frames_from_pgm(d / f"view{k}", T) for k in range(4)])
        full = _frames_from_pgm(d / "full", T)
        masks = io.load_pmv(d / "masks.pmv") > 0.5
        depth = io.load_pmv(d / "depth.pmv").astype(np.float64)
        depth = np.where(masks, depth, np.inf)
        flow = io.load_pmv(d / "flow.pmv").astype(np.float64)
        centroid = io.load_pmv(d / "centroid.pmv")
        prompt = (d / "prompt.txt").read_text(encoding="utf-8").strip()
    except (OSError, KeyError, ValueError) as exc:
        raise io.FormatError(f"malformed record {d}: {exc}") from exc
    if masks.shape != frames.shape or depth.shape != frames.shape:
        raise io.FormatError(f"malformed record {d}: mask/depth/frame shapes disagree")
    return SceneRecord(frames, masks, depth, flow, centroid, full, spec, cams, prompt, contact, d)


def make_dataset(config, out, seed: int = 0, precision: str = "f32") -> list[Path]:
    """Generate every scene of the config grid under ``out``; returns record paths.

    Scene ``i`` draws all of its randomness from ``SeedSequence([seed, i])``,
    so the tree is byte-identical across runs and independent of scene order.
    """
    cfg = parse_config(config)
    entries = scene_grid(cfg)
    specs = [scene_spec(e, cfg, scene_seed(seed, i)) for i, e in enumerate(entries)]
    root = Path(out)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"output path {root} is not writable: {exc}") from exc
    paths = []
    for i, spec in enumerate(specs):
        name = f"scene_{i:04d}"
        write_record(build_record(spec), root / name, precision)
        paths.append(root / name)
    (root / "manifest.txt").write_text("".join(f"{p.name}\n" for p in paths), encoding="utf-8")
    return paths


def read_manifest(root) -> list[Path]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise io.FormatError(f"{root}: no manifest.txt")
    names = [ln.strip() for ln in manifest.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not names:
        raise io.FormatError(f"{manifest}: empty manifest")
    return [root / n for n in names]


def load_dataset(root) -> list[SceneRecord]:
    return [load_record(p) for p in read_manifest(root)]


def dataset_hash(root) -> str:
    """SHA-256 over every file of the records listed in the manifest, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for rec in read_manifest(root):
        for f in sorted(p for p in rec.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def temporal_densify(frames, factor: int = 4, spec: SceneSpec | None = None, view: int = 0) -> np.ndarray:
    """Insert ``factor`` frames between each recorded pair.

    With ``spec`` the scene is re-simulated at ``stride / (factor + 1)`` and
    re-rendered, which reproduces the recorded frames exactly; without it the
    in-betweens are linear blends.
    """
    if factor < 0:
        raise ValueError("factor must be non-negative")
    frames = np.asarray(frames, dtype=np.float64)
    if factor == 0:
        return frames.copy()
    n = frames.shape[0]
    if spec is not None:
        stride = spec.frame_stride()
        if stride % (factor + 1):
            raise ValueError(f"stride {stride} is not divisible by {factor + 1}")
        traj = simulate(spec, stride=stride // (factor + 1), frames=(n - 1) * (factor + 1) + 1)
        cam = orthogonal_views(spec.image_size, spec.image_size)[view]
        return np.stack([render_view(s, cam, frames.shape[1:3])[0] for s in traj.states])
    if n < 2:
        raise ValueError("blend mode needs at least two frames")
    w = np.arange(1, factor + 1) / (factor + 1)
    out = [frames[0]]
    for a, b in zip(frames[:-1], frames[1:]):
        for s in w:
            out.append(a + s * (b - a))  # exact when a == b
        out.append(b)
    return np.stack(out)
