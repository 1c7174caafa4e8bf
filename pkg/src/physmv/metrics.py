"""Desk-scale scene metrics and the JSON-lines evaluation report."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import io
from .conditioning import PhysicsAttributes
from .geometry import CameraView
from .simulator.dataset import dataset_hash, load_record, read_manifest
from .simulator.mpm import BOUND

# calibrated on simulator ground truth
THRESHOLDS = {
    "cross_view_consistency": (">", 0.98),
    "temporal_flicker": (">", 0.99),
    "ballistic_adherence": ("<", 0.005),
    "subject_consistency": (">", 0.9),
}
METRICS = tuple(THRESHOLDS)


class EvalError(ValueError):
    pass


def mask_rows(masks: np.ndarray) -> np.ndarray:
    """Mean covered row per frame, NaN for empty frames; masks (..., T, h, w)."""
    m = np.asarray(masks) > 0
    rows = np.arange(m.shape[-2], dtype=np.float64)[:, None]
    area = m.sum(axis=(-2, -1))
    total = (m * rows).sum(axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(area > 0, total / np.maximum(area, 1), np.nan)


def cross_view_consistency(masks, return_skipped: bool = False):
    """mean_t exp(-max pairwise |row centroid difference| / height) over frames with all views covered."""
    m = np.asarray(masks)
    if m.ndim != 4:
        raise EvalError(f"expected (views, T, h, w) masks, got {m.shape}")
    rows = mask_rows(m)  # (V, T)
    ok = np.all(np.isfinite(rows), axis=0)
    if not ok.any():
        raise EvalError("every frame has an empty view")
    spread = np.nanmax(rows[:, ok], axis=0) - np.nanmin(rows[:, ok], axis=0)
    score = float(np.mean(np.exp(-spread / m.shape[-2])))
    return (score, int((~ok).sum())) if return_skipped else score


def temporal_flicker(frames, masks=None) -> float:
    """1 - mean |frame_{t+1} - frame_t| over background pixels, normalised by peak intensity."""
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim < 3 or f.shape[0] < 2:
        raise EvalError("temporal flicker needs at least two frames")
    peak = float(np.max(np.abs(f)))
    if peak == 0.0:
        return 1.0
    diff = np.abs(np.diff(f, axis=0)) / peak
    if masks is not None:
        m = np.asarray(masks) > 0
        fg = m[:-1] | m[1:]
        bg = ~fg
        if not bg.any():
            raise EvalError("no background pixels to compare")
        value = float(diff[bg].mean())
    else:
        value = float(diff.mean())
    return float(np.clip(1.0 - value, 0.0, 1.0))


def ballistic_curve(x0, attrs: PhysicsAttributes, times) -> np.ndarray:
    t = np.asarray(times, dtype=np.float64)[:, None]
    return np.asarray(x0) + np.asarray(attrs.velocity) * t + 0.5 * np.asarray(attrs.acceleration) * t * t


def ballistic_deviation(traj, attrs: PhysicsAttributes, contact_frame: int, frame_time: float) -> float:
    """Mean distance to the closed-form curve over frames before contact."""
    traj = np.asarray(traj, dtype=np.float64)
    n = min(int(contact_frame), traj.shape[0])
    if n < 2:
        raise EvalError("no free-flight frames before contact")
    expected = ballistic_curve(traj[0], attrs, np.arange(n) * frame_time)
    return float(np.mean(np.linalg.norm(traj[:n] - expected, axis=1)))


def ballistic_adherence(traj, attrs: PhysicsAttributes, contact_frame: int, frame_time: float) -> float:
    """Deviation normalised by the closed-form pre-contact path length."""
    traj = np.asarray(traj, dtype=np.float64)
    n = min(int(contact_frame), traj.shape[0])
    if n < 2:
        raise EvalError("no free-flight frames before contact")
    expected = ballistic_curve(traj[0], attrs, np.arange(n) * frame_time)
    travel = float(np.sum(np.linalg.norm(np.diff(expected, axis=0), axis=1)))
    dev = ballistic_deviation(traj, attrs, n, frame_time)
    if travel == 0.0:
        if dev == 0.0:
            return 0.0
        raise EvalError("closed-form trajectory does not move; adherence undefined")
    return dev / travel


def subject_consistency(masks) -> float:
    """Mean over consecutive non-empty frames of min(A_t, A_t+1) / max(A_t, A_t+1)."""
    area = (np.asarray(masks) > 0).sum(axis=(-2, -1)).astype(np.float64)
    a, b = area[:-1], area[1:]
    ok = (a > 0) & (b > 0)
    if not ok.any():
        raise EvalError("no pair of consecutive non-empty masks")
    return float(np.mean(np.minimum(a[ok], b[ok]) / np.maximum(a[ok], b[ok])))


def centroid_from_masks(masks, cams: list[CameraView]) -> np.ndarray:
    """World centroid per frame by least squares over the views' silhouette centres.

    Each orthographic view pins the two world coordinates spanning its image
    plane; together the four views determine all three. NaN where fewer than
    two views see the object.
    """
    m = np.asarray(masks) > 0
    V, T, h, w = m.shape
    out = np.full((T, 3), np.nan)
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    for t in range(T):
        A, y = [], []
        for k, cam in enumerate(cams):
            area = m[k, t].sum()
            if area == 0:
                continue
            u = (uu * m[k, t]).sum() / area
            v = (vv * m[k, t]).sum() / area
            xc = (u - cam.K[0, 2]) / cam.ortho_scale
            yc = (v - cam.K[1, 2]) / cam.ortho_scale
            A += [cam.R[0], cam.R[1]]
            y += [xc - cam.t[0], yc - cam.t[1]]
        if len(A) >= 4:
            sol, *_ = np.linalg.lstsq(np.array(A), np.array(y), rcond=None)
            out[t] = sol
    return out


def floor_contact_frame(masks, cam: CameraView, grid: int = 32, margin: float = 1.0) -> int:
    """First frame whose silhouette reaches the floor line of a vertical view (T if never)."""
    floor_y = BOUND / grid
    v_floor = cam.K[1, 2] + cam.ortho_scale * (cam.world_to_camera(np.array([[0.5, floor_y, 0.5]]))[0, 1])
    m = np.asarray(masks) > 0
    for t in range(m.shape[0]):
        rows = np.nonzero(m[t].any(axis=1))[0]
        if rows.size and rows.max() >= v_floor - margin:
            return t
    return m.shape[0]


def score_record(record) -> dict:
    frame_time = record.spec.frame_stride() * record.spec.step_dt()
    return {
        "cross_view_consistency": cross_view_consistency(record.masks),
        "temporal_flicker": temporal_flicker(record.full, record.masks[0]),
        "ballistic_adherence": ballistic_adherence(record.centroid, record.attrs, record.contact_frame, frame_time),
        "subject_consistency": float(np.mean([subject_consistency(m) for m in record.masks])),
    }


def score_sample(directory) -> dict:
    """Metrics for a ``sample`` output directory (decoded frames, thresholded masks)."""
    d = Path(directory)
    try:
        masks = io.load_pmv(d / "masks.pmv") > 0.5
        meta = io.read_kv(d / "meta.txt")
        attrs = PhysicsAttributes.load(d / "attrs.txt")
        cams = [CameraView.load(d / f"camera_{k}.txt") for k in range(4)]
        T = masks.shape[1]
        frames = np.stack([io.load_pgm(d / "view0" / f"frame_{t:03d}.pgm") for t in range(T)])
    except (OSError, KeyError, ValueError) as exc:
        raise io.FormatError(f"malformed sample {d}: {exc}") from exc
    traj = centroid_from_masks(masks, cams)
    contact = floor_contact_frame(masks[0], cams[0])
    good = np.all(np.isfinite(traj), axis=1)
    contact = min(contact, int(np.argmin(good)) if not good.all() else T)
    return {
        "cross_view_consistency": cross_view_consistency(masks),
        "temporal_flicker": temporal_flicker(frames, masks[0]),
        "ballistic_adherence": ballistic_adherence(traj, attrs, contact, float(meta["frame_time"])),
        "subject_consistency": float(np.mean([subject_consistency(m) for m in masks])),
    }


def _sample_hash(d: Path) -> str:
    import hashlib

    h = hashlib.sha256()
    for f in sorted(p for p in d.rglob("*") if p.is_file() and p.name != "report.jsonl"):
        h.update(str(f.relative_to(d)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def evaluate(directory, out=None, config: dict | None = None) -> list[dict]:
    """Score a dataset or a sample directory; writes JSON lines (scenes, then aggregate)."""
    d = Path(directory)
    if not d.is_dir():
        raise EvalError(f"{d} is not a directory")
    if (d / "manifest.txt").is_file():
        scenes = [(p.name, score_record(load_record(p))) for p in read_manifest(d)]
        digest = dataset_hash(d)
    elif (d / "masks.pmv").is_file():
        scenes = [(d.name, score_sample(d))]
        digest = _sample_hash(d)
    else:
        raise EvalError(f"{d}: neither a dataset (manifest.txt) nor a sample (masks.pmv)")
    lines = []
    for name, scores in scenes:
        if not all(np.isfinite(v) for v in scores.values()):
            raise EvalError(f"{name}: non-finite score {scores}")
        lines.append({"scene": name, **scores})
    agg = {k: float(np.mean([s[k] for _, s in scenes])) for k in METRICS}
    lines.append({"scene": "aggregate", **agg, "count": len(scenes), "dataset_hash": digest, "config": config or {}})
    if out is not None:
        text = "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)
        Path(out).write_text(text, encoding="utf-8")
    return lines


def passes_thresholds(aggregate: dict) -> dict[str, bool]:
    out = {}
    for k, (op, thr) in THRESHOLDS.items():
        out[k] = aggregate[k] > thr if op == ">" else aggregate[k] < thr
    return out
