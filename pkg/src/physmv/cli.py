"""Command-line entry point: gen-data, train, sample, eval, gradcheck, render."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .conditioning import PhysicsAttributes
from .geometry import orthogonal_views
from .model import (
    Conditions,
    DenoiserConfig,
    Phys4View,
    load_model,
    prepare_videosyn,
    sample_phys4view,
    save_model,
    scene_conditions,
    train_phys4view,
    videosyn_train,
)
from .simulator.dataset import (
    DEFAULTS,
    shape_size,
    load_dataset,
    load_record,
    make_dataset,
    render_trajectory,
    temporal_densify,
)
from .simulator.mpm import SceneSpec, init_scene, simulate
from .simulator.render import render_view

MASK_THRESHOLD = 0.2
SHAPE_WORDS = {"ball": "sphere", "sphere": "sphere", "box": "box", "cube": "box", "block": "box", "cluster": "composite"}


def _root(args, sub: str) -> Path:
    return io.default_root() / sub


def cmd_gen_data(args) -> int:
    out = Path(args.out) if args.out else _root(args, "data")
    paths = make_dataset(args.config, out, seed=args.seed, precision=args.precision)
    print(f"wrote {len(paths)} records to {out}")
    return 0


def _train_config(args) -> DenoiserConfig:
    kv = io.read_kv(args.config) if args.config else {}
    kv["seed"] = str(args.seed)
    return DenoiserConfig.from_kv(kv)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    records = load_dataset(args.data)
    out = Path(args.out) if args.out else _root(args, f"ckpt_{args.stage}")

    def log(step, loss):
        if args.verbose and step % 50 == 0:
            val = loss.total.item() if hasattr(loss, "total") else loss.item()
            print(f"step {step} total {val:.6f}", file=sys.stderr)

    if args.stage == "phys4view":
        model, trace = train_phys4view(records, cfg, log)
    else:
        model, trace = videosyn_train(prepare_videosyn(records, cfg), cfg, log)
    save_model(out, model, args.stage, trace, precision=args.precision)
    print(f"trained {args.stage} for {cfg.steps} steps; checkpoint at {out}")
    return 0


def shape_from_prompt(prompt: str) -> str:
    for word in prompt.lower().split():
        if word in SHAPE_WORDS:
            return SHAPE_WORDS[word]
    return "sphere"


def first_frame_conditions(attrs: PhysicsAttributes, prompt: str, cfg: DenoiserConfig, shape: str | None = None,
                           frames: int = 16, image_size: int = 64, seed: int = 0):
    """Condition a sample on the first frame of a freshly initialised scene (no stepping)."""
    shape = shape or shape_from_prompt(prompt)
    spec = SceneSpec(
        shape=shape,
        size=shape_size(shape, float(DEFAULTS["radius"])),
        center=(0.5, float(DEFAULTS["height"]), 0.5),
        attrs=attrs,
        frames=frames,
        seed=seed,
        image_size=image_size,
    )
    cams = orthogonal_views(image_size, image_size)
    state = init_scene(spec)
    rendered = [render_view(state, cam) for cam in cams]
    frames0 = np.stack([r[0] for r in rendered])
    masks0 = np.stack([r[1] for r in rendered])
    hf, hm, ph, pr = scene_conditions(frames0, masks0, attrs, prompt, frames, cfg)
    cond = Conditions(hf[None], hm[None], ph[None], pr[None], np.ones((1, pr.shape[0]), dtype=bool),
                      [c.scaled(cfg.patch) for c in cams])
    return cond, spec, cams


def write_sample(out: Path, frames: np.ndarray, latent: np.ndarray, attrs, prompt: str, cams, spec: SceneSpec,
                 seed: int, precision: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for k in range(frames.shape[0]):
        vdir = out / f"view{k}"
        vdir.mkdir(exist_ok=True)
        for t in range(frames.shape[1]):
            io.save_pgm(vdir / f"frame_{t:03d}.pgm", frames[k, t])
        cams[k].save(out / f"camera_{k}.txt")
    io.save_pmv(out / "masks.pmv", (frames > MASK_THRESHOLD).astype(np.float64), precision)
    io.save_pmv(out / "latent.pmv", latent, precision)
    attrs.save(out / "attrs.txt")
    (out / "prompt.txt").write_text(prompt + "\n", encoding="utf-8")
    io.write_kv(out / "meta.txt", {
        "seed": seed,
        "frame_time": spec.frame_stride() * spec.step_dt(),
        "mask_threshold": MASK_THRESHOLD,
        "shape": spec.shape,
    })


def cmd_sample(args) -> int:
    model = load_model(args.ckpt)
    if not isinstance(model, Phys4View):
        raise ValueError("sample needs a phys4view checkpoint")
    attrs = PhysicsAttributes.load(args.attrs)
    cond, spec, cams = first_frame_conditions(attrs, args.prompt, model.config, args.shape, args.frames, seed=args.seed)
    latent, frames = sample_phys4view(model, cond, seed=args.seed)
    out = Path(args.out) if args.out else _root(args, "sample")
    write_sample(out, frames[0], latent[0], attrs, args.prompt, cams, spec, args.seed, args.precision)
    print(f"wrote sample to {out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    data = Path(args.data)
    out = Path(args.out) if args.out else data / "report.jsonl"
    lines = evaluate(data, out, config={"data": data.name, "precision": args.precision, "seed": args.seed})
    print(json.dumps(lines[-1], sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_checks

    results = run_checks(args.seeds, args.seed)
    ok = True
    for name, err in results.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name} max_rel_err={err:.3e}")
    return 0 if ok else 1


def cmd_render(args) -> int:
    rec = load_record(args.record)
    out = Path(args.out)
    views = [args.view] if args.view is not None else range(4)
    if args.densify:
        for k in views:
            frames = temporal_densify(rec.frames[k], args.densify, spec=rec.spec, view=k)
            _write_frames(out / f"view{k}", frames)
    else:
        frames, _, _ = render_trajectory(simulate(rec.spec), orthogonal_views(rec.spec.image_size, rec.spec.image_size))
        for k in views:
            _write_frames(out / f"view{k}", frames[k])
    print(f"rendered {len(list(views))} view(s) to {out}")
    return 0


def _write_frames(directory: Path, frames: np.ndarray) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        io.save_pgm(directory / f"frame_{t:03d}.pgm", f)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="physmv", description="Physics-conditioned four-view video toolkit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32", help="storage precision of written tensors")
    p.add_argument("--threads", type=int, default=1, help="worker threads for the simulator kernels")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate and render a dataset")
    g.add_argument("--config", help="key=value dataset config")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser")
    t.add_argument("--stage", choices=("phys4view", "videosyn"), default="phys4view")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="ancestral sampling from a phys4view checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--attrs", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--shape", choices=("sphere", "box", "composite"))
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a dataset or sample directory")
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every block")
    c.add_argument("--seeds", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("render", help="re-simulate a record and write PGM frames")
    r.add_argument("--record", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--view", type=int, choices=range(4))
    r.add_argument("--densify", type=int, default=0, help="in-between frames per recorded pair")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    import numba

    numba.config.THREADING_LAYER = "workqueue"  # always available, no TBB version check
    numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
