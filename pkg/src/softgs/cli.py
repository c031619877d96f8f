"""Command-line surface: fitting runs, rendering, evaluation, oracle studies,
and camera-rotation sweeps.

Every run directory gets delimited output (CSV) plus matplotlib figures
rendered to PNG next to it. A flat key=value config file can prefill any
`fit` flag; explicit flags win. Exit codes: 0 success, 1 usage error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import oracle, plyio  # noqa: E402
from .optimizer import (DENSIFY_PRESETS, MODES, LearningRates,  # noqa: E402
                        OptimizerConfig, fit)
from .patterns import PATTERN_NAMES, make_pattern, psnr, ssim  # noqa: E402
from .rasterizer import RenderOptions, render  # noqa: E402
from .scene import Camera, initialize_synthetic  # noqa: E402


class UsageError(ValueError):
    """Bad arguments or config contents."""


def save_png(path, img):
    from PIL import Image

    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def load_png(path):
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_config(path) -> dict:
    """Flat key = value file; '#' starts a comment; keys match fit flags."""
    out = {}
    try:
        with open(path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{ln}: expected key = value")
                key, val = (part.strip() for part in line.split("=", 1))
                out[key.replace("-", "_")] = val
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return out


def synthetic_camera(resolution: int) -> Camera:
    return Camera.facing_z(resolution=resolution)


def _build_fit_config(args) -> OptimizerConfig:
    file_vals = read_config(args.config) if args.config else {}

    def pick(name, cast, default):
        flag = getattr(args, name, None)
        if flag is not None:
            return flag
        if name in file_vals:
            try:
                return cast(file_vals[name])
            except ValueError as exc:
                raise UsageError(f"config key {name}: {exc}") from exc
        return default

    pattern = pick("pattern", str, "circle4")
    if pattern not in PATTERN_NAMES:
        raise UsageError(f"unknown pattern {pattern!r}")
    mode = pick("mode", str, "softmax-gs")
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}")
    preset = pick("densify_preset", str, "default")
    if preset not in DENSIFY_PRESETS:
        raise UsageError(f"unknown densify preset {preset!r}")
    lrs = LearningRates.real_scene() if pick("lr_preset", str, "synthetic") == "real" \
        else LearningRates.synthetic()
    config = OptimizerConfig(
        steps=pick("steps", int, 10000),
        mode=mode,
        max_gaussians=pick("max_gaussians", int, 4),
        densify_grad_threshold=pick("densify_grad_threshold", float,
                                    DENSIFY_PRESETS[preset]),
        seed=pick("seed", int, 0),
        ssim_weight=pick("ssim_weight", float, 0.2),
        lambda_var=pick("lambda_var", float, 0.01),
        checkpoint_interval=pick("checkpoint_interval", int, 0),
        lrs=lrs,
    )
    return config, pattern, pick("resolution", int, 256)


def cmd_fit(args) -> int:
    config, pattern, resolution = _build_fit_config(args)
    target = make_pattern(pattern, resolution)
    camera = synthetic_camera(resolution)
    cloud = initialize_synthetic({"pattern": pattern, "mode": config.mode,
                                  "cap": config.max_gaussians})
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    cloud, trace = fit(cloud, [(camera, target)], config, out_dir=out_dir)
    plyio.save_ply(os.path.join(out_dir, "checkpoint.ply"), cloud)
    final = render(cloud, camera, config.render_options())
    save_png(os.path.join(out_dir, "render.png"), final.color)
    save_png(os.path.join(out_dir, "target.png"), target)
    _training_figure(trace, os.path.join(out_dir, "training_curves.png"))
    last = trace[-1]
    print(f"fit finished: pattern={pattern} mode={config.mode} "
          f"gaussians={last['n_gaussians']} psnr={last['psnr']:.2f}")
    return 0


def _training_figure(trace, path):
    steps = [row["step"] for row in trace]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, [row["loss"] for row in trace])
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax2.plot(steps, [row["psnr"] for row in trace])
    ax2.set_xlabel("step")
    ax2.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _load_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return plyio.load_ply(path)


def _render_options(args) -> RenderOptions:
    return RenderOptions(background=(args.background,) * 3,
                         competition=args.mode in ("softmax-gs", "softmax-only"))


def cmd_render(args) -> int:
    cloud = _load_checkpoint(args.checkpoint)
    camera = synthetic_camera(args.resolution)
    if args.rotate_y:
        camera = camera.rotated_y(np.deg2rad(args.rotate_y))
    out = render(cloud, camera, _render_options(args))
    save_png(args.out, out.color)
    if args.depth:
        depth = out.depth
        span = depth.max() - depth.min()
        normed = (depth - depth.min()) / span if span > 0 else np.zeros_like(depth)
        root, ext = os.path.splitext(args.out)
        save_png(root + "_depth" + ext, np.repeat(normed[..., None], 3, axis=2))
    print(f"rendered {args.checkpoint} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cloud = _load_checkpoint(args.checkpoint)
    target = make_pattern(args.pattern, args.resolution)
    camera = synthetic_camera(args.resolution)
    out = render(cloud, camera, _render_options(args))
    p = psnr(out.color, target)
    s = ssim(out.color, target)
    print(f"psnr={p:.4f} ssim={s:.6f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pattern", "psnr", "ssim"])
            writer.writerow([args.pattern, p, s])
    return 0


def cmd_oracle(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    if args.study == "decay":
        study = oracle.decay_study(beta=args.beta)
        path = os.path.join(args.out_dir, "decay.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["separation", "a_ring", "interpolant", "residual"])
            for row in zip(study["separation"], study["a_ring"],
                           study["interpolant"], study["residual"]):
                writer.writerow([f"{v:.10g}" for v in row])
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.plot(study["separation"], study["a_ring"], label="integrated mass")
        ax.plot(study["separation"], study["interpolant"], "--",
                label=f"exp fit (rate {study['gamma']:.2f})")
        ax.set_xlabel("profile separation")
        ax.set_ylabel("softmax-weighted mass")
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(args.out_dir, "decay.png"), dpi=120)
        plt.close(fig)
        print(f"decay study written to {path} (fit rate {study['gamma']:.3f})")
        return 0
    # ray-exact study: sequential recurrence vs exact integration across beta
    seps = np.linspace(0.0, 6.0, 13)
    betas = (1.0, 4.0, 16.0)
    rows = []
    for beta in betas:
        gamma = oracle.decay_study(beta=beta, n_points=13)["gamma"]
        for sep in seps:
            profiles = oracle.two_profile_scene(sep)
            exact = oracle.integrate_ray_exact(profiles, beta)
            approx = oracle.composite_profiles(profiles, beta, gamma)
            rows.append({"beta": beta, "separation": sep,
                         "error": float(np.max(np.abs(exact - approx)))})
    path = os.path.join(args.out_dir, "ray_exact.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["beta", "separation", "error"])
        writer.writeheader()
        writer.writerows(rows)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for beta in betas:
        pts = [(r["separation"], r["error"]) for r in rows if r["beta"] == beta]
        ax.plot(*zip(*pts), label=f"competition strength {beta:g}")
    ax.set_xlabel("profile separation")
    ax.set_ylabel("max color error vs exact")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(args.out_dir, "ray_exact.png"), dpi=120)
    plt.close(fig)
    print(f"ray-exact study written to {path}")
    return 0


def cmd_rotate(args) -> int:
    cloud = _load_checkpoint(args.checkpoint)
    os.makedirs(args.out_dir, exist_ok=True)
    camera = synthetic_camera(args.resolution)
    angles = (np.linspace(-args.degrees, args.degrees, args.frames)
              if args.frames > 1 else np.array([0.0]))
    opts = _render_options(args)
    frames = []
    for i, deg in enumerate(angles):
        out = render(cloud, camera.rotated_y(np.deg2rad(deg)), opts)
        frames.append(out.color)
        if args.save_frames:
            save_png(os.path.join(args.out_dir, f"frame_{i:03d}.png"), out.color)
    deltas = [float(np.max(np.abs(frames[i + 1] - frames[i])))
              for i in range(len(frames) - 1)]
    path = os.path.join(args.out_dir, "rotation_deltas.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "angle_deg", "delta_to_next"])
        for i, d in enumerate(deltas):
            writer.writerow([i, f"{angles[i]:.6f}", f"{d:.10g}"])
    max_delta = max(deltas) if deltas else 0.0
    med_delta = float(np.median(deltas)) if deltas else 0.0
    if deltas:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(angles[:-1], deltas, marker="o", ms=3)
        ax.set_xlabel("camera yaw (deg)")
        ax.set_ylabel("max pixel delta to next frame")
        fig.tight_layout()
        fig.savefig(os.path.join(args.out_dir, "rotation_deltas.png"), dpi=120)
        plt.close(fig)
    print(f"max inter-frame delta {max_delta:.6g} (median {med_delta:.6g}) "
          f"over {len(frames)} frames")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softgs",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="optimize a cloud against a synthetic pattern")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--pattern", choices=PATTERN_NAMES)
    p.add_argument("--max-gaussians", type=int, dest="max_gaussians")
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--densify-preset", choices=sorted(DENSIFY_PRESETS),
                   dest="densify_preset")
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--depth", action="store_true",
                   help="also write a normalized grayscale depth map")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--rotate-y", type=float, default=0.0, dest="rotate_y")
    p.add_argument("--mode", choices=MODES, default="softmax-gs")
    p.add_argument("--background", type=float, default=1.0)
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint against a pattern")
    p.add_argument("checkpoint")
    p.add_argument("--pattern", choices=PATTERN_NAMES, required=True)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--mode", choices=MODES, default="softmax-gs")
    p.add_argument("--background", type=float, default=1.0)
    p.add_argument("--csv")
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="emit numerical-reference study CSVs")
    p.add_argument("--study", choices=("decay", "ray-exact"), required=True)
    p.add_argument("--beta", type=float, default=4.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("rotate", help="small camera-rotation sweep, report deltas")
    p.add_argument("checkpoint")
    p.add_argument("--degrees", type=float, default=2.0)
    p.add_argument("--frames", type=int, default=21)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--mode", choices=MODES, default="softmax-gs")
    p.add_argument("--background", type=float, default=1.0)
    p.add_argument("--save-frames", action="store_true", dest="save_frames")
    p.add_argument("--threads", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_rotate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses code 2 for usage problems; this CLI reports 1
        return 0 if not exc.code else 1
    threads = getattr(args, "threads", 0)
    if threads:
        import numba

        numba.set_num_threads(threads)
    try:
        return args.func(args)
    except (UsageError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
