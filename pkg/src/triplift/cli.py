"""Command line entry point: gen-views, lift, compose, eval, interp.

Settings are resolved as built-in defaults, then the TOML ``--config`` file
(one table per subcommand, plus ``[generator]``), then explicit flags.
Exit codes: 0 success, 1 configuration or input error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import composer, evaluate, files, oracle, plotting
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import intrinsics_from_json, load_dataset
from .generator import ConfigError, GeneratorConfig, TriPlaneField, TriPlaneGenerator
from .geometry import GeometryError, ViewSchedule, format_calibration, orbit_pose, read_calibration
from .lifting import LiftConfig, LiftingError, fit, write_history
from .render import RaySampleSpec, RenderError, render_image

log = logging.getLogger("triplift")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
STREAM_COMPOSE = 0xC0
STREAM_BASELINE = 0xBA
CHECKPOINT_NAME = "checkpoint.tpck"

DEFAULTS = {
    "gen-views": {"objects": 4, "views": 20, "size": 64, "radius": 4.0, "pose_noise_deg": 0.0,
                  "azimuth_min": 0.0, "azimuth_max": 360.0, "elevation_min": 0.0, "elevation_max": 20.0},
    "lift": {"data": None, "resume": None},
    "compose": {"checkpoint": None, "backgrounds": None, "synthetic": 0, "objects_per_frame": 3,
                "feather_sigma": 1.0, "shadow_strength": 0.4, "samples_per_ray": 48, "latent_mixing": False,
                "width": 320, "height": 96},
    "eval": {"checkpoint": None, "data": None, "pairs": 100, "offset_deg": 5.0, "samples_per_ray": 64,
             "recolor_strength": 0.25},
    "interp": {"checkpoint": None, "a": 0, "b": 1, "frames": 8, "azimuth": 30.0, "elevation": 10.0,
               "radius": 4.0, "size": 64, "samples_per_ray": 64},
}


class UsageError(Exception):
    pass


def _load_toml(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None


def _settings(section: str, file_cfg: dict, args, defaults: dict) -> dict:
    table = file_cfg.get(section, {})
    unknown = set(table) - set(defaults)
    if unknown:
        raise UsageError(f"[{section}] unknown keys: {sorted(unknown)}")
    out = {**defaults, **table}
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n")


def _require(value, what):
    if value is None:
        raise UsageError(f"missing required setting: {what}")
    return value


def _load_model(path):
    path = Path(_require(path, "checkpoint"))
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    if ckpt.latents is None:
        raise UsageError(f"checkpoint {path} has no latent table")
    return ckpt


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_views(args, file_cfg) -> dict:
    s = _settings("gen-views", file_cfg, args, DEFAULTS["gen-views"])
    schedule = ViewSchedule((s["azimuth_min"], s["azimuth_max"]), (s["elevation_min"], s["elevation_max"]),
                            s["radius"], int(s["views"]))
    dirs = oracle.gen_dataset(args.out, int(s["objects"]), schedule, args.seed,
                              oracle.default_camera(int(s["size"])), float(s["pose_noise_deg"]))
    return {"objects": [d.name for d in dirs], "views_per_object": int(s["views"]), "settings": s}


def cmd_lift(args, file_cfg) -> dict:
    lift_keys = LiftConfig().to_dict()
    s = _settings("lift", file_cfg, args, {**DEFAULTS["lift"], **lift_keys})
    table = {k: v for k, v in file_cfg.get("lift", {}).items() if k in lift_keys}
    overrides = {k: getattr(args, k) for k in lift_keys if getattr(args, k, None) is not None}
    records = load_dataset(_require(s["data"], "lift.data (--data)"))
    out = Path(args.out)

    if s["resume"]:
        ckpt = _load_model(s["resume"])
        config = LiftConfig.from_dict({**ckpt.lift_config, **table, **overrides, "seed": ckpt.lift_config.get("seed", args.seed)})
        gen = ckpt.generator
        if [r.object_id for r in records] != ckpt.object_ids:
            raise UsageError("dataset objects do not match the checkpoint's latent table")
        latents, state, history = ckpt.latents, ckpt.state, ckpt.history
    else:
        config = LiftConfig.from_dict({**table, **overrides, "seed": args.seed})
        gcfg = {**file_cfg.get("generator", {}), "seed": args.seed}
        gen = TriPlaneGenerator(GeneratorConfig.from_dict(gcfg))
        latents = state = history = None

    def progress(step, row):
        if (step + 1) % 100 == 0:
            log.info("step %d/%d loss %.5f", step + 1, config.iterations, row[-1])

    result = fit(records, gen, config, latents, state, history, callback=progress)
    save_checkpoint(out / CHECKPOINT_NAME, Checkpoint(gen, result.latents, result.object_ids, result.state,
                                                      result.history, config.to_dict()))
    write_history(out / "loss.csv", result.history)
    if result.history:
        plotting.plot_loss_curve(result.history, out / "loss.png")
    final = result.history[-1][-1] if result.history else None
    return {"iterations": config.iterations, "steps_run": len(result.history), "final_loss": final,
            "objects": result.object_ids, "config": config.to_dict()}


def _backgrounds(s, out: Path, seed: int):
    if s["synthetic"]:
        bdir = out / "backgrounds"
        bdir.mkdir(parents=True, exist_ok=True)
        calib = composer.street_calibration(int(s["width"]), int(s["height"]))
        for i in range(int(s["synthetic"])):
            img, road = composer.make_background(calib, seed=seed * 1000003 + i)
            files.write_rgb(bdir / f"{i:06d}.png", img)
            files.write_mask(bdir / f"{i:06d}_drivable.png", road)
            (bdir / f"{i:06d}.txt").write_text(format_calibration(calib))
        return bdir
    bdir = Path(_require(s["backgrounds"], "compose.backgrounds (--backgrounds)"))
    if not bdir.is_dir():
        raise UsageError(f"background directory not found: {bdir}")
    return bdir


def cmd_compose(args, file_cfg) -> dict:
    s = _settings("compose", file_cfg, args, DEFAULTS["compose"])
    out = Path(args.out)
    n_obj = int(s["objects_per_frame"])
    if n_obj < 0:
        raise UsageError("objects_per_frame must be >= 0")
    bdir = _backgrounds(s, out, args.seed)
    model = None
    if n_obj > 0:
        ckpt = _load_model(s["checkpoint"])
        model = composer.LiftedModel(ckpt.generator, ckpt.latents, ckpt.object_ids)
    cfg = composer.ComposeConfig(feather_sigma=float(s["feather_sigma"]), shadow_strength=float(s["shadow_strength"]),
                                 samples_per_ray=int(s["samples_per_ray"]), latent_mixing=bool(s["latent_mixing"]))
    img_dir, lab_dir, prev_dir = out / "image_2", out / "label_2", out / "preview"
    for d in (img_dir, lab_dir, prev_dir):
        d.mkdir(parents=True, exist_ok=True)

    stems = sorted(p.stem for p in bdir.glob("*.png") if not p.stem.endswith("_drivable"))
    frames, skipped, placed, attempts = [], [], 0, 0
    rejected = {"offscreen": 0, "drivable": 0, "overlap": 0}
    for idx, stem in enumerate(stems):
        calib_path = bdir / f"{stem}.txt"
        if not calib_path.exists():
            log.warning("skipping %s: no calibration file", stem)
            skipped.append(stem)
            continue
        calib = read_calibration(calib_path)
        src = bdir / f"{stem}.png"
        if n_obj == 0:
            shutil.copyfile(src, img_dir / f"{stem}.png")
            (lab_dir / f"{stem}.txt").write_text("")
            frames.append({"frame": stem, "placed": 0})
            continue
        background = files.read_rgb(src)
        ground_y = calib.pose.translation[1] + calib.cam_height_m
        dmap = None
        seg_path = bdir / f"{stem}_drivable.png"
        if seg_path.exists():
            dmap = composer.ipm_drivable_map(files.read_mask(seg_path), calib.cam, calib.pose, ground_y)
        rng = np.random.default_rng([args.seed, STREAM_COMPOSE, idx])
        scene = composer.compose_frame(background, calib, model, n_obj, dmap=dmap, config=cfg, rng=rng)
        files.write_rgb(img_dir / f"{stem}.png", scene.image)
        (lab_dir / f"{stem}.txt").write_text(composer.format_labels(scene.labels))
        plotting.plot_composite(scene.image, scene.labels, prev_dir / f"{stem}.png")
        placed += len(scene.objects)
        attempts += scene.attempts
        for k, v in scene.rejected.items():
            rejected[k] += v
        frames.append({"frame": stem, "placed": len(scene.objects), "attempts": scene.attempts})
    return {"frames": len(frames), "skipped": skipped, "skipped_count": len(skipped), "placed": placed,
            "attempts": attempts, "rejected": rejected, "per_frame": frames}


def cmd_eval(args, file_cfg) -> dict:
    s = _settings("eval", file_cfg, args, DEFAULTS["eval"])
    root = Path(_require(s["data"], "eval.data (--data)"))
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists()) if root.is_dir() else []
    if not dirs:
        raise UsageError(f"no oracle objects under {root}")
    manifests = [json.loads((d / "manifest.json").read_text()) for d in dirs]
    poses = json.loads((dirs[0] / "poses.json").read_text())
    cam = intrinsics_from_json(poses["intrinsics"])
    scenes = [oracle.scene_from_manifest(m) for m in manifests]
    spec = evaluate.ViewPairSpec(float(s["offset_deg"]), int(s["pairs"]), args.seed, radius=manifests[0]["radius"])
    K = len(scenes)

    def oracle_view(pose, key):
        v = oracle.render_oracle(scenes[key[0] % K], cam, pose)
        return v.rgb, v.depth

    sources = [("oracle", oracle_view)]
    if s["checkpoint"] is not None:
        ckpt = _load_model(s["checkpoint"])
        gen = ckpt.generator
        with torch.no_grad():
            lat = torch.stack([ckpt.latent(m["object_id"]) for m in manifests])
            w = gen.map(lat.to(gen.dtype))
            field = TriPlaneField(gen.synthesize(w), gen)
        rspec = RaySampleSpec(int(s["samples_per_ray"]))

        def lifted_view(pose, key):
            r = render_image(field, w, cam, pose, None, rspec, index=key[0] % K)
            return r.rgb, r.depth

        def baseline_view(pose, key):
            rgb, depth = lifted_view(pose, key)
            rng = np.random.default_rng([args.seed, STREAM_BASELINE, key[0], int(key[1] == "b")])
            return evaluate.recolor(rgb, rng, float(s["recolor_strength"])), depth

        sources += [("lifted", lifted_view), ("baseline", baseline_view)]

    out = Path(args.out)
    reports = []
    for name, fn in sources:
        rep = evaluate.consistency_report(name, fn, spec, cam)
        rep.write_csv(out / f"eval_{name}.csv")
        log.info("%s: mean reprojection error %.5f over %d pairs", name, rep.mean, rep.count)
        reports.append(rep)
    plotting.plot_reprojection(reports, out / "eval_re.png")
    return {"reports": {r.name: r.summary() for r in reports}, "pairs": spec.count, "offset_deg": spec.offset_deg}


def interp_latents(z1: torch.Tensor, z2: torch.Tensor, frames: int):
    """``frames`` latents along ``(1 - a) z1 + a z2``; endpoints are ``z1`` and ``z2`` themselves."""
    if frames < 2:
        raise UsageError("interp needs at least 2 frames")
    out = []
    for k in range(frames):
        a = k / (frames - 1)
        out.append(z1.clone() if k == 0 else z2.clone() if k == frames - 1 else (1 - a) * z1 + a * z2)
    return out


def render_latent(gen, z, cam, pose, spec):
    with torch.no_grad():
        w = gen.map(z.reshape(1, -1).to(gen.dtype))
        field = TriPlaneField(gen.synthesize(w), gen)
    return render_image(field, w, cam, pose, None, spec)


def cmd_interp(args, file_cfg) -> dict:
    s = _settings("interp", file_cfg, args, DEFAULTS["interp"])
    ckpt = _load_model(s["checkpoint"])

    def pick(key):
        try:
            return ckpt.latent(int(key))
        except (ValueError, TypeError):
            if key not in ckpt.object_ids:
                raise UsageError(f"unknown object {key!r}") from None
            return ckpt.latent(key)
        except IndexError:
            raise UsageError(f"object index {key} out of range") from None

    z1, z2 = pick(s["a"]), pick(s["b"])
    cam = oracle.default_camera(int(s["size"]))
    pose = orbit_pose(float(s["azimuth"]), float(s["elevation"]), float(s["radius"]))
    spec = RaySampleSpec(int(s["samples_per_ray"]))
    strip = [render_latent(ckpt.generator, z, cam, pose, spec).rgb for z in interp_latents(z1, z2, int(s["frames"]))]
    out = Path(args.out)
    files.write_rgb(out / "interp.png", np.concatenate(strip, axis=1))
    for k, img in enumerate(strip):
        files.write_rgb(out / f"interp_{k:02d}.png", img)
    return {"frames": len(strip), "a": str(s["a"]), "b": str(s["b"])}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML file with one table per subcommand")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="torch intra-op threads")
    p.add_argument("--quiet", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="triplift", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-views", parents=[common], help="render an oracle multi-view dataset")
    g.add_argument("--objects", type=int)
    g.add_argument("--views", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--radius", type=float)
    g.add_argument("--pose-noise-deg", dest="pose_noise_deg", type=float)

    lf = sub.add_parser("lift", parents=[common], help="fit the shared field and per-object latents")
    lf.add_argument("--data")
    lf.add_argument("--resume", help="checkpoint file or directory to continue from")
    lf.add_argument("--iters", dest="iterations", type=int)
    lf.add_argument("--rays", dest="rays_per_step", type=int)
    lf.add_argument("--samples", dest="samples_per_ray", type=int)
    lf.add_argument("--lr-params", dest="lr_params", type=float)
    lf.add_argument("--lr-latents", dest="lr_latents", type=float)
    lf.add_argument("--lambda-iou", dest="lambda_iou", type=float)
    lf.add_argument("--lambda-perc", dest="lambda_perc", type=float)

    c = sub.add_parser("compose", parents=[common], help="insert lifted objects into street frames")
    c.add_argument("--checkpoint")
    c.add_argument("--backgrounds", help="directory of <stem>.png + <stem>.txt (+ <stem>_drivable.png)")
    c.add_argument("--synthetic", type=int, help="generate this many synthetic backgrounds instead")
    c.add_argument("--objects-per-frame", dest="objects_per_frame", type=int)

    e = sub.add_parser("eval", parents=[common], help="multi-view consistency report")
    e.add_argument("--data", help="oracle dataset written by gen-views")
    e.add_argument("--checkpoint")
    e.add_argument("--pairs", type=int)
    e.add_argument("--offset-deg", dest="offset_deg", type=float)

    i = sub.add_parser("interp", parents=[common], help="render a latent interpolation strip")
    i.add_argument("--checkpoint")
    i.add_argument("--a", help="first object (index or id)")
    i.add_argument("--b", help="second object (index or id)")
    i.add_argument("--frames", type=int)
    i.add_argument("--azimuth", type=float)
    i.add_argument("--elevation", type=float)
    return ap


COMMANDS = {"gen-views": cmd_gen_views, "lift": cmd_lift, "compose": cmd_compose, "eval": cmd_eval, "interp": cmd_interp}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(max(1, args.workers))
    try:
        file_cfg = _load_toml(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](args, file_cfg)
    except (UsageError, ConfigError, GeometryError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"triplift {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LiftingError as e:
        print(f"triplift {args.command}: numeric failure at step {e.step} (object {e.object_id}): {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RenderError, FloatingPointError) as e:
        print(f"triplift {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_json(out / "summary.json", {"command": args.command, "seed": args.seed, **summary})
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
