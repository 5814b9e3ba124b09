"""Command-line entry point.

Subcommands cover the whole pipeline::

    prompts    balanced prompt list -> JSONL
    avatar     fit a canonical avatar (mock or external denoiser)
    animate    deform an avatar over a motion -> per-frame cloud cache
    render     rasterize a motion -> frame images
    compose    lit + shadowed frames over a background
    export     multi-subject dataset with splits and annotations
    validate   integrity-check a dataset (exit 1 on violations)
    eval       keypoint AP table for a prediction file
    demo       end-to-end miniature dataset from the bundled toy body

Every command takes --seed/--threads/--config/--root; results never depend
on --threads. Settings resolve as flag > config-file entry > built-in
default, and the effective values are echoed to ``config_used.json`` inside
each output directory (thread count excluded, since it cannot change
output bytes). Exit codes: 0 ok, 1 validation failure, 2 usage, 3 anything
that prevented producing artifacts.
"""

import argparse
import json
import os
import shlex
import sys

import numpy as np

from .animate import cull_deviants, default_cull_tau, deform
from .avatar import init_avatar, load_avatar, save_avatar
from .body import (load_body_model, load_motion, make_toy_body, save_motion)
from .camera import Camera
from .compose import load_scene_asset
from .dataset import compute_ap, load_manifest, validate_dataset
from .errors import SplatforgeError
from .guidance import (GuidanceConfig, SubprocessDenoiser, mock_denoiser,
                       optimize_avatar)
from .images import save_float_image, save_png
from .parallel import resolve_threads
from .pipeline import (build_demo_plans, default_scene, export_dataset,
                       make_motion, render_clip_frame, run_demo, _camera_for,
                       ACTIONS)
from .prompts import (AttributeSpace, PromptTemplate, generate_prompts,
                      load_attribute_space, save_prompts)
from .rasterizer import RasterConfig, rasterize

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

_COMMANDS = ("prompts", "avatar", "animate", "render", "compose", "export",
             "validate", "eval", "demo")
_GLOBAL_KEYS = ("seed", "threads", "root")


class _ConfigError(Exception):
    pass


def _load_config(path):
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise _ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise _ConfigError(f"config {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise _ConfigError(f"config {path}: top level must be an object")
    for key, val in data.items():
        if key in _GLOBAL_KEYS:
            continue
        if key in _COMMANDS:
            if not isinstance(val, dict):
                raise _ConfigError(f"config section {key!r} must be an object")
            continue
        raise _ConfigError(f"config {path}: unknown key {key!r}")
    return data


class _Settings:
    """Flag > config[command][key] > config[key] > default."""

    def __init__(self, args, config, command):
        self.args = vars(args)
        self.config = config
        self.command = command
        self.used = {}

    def get(self, key, default=None):
        val = self.args.get(key)
        if val is None:
            val = self.config.get(self.command, {}).get(key)
        if val is None:
            val = self.config.get(key)
        if val is None:
            val = default
        self.used[key] = val
        return val


def _echo(settings, out_dir):
    # threads cannot change output bytes, and out/root merely locate the
    # directory this file already sits in; recording them would make
    # otherwise-identical runs compare unequal.
    payload = {k: v for k, v in sorted(settings.used.items())
               if k not in ("threads", "root", "out")}
    payload["command"] = settings.command
    path = os.path.join(out_dir, "config_used.json")
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2, default=str)
        f.write("\n")


def _resolve_path(root, path):
    if path is None:
        return None
    path = str(path)
    return path if os.path.isabs(path) else os.path.join(root, path)


def _out_dir(root, out):
    path = _resolve_path(root, out)
    os.makedirs(path, exist_ok=True)
    return path


def _load_model(root, path):
    if path is None:
        return make_toy_body()
    return load_body_model(_resolve_path(root, path))


def _parse_value(text):
    parts = [p for p in str(text).split(",") if p.strip()]
    vals = [float(p) for p in parts]
    return vals[0] if len(vals) == 1 else tuple(vals)


def _pick_prompt(settings, root, seed):
    text = settings.get("prompt")
    if text is not None:
        return PromptTemplate(assignment={}, scenario="", sentence=str(text),
                              index=0)
    space_path = settings.get("space")
    space = (load_attribute_space(_resolve_path(root, space_path))
             if space_path else AttributeSpace.default())
    scenario = settings.get("scenario", "soccer")
    return generate_prompts(space, 1, scenario=scenario, seed=seed)[0]


def _make_denoiser(settings):
    external = settings.get("external")
    if external is not None:
        return SubprocessDenoiser(shlex.split(str(external)))
    mode = settings.get("denoiser", "color_target")
    value = settings.get("value", "0.6,0.3,0.2")
    strength = float(settings.get("strength", 0.5))
    if mode == "perfect":
        return mock_denoiser("perfect")
    return mock_denoiser(mode, value=_parse_value(value), strength=strength)


def _motion_for(settings, root, model, seed):
    motion_path = settings.get("motion")
    if motion_path is not None:
        return load_motion(_resolve_path(root, motion_path))
    action = settings.get("action", ACTIONS[0])
    n_frames = int(settings.get("frames", 30))
    betas = np.zeros(model.n_shape_coeffs)
    return make_motion(model, action, n_frames, betas, seed=seed)


# ---------------------------------------------------------------------------
# commands


def _cmd_prompts(settings, root, seed, threads):
    count = int(settings.get("count", 10))
    scenario = settings.get("scenario", "soccer")
    space_path = settings.get("space")
    space = (load_attribute_space(_resolve_path(root, space_path))
             if space_path else AttributeSpace.default())
    out = _out_dir(root, settings.get("out", "prompts_out"))
    prompts = generate_prompts(space, count, scenario=scenario, seed=seed)
    save_prompts(os.path.join(out, "prompts.jsonl"), prompts)
    _echo(settings, out)
    print(f"wrote {count} prompts to {os.path.join(out, 'prompts.jsonl')}")
    return EXIT_OK


def _cmd_avatar(settings, root, seed, threads):
    model = _load_model(root, settings.get("model"))
    prompt = _pick_prompt(settings, root, seed)
    n = int(settings.get("gaussians", 600))
    cfg = GuidanceConfig(iterations=int(settings.get("iterations", 200)),
                         resolution=int(settings.get("resolution", 128)))
    denoiser = _make_denoiser(settings)
    out = _out_dir(root, settings.get("out", "avatar_out"))
    avatar = init_avatar(model, n, seed=seed, prompt=prompt)
    fitted = optimize_avatar(avatar, model, denoiser, prompt.sentence, cfg,
                             seed=seed,
                             raster_cfg=RasterConfig(threads=threads))
    save_avatar(os.path.join(out, "avatar.npz"), fitted)
    _echo(settings, out)
    print(f"fitted avatar ({n} gaussians, {cfg.iterations} iters) "
          f"-> {os.path.join(out, 'avatar.npz')}")
    return EXIT_OK


def _cmd_animate(settings, root, seed, threads):
    model = _load_model(root, settings.get("model"))
    avatar = load_avatar(_resolve_path(root, settings.get("avatar")))
    motion = _motion_for(settings, root, model, seed)
    tau = settings.get("tau")
    cull = settings.get("cull", False) or tau is not None
    tau = float(tau) if tau is not None else default_cull_tau(model)
    out = _out_dir(root, settings.get("out", "animate_out"))
    arrays = {"n_frames": np.asarray(len(motion.frames))}
    from .animate import expected_positions
    for i, params in enumerate(motion.frames):
        dcloud = deform(avatar, model, params, frame_index=i)
        if cull:
            expected = expected_positions(avatar, model, params)
            dcloud = cull_deviants(dcloud, expected, tau)
        tag = f"f{i:06d}"
        arrays[f"{tag}_positions"] = dcloud.positions
        arrays[f"{tag}_rotations"] = dcloud.rotations
        arrays[f"{tag}_log_scales"] = dcloud.log_scales
        arrays[f"{tag}_opacity_logits"] = dcloud.opacity_logits
        arrays[f"{tag}_colors"] = dcloud.colors
        arrays[f"{tag}_normals"] = dcloud.normals
        arrays[f"{tag}_kept"] = dcloud.kept_indices
    np.savez(os.path.join(out, "clip.npz"), **arrays)
    save_motion(os.path.join(out, "motion.json"), motion)
    _echo(settings, out)
    print(f"cached {len(motion.frames)} deformed frames -> "
          f"{os.path.join(out, 'clip.npz')}")
    return EXIT_OK


def _render_frames(settings, root, seed, threads, composed):
    model = _load_model(root, settings.get("model"))
    avatar = load_avatar(_resolve_path(root, settings.get("avatar")))
    motion = _motion_for(settings, root, model, seed)
    width = int(settings.get("width", 256))
    height = int(settings.get("height", 256))
    out = _out_dir(root, settings.get("out",
                                      "compose_out" if composed else
                                      "render_out"))
    frames_dir = os.path.join(out, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    seq = np.random.SeedSequence(seed)
    cam_rng = np.random.default_rng(seq.spawn(1)[0])
    cam = _camera_for(model, width, height, cam_rng)
    rcfg = RasterConfig(threads=threads)
    scene = None
    if composed:
        bg_path = settings.get("background")
        scene = (load_scene_asset(_resolve_path(root, bg_path)) if bg_path
                 else default_scene(width, height, seed=seed))
    save_depth = bool(settings.get("depth", False))
    for i, params in enumerate(motion.frames):
        if composed:
            img, _, _ = render_clip_frame(avatar, model, params, cam, scene,
                                          frame_index=i, raster_cfg=rcfg)
            save_png(os.path.join(frames_dir, f"{i:06d}.png"), img,
                     tonemap=False)
        else:
            dcloud = deform(avatar, model, params, frame_index=i)
            result = rasterize(dcloud, cam, rcfg)
            save_png(os.path.join(frames_dir, f"{i:06d}.png"), result.rgb,
                     tonemap=True)
            if save_depth:
                save_float_image(os.path.join(frames_dir, f"{i:06d}_depth.sfi"),
                                 result.depth)
    _echo(settings, out)
    print(f"wrote {len(motion.frames)} frames -> {frames_dir}")
    return EXIT_OK


def _cmd_render(settings, root, seed, threads):
    return _render_frames(settings, root, seed, threads, composed=False)


def _cmd_compose(settings, root, seed, threads):
    return _render_frames(settings, root, seed, threads, composed=True)


def _cmd_export(settings, root, seed, threads):
    model = _load_model(root, settings.get("model"))
    out = _out_dir(root, settings.get("out", "dataset"))
    plans = build_demo_plans(
        model, seed=seed,
        n_shared=int(settings.get("subjects", 2)),
        clips_per_shared=int(settings.get("clips_per_subject", 2)),
        frames_per_clip=int(settings.get("frames", 30)),
        width=int(settings.get("width", 256)),
        height=int(settings.get("height", 256)),
        n_gaussians=int(settings.get("gaussians", 600)),
        fit_iterations=int(settings.get("fit_iterations", 40)),
        sport=settings.get("sport", "toy"))
    scene = default_scene(int(settings.get("width", 256)),
                          int(settings.get("height", 256)), seed=seed)
    manifest = export_dataset(out, plans, model, scene=scene, seed=seed,
                              sport=settings.get("sport", "toy"),
                              raster_cfg=RasterConfig(threads=threads),
                              progress=lambda msg: print(msg, flush=True))
    _echo(settings, out)
    n_frames = sum(c.frame_count for c in manifest.clips)
    print(f"exported {len(manifest.clips)} clips / {n_frames} frames -> {out}")
    return EXIT_OK


def _cmd_validate(settings, root, seed, threads):
    data = _resolve_path(root, settings.get("data", "."))
    report = validate_dataset(data)
    if settings.get("json", False):
        print(json.dumps({"ok": report.ok, "violations": report.violations},
                         sort_keys=True))
    else:
        if report.ok:
            print(f"{data}: ok (no violations)")
        else:
            for v in report.violations:
                print(f"violation: {v}")
            print(f"{data}: {len(report.violations)} violation(s)")
    return EXIT_OK if report.ok else EXIT_VALIDATION


def _load_groundtruth(data_root):
    manifest = load_manifest(data_root)
    from .dataset import AnnotationRecord
    gts = {}
    for clip in manifest.clips:
        ann = os.path.join(data_root, clip.split, clip.clip_id,
                           "annotations.jsonl")
        with open(ann) as f:
            for line in f:
                if not line.strip():
                    continue
                rec = AnnotationRecord.from_json(json.loads(line))
                gts[(rec.clip_id, rec.frame_index)] = rec.kp2d
    return gts


def _cmd_eval(settings, root, seed, threads):
    data = _resolve_path(root, settings.get("data", "."))
    gts = _load_groundtruth(data)
    keys = sorted(gts.keys())
    dump = settings.get("dump_gt")
    if dump is not None:
        path = _resolve_path(root, dump)
        with open(path, "w") as f:
            for clip_id, frame_index in keys:
                kp = gts[(clip_id, frame_index)]
                f.write(json.dumps(
                    {"clip_id": clip_id, "frame_index": frame_index,
                     "kp2d": [[float(u), float(v)] for u, v in kp[:, :2]]},
                    sort_keys=True) + "\n")
        print(f"wrote groundtruth as predictions -> {path}")
        if settings.get("pred") is None:
            return EXIT_OK
    pred_path = _resolve_path(root, settings.get("pred"))
    if pred_path is None:
        raise _ConfigError("eval needs --pred (or --dump-gt)")
    preds = {}
    with open(pred_path) as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            preds[(obj["clip_id"], int(obj["frame_index"]))] = \
                np.asarray(obj["kp2d"], dtype=np.float64)
    missing = [k for k in keys if k not in preds]
    if missing:
        raise _ConfigError(f"predictions missing {len(missing)} frames "
                           f"(first: {missing[0]})")
    pred_list = [preds[k] for k in keys]
    gt_list = [gts[k] for k in keys]
    ap = compute_ap(pred_list, gt_list)
    if settings.get("json", False):
        print(json.dumps({f"ap_{k}px": v for k, v in sorted(ap.items())},
                         sort_keys=True))
    else:
        for k in sorted(ap):
            print(f"AP@{k}px: {ap[k]:.1f}")
        print("/".join(f"{ap[k]:.1f}" for k in sorted(ap)))
    return EXIT_OK


def _cmd_demo(settings, root, seed, threads):
    out = _out_dir(root, settings.get("out", "demo_dataset"))
    frames = int(settings.get("frames", 30))
    size = int(settings.get("size", 256))
    manifest, report = run_demo(
        out, seed=seed, frames_per_clip=frames, width=size, height=size,
        n_gaussians=int(settings.get("gaussians", 600)),
        fit_iterations=int(settings.get("fit_iterations", 40)),
        threads=threads, progress=lambda msg: print(msg, flush=True))
    _echo(settings, out)
    n_frames = sum(c.frame_count for c in manifest.clips)
    print(f"demo dataset: {len(manifest.clips)} clips, {n_frames} frames "
          f"-> {out}")
    if report.ok:
        print("validation: ok")
        return EXIT_OK
    for v in report.violations:
        print(f"violation: {v}")
    return EXIT_VALIDATION


_DISPATCH = {
    "prompts": _cmd_prompts,
    "avatar": _cmd_avatar,
    "animate": _cmd_animate,
    "render": _cmd_render,
    "compose": _cmd_compose,
    "export": _cmd_export,
    "validate": _cmd_validate,
    "eval": _cmd_eval,
    "demo": _cmd_demo,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="master random seed (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads; never changes output bytes")
    common.add_argument("--config", default=None,
                        help="JSON config file; flags override its entries")
    common.add_argument("--root", default=None,
                        help="base directory for relative paths")

    parser = argparse.ArgumentParser(
        prog="splatforge",
        description="Synthetic articulated-human dataset pipeline.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("prompts", parents=[common],
                       help="generate a balanced prompt list")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--scenario", default=None)
    p.add_argument("--space", default=None, help="attribute space JSON")
    p.add_argument("--out", default=None)

    p = sub.add_parser("avatar", parents=[common],
                       help="fit a canonical avatar")
    p.add_argument("--model", default=None, help="body model file (default: toy)")
    p.add_argument("--prompt", default=None)
    p.add_argument("--scenario", default=None)
    p.add_argument("--space", default=None)
    p.add_argument("--gaussians", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--denoiser", default=None,
                   choices=["perfect", "constant_bias", "color_target"])
    p.add_argument("--value", default=None,
                   help="mock parameter: scalar or r,g,b")
    p.add_argument("--strength", type=float, default=None)
    p.add_argument("--external", default=None,
                   help="external denoiser command line")
    p.add_argument("--out", default=None)

    p = sub.add_parser("animate", parents=[common],
                       help="deformed-cloud cache for a motion")
    p.add_argument("--avatar", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--motion", default=None, help="motion JSON file")
    p.add_argument("--action", default=None, choices=list(ACTIONS))
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--cull", action="store_true", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--out", default=None)

    for name, extra in (("render", "rasterize frames"),
                        ("compose", "lit, shadowed, composited frames")):
        p = sub.add_parser(name, parents=[common], help=extra)
        p.add_argument("--avatar", required=True)
        p.add_argument("--model", default=None)
        p.add_argument("--motion", default=None)
        p.add_argument("--action", default=None, choices=list(ACTIONS))
        p.add_argument("--frames", type=int, default=None)
        p.add_argument("--width", type=int, default=None)
        p.add_argument("--height", type=int, default=None)
        if name == "render":
            p.add_argument("--depth", action="store_true", default=None)
        else:
            p.add_argument("--background", default=None,
                           help="background image (with optional sidecar)")
        p.add_argument("--out", default=None)

    p = sub.add_parser("export", parents=[common],
                       help="generate a split dataset")
    p.add_argument("--model", default=None)
    p.add_argument("--subjects", type=int, default=None,
                   help="train/valid subjects (one test subject is added)")
    p.add_argument("--clips-per-subject", dest="clips_per_subject",
                   type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--gaussians", type=int, default=None)
    p.add_argument("--fit-iterations", dest="fit_iterations", type=int,
                   default=None)
    p.add_argument("--sport", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("validate", parents=[common],
                       help="integrity-check a dataset")
    p.add_argument("--data", default=None, help="dataset root")
    p.add_argument("--json", action="store_true", default=None)

    p = sub.add_parser("eval", parents=[common], help="keypoint AP table")
    p.add_argument("--data", default=None, help="dataset root")
    p.add_argument("--pred", default=None, help="prediction JSONL")
    p.add_argument("--dump-gt", dest="dump_gt", default=None,
                   help="write groundtruth in prediction format")
    p.add_argument("--json", action="store_true", default=None)

    p = sub.add_parser("demo", parents=[common],
                       help="end-to-end miniature dataset")
    p.add_argument("--frames", type=int, default=None, help="frames per clip")
    p.add_argument("--size", type=int, default=None, help="square resolution")
    p.add_argument("--gaussians", type=int, default=None)
    p.add_argument("--fit-iterations", dest="fit_iterations", type=int,
                   default=None)
    p.add_argument("--out", default=None)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        config = _load_config(args.config) if args.config else {}
    except _ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    settings = _Settings(args, config, args.command)
    seed = int(settings.get("seed", 0))
    threads = resolve_threads(settings.get("threads"))
    root = str(settings.get("root", "."))
    try:
        return _DISPATCH[args.command](settings, root, seed, threads)
    except _ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SplatforgeError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
