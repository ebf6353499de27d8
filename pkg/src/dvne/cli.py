"""Command-line entry point: ``dvne <subcommand> [flags]``.

Failures print one line ``error[<category>]: <message>`` to stderr.  Exit
status is 2 for usage and configuration errors and 1 for everything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from contextlib import nullcontext
from pathlib import Path

from .checks import run_checks
from .config import ConfigError, RunConfig, dumps_config, load_config, override
from .features import RandomConvFeatures
from .io import IngestionError, read_png
from .model import VideoNeRF
from .params import CheckpointError
from .synth import PRESETS, SceneSpec, build_scene, generate, load_dataset
from .training import (MetricsWriter, TrainingDivergedError, load_model, mock_priors, read_reference,
                       reference_camera, render_video, resize_reference, save_model, stage1_reconstruct,
                       stage2_edit_foreground, stage3_edit_background, synthetic_reference, write_reference)

TOOL_VERSION = "0.1.0"
log = logging.getLogger("dvne")

STAGE_OF = {"reconstruct": "reconstruct", "edit-fg": "edit_foreground", "edit-bg": "edit_background",
            "render": "render"}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _resolution(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from exc
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=_seed, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--resolution", type=_resolution, help="WxH")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--metrics", help="metrics CSV path (default: <out>/metrics.csv)")
    p = _Parser(prog="dvne", description="Video editing with a human-scene radiance field.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    r = sub.add_parser("reconstruct", parents=[common], help="fit the video radiance field")
    r.add_argument("--data", help="dataset directory")
    e = sub.add_parser("edit-fg", parents=[common], help="edit the human with mock priors")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="dataset directory (source frame poses)")
    e.add_argument("--reference", help="reference bundle directory")
    b = sub.add_parser("edit-bg", parents=[common], help="stylize the background")
    b.add_argument("--checkpoint")
    b.add_argument("--data")
    b.add_argument("--style", help="style image (PNG)")
    v = sub.add_parser("render", parents=[common], help="render every source frame")
    v.add_argument("--checkpoint")
    v.add_argument("--data")
    sub.add_parser("check", parents=[common], help="run invariant suites")
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--preset", choices=sorted(PRESETS), default="short")
    s.add_argument("--frames", type=int, help="override the preset frame count")
    y = sub.add_parser("replay", parents=[common], help="re-execute a run from its manifest")
    y.add_argument("manifest")
    return p


def setup_logging(level):
    logging.basicConfig(level=getattr(logging, level), stream=sys.stderr, force=True,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")


def _thread_limit():
    n = os.environ.get("DVNE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(max(1, int(n)))


# -- manifests -------------------------------------------------------------------------------

def hash_inputs(paths):
    """Content hash over every file under ``paths`` (sorted relative names plus bytes)."""
    h = hashlib.sha256()
    for root in sorted(str(p) for p in paths if p):
        root = Path(root)
        files = sorted(f for f in root.rglob("*") if f.is_file()) if root.is_dir() else [root]
        for f in files:
            if not f.exists():
                continue
            h.update(str(f.relative_to(root) if root.is_dir() else f.name).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out, command, argv, cfg: RunConfig, inputs):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"tool_version": TOOL_VERSION, "command": command, "argv": list(argv), "seed": cfg.seed,
                "config": dumps_config(cfg), "inputs": {k: str(v) for k, v in inputs.items() if v},
                "input_hash": hash_inputs(inputs.values())}
    path = out / "manifest.json"
    if path.exists():
        path.unlink()
    path.write_text(json.dumps(manifest, indent=1))
    os.chmod(path, 0o444)
    return manifest


def _record_timing(out, stage, seconds):
    path = Path(out) / "timings.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data[stage] = round(seconds, 4)
    path.write_text(json.dumps(data, indent=1))


# -- commands --------------------------------------------------------------------------------

def _resolve(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {"stage": STAGE_OF.get(args.command, cfg.stage)}
    if args.seed is not None:
        changes["seed"] = args.seed
    for key in ("data", "checkpoint", "reference", "style"):
        if getattr(args, key, None):
            changes[f"paths.{key}"] = str(getattr(args, key))
    if args.out:
        changes["paths.out"] = str(args.out)
    if args.resolution and args.command == "edit-fg":
        changes["stage2.resolution"] = args.resolution
    if args.resolution and args.command == "edit-bg":
        changes["stage3.resolution"] = args.resolution
    return override(cfg, **changes)


def _require(path, what, category_error):
    if not path:
        raise category_error(f"no {what} given")
    if not Path(path).exists():
        raise category_error(f"{what} {path} not found")
    return path


def _metrics(args, cfg, columns):
    return MetricsWriter(args.metrics or Path(cfg.paths.out) / "metrics.csv", columns)


def cmd_reconstruct(args, cfg):
    data = load_dataset(_require(cfg.paths.data, "dataset", IngestionError))
    model = VideoNeRF.build(cfg.model, seed=cfg.seed)
    writer = _metrics(args, cfg, ["photometric", "feature", "distortion", "total"])
    try:
        result = stage1_reconstruct(data, model, cfg, writer)
    finally:
        writer.close()
    save_model(result.model, cfg.paths.out, cfg)
    log.info("reconstruction done: held-in error %.5f -> %.5f", result.eval_start, result.eval_end)


def cmd_edit_fg(args, cfg):
    model = load_model(_require(cfg.paths.checkpoint, "checkpoint", CheckpointError))
    data = load_dataset(_require(cfg.paths.data, "dataset", IngestionError))
    bundle = read_reference(_require(cfg.paths.reference, "reference bundle", IngestionError))
    W, H = cfg.stage2.resolution
    bundle = resize_reference(bundle, W, H)
    writer = _metrics(args, cfg, ["rec", "sds_2d", "sds_3d", "t_2d", "t_3d", "zoom"])
    try:
        stage2_edit_foreground(model, bundle, mock_priors(cfg.stage2, W, H), cfg, data.poses, writer)
    finally:
        writer.close()
    save_model(model, cfg.paths.out, cfg)


def cmd_edit_bg(args, cfg):
    model = load_model(_require(cfg.paths.checkpoint, "checkpoint", CheckpointError))
    data = load_dataset(_require(cfg.paths.data, "dataset", IngestionError))
    style = read_png(_require(cfg.paths.style, "style image", IngestionError))
    writer = _metrics(args, cfg, ["nnfm", "content", "stat_dist"])
    try:
        stage3_edit_background(model, style, RandomConvFeatures(seed=cfg.seed), cfg, data.cameras, data.poses,
                               writer)
    finally:
        writer.close()
    save_model(model, cfg.paths.out, cfg)


def cmd_render(args, cfg):
    model = load_model(_require(cfg.paths.checkpoint, "checkpoint", CheckpointError))
    data = load_dataset(_require(cfg.paths.data, "dataset", IngestionError))
    render_video(model, data.cameras, data.poses, Path(cfg.paths.out) / "frames", args.resolution, cfg.render)


def cmd_synth(args, cfg):
    overrides = {} if args.frames is None else {"frames": args.frames}
    if args.resolution:
        overrides.update(width=args.resolution[0], height=args.resolution[1])
    spec = SceneSpec.preset(args.preset, **overrides)
    out = Path(cfg.paths.out)
    generate(spec, cfg.seed, out)
    scene = build_scene(spec, cfg.seed)
    W, H = cfg.stage2.resolution if not args.resolution else args.resolution
    cam = reference_camera(scene.rig, cfg.stage2, W, H)
    write_reference(out / "reference", synthetic_reference(scene, cam, cfg.stage2.mock_target))
    log.info("wrote %d frames to %s", spec.frames, out)


def cmd_check(args, cfg):
    failed = 0
    for name, ok, detail in run_checks(cfg.seed):
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
        failed += not ok
    return 1 if failed else 0


COMMANDS = {"reconstruct": cmd_reconstruct, "edit-fg": cmd_edit_fg, "edit-bg": cmd_edit_bg, "render": cmd_render,
            "synth": cmd_synth, "check": cmd_check}
MANIFESTED = ("reconstruct", "edit-fg", "edit-bg", "render", "synth")


def cmd_replay(args):
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("input_hash") != hash_inputs(manifest["inputs"].values()):
        raise IngestionError("inputs changed since the manifest was written")
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "config.toml"
        cfg_path.write_text(manifest["config"])
        argv = [manifest["command"], "--config", str(cfg_path)]
        if args.out:
            argv += ["--out", args.out]
        argv += _replayed_flags(manifest["argv"])
        return main(argv)


def _replayed_flags(argv):
    """Flags that are not captured by the config snapshot."""
    keep, out = {"--resolution", "--preset", "--frames"}, []
    for i, tok in enumerate(argv):
        if tok in keep and i + 1 < len(argv):
            out += [tok, argv[i + 1]]
    return out


def dispatch(argv):
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    if args.command == "replay":
        return cmd_replay(args)
    cfg = _resolve(args)
    with _thread_limit():
        if args.command in MANIFESTED:
            inputs = {k: getattr(cfg.paths, k) for k in ("data", "checkpoint", "reference", "style")}
            if args.command == "synth":
                inputs = {}
            write_manifest(cfg.paths.out, args.command, argv, cfg, inputs)
        t0 = time.perf_counter()
        code = COMMANDS[args.command](args, cfg) or 0
        if args.command in MANIFESTED:
            _record_timing(cfg.paths.out, args.command, time.perf_counter() - t0)
    return code


def _fail(category, message, code):
    print(f"error[{category}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return dispatch(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except CheckpointError as exc:
        return _fail("missing-checkpoint", exc, 1)
    except IngestionError as exc:
        return _fail("ingestion", exc, 1)
    except TrainingDivergedError as exc:
        return _fail("diverged", exc, 1)
    except OSError as exc:
        return _fail("io", exc, 1)
    except Exception as exc:  # noqa: BLE001 - last-resort category for the single-line contract
        log.debug("unhandled", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
