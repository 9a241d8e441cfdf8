"""Command-line pipeline: composable subcommands driven by a JSON config.

Every subcommand reads an optional config document (``--config``), applies
dotted-path overrides (``--set a.b=v``) and dedicated flags, runs one stage
and writes a manifest with the fully resolved configuration next to its
outputs, so any artifact can be regenerated byte-identically.

Exit codes: 0 success, 2 usage error, 3 missing input, 4 config type error,
1 any other failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .camera import CAMERA_PRESETS, CameraModel, calibrate_mean_variance, mean_variance_points
from .codec import CodecConfig, transcode_stack
from .formats import RunConfig, read_stack, read_table, write_stack, write_table
from .localize import LocalizerConfig, localize_stack
from .metrics import frc, match_to_gt, render, sweep_report, widefield, write_pgm
from .network import (
    UpsampleGrid,
    export_pairs,
    load_weights,
    make_pairs_simulated,
    nn_localize_stack,
)
from .simulate import BlinkModel, PsfModel, SimScene, simulate_stack

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_CONFIG = 4


class MissingInputError(Exception):
    pass


class ConfigTypeError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class Stage:
    """One pipeline step: subcommand name plus its file inputs/outputs."""

    name: str
    inputs: tuple = ()
    outputs: tuple = ()


@dataclasses.dataclass
class PipelinePlan:
    """Ordered stages whose file inputs must exist or be produced earlier.

    The CLI composes stages through files; this plan object lets scripts
    validate a stage sequence before spending time running it.
    """

    stages: list

    def validate(self, existing=()) -> None:
        available = set(existing)
        for i, stage in enumerate(self.stages):
            for path in stage.inputs:
                if str(path) not in available and not Path(path).exists():
                    raise ConfigTypeError(
                        f"stage {i} ({stage.name}): input {path} neither exists "
                        f"nor is produced by an earlier stage"
                    )
            available.update(str(p) for p in stage.outputs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args: argparse.Namespace) -> RunConfig:
    """defaults < config file < --set overrides < dedicated flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise MissingInputError(f"config file {path} does not exist")
        try:
            cfg = RunConfig.from_json(path.read_text())
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigTypeError(str(exc)) from exc
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigTypeError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        if key == "seed":
            cfg.seed = int(_parse_value(value))
        else:
            cfg.set(key, _parse_value(value))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def camera_from_config(cfg: RunConfig) -> CameraModel:
    group = dict(cfg.get("camera", {}) or {})
    preset = group.pop("preset", None)
    base = CAMERA_PRESETS[preset] if preset else CameraModel()
    if preset is not None and preset not in CAMERA_PRESETS:
        raise ConfigTypeError(
            f"unknown camera preset {preset!r}; choose from {sorted(CAMERA_PRESETS)}"
        )
    try:
        return dataclasses.replace(base, **group)
    except (TypeError, ValueError) as exc:
        raise ConfigTypeError(f"camera config: {exc}") from exc


def codec_from_config(cfg: RunConfig) -> Optional[CodecConfig]:
    group = dict(cfg.get("codec", {}) or {})
    if group.pop("enabled", True) is False:
        return None
    offset = group.pop("grid_offset", (0, 0))
    if isinstance(offset, str) and offset != "random-per-stack":
        if offset == "random":
            offset = "random-per-stack"
        else:
            offset = tuple(int(v) for v in offset.split(","))
    elif isinstance(offset, list):
        offset = tuple(int(v) for v in offset)
    try:
        return CodecConfig(
            quality=float(group.pop("quality", 100.0)),
            grid_offset=offset,
            qp_override=group.pop("qp", None),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigTypeError(f"codec config: {exc}") from exc


def scene_from_config(cfg: RunConfig) -> SimScene:
    group = cfg.get("simulation", {}) or {}
    try:
        return SimScene(
            fov_um=float(group.get("fov_um", 10.0)),
            structure=group.get("structure", "uniform-random"),
            density=float(group.get("density", 6.0)),
            n_lines=int(group.get("n_lines", 10)),
            background_photons=float(group.get("background_photons", 0.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigTypeError(f"simulation config: {exc}") from exc


def blink_from_config(cfg: RunConfig) -> BlinkModel:
    group = cfg.get("simulation", {}) or {}
    return BlinkModel(
        p_on=float(group.get("p_on", 0.005)),
        mean_on_frames=float(group.get("mean_on_frames", 1.0)),
        photons=float(group.get("photons", 1000.0)),
    )


def psf_from_config(cfg: RunConfig) -> PsfModel:
    group = cfg.get("simulation", {}) or {}
    return PsfModel(sigma_nm=float(group.get("sigma_nm", 130.0)))


def localizer_from_config(cfg: RunConfig) -> LocalizerConfig:
    group = cfg.get("localizer", {}) or {}
    try:
        return LocalizerConfig(
            filter_sigmas=(
                float(group.get("sigma1", 1.0)),
                float(group.get("sigma2", 2.0)),
            ),
            threshold_k=float(group.get("threshold_k", 3.0)),
            roi_radius=int(group.get("roi_radius", 3)),
            min_photons=float(group.get("min_photons", 30.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigTypeError(f"localizer config: {exc}") from exc


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"input {p} does not exist")
    return p


def write_manifest(base: Path, subcommand: str, cfg: RunConfig, outputs: dict) -> None:
    doc = {
        "tool": "cellstorm",
        "version": __version__,
        "subcommand": subcommand,
        "seed": cfg.seed,
        "config": cfg.groups,
        "outputs": outputs,
    }
    Path(str(base) + ".manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _threads(args: argparse.Namespace) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("CELLSTORM_THREADS")
    return int(env) if env else 1


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    group = cfg.groups.setdefault("simulation", {})
    for key in ("frames", "photons", "density", "quality"):
        value = getattr(args, key, None)
        if value is not None:
            if key == "quality":
                cfg.groups.setdefault("codec", {})["quality"] = value
            else:
                group[key] = value
    n_frames = int(group.get("frames", 100))
    scene = scene_from_config(cfg)
    blink = blink_from_config(cfg)
    psf = psf_from_config(cfg)
    camera = camera_from_config(cfg)
    codec = codec_from_config(cfg)
    pixel_nm = float(group.get("pixel_nm", 100.0))
    fps = float(group.get("fps", 20.0))
    stack, gt = simulate_stack(
        scene, blink, psf, camera, codec, n_frames, cfg.seed, pixel_nm=pixel_nm, fps=fps
    )
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    write_stack(stack, base.with_suffix(".cstk"))
    write_table(gt, Path(str(base) + ".gt.csv"))
    write_manifest(
        base,
        "simulate",
        cfg,
        {"stack": base.with_suffix(".cstk").name, "ground_truth": base.name + ".gt.csv"},
    )
    return EXIT_OK


def cmd_compress(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    codec_group = cfg.groups.setdefault("codec", {})
    if args.quality is not None:
        codec_group["quality"] = args.quality
    if args.qp is not None:
        codec_group["qp"] = args.qp
    if args.grid_offset is not None:
        codec_group["grid_offset"] = args.grid_offset
    codec = codec_from_config(cfg)
    if codec is None:
        raise ConfigTypeError("codec disabled; nothing to do")
    stack = read_stack(_require(args.input))
    out = transcode_stack(stack, codec, cfg.seed)
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    write_stack(out, base.with_suffix(".cstk"))
    write_manifest(base, "compress", cfg, {"stack": base.with_suffix(".cstk").name})
    return EXIT_OK


def cmd_localize(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    loc_group = cfg.groups.setdefault("localizer", {})
    if args.threshold_k is not None:
        loc_group["threshold_k"] = args.threshold_k
    if args.roi is not None:
        loc_group["roi_radius"] = args.roi
    if args.camera_preset is not None:
        cfg.groups.setdefault("camera", {})["preset"] = args.camera_preset
    stack = read_stack(_require(args.input))
    table = localize_stack(
        stack, localizer_from_config(cfg), camera_from_config(cfg), threads=_threads(args)
    )
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    write_table(table, base.with_suffix(".csv"))
    write_manifest(base, "localize", cfg, {"localizations": base.with_suffix(".csv").name})
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    stacks = [read_stack(_require(p)) for p in args.stacks]
    dark = read_stack(_require(args.dark))
    knee = float(cfg.get("camera.knee", 220.0))
    result = calibrate_mean_variance(stacks, dark, knee=knee)
    points = mean_variance_points(stacks)
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".json").write_text(
        json.dumps(
            {
                "gain_e_per_adu": result.gain,
                "offset_adu": result.offset,
                "read_noise_e": result.read_noise,
                "fit_points": result.fit_points,
                "r_squared": result.r_squared,
            },
            indent=2,
        )
        + "\n"
    )
    with open(base.with_suffix(".csv"), "w") as fh:
        fh.write("mean_adu,variance_adu2\n")
        for mean, var in points:
            fh.write(f"{mean!r},{var!r}\n")
    write_manifest(
        base,
        "calibrate",
        cfg,
        {"result": base.with_suffix(".json").name, "points": base.with_suffix(".csv").name},
    )
    return EXIT_OK


def cmd_make_dataset(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    group = cfg.groups.setdefault("simulation", {})
    if args.pairs is not None:
        group["frames"] = args.pairs
    n_frames = int(group.get("frames", 100))
    factor = int(cfg.get("nn.factor", args.factor or 5))
    codec = codec_from_config(cfg) or CodecConfig(quality=85.0)
    dataset = make_pairs_simulated(
        scene_from_config(cfg),
        blink_from_config(cfg),
        psf_from_config(cfg),
        camera_from_config(cfg),
        codec,
        n_frames,
        UpsampleGrid(factor=factor),
        cfg.seed,
    )
    out_dir = Path(args.out)
    export_pairs(dataset, out_dir)
    write_manifest(out_dir / "dataset", "make-dataset", cfg, {"dataset": "dataset.json"})
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    weights = load_weights(_require(args.weights))
    stack = read_stack(_require(args.input))
    factor = int(cfg.get("nn.factor", args.factor or 5))
    table = nn_localize_stack(stack, weights, UpsampleGrid(factor=factor))
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    write_table(table, base.with_suffix(".csv"))
    write_manifest(base, "infer", cfg, {"localizations": base.with_suffix(".csv").name})
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    detections = read_table(_require(args.detections))
    gt = read_table(_require(args.gt), emitters=True)
    radius = float(cfg.get("eval.radius_nm", args.radius or 200.0))
    report = match_to_gt(detections, gt, radius_nm=radius)
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".json").write_text(
        json.dumps(
            {
                "matched_count": report.matched_count,
                "gt_count": report.gt_count,
                "detected_count": report.detected_count,
                "mean_distance_nm": None
                if math.isnan(report.mean_distance_nm)
                else report.mean_distance_nm,
                "match_radius_nm": report.match_radius_nm,
            },
            indent=2,
        )
        + "\n"
    )
    with open(base.with_suffix(".csv"), "w") as fh:
        fh.write("match_distance_nm\n")
        for d in report.distances:
            fh.write(f"{d!r}\n")
    write_manifest(
        base,
        "eval",
        cfg,
        {"report": base.with_suffix(".json").name, "distances": base.with_suffix(".csv").name},
    )
    return EXIT_OK


def cmd_frc(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    table = read_table(_require(args.input))
    render_px = float(cfg.get("eval.render_px_nm", args.render_px or 10.0))
    result = frc(table, render_px_nm=render_px, seed=cfg.seed)
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".json").write_text(
        json.dumps(
            {
                "resolution_nm": result.resolution_nm,
                "ring_frequencies_per_nm": result.ring_frequencies.tolist(),
                "correlation": result.correlation.tolist(),
            },
            indent=2,
        )
        + "\n"
    )
    write_manifest(base, "frc", cfg, {"result": base.with_suffix(".json").name})
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    render_px = float(cfg.get("eval.render_px_nm", args.render_px or 10.0))
    if args.widefield:
        img = widefield(read_stack(_require(args.input)))
    else:
        table = read_table(_require(args.input))
        img = render(table, render_px_nm=render_px, blur_sigma_nm=args.blur)
    peak = img.max() if img.size else 0.0
    scaled = (img / peak * 65535.0) if peak > 0 else img
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(np.rint(scaled).astype(np.uint16), base.with_suffix(".pgm"))
    write_manifest(base, "render", cfg, {"image": base.with_suffix(".pgm").name})
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    group = cfg.groups.setdefault("simulation", {})
    if args.frames is not None:
        group["frames"] = args.frames
    if args.density is not None:
        group["density"] = args.density
    photons_list = [float(v) for v in args.photons.split(",")]
    quality_list = [float(v) for v in args.quality.split(",")]
    n_frames = int(group.get("frames", 200))
    scene = scene_from_config(cfg)
    psf = psf_from_config(cfg)
    camera = camera_from_config(cfg)
    weights = load_weights(_require(args.weights)) if args.weights else None
    factor = int(cfg.get("nn.factor", 5))
    radius = float(cfg.get("eval.radius_nm", 200.0))
    methods = ["classic"] + (["nn"] if weights else [])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = {}
    for photons in photons_list:
        blink = dataclasses.replace(blink_from_config(cfg), photons=photons)
        for quality in quality_list:
            codec = CodecConfig(quality=quality, grid_offset="random-per-stack")
            stack, gt = simulate_stack(
                scene, blink, psf, camera, codec, n_frames, cfg.seed
            )
            table = localize_stack(
                stack, localizer_from_config(cfg), camera, threads=_threads(args)
            )
            cells[("classic", photons, quality)] = match_to_gt(table, gt, radius_nm=radius)
            if weights:
                nn_table = nn_localize_stack(stack, weights, UpsampleGrid(factor=factor))
                cells[("nn", photons, quality)] = match_to_gt(nn_table, gt, radius_nm=radius)
    report = sweep_report(cells, methods, photons_list, quality_list)
    (out_dir / "sweep.csv").write_text(report.to_csv())
    (out_dir / "sweep.json").write_text(json.dumps(report.rows, indent=2) + "\n")
    write_manifest(out_dir / "sweep", "sweep", cfg, {"table": "sweep.csv"})
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config document")
    parser.add_argument(
        "--set",
        action="append",
        metavar="PATH=VALUE",
        help="override a dotted config path (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--threads", type=int, help="worker cap (or CELLSTORM_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellstorm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cellstorm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a blinking stack + ground truth")
    _add_common(p)
    p.add_argument("--out", required=True, help="output basename")
    p.add_argument("--frames", type=int)
    p.add_argument("--photons", type=float)
    p.add_argument("--density", type=float)
    p.add_argument("--quality", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compress", help="transform/quantization round trip on a stack")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quality", type=float)
    p.add_argument("--qp", type=int)
    p.add_argument("--grid-offset", dest="grid_offset", help="dx,dy or 'random'")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("localize", help="classical detection + Gaussian fitting")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold-k", dest="threshold_k", type=float)
    p.add_argument("--roi", type=int)
    p.add_argument("--camera-preset", dest="camera_preset")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("calibrate", help="mean-variance calibration from stacks")
    _add_common(p)
    p.add_argument("--stacks", nargs="+", required=True)
    p.add_argument("--dark", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("make-dataset", help="simulated training pairs")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--pairs", type=int)
    p.add_argument("--factor", type=int)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("infer", help="generator inference on a stack")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--factor", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="match detections against ground truth")
    _add_common(p)
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--radius", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("frc", help="Fourier ring correlation resolution")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--render-px", dest="render_px", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_frc)

    p = sub.add_parser("render", help="super-resolved or widefield image as PGM")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--render-px", dest="render_px", type=float)
    p.add_argument("--blur", type=float)
    p.add_argument("--widefield", action="store_true", help="sum a stack instead")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("sweep", help="photons x quality grid, end to end")
    _add_common(p)
    p.add_argument("--photons", required=True, help="comma list, e.g. 50,100,500,1000")
    p.add_argument("--quality", required=True, help="comma list, e.g. 70,80,90,100")
    p.add_argument("--frames", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--weights", help="also run the NN localizer")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingInputError as exc:
        print(f"error: missing-input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except FileNotFoundError as exc:
        print(f"error: missing-input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ConfigTypeError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - single-line CLI error contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
