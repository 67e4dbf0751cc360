"""Command-line entry point: ``shiftgan <subcommand> ...``.

Every run writes ``manifest.json`` (resolved config, seed, versions) into its
output directory and refuses to write into a non-empty directory unless
``--force`` is given.  Failures print one ``error: <kind>: <message>`` line to
stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import re
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

import shiftgan
from shiftgan import imaging, metrics, shiftops
from shiftgan.errors import ConfigError, ContractError, FormatError, TrainingDiverged
from shiftgan.networks import pixel_accuracy, pretrain_segmenter, random_taps, toy_segmenter, vgg19_taps
from shiftgan.training import TrainConfig, load_checkpoint, preset, train_adapt, train_style

log = logging.getLogger("shiftgan")

EXIT_ERROR = 1
EXIT_CONFIG = 2


class OutputExists(Exception):
    pass


def _versions():
    return {"shiftgan": shiftgan.__version__, "torch": torch.__version__, "numpy": np.__version__,
            "python": platform.python_version()}


def _prepare_out(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputExists(f"{path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out, command, config, seed):
    manifest = {"command": command, "config": config, "seed": seed, "versions": _versions()}
    (Path(out) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _pair(text, kind=int):
    parts = [kind(p) for p in str(text).split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated values, got {text!r}")
    return tuple(parts)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    out = _prepare_out(args.out, args.force)
    height, width = args.size
    if args.pattern == "two-palette":
        sim, sim_labels, real, real_labels = imaging.render_two_palette_corpus(args.frames, height, seed=args.seed)
        for k in range(args.frames):
            imaging.save_image(sim[k], out / "trainA" / f"{k:05d}.png")
            imaging.save_label_map(sim_labels[k].numpy(), out / "semA" / f"{k:05d}.png")
            imaging.save_image(real[k], out / "trainB" / f"{k:05d}.png")
            imaging.save_label_map(real_labels[k].numpy(), out / "semB" / f"{k:05d}.png")
    else:
        frames, flows, masks = imaging.render_synthetic_sequence(
            args.pattern, args.frames, args.velocity, size=(height, width), channels=args.channels,
            seed=args.seed, strict=args.strict)
        for k, frame in enumerate(frames):
            imaging.save_image(frame, out / "trainA" / f"{k:05d}.png")
        for k, (flow, mask) in enumerate(zip(flows, masks)):
            imaging.write_flo(imaging.flow_to_array(flow), out / "flow" / f"{k:05d}.flo")
            imaging.save_mask(mask.numpy(), out / "occ" / f"{k:05d}.png")
    _write_manifest(out, "gen-data", {"pattern": args.pattern, "frames": args.frames,
                                      "velocity": list(args.velocity), "size": [height, width],
                                      "channels": args.channels, "strict": args.strict}, args.seed)
    print(f"wrote {args.pattern} data to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def resolve_config(args):
    config = preset(args.preset) if args.preset else TrainConfig(mode=args.mode)
    if args.config:
        data = yaml.safe_load(Path(args.config).read_text()) or {}
        merged = config.to_dict()
        for key, value in data.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key].update(value)
            else:
                merged[key] = value
        config = TrainConfig.from_dict(merged)
    config.mode = args.mode
    overrides = {"seed": args.seed, "steps": args.steps, "data_root": args.data,
                 "style_image": args.style_image, "crop_size": args.crop_size, "style_variant": args.variant, "policy": args.policy}
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    if args.shift_weight is not None:
        if config.mode == "style":
            config.weights.style_shift = args.shift_weight
        else:
            config.weights.shift = args.shift_weight
    if config.lr_schedule == "linear" and config.decay_start >= config.steps:
        config.decay_start = config.steps // 2
    return config.validate()


def _build_segmenter(config, sim, out):
    if config.weights.sem <= 0:
        return None
    if not sim.has_labels:
        raise ConfigError("semantic weight > 0 needs label maps under sem<X>/ "
                          "(set weights.sem: 0 to drop the semantic constraint)")
    images = torch.stack([sim[k] for k in range(len(sim))])
    labels = torch.stack([sim.labels(k) for k in range(len(sim))])
    handle = pretrain_segmenter(toy_segmenter(config.num_classes, seed=config.seed), images, labels,
                                steps=config.segmenter_steps, seed=config.seed)
    torch.save({"num_classes": config.num_classes, "state": handle.model.state_dict()}, out / "segmenter.pt")
    log.info("segmenter pixel accuracy on its training set: %.4f", pixel_accuracy(handle, images, labels))
    return handle


def _taps(config):
    if config.perceptual == "random":
        return random_taps(seed=config.seed, width_divisor=config.perceptual_width_divisor)
    return vgg19_taps(config.perceptual)


def cmd_train(args):
    config = resolve_config(args)
    if args.dry_run:
        print(yaml.safe_dump(config.to_dict(), sort_keys=True), end="")
        return 0
    if not config.data_root:
        raise ConfigError("no data directory (set data_root in the config or pass --data)")
    root = Path(config.data_root)
    if config.mode == "adapt":
        sim = imaging.DomainDataset(root, "trainA", seed=config.seed, num_classes=config.num_classes)
        real = imaging.DomainDataset(root, "trainB", seed=config.seed)
        if len(sim) == 0 or len(real) == 0:
            raise ConfigError(f"{root} needs images under trainA/ and trainB/")
        out = _prepare_out(args.out, args.force)
        segmenter = _build_segmenter(config, sim, out)
        result = train_adapt(config, sim, real, segmenter=segmenter, out_dir=out)
    else:
        frames = imaging.DomainDataset(root, "trainA", seed=config.seed)
        if len(frames) == 0:
            raise ConfigError(f"{root} needs frames under trainA/")
        if config.style_variant == "FF+flow" and not frames.has_flow:
            raise ConfigError(f"style_variant FF+flow needs flow files under {root / 'flow'}")
        if not config.style_image:
            raise ConfigError("style mode needs style_image (config key or --style-image)")
        style = imaging.load_image(config.style_image)
        out = _prepare_out(args.out, args.force)
        flows = frames.flow if config.style_variant == "FF+flow" else None
        masks = frames.mask if config.style_variant == "FF+flow" else None
        result = train_style(config, frames, style, _taps(config), out_dir=out, flows=flows, masks=masks)
    _write_manifest(out, f"train {config.mode}", config.to_dict(), config.seed)
    print(f"checkpoint: {result.checkpoint}")
    print(f"log: {out / 'train_log.csv'}")
    return 0


# ---------------------------------------------------------------------------
# translate / probe / eval


def _pick_generator(nets, direction):
    if "g" in nets:
        return nets["g"]
    key = {"r2s": "g_s", "s2r": "g_r"}[direction]
    return nets[key]


def cmd_translate(args):
    _, config, nets = load_checkpoint(args.checkpoint)
    gen = _pick_generator(nets, args.direction)
    src = Path(args.input)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory {src} does not exist")
    out = _prepare_out(args.out, args.force)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in imaging.IMAGE_SUFFIXES)
    if not files:
        log.warning("no images found in %s", src)
    with torch.no_grad():
        for path in files:
            image = imaging.load_image(path)
            imaging.save_image(gen(image), out / (path.stem + ".png"))
    _write_manifest(out, "translate", {"checkpoint": str(args.checkpoint), "input": str(src),
                                       "direction": args.direction, "count": len(files)}, config.seed)
    print(f"translated {len(files)} images into {out}")
    return 0


def _panel(moved, target):
    moved, target = moved.reshape(moved.shape[-3:]), target.reshape(target.shape[-3:])
    diff = (moved - target).abs().clamp(0, 1) * 2 - 1
    return torch.cat([moved, target, diff], dim=-1)


def cmd_probe_shift(args):
    _, config, nets = load_checkpoint(args.checkpoint)
    gen = _pick_generator(nets, args.direction)
    image = imaging.load_image(args.image)
    result = shiftops.probe_shift_invariance(gen, image, args.max_shift, axis=args.axis, policy=args.policy)
    out = _prepare_out(args.out, args.force)
    (out / "probe.csv").write_text(result.to_csv())
    for d, (moved, target) in zip(result.shifts, result.outputs):
        imaging.save_image(_panel(moved, target), out / f"panel_shift{d}.png")
    _write_manifest(out, "probe-shift", {"checkpoint": str(args.checkpoint), "image": str(args.image),
                                         "max_shift": args.max_shift, "axis": args.axis,
                                         "policy": args.policy, "direction": args.direction}, config.seed)
    print(result.to_csv(), end="")
    return 0


def load_sequences(data):
    """Sequences under ``data``: itself if it has ``trainA/``, else each such subdirectory."""
    data = Path(data)
    roots = [data] if (data / "trainA").is_dir() else sorted(p for p in data.iterdir() if (p / "trainA").is_dir())
    sequences = []
    for root in roots:
        ds = imaging.DomainDataset(root, "trainA")
        if not ds.has_flow:
            raise FormatError(f"{root}: evaluation sequences need flow files for every frame pair")
        frames = [ds[k] for k in range(len(ds))]
        sequences.append((frames, [ds.flow(k) for k in range(len(ds) - 1)],
                          [ds.mask(k) for k in range(len(ds) - 1)]))
    if not sequences:
        raise FormatError(f"no evaluation sequences under {data}")
    return sequences


def cmd_eval_temporal(args):
    sequences = load_sequences(args.data)
    names = args.names or [str(p) for p in args.checkpoints]
    if len(names) != len(args.checkpoints):
        raise ConfigError("--names must match --checkpoints one to one")
    stylizers = {}
    for name, path in zip(names, args.checkpoints):
        _, _, nets = load_checkpoint(path)
        stylizers[name] = _pick_generator(nets, args.direction)
    out = _prepare_out(args.out, args.force)
    rows = metrics.compare_variants(stylizers, sequences)
    metrics.write_ranking_csv(rows, out / "ranking.csv")
    report = {}
    for k, (name, score, reports) in enumerate(rows):
        safe = re.sub(r"[^A-Za-z0-9_.+-]+", "_", name).strip("_")
        metrics.render_error_maps(reports[0].error_maps, out / "error_maps" / f"{k + 1:02d}_{safe}")
        report[name] = {"mean_e_temporal": score, "sequences": [r.to_dict() for r in reports]}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "eval-temporal", {"checkpoints": [str(p) for p in args.checkpoints], "names": names,
                                           "data": str(args.data), "direction": args.direction}, None)
    print((out / "ranking.csv").read_text(), end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="shiftgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic sequences or the two-palette corpus")
    p.add_argument("--pattern", default="noise", choices=[*imaging.PATTERNS, "two-palette"])
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--velocity", type=_pair, default=(1, 0), help="dx,dy pixels per frame")
    p.add_argument("--size", type=_pair, default=(64, 64), help="height,width")
    p.add_argument("--channels", type=int, default=3, choices=[1, 3])
    p.add_argument("--strict", action="store_true", help="zero the occlusion mask on the wrap seam")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an adaptation pair or a stylizer")
    p.add_argument("mode", choices=["adapt", "style"])
    p.add_argument("--config", help="YAML key/value file; flags override it")
    p.add_argument("--preset", choices=["desk-adapt", "full-adapt", "desk-style", "full-style"])
    p.add_argument("--data")
    p.add_argument("--style-image")
    p.add_argument("--variant", choices=["FF", "FF+flow", "Ours"])
    p.add_argument("--policy", choices=list(shiftops.POLICIES))
    p.add_argument("--shift-weight", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="run a trained generator over a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--direction", default="r2s", choices=["r2s", "s2r"])
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("probe-shift", help="tabulate output discrepancy under integer input shifts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--max-shift", type=int, default=4)
    p.add_argument("--axis", default="x", choices=["x", "y"])
    p.add_argument("--policy", default=shiftops.OVERLAP_CROP, choices=list(shiftops.POLICIES))
    p.add_argument("--direction", default="r2s", choices=["r2s", "s2r"])
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_probe_shift)

    p = sub.add_parser("eval-temporal", help="rank checkpoints by temporal error under ground-truth flow")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--direction", default="r2s", choices=["r2s", "s2r"])
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval_temporal)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.command == "train" and not args.dry_run and not args.out:
        parser.error("train needs --out unless --dry-run is given")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, OutputExists) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, FormatError, TrainingDiverged, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
