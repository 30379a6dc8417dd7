"""Command-line entry point: ``cafnet <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import dataio, harness
from .confidence import GtConfig
from .errors import CafnetError, ConfigError
from .losses import DEFAULT_CAPS
from .scene import SceneConfig, generate_dataset

log = logging.getLogger("cafnet")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _pick(args, cfg: dict, name: str, default=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


def _parse_patch(text) -> tuple[int, int] | None:
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return int(text[0]), int(text[1])
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise ConfigError(f"patch must look like WxH, got {text!r}") from exc


def _parse_caps(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(c) for c in text)
    try:
        return tuple(float(c) for c in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"caps must be comma-separated numbers, got {text!r}") from exc


def cmd_generate_data(args) -> None:
    cfg = _read_config(args.config)
    n_sequences = int(cfg.pop("n_sequences", 1))
    splits = cfg.pop("splits", None)
    seed = int(_pick(args, cfg, "seed", 0))
    cfg.pop("seed", None)
    scene = SceneConfig.from_dict(cfg)
    frames = generate_dataset(scene, seed, n_sequences)
    manifest = dataio.DatasetManifest(
        frame_count=len(frames), height=scene.height, width=scene.width, seed=seed,
        frames=[{"split": s} for s in dataio.assign_splits(frames, splits)],
        config=dict(cfg, n_sequences=n_sequences, splits=splits))
    dataio.save_dataset(frames, manifest, args.out)
    print(f"wrote {len(frames)} frames to {args.out}")


def cmd_make_gt(args) -> None:
    cfg = _read_config(args.config)
    data = _pick(args, cfg, "data")
    if data is None:
        raise ConfigError("make-gt needs --data")
    out = _pick(args, cfg, "out", data)
    frames, manifest = dataio.load_dataset(data)
    h, w = frames[0].shape
    tau = float(_pick(args, cfg, "tau", 0.4))
    style = _pick(args, cfg, "gt_style", "ours")
    window = int(_pick(args, cfg, "window", 2))
    patch = _parse_patch(_pick(args, cfg, "patch"))
    if patch is None:
        gcfg = GtConfig.scaled(h, w, tau=tau, style=style)
    else:
        gcfg = GtConfig(patch_w=patch[0], patch_h=patch[1], tau=tau, style=style)
    gts = harness.make_gt(frames, gcfg, window)
    harness.save_gt(gts, manifest, out, {
        "tau": tau, "patch": [gcfg.patch_w, gcfg.patch_h], "window": window, "gt_style": style,
        "dataset": str(data), "dataset_hash": dataio.dataset_hash(data)})
    print(f"wrote ground truth for {len(gts)} frames to {out}")


def _train_config(args) -> harness.TrainConfig:
    cfg = _read_config(args.config)
    for key in ("seed", "out"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "data", None):
        cfg["dataset"] = args.data
    if getattr(args, "gt", None):
        cfg["gt"] = args.gt
    tc = harness.TrainConfig.from_dict(cfg)
    if getattr(args, "variant", None):
        tc = replace(tc, model=replace(tc.model, fusion=args.variant))
    if not tc.dataset:
        raise ConfigError("no dataset given (config key 'dataset' or --data)")
    return tc


def cmd_train(args) -> None:
    tc = _train_config(args)
    if tc.out is None:
        raise ConfigError("train needs an output directory (--out or config key 'out')")
    art = harness.train(tc)
    print(f"trained {len(art.loss_log)} steps, final loss {art.loss_log[-1]['total']:.4f}; "
          f"artifacts in {tc.out}")
    print(harness.format_markdown(
        ("max_dist", "mae", "rmse", "absrel", "log10", "rmselog", "d1", "d2", "d3", "n_valid"),
        harness.metrics_rows(art.metrics, tc.caps)))


def cmd_evaluate(args) -> None:
    cfg = _read_config(args.config)
    checkpoint = _pick(args, cfg, "checkpoint")
    data = _pick(args, cfg, "data")
    if checkpoint is None or data is None:
        raise ConfigError("evaluate needs --checkpoint and --data")
    caps = _parse_caps(_pick(args, cfg, "caps", list(DEFAULT_CAPS)))
    split = _pick(args, cfg, "split")
    reports = harness.evaluate(checkpoint, data, caps, split)
    rows = harness.metrics_rows(reports, caps)
    out = _pick(args, cfg, "out")
    if out:
        harness.write_metrics_table(reports, Path(out) / "evaluation", caps)
    print(harness.format_markdown(
        ("max_dist", "mae", "rmse", "absrel", "log10", "rmselog", "d1", "d2", "d3", "n_valid"), rows))


def cmd_ablate(args) -> None:
    tc = _train_config(args)
    out = tc.out or "ablation_out"
    rows = harness.ablate(replace(tc, out=None), out)
    print(harness.format_markdown(harness.ABLATION_COLUMNS, rows))


def cmd_infer(args) -> None:
    cfg = _read_config(args.config)
    checkpoint = _pick(args, cfg, "checkpoint")
    data = _pick(args, cfg, "data")
    out = _pick(args, cfg, "out")
    if checkpoint is None or data is None or out is None:
        raise ConfigError("infer needs --checkpoint, --data and --out")
    index = int(_pick(args, cfg, "frame", 0))
    root = Path(data)
    manifest = dataio.load_manifest(root)
    if not 0 <= index < manifest.frame_count:
        raise ConfigError(f"frame {index} outside dataset of {manifest.frame_count} frames")
    frame = dataio.load_frame(root, manifest.frames[index])
    written = harness.infer(checkpoint, frame, out)
    print("wrote " + ", ".join(str(p) for p in written.values()))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cafnet", description="Radar-camera depth estimation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("make-gt", help="build accumulated depth and confidence ground truth")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--tau", type=float)
    p.add_argument("--patch", help="WxH noise patch, e.g. 16x16")
    p.add_argument("--window", type=int)
    p.add_argument("--gt-style", dest="gt_style", choices=("ours", "fixed-patch"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_make_gt)

    for name, func, helptext in (("train", cmd_train, "train a model"),
                                 ("ablate", cmd_ablate, "train and evaluate the ablation grid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--data")
        p.add_argument("--gt")
        p.add_argument("--variant", choices=("cagf", "gf", "add", "concat"))
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint at several distance caps")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--caps")
    p.add_argument("--split")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("infer", help="write depth and confidence maps for one frame")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--frame", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CafnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
