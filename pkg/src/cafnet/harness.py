"""Ground-truth construction, training, evaluation, ablation and inference."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from . import dataio
from .confidence import GtConfig, build_confidence_gt, build_radar_image
from .errors import ConfigError, DataError, NumericError
from .losses import (DEFAULT_CAPS, METRIC_COLUMNS, MetricsReport, compute_metrics, confidence_loss,
                     depth_loss, smoothness_loss, total_loss)
from .model import CaFNet, ModelConfig
from .scene import Frame, accumulate_depth, densify_depth

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
GT_MANIFEST = "gt_manifest.json"


# --------------------------------------------------------------------------- ground truth

class GroundTruth(NamedTuple):
    depth_acc: np.ndarray  # densified
    depth_acc_raw: np.ndarray
    confidence: np.ndarray


def accumulate_all(frames: Sequence[Frame], window: int) -> list[np.ndarray]:
    """Raw (undensified) accumulated depth for every frame, within its own sequence."""
    raw: list[np.ndarray | None] = [None] * len(frames)
    for idx in dataio.sequences(list(frames)).values():
        seq = [frames[i] for i in idx]
        for pos, i in enumerate(idx):
            raw[i] = accumulate_depth(seq, pos, window, densify=False)
    return raw


def make_gt(frames: Sequence[Frame], config: GtConfig, window: int = 2,
            raw_depths: Sequence[np.ndarray] | None = None) -> list[GroundTruth]:
    if raw_depths is None:
        raw_depths = accumulate_all(frames, window)
    out = []
    for frame, raw in zip(frames, raw_depths):
        dense = densify_depth(raw)
        out.append(GroundTruth(dense, raw, build_confidence_gt(frame, dense, config)))
    return out


def save_gt(gts: Sequence[GroundTruth], manifest: dataio.DatasetManifest, path, params: dict) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for entry, gt in zip(manifest.frames, gts):
        fdir = root / entry["dir"]
        fdir.mkdir(exist_ok=True)
        dataio.write_grid(fdir / "depth_acc.bin", gt.depth_acc)
        dataio.write_grid(fdir / "depth_acc_raw.bin", gt.depth_acc_raw)
        dataio.write_grid(fdir / "confidence.bin", gt.confidence)
    info = dict(params, frame_count=len(gts), frames=[e["dir"] for e in manifest.frames])
    (root / GT_MANIFEST).write_text(json.dumps(info, indent=1))


def load_gt(path, manifest: dataio.DatasetManifest) -> list[GroundTruth]:
    root = Path(path)
    mpath = root / GT_MANIFEST
    if not mpath.exists():
        raise DataError(f"missing ground-truth manifest {mpath}")
    info = json.loads(mpath.read_text())
    if info.get("frames") != [e["dir"] for e in manifest.frames]:
        raise DataError(f"{mpath}: frame list does not match the dataset")
    return [GroundTruth(*(dataio.read_grid(root / e["dir"] / name)
                          for name in ("depth_acc.bin", "depth_acc_raw.bin", "confidence.bin")))
            for e in manifest.frames]


# --------------------------------------------------------------------------- tensors

@dataclass
class Batch:
    image: torch.Tensor
    radar: torch.Tensor
    target: torch.Tensor
    depth_gt: torch.Tensor
    conf_gt: torch.Tensor

    def flip(self) -> "Batch":
        return Batch(*(t.flip(-1) for t in self.astuple()))

    def crop(self, top: int, left: int, h: int, w: int) -> "Batch":
        return Batch(*(t[..., top:top + h, left:left + w] for t in self.astuple()))

    def astuple(self):
        return (self.image, self.radar, self.target, self.depth_gt, self.conf_gt)


def stack_samples(frames: Sequence[Frame], gts: Sequence[GroundTruth], supervise: str = "densified",
                  dtype=torch.float32) -> Batch:
    if supervise not in ("densified", "raw"):
        raise ConfigError("supervise must be 'densified' or 'raw'")
    img = np.stack([f.image.transpose(2, 0, 1) for f in frames])
    rad = np.stack([build_radar_image(f).transpose(2, 0, 1) for f in frames])
    tgt = np.stack([(g.depth_acc if supervise == "densified" else g.depth_acc_raw)[None] for g in gts])
    dgt = np.stack([f.lidar_depth[None] for f in frames])
    cgt = np.stack([g.confidence[None] for g in gts])
    return Batch(*(torch.as_tensor(a, dtype=dtype) for a in (img, rad, tgt, dgt, cgt)))


def flip_grids(grids: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Mirror H x W (x C) grids horizontally."""
    return [np.ascontiguousarray(np.flip(np.asarray(g), axis=1)) for g in grids]


# --------------------------------------------------------------------------- configs

@dataclass
class TrainConfig:
    dataset: str = ""
    gt: str | None = None
    out: str | None = None
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-4
    decay_power: float = 0.9
    max_steps: int | None = None
    seed: int = 0
    flip: bool = True
    crop: tuple | None = None  # (height, width)
    model: ModelConfig = field(default_factory=ModelConfig)
    m: float = 0.5
    lam: float = 1e-3
    tau: float = 0.4
    window: int = 2
    gt_style: str = "ours"
    patch: tuple | None = None  # (w, h); None scales 16 x 16 with resolution
    supervise: str = "densified"
    split: str = "train"
    eval_split: str | None = None  # defaults to the training split
    caps: tuple = DEFAULT_CAPS
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.crop is not None:
            self.crop = tuple(int(c) for c in self.crop)
            if len(self.crop) != 2 or any(c % self.model.divisor for c in self.crop):
                raise ConfigError(f"crop {self.crop} must be two dims divisible by {self.model.divisor}")
        if self.patch is not None:
            self.patch = tuple(int(p) for p in self.patch)
        self.caps = tuple(float(c) for c in self.caps)
        if self.supervise not in ("densified", "raw"):
            raise ConfigError("supervise must be 'densified' or 'raw'")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def gt_config(self, height: int, width: int) -> GtConfig:
        if self.patch is not None:
            return GtConfig(patch_w=self.patch[0], patch_h=self.patch[1], tau=self.tau, style=self.gt_style)
        return GtConfig.scaled(height, width, tau=self.tau, style=self.gt_style)


def poly_lr(base_lr: float, step: int, total_steps: int, power: float) -> float:
    return base_lr * max(0.0, 1.0 - step / total_steps) ** power


def set_determinism(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: CaFNet, extra: dict | None = None) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "extra": json.dumps(extra or {}),
    }, path)


def load_checkpoint(path) -> tuple[CaFNet, dict]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {blob.get('format_version')}, expected {CHECKPOINT_VERSION}")
    model = CaFNet(ModelConfig.from_dict(blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, json.loads(blob["extra"])


# --------------------------------------------------------------------------- training

@dataclass
class RunArtifact:
    model: CaFNet
    loss_log: list[dict]
    metrics: list[MetricsReport | None]
    config: dict
    wall_clock: float
    optimizer: str = "adam"
    checkpoint: str | None = None


def _prepare(config: TrainConfig, frames=None, manifest=None, gts=None):
    if frames is None:
        frames, manifest = dataio.load_dataset(config.dataset)
    if gts is None:
        if config.gt:
            gts = load_gt(config.gt, manifest)
        else:
            h, w = frames[0].shape
            gts = make_gt(frames, config.gt_config(h, w), config.window)
    return frames, manifest, gts


def _select(manifest, n: int, split: str) -> list[int]:
    if manifest is None:
        return list(range(n))
    idx = manifest.split(split)
    if not idx:
        raise DataError(f"split {split!r} is empty")
    return idx


def train(config: TrainConfig, frames=None, manifest=None, gts=None) -> RunArtifact:
    """Minimise the combined loss end to end with Adam and polynomial learning-rate decay."""
    set_determinism(config.threads)
    t0 = time.perf_counter()
    frames, manifest, gts = _prepare(config, frames, manifest, gts)
    train_idx = _select(manifest, len(frames), config.split)
    data = stack_samples([frames[i] for i in train_idx], [gts[i] for i in train_idx], config.supervise)
    n, _, h, w = data.image.shape
    config.model.check_dims(h, w)

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    model = CaFNet(config.model, seed=config.seed)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    loss_log = []
    step = 0
    while step < total_steps:
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if step >= total_steps:
                break
            idx = torch.as_tensor(order[start:start + config.batch_size])
            batch = Batch(*(t[idx] for t in data.astuple()))
            if config.flip and rng.random() < 0.5:
                batch = batch.flip()
            if config.crop is not None:
                ch, cw = config.crop
                top, left = int(rng.integers(h - ch + 1)), int(rng.integers(w - cw + 1))
                batch = batch.crop(top, left, ch, cw)

            lr = poly_lr(config.lr, step, total_steps, config.decay_power)
            for group in optimizer.param_groups:
                group["lr"] = lr
            parts = compute_losses(model, batch, config)
            if not torch.isfinite(parts.total):
                raise NumericError(f"non-finite loss at step {step}")
            optimizer.zero_grad()
            parts.total.backward()
            optimizer.step()
            loss_log.append({"step": step, "lr": lr, **parts.as_floats()})
            step += 1

    eval_idx = _select(manifest, len(frames), config.eval_split or config.split)
    metrics = evaluate_model(model, [frames[i] for i in eval_idx], config.caps)
    artifact = RunArtifact(model, loss_log, metrics, config.to_dict(), time.perf_counter() - t0)
    if config.out:
        write_run(artifact, config.out)
    return artifact


def compute_losses(model: CaFNet, batch: Batch, config: TrainConfig):
    out = model(batch.image, batch.radar)
    l_depth = depth_loss(out.coarse, out.final, batch.target, config.m)
    l_smooth = smoothness_loss(out.final, batch.image)
    l_conf = confidence_loss(out.confidence, batch.conf_gt) if out.confidence is not None \
        else torch.zeros((), dtype=out.final.dtype)
    return total_loss(l_depth, l_smooth, l_conf, config.lam)


def write_run(artifact: RunArtifact, out) -> None:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    ckpt = root / "checkpoint.pt"
    save_checkpoint(ckpt, artifact.model, {"train_config": artifact.config})
    artifact.checkpoint = str(ckpt)
    with open(root / "loss_log.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "lr", "l_depth", "l_smooth", "l_conf", "total"])
        for rec in artifact.loss_log:
            wr.writerow([rec["step"]] + [repr(rec[k]) for k in ("lr", "l_depth", "l_smooth", "l_conf", "total")])
    write_metrics_table(artifact.metrics, root / "metrics", artifact.config.get("caps", DEFAULT_CAPS))
    (root / "run.json").write_text(json.dumps({
        "config": artifact.config,
        "seed": artifact.config.get("seed"),
        "optimizer": artifact.optimizer,
        "wall_clock_s": artifact.wall_clock,
        "steps": len(artifact.loss_log),
    }, indent=1))


# --------------------------------------------------------------------------- evaluation

@torch.no_grad()
def predict(model: CaFNet, frames: Sequence[Frame], batch_size: int = 8):
    """Per-frame ``(final, coarse, confidence)`` numpy grids; confidence may be None."""
    model.eval()
    dtype = next(model.parameters()).dtype
    results = []
    for start in range(0, len(frames), batch_size):
        chunk = frames[start:start + batch_size]
        img = torch.as_tensor(np.stack([f.image.transpose(2, 0, 1) for f in chunk]), dtype=dtype)
        rad = torch.as_tensor(np.stack([build_radar_image(f).transpose(2, 0, 1) for f in chunk]), dtype=dtype)
        out = model(img, rad)
        for k in range(len(chunk)):
            conf = out.confidence[k, 0].numpy() if out.confidence is not None else None
            results.append((out.final[k, 0].numpy(), out.coarse[k, 0].numpy(), conf))
    return results


def pooled_metrics(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                   caps: Sequence[float] = DEFAULT_CAPS) -> list[MetricsReport | None]:
    """One report per cap over the union of all frames' valid pixels; None for an empty cap."""
    pred = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in preds])
    gt = np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in gts])
    rows = []
    for cap in caps:
        try:
            rows.append(compute_metrics(pred, gt, cap))
        except DataError:
            rows.append(None)
    return rows


def evaluate_model(model: CaFNet, frames: Sequence[Frame], caps=DEFAULT_CAPS) -> list[MetricsReport | None]:
    preds = [p[0] for p in predict(model, frames)]
    return pooled_metrics(preds, [f.lidar_depth for f in frames], caps)


def evaluate(checkpoint, dataset, caps=DEFAULT_CAPS, split: str | None = None) -> list[MetricsReport | None]:
    """Metrics of the final depth against single-frame lidar depth, one row per cap."""
    model, _ = load_checkpoint(checkpoint)
    frames, manifest = dataio.load_dataset(dataset)
    idx = _select(manifest, len(frames), split) if split else list(range(len(frames)))
    return evaluate_model(model, [frames[i] for i in idx], caps)


def metrics_rows(reports, caps) -> list[list]:
    rows = []
    for cap, rep in zip(caps, reports):
        rows.append(rep.row() if rep is not None else [float(cap)] + ["empty"] * 8 + [0])
    return rows


def format_markdown(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    cells = [list(header)] + [[fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |" for r in cells]
    lines.insert(1, "|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(lines) + "\n"


def write_table(header, rows, stem) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in r])
    stem.with_suffix(".md").write_text(format_markdown(header, rows))


def write_metrics_table(reports, stem, caps) -> None:
    write_table(METRIC_COLUMNS, metrics_rows(reports, caps), stem)


# --------------------------------------------------------------------------- ablation

ABLATION_COLUMNS = ("variant", "mae", "rmse", "absrel", "d1", "status", "seed", "dataset")


def radarnet_patch(height: int, width: int) -> tuple[int, int]:
    """Fixed region with the same image fraction as 288 x 900 on a 900 x 1600 image."""
    return max(1, round(width * 900 / 1600)), max(1, round(height * 288 / 900))


def fixed_patch(height: int, width: int) -> tuple[int, int]:
    """Per-point neighbourhood, tall and narrow (elevation is the uncertain axis)."""
    return max(1, round(width / 16)), max(1, round(height / 4))


def ablation_variants(base: TrainConfig, height: int, width: int) -> list[tuple[str, TrainConfig]]:
    m = base.model
    def with_model(**kw):
        return replace(base, model=replace(m, **kw))
    return [
        ("GT from fixed large region", replace(base, gt_style="fixed-patch", patch=radarnet_patch(height, width))),
        ("GT from fixed patch", replace(base, gt_style="fixed-patch", patch=fixed_patch(height, width))),
        ("w/o RM", with_model(use_rm=False)),
        ("CAGF->Add", with_model(fusion="add", radar2_widths=m.image_widths)),
        ("CAGF->Concat", with_model(fusion="concat")),
        ("CAGF->GF", with_model(fusion="gf")),
        ("w/o confidence", with_model(use_confidence=False, fusion="gf")),
        ("w/o SCM", with_model(use_scm=False)),
        ("Ours", base),
    ]


def ablate(config: TrainConfig, out=None, frames=None, manifest=None, cap: float = 80.0) -> list[list]:
    """Train and evaluate every ablation variant; a failing variant is reported, not raised."""
    if frames is None:
        frames, manifest = dataio.load_dataset(config.dataset)
    ds_hash = dataio.dataset_hash(config.dataset) if config.dataset else "in-memory"
    h, w = frames[0].shape
    raw = accumulate_all(frames, config.window)
    gt_cache: dict = {}
    rows = []
    for name, variant in ablation_variants(config, h, w):
        variant = replace(variant, out=None, caps=(cap,))
        try:
            gcfg = variant.gt_config(h, w)
            if gcfg not in gt_cache:
                gt_cache[gcfg] = make_gt(frames, gcfg, variant.window, raw)
            art = train(variant, frames, manifest, gt_cache[gcfg])
            rep = art.metrics[0]
            if rep is None:
                raise DataError(f"no valid pixels within {cap} m")
            rows.append([name, rep.mae, rep.rmse, rep.absrel, rep.delta1, "ok", config.seed, ds_hash])
        except Exception as exc:  # noqa: BLE001 - a failed variant must not stop the grid
            log.warning("ablation variant %s failed: %s", name, exc)
            rows.append([name, "", "", "", "", f"failed: {exc}", config.seed, ds_hash])
    if out is not None:
        write_table(ABLATION_COLUMNS, rows, Path(out) / "ablation")
    return rows


# --------------------------------------------------------------------------- inference

def preview(grid: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Linear map [lo, hi] -> [0, 255], round half to even, as uint8."""
    scaled = np.clip((np.asarray(grid, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0) * 255.0
    return np.rint(scaled).astype(np.uint8)


def infer(checkpoint, frame: Frame, out) -> dict[str, Path]:
    from PIL import Image

    model, _ = load_checkpoint(checkpoint)
    h, w = frame.shape
    model.config.check_dims(h, w)
    final, coarse, conf = predict(model, [frame])[0]
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    grids = {"final": (final, cfg.d_min, cfg.d_max), "coarse": (coarse, cfg.d_min, cfg.d_max)}
    if conf is not None:
        grids["confidence"] = (conf, 0.0, 1.0)
    written = {}
    for name, (grid, lo, hi) in grids.items():
        dataio.write_grid(root / f"{name}.bin", grid)
        Image.fromarray(preview(grid, lo, hi), mode="L").save(root / f"{name}.png")
        written[name] = root / f"{name}.bin"
    return written
