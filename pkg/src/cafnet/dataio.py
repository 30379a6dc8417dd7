"""Dataset persistence.

Layout of a dataset directory::

    manifest.json
    frame_00000/image.bin   H x W x 3 float32 grid
    frame_00000/lidar.bin   H x W float64 grid
    frame_00000/radar.csv   x,y,z,vx,vy,rcs,is_ghost
    frame_00000/boxes.csv   cx,cy,cz,sx,sy,sz,yaw,x1,y1,x2,y2
    frame_00000/camera.json intrinsics and pose

Grid files start with an 8-byte magic that encodes the element type, followed by a
little-endian uint32 rank and uint32 dims, then raw little-endian data. Floats in
CSV/JSON are written with ``repr`` so every value round-trips bit-exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ManifestError
from .scene import BBox3D, CameraIntrinsics, Frame, Pose, RadarPoint

FORMAT_VERSION = 1
CHANNEL_LAYOUT_VERSION = 1
MANIFEST_NAME = "manifest.json"

_MAGIC = {np.dtype("<f4"): b"CAFGRF32", np.dtype("<f8"): b"CAFGRF64"}
_DTYPE = {v: k for k, v in _MAGIC.items()}

RADAR_COLUMNS = ("x", "y", "z", "vx", "vy", "rcs", "is_ghost")
BOX_COLUMNS = ("cx", "cy", "cz", "sx", "sy", "sz", "yaw", "x1", "y1", "x2", "y2")
FRAME_FILES = ("image.bin", "lidar.bin", "radar.csv", "boxes.csv", "camera.json")


def write_grid(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    dtype = grid.dtype.newbyteorder("<")
    if dtype not in _MAGIC:
        raise DataError(f"unsupported grid dtype {grid.dtype}")
    header = _MAGIC[dtype] + struct.pack(f"<I{grid.ndim}I", grid.ndim, *grid.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid, dtype=dtype).tobytes())


def read_grid(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read grid file {path}: {exc}") from exc
    if len(raw) < 12 or raw[:8] not in _DTYPE:
        raise DataError(f"{path}: bad grid header")
    dtype = _DTYPE[raw[:8]]
    (ndim,) = struct.unpack_from("<I", raw, 8)
    offset = 12 + 4 * ndim
    if ndim > 8 or len(raw) < offset:
        raise DataError(f"{path}: truncated grid header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 12)
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise DataError(f"{path}: truncated or oversized grid data "
                        f"({len(raw) - offset} bytes, expected {expected})")
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape).copy()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class DatasetManifest:
    frame_count: int
    height: int
    width: int
    seed: int
    frames: list = field(default_factory=list)  # dicts: dir, sequence, index, split, checksums
    channel_layout_version: int = CHANNEL_LAYOUT_VERSION
    format_version: int = FORMAT_VERSION
    config: dict = field(default_factory=dict)

    def split(self, name: str) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f["split"] == name]


def assign_splits(frames: list[Frame], fractions: dict[str, float] | None = None) -> list[str]:
    """Assign whole sequences to splits in order; default puts everything in ``train``."""
    if not fractions:
        return ["train"] * len(frames)
    seqs = sorted({f.sequence for f in frames})
    bounds, acc = [], 0.0
    total = sum(fractions.values())
    for name, frac in fractions.items():
        acc += frac / total
        bounds.append((acc, name))
    seq_split = {}
    for i, s in enumerate(seqs):
        pos = (i + 0.5) / len(seqs)
        seq_split[s] = next(name for b, name in bounds if pos <= b + 1e-12)
    return [seq_split[f.sequence] for f in frames]


def save_dataset(frames: list[Frame], manifest: DatasetManifest, path) -> DatasetManifest:
    """Write frames and a manifest whose frame list (with checksums) is filled in here."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    splits = [f.get("split", "train") for f in manifest.frames] if manifest.frames else ["train"] * len(frames)
    entries = []
    for i, frame in enumerate(frames):
        fdir = root / f"frame_{i:05d}"
        fdir.mkdir(exist_ok=True)
        write_grid(fdir / "image.bin", frame.image.astype(np.float32, copy=False))
        write_grid(fdir / "lidar.bin", frame.lidar_depth.astype(np.float64, copy=False))
        with open(fdir / "radar.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(RADAR_COLUMNS)
            for p in frame.radar_points:
                wr.writerow([repr(float(v)) for v in (*p.position, p.vx, p.vy, p.rcs)] + [int(p.is_ghost)])
        with open(fdir / "boxes.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(BOX_COLUMNS)
            for b in frame.boxes:
                wr.writerow([repr(float(v)) for v in (*b.center, *b.size, b.yaw)] + list(b.corners2d))
        camera = {
            "intrinsics": asdict(frame.intrinsics),
            "rotation": frame.pose.rotation.tolist(),
            "translation": frame.pose.translation.tolist(),
        }
        (fdir / "camera.json").write_text(json.dumps(camera, indent=1))
        entries.append({
            "dir": fdir.name,
            "sequence": frame.sequence,
            "index": frame.index,
            "split": splits[i],
            "checksums": {name: _sha256(fdir / name) for name in FRAME_FILES},
        })
    manifest.frames = entries
    manifest.frame_count = len(frames)
    (root / MANIFEST_NAME).write_text(json.dumps(asdict(manifest), indent=1))
    return manifest


def load_manifest(path) -> DatasetManifest:
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise ManifestError(f"missing manifest {mpath}")
    try:
        data = json.loads(mpath.read_text())
        manifest = DatasetManifest(**data)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ManifestError(f"{mpath}: malformed manifest ({exc})") from exc
    if manifest.format_version != FORMAT_VERSION:
        raise ManifestError(f"{mpath}: format version {manifest.format_version}, expected {FORMAT_VERSION}")
    if manifest.channel_layout_version != CHANNEL_LAYOUT_VERSION:
        raise ManifestError(f"{mpath}: channel layout version {manifest.channel_layout_version} unsupported")
    on_disk = sorted(p.name for p in root.glob("frame_*") if p.is_dir())
    listed = sorted(f["dir"] for f in manifest.frames)
    if manifest.frame_count != len(manifest.frames) or on_disk != listed:
        raise ManifestError(f"{mpath}: manifest lists {manifest.frame_count} frames "
                            f"but {len(on_disk)} frame directories exist")
    return manifest


def _read_csv(path: Path, columns) -> list[list[str]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != tuple(columns):
        raise DataError(f"{path}: unexpected header {rows[:1]}")
    if any(len(r) != len(columns) for r in rows[1:]):
        raise DataError(f"{path}: malformed row")
    return rows[1:]


def load_frame(root: Path, entry: dict, verify: bool = True) -> Frame:
    fdir = root / entry["dir"]
    for name in FRAME_FILES:
        fpath = fdir / name
        if not fpath.exists():
            raise DataError(f"missing frame file {fpath}")
        if verify and _sha256(fpath) != entry["checksums"][name]:
            raise DataError(f"checksum failure for {fpath}")
    image = read_grid(fdir / "image.bin")
    lidar = read_grid(fdir / "lidar.bin")
    points = [RadarPoint(np.array([float(r[0]), float(r[1]), float(r[2])]), float(r[3]), float(r[4]),
                         float(r[5]), bool(int(r[6])))
              for r in _read_csv(fdir / "radar.csv", RADAR_COLUMNS)]
    boxes = [BBox3D(np.array([float(v) for v in r[0:3]]), np.array([float(v) for v in r[3:6]]),
                    float(r[6]), tuple(int(v) for v in r[7:11]))
             for r in _read_csv(fdir / "boxes.csv", BOX_COLUMNS)]
    try:
        camera = json.loads((fdir / "camera.json").read_text())
        intrinsics = CameraIntrinsics(**camera["intrinsics"])
        pose = Pose(np.array(camera["rotation"]), np.array(camera["translation"]))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{fdir / 'camera.json'}: malformed ({exc})") from exc
    return Frame(image, points, lidar, boxes, intrinsics, pose, entry["sequence"], entry["index"])


def load_dataset(path, verify: bool = True) -> tuple[list[Frame], DatasetManifest]:
    root = Path(path)
    manifest = load_manifest(root)
    frames = [load_frame(root, entry, verify) for entry in manifest.frames]
    return frames, manifest


def frames_equal(a: Frame, b: Frame) -> bool:
    """Bitwise comparison of every grid and point attribute."""
    def same(x, y):
        x, y = np.asarray(x), np.asarray(y)
        return x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()

    if not (same(a.image, b.image) and same(a.lidar_depth, b.lidar_depth)):
        return False
    if a.intrinsics != b.intrinsics or (a.sequence, a.index) != (b.sequence, b.index):
        return False
    if not (same(a.pose.rotation, b.pose.rotation) and same(a.pose.translation, b.pose.translation)):
        return False
    if len(a.radar_points) != len(b.radar_points) or len(a.boxes) != len(b.boxes):
        return False
    for p, q in zip(a.radar_points, b.radar_points):
        if not same(p.position, q.position) or p.is_ghost != q.is_ghost:
            return False
        if not same([p.vx, p.vy, p.rcs], [q.vx, q.vy, q.rcs]):
            return False
    for p, q in zip(a.boxes, b.boxes):
        if not (same(p.center, q.center) and same(p.size, q.size) and p.yaw == q.yaw
                and p.corners2d == q.corners2d):
            return False
    return True


def sequences(frames: list[Frame]) -> dict[int, list[int]]:
    """Map sequence id to dataset indices ordered by in-sequence index."""
    out: dict[int, list[int]] = {}
    for i, f in enumerate(frames):
        out.setdefault(f.sequence, []).append(i)
    for idx in out.values():
        idx.sort(key=lambda i: frames[i].index)
    return out


def dataset_hash(path) -> str:
    """Digest of the manifest's per-file checksums; identifies a dataset's content."""
    manifest = load_manifest(path)
    h = hashlib.sha256()
    for entry in manifest.frames:
        for name in FRAME_FILES:
            h.update(entry["checksums"][name].encode())
    return h.hexdigest()[:16]
