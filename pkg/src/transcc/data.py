"""Synthetic vessel phantoms, PGM image I/O, and dataset manifest handling.

A phantom is a grayscale image of 1-4 bright curvilinear tubes (cubic Bezier
centerlines rasterized with a Gaussian cross-section) over distractor blobs
and pixel noise; the mask is the union of tube supports. Generation is a pure
function of (config, index), so a dataset is reproducible from its seed.

Files live as ``<dir>/samples/<id>_img.pgm`` (16-bit) and
``<id>_mask.pgm`` (8-bit), indexed by a tab-separated ``manifest.tsv`` with
lines ``<id>\\t<img>\\t<mask>\\t<split>`` sorted by id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    EmptySplitError,
    InvalidConfigError,
    MalformedPgmError,
    MissingPairError,
)
from .tensor import Tensor

__all__ = [
    "PhantomConfig",
    "generate_phantom",
    "write_pgm",
    "read_pgm",
    "write_sample",
    "read_sample",
    "generate_dataset",
    "build_manifest",
    "load_dataset",
    "Record",
    "Dataset",
    "SampleBatch",
    "batch_stream",
]

IMAGE_MAXVAL = 65535
MASK_MAXVAL = 255


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 224
    vessels_min: int = 1
    vessels_max: int = 4
    width_min: float = 2.0
    width_max: float = 6.0
    contrast: float = 0.9
    noise_sigma: float = 0.03
    distractors: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 16:
            raise InvalidConfigError(
                f"image_size {self.image_size} must be a positive multiple of 16"
            )
        if not 1 <= self.vessels_min <= self.vessels_max:
            raise InvalidConfigError(
                f"vessel count range [{self.vessels_min}, {self.vessels_max}] invalid"
            )
        if not 0 < self.width_min <= self.width_max:
            raise InvalidConfigError(
                f"width range [{self.width_min}, {self.width_max}] invalid"
            )
        if self.width_max >= self.image_size / 8:
            raise InvalidConfigError(
                f"width_max {self.width_max} must stay below image_size/8"
            )
        if not 0.0 < self.contrast <= 1.0:
            raise InvalidConfigError(f"contrast {self.contrast} must be in (0, 1]")
        if self.noise_sigma < 0:
            raise InvalidConfigError(f"noise_sigma {self.noise_sigma} must be >= 0")
        if self.distractors < 0:
            raise InvalidConfigError(f"distractors {self.distractors} must be >= 0")


def _bezier(points: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Cubic Bezier positions for parameters ts; points: (4, 2)."""
    p0, p1, p2, p3 = points
    u = 1.0 - ts
    return (
        (u**3)[:, None] * p0
        + (3 * u**2 * ts)[:, None] * p1
        + (3 * u * ts**2)[:, None] * p2
        + (ts**3)[:, None] * p3
    )


def generate_phantom(cfg: PhantomConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (image float32 in [0,1], mask bool) for (cfg.seed, index)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    rows, cols = np.mgrid[0:size, 0:size]
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    image = np.zeros((size, size), dtype=np.float64)
    mask = np.zeros((size, size), dtype=bool)

    margin = 0.05 * size
    n_vessels = int(rng.integers(cfg.vessels_min, cfg.vessels_max + 1))
    for _ in range(n_vessels):
        width = float(rng.uniform(cfg.width_min, cfg.width_max))
        # Endpoints far apart keep tubes long; a bounded control polygon caps
        # arc length so foreground stays a small fraction of the image.
        while True:
            ends = rng.uniform(margin, size - margin, size=(2, 2))
            if np.linalg.norm(ends[0] - ends[1]) >= 0.7 * size:
                break
        while True:
            mids = rng.uniform(margin, size - margin, size=(2, 2))
            ctrl = np.array([ends[0], mids[0], mids[1], ends[1]])
            polygon = np.linalg.norm(np.diff(ctrl, axis=0), axis=1).sum()
            if polygon <= 1.6 * size:
                break
        ts = np.linspace(0.0, 1.0, 6 * size)
        curve = _bezier(ctrl, ts)
        dist = cKDTree(curve).query(pixels)[0].reshape(size, size)
        sigma = width / 2.0
        np.maximum(image, cfg.contrast * np.exp(-0.5 * (dist / sigma) ** 2), out=image)
        mask |= dist <= width / 2.0

    for _ in range(cfg.distractors):
        center = rng.uniform(0, size, size=2)
        axes = rng.uniform(0.02 * size, 0.08 * size, size=2)
        theta = rng.uniform(0.0, np.pi)
        amplitude = rng.uniform(0.2, 0.5) * cfg.contrast
        dr = rows - center[0]
        dc = cols - center[1]
        u = dr * np.cos(theta) + dc * np.sin(theta)
        v = -dr * np.sin(theta) + dc * np.cos(theta)
        r2 = (u / axes[0]) ** 2 + (v / axes[1]) ** 2
        np.maximum(image, amplitude * np.exp(-r2), out=image)

    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=(size, size))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


# --- PGM I/O ---------------------------------------------------------------


def write_pgm(path: Path, values: np.ndarray, maxval: int) -> None:
    """Binary (P5) PGM; 16-bit samples are big-endian per the format."""
    h, w = values.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(header + values.astype(dtype).tobytes())


def read_pgm(path: Path) -> tuple[np.ndarray, int]:
    """Returns (integer samples (H, W), maxval); raises MalformedPgmError."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise MalformedPgmError(f"{path}: not a binary PGM (bad magic)")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise MalformedPgmError(f"{path}: bad header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise MalformedPgmError(f"{path}: bad dimensions {w}x{h} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = w * h * dtype.itemsize
    payload = raw[pos : pos + expected]
    if len(payload) != expected or pos + expected != len(raw):
        raise MalformedPgmError(f"{path}: payload size mismatch")
    values = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    if values.max(initial=0) > maxval:
        raise MalformedPgmError(f"{path}: sample exceeds maxval {maxval}")
    return values.astype(np.int64), maxval


def write_sample(directory: Path, sample_id: str, image: np.ndarray, mask: np.ndarray) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    quantized = np.round(image.astype(np.float64) * IMAGE_MAXVAL).astype(np.uint16)
    write_pgm(directory / f"{sample_id}_img.pgm", quantized, IMAGE_MAXVAL)
    write_pgm(
        directory / f"{sample_id}_mask.pgm",
        mask.astype(np.uint8) * MASK_MAXVAL,
        MASK_MAXVAL,
    )


def read_sample(image_path: Path, mask_path: Path) -> tuple[np.ndarray, np.ndarray]:
    """(image float32 in [0,1], mask bool); masks must be strictly {0, 255}."""
    values, maxval = read_pgm(image_path)
    image = (values / maxval).astype(np.float32)
    mvalues, _ = read_pgm(mask_path)
    if not np.isin(mvalues, (0, MASK_MAXVAL)).all():
        raise MalformedPgmError(f"{mask_path}: mask values must be 0 or {MASK_MAXVAL}")
    return image, mvalues == MASK_MAXVAL


# --- dataset ---------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    sample_id: str
    image_path: Path
    mask_path: Path
    split: str


@dataclass
class SampleBatch:
    images: Tensor  # (B, 1, H, W) in [0, 1]
    masks: np.ndarray  # (B, H, W) bool
    ids: list[str]


class Dataset:
    def __init__(self, root: Path, records: list[Record]) -> None:
        self.root = Path(root)
        self.records = records

    def split(self, name: str) -> list[Record]:
        selected = [r for r in self.records if r.split == name]
        if not selected:
            raise EmptySplitError(f"split {name!r} has no samples in {self.root}")
        return selected

    def load_batch(self, records: list[Record]) -> SampleBatch:
        images = []
        masks = []
        for record in records:
            image, mask = read_sample(record.image_path, record.mask_path)
            images.append(image[None])
            masks.append(mask)
        return SampleBatch(
            images=Tensor(np.stack(images)),
            masks=np.stack(masks),
            ids=[r.sample_id for r in records],
        )


def generate_dataset(
    root: Path, count: int, cfg: PhantomConfig, train_fraction: float = 0.8
) -> Path:
    """Write ``count`` phantoms plus a manifest under ``root``; returns manifest path."""
    cfg.validate()
    root = Path(root)
    samples = root / "samples"
    samples.mkdir(parents=True, exist_ok=True)
    for index in range(count):
        image, mask = generate_phantom(cfg, index)
        write_sample(samples, f"{index:04d}", image, mask)
    return build_manifest(root, seed=cfg.seed, train_fraction=train_fraction)


def build_manifest(root: Path, seed: int, train_fraction: float = 0.8) -> Path:
    """Scan ``root``/samples for ``*_img.pgm`` pairs; write the sorted manifest."""
    if not 0.0 <= train_fraction <= 1.0:
        raise InvalidConfigError(f"train_fraction {train_fraction} not in [0, 1]")
    root = Path(root)
    samples = root / "samples"
    ids = sorted(p.name[: -len("_img.pgm")] for p in samples.glob("*_img.pgm"))
    for sample_id in ids:
        if not (samples / f"{sample_id}_mask.pgm").exists():
            raise MissingPairError(f"sample {sample_id!r} has no mask file")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    train_ids = {ids[i] for i in order[:n_train]}
    lines = []
    for sample_id in ids:
        split = "train" if sample_id in train_ids else "test"
        lines.append(
            f"{sample_id}\tsamples/{sample_id}_img.pgm\t"
            f"samples/{sample_id}_mask.pgm\t{split}"
        )
    manifest = root / "manifest.tsv"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def load_dataset(root: Path) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.tsv"
    records: list[Record] = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise MissingPairError(f"malformed manifest line: {line!r}")
        sample_id, img, mask, split = parts
        img_path = root / img
        mask_path = root / mask
        if not img_path.exists() or not mask_path.exists():
            raise MissingPairError(f"sample {sample_id!r} files missing on disk")
        records.append(Record(sample_id, img_path, mask_path, split))
    return Dataset(root, records)


def batch_stream(records: list[Record], batch_size: int, seed: int):
    """Infinite batch iterator; epoch k's order is default_rng([seed, k]).

    Full batches only; a trailing partial epoch chunk is dropped unless the
    whole split is smaller than one batch, in which case the epoch is one
    short batch.
    """
    epoch = 0
    while True:
        order = np.random.default_rng([seed, epoch]).permutation(len(records))
        if len(records) < batch_size:
            yield [records[i] for i in order]
        else:
            for start in range(0, len(records) - batch_size + 1, batch_size):
                yield [records[i] for i in order[start : start + batch_size]]
        epoch += 1
