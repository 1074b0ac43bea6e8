"""BCE loss and the five segmentation metrics: Dice, IoU, F1, HD, ASD.

Masks are 2-D boolean arrays. Boundary-distance metrics operate on pixel
centers under 4-connectivity: a foreground pixel belongs to the boundary when
any 4-neighbor is background or lies outside the image. Consequently only a
mask with no foreground at all has an empty boundary, and that raises
EmptyBoundaryError rather than inventing a distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyBoundaryError, ShapeMismatchError
from .tensor import Tensor, clip

__all__ = [
    "bce_loss",
    "dice",
    "iou",
    "f1_micro",
    "boundary",
    "hausdorff",
    "asd",
    "SampleMetrics",
    "MetricsReport",
]

_CLAMP = 1e-7


def bce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, -[y log x + (1-y) log(1-x)], unit weights.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"prediction shape {pred.shape} != target shape {target.shape}"
        )
    y = target.astype(pred.dtype)
    x = clip(pred, _CLAMP, 1.0 - _CLAMP)
    losses = -(Tensor(y) * x.log() + Tensor(1.0 - y) * (1.0 - x).log())
    return losses.mean()


def _as_binary(p, g) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p).astype(bool)
    g = np.asarray(g).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice(p, g) -> float:
    """2*sum(pg) / (sum(p^2) + sum(g^2)); 1.0 when both masks are empty."""
    p, g = _as_binary(p, g)
    pf = p.astype(np.float64)
    gf = g.astype(np.float64)
    denom = (pf * pf).sum() + (gf * gf).sum()
    if denom == 0.0:
        return 1.0
    return float(2.0 * (pf * gf).sum() / denom)


def iou(p, g) -> float:
    """|p AND g| / |p OR g|; 1.0 when both masks are empty."""
    p, g = _as_binary(p, g)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def f1_micro(p, g) -> float:
    """F1 micro-averaged over both classes (pixel-wise, foreground and background)."""
    p, g = _as_binary(p, g)
    tp = fp = fn = 0
    for cls in (True, False):
        pc = p == cls
        gc = g == cls
        tp += int(np.logical_and(pc, gc).sum())
        fp += int(np.logical_and(pc, ~gc).sum())
        fn += int(np.logical_and(~pc, gc).sum())
    return float(2 * tp / (2 * tp + fp + fn))


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background or out-of-image 4-neighbor."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1)
    surrounded = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~surrounded


def _boundary_distances(p, g) -> tuple[np.ndarray, np.ndarray]:
    p, g = _as_binary(p, g)
    pb = np.argwhere(boundary(p)).astype(np.float64)
    gb = np.argwhere(boundary(g)).astype(np.float64)
    if len(pb) == 0 or len(gb) == 0:
        raise EmptyBoundaryError("a mask has no foreground; distances undefined")
    d_pg = cKDTree(gb).query(pb)[0]
    d_gp = cKDTree(pb).query(gb)[0]
    return d_pg, d_gp


def hausdorff(p, g) -> float:
    """max over both directed max-min Euclidean boundary distances."""
    d_pg, d_gp = _boundary_distances(p, g)
    return float(max(d_pg.max(), d_gp.max()))


def asd(p, g) -> float:
    """Mean of the pooled nearest-boundary distances in both directions."""
    d_pg, d_gp = _boundary_distances(p, g)
    return float(np.concatenate([d_pg, d_gp]).mean())


@dataclass
class SampleMetrics:
    sample_id: str
    dice: float
    iou: float
    f1: float
    hd: float | None
    asd: float | None


@dataclass
class MetricsReport:
    """Per-sample metrics plus averages; HD/ASD averages skip excluded samples."""

    samples: list[SampleMetrics]

    @property
    def mean_dice(self) -> float:
        return float(np.mean([s.dice for s in self.samples]))

    @property
    def mean_iou(self) -> float:
        return float(np.mean([s.iou for s in self.samples]))

    @property
    def mean_f1(self) -> float:
        return float(np.mean([s.f1 for s in self.samples]))

    @property
    def mean_hd(self) -> float | None:
        values = [s.hd for s in self.samples if s.hd is not None]
        return float(np.mean(values)) if values else None

    @property
    def mean_asd(self) -> float | None:
        values = [s.asd for s in self.samples if s.asd is not None]
        return float(np.mean(values)) if values else None

    @property
    def distance_excluded(self) -> int:
        return sum(1 for s in self.samples if s.hd is None)

    def csv_lines(self) -> list[str]:
        def cell(v: float | None) -> str:
            return "" if v is None else f"{v:.6f}"

        lines = ["id,dice,iou,f1,hd,asd"]
        for s in self.samples:
            lines.append(
                f"{s.sample_id},{s.dice:.6f},{s.iou:.6f},{s.f1:.6f},"
                f"{cell(s.hd)},{cell(s.asd)}"
            )
        lines.append(
            f"mean,{self.mean_dice:.6f},{self.mean_iou:.6f},{self.mean_f1:.6f},"
            f"{cell(self.mean_hd)},{cell(self.mean_asd)}"
        )
        return lines

    def format_table(self) -> str:
        def cell(v: float | None) -> str:
            return "-" if v is None else f"{v:.4f}"

        header = f"{'id':>12} {'dice':>8} {'iou':>8} {'f1':>8} {'hd':>8} {'asd':>8}"
        rows = [header]
        for s in self.samples:
            rows.append(
                f"{s.sample_id:>12} {s.dice:8.4f} {s.iou:8.4f} {s.f1:8.4f} "
                f"{cell(s.hd):>8} {cell(s.asd):>8}"
            )
        rows.append(
            f"{'mean':>12} {self.mean_dice:8.4f} {self.mean_iou:8.4f} "
            f"{self.mean_f1:8.4f} {cell(self.mean_hd):>8} {cell(self.mean_asd):>8}"
        )
        if self.distance_excluded:
            rows.append(
                f"(HD/ASD undefined for {self.distance_excluded} sample(s); "
                "excluded from those averages)"
            )
        return "\n".join(rows)
