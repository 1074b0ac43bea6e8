"""Adam optimizer, training/evaluation loops, and the binary checkpoint format.

Checkpoint layout (all integers little-endian u32): magic ``TCC1``, format
version, byte length of the config block, the config as key-sorted
``key=value`` text, then each named tensor in model traversal order as
(name_len, name utf-8, rank, dims..., float32 payload). Records run to end of
file; loading rebuilds the model from the config and requires an exact
name/shape match, so a round trip reproduces every parameter bitwise.
"""

from __future__ import annotations

import math
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import Dataset, batch_stream
from .errors import (
    BadCheckpointError,
    EmptyBoundaryError,
    InvalidConfigError,
    MissingGradientError,
    NanLossError,
)
from .layers import Parameter
from .metrics import MetricsReport, SampleMetrics, asd, bce_loss, dice, f1_micro, hausdorff, iou
from .model import ModelConfig, TransCC
from .tensor import Tape

__all__ = [
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
    "train_model",
    "evaluate",
]

CHECKPOINT_MAGIC = b"TCC1"
CHECKPOINT_VERSION = 1


class Adam:
    """Standard Adam with bias correction and a shared step counter."""

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradientError(
                    f"parameter {i} (shape {p.shape}) has no gradient"
                )
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# --- checkpoints -------------------------------------------------------------


def _config_to_text(config: ModelConfig) -> str:
    lines = []
    for key in sorted(f.name for f in fields(ModelConfig)):
        value = getattr(config, key)
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> ModelConfig:
    known = {f.name: f.type for f in fields(ModelConfig)}
    values: dict[str, object] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        if key not in known:
            raise BadCheckpointError(f"unknown config key {key!r} in checkpoint")
        if key in ("taps", "stem_channels", "decoder_channels", "skip_channels"):
            values[key] = tuple(int(v) for v in raw.split(",")) if raw else ()
        elif key == "dropout":
            values[key] = float(raw)
        elif key == "variant":
            values[key] = raw
        else:
            values[key] = int(raw)
    try:
        config = ModelConfig(**values)
        config.validate()
    except (TypeError, ValueError, InvalidConfigError) as err:
        raise BadCheckpointError(f"checkpoint config invalid: {err}") from err
    return config


def save_checkpoint(path: Path, model: TransCC) -> None:
    config_bytes = _config_to_text(model.config).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
    ]
    for name, holder in model.named_tensors():
        data = np.ascontiguousarray(holder.data, dtype="<f4")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _read_exact(raw: bytes, pos: int, count: int, what: str) -> tuple[bytes, int]:
    if pos + count > len(raw):
        raise BadCheckpointError(f"truncated checkpoint while reading {what}")
    return raw[pos : pos + count], pos + count


def read_checkpoint(path: Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Parse a checkpoint into (config, name -> float32 array)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise BadCheckpointError(f"cannot read checkpoint {path}: {err}") from err
    magic, pos = _read_exact(raw, 0, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise BadCheckpointError(f"{path}: bad magic {magic!r}")
    version_bytes, pos = _read_exact(raw, pos, 4, "version")
    version = struct.unpack("<I", version_bytes)[0]
    if version != CHECKPOINT_VERSION:
        raise BadCheckpointError(f"{path}: unsupported version {version}")
    len_bytes, pos = _read_exact(raw, pos, 4, "config length")
    config_bytes, pos = _read_exact(raw, pos, struct.unpack("<I", len_bytes)[0], "config")
    try:
        config = _config_from_text(config_bytes.decode("utf-8"))
    except UnicodeDecodeError as err:
        raise BadCheckpointError(f"{path}: config block not utf-8") from err
    tensors: dict[str, np.ndarray] = {}
    while pos < len(raw):
        len_bytes, pos = _read_exact(raw, pos, 4, "tensor name length")
        name_bytes, pos = _read_exact(raw, pos, struct.unpack("<I", len_bytes)[0], "name")
        rank_bytes, pos = _read_exact(raw, pos, 4, "rank")
        rank = struct.unpack("<I", rank_bytes)[0]
        dim_bytes, pos = _read_exact(raw, pos, 4 * rank, "dims")
        dims = struct.unpack(f"<{rank}I", dim_bytes)
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload, pos = _read_exact(raw, pos, 4 * count, "tensor payload")
        tensors[name_bytes.decode("utf-8")] = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return config, tensors


def load_checkpoint(path: Path) -> TransCC:
    """Rebuild the model; every stored tensor must match a model tensor exactly."""
    config, tensors = read_checkpoint(path)
    model = TransCC(config, seed=0)
    remaining = dict(tensors)
    for name, holder in model.named_tensors():
        if name not in remaining:
            raise BadCheckpointError(f"checkpoint missing tensor {name!r}")
        stored = remaining.pop(name)
        if stored.shape != holder.data.shape:
            raise BadCheckpointError(
                f"tensor {name!r} shape {stored.shape} != model {holder.data.shape}"
            )
        holder.data = stored.astype(np.float32).copy()
    if remaining:
        raise BadCheckpointError(f"checkpoint has extra tensors: {sorted(remaining)}")
    return model


# --- loops -------------------------------------------------------------------


def train_model(
    model: TransCC,
    dataset: Dataset,
    iterations: int,
    batch_size: int = 4,
    lr: float = 1e-3,
    seed: int = 0,
    out_dir: Path | None = None,
    checkpoint_every: int = 0,
) -> list[tuple[int, float]]:
    """Run the BCE/Adam loop on the train split; returns the (iteration, loss) trace.

    Writes ``checkpoint_<iter>.tcc`` every ``checkpoint_every`` iterations and
    ``checkpoint_final.tcc`` plus ``loss.csv`` at the end when ``out_dir`` is set.
    """
    records = dataset.split("train")
    model.train()
    optimizer = Adam(model.parameters(), lr=lr)
    batches = batch_stream(records, batch_size, seed)
    trace: list[tuple[int, float]] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for iteration in range(1, iterations + 1):
        batch = dataset.load_batch(next(batches))
        with Tape() as tape:
            probs = model(batch.images)
            loss = bce_loss(probs[:, 1], batch.masks)
            tape.backward(loss)
        value = float(loss.data)
        if math.isnan(value):
            raise NanLossError(f"loss became NaN at iteration {iteration}")
        optimizer.step()
        optimizer.zero_grad()
        trace.append((iteration, value))
        if (
            out_dir is not None
            and checkpoint_every
            and iteration % checkpoint_every == 0
        ):
            save_checkpoint(out_dir / f"checkpoint_{iteration:06d}.tcc", model)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final.tcc", model)
        lines = ["iteration,loss"] + [f"{i},{v:.8f}" for i, v in trace]
        (out_dir / "loss.csv").write_text("".join(line + "\n" for line in lines))
    return trace


def evaluate(
    model: TransCC,
    dataset: Dataset,
    split: str = "test",
    batch_size: int = 4,
    threshold: float = 0.5,
) -> MetricsReport:
    """All five metrics per sample; HD/ASD are None where a boundary is empty."""
    records = dataset.split(split)
    model.eval()
    samples: list[SampleMetrics] = []
    for start in range(0, len(records), batch_size):
        batch = dataset.load_batch(records[start : start + batch_size])
        probs = model(batch.images).data
        predictions = probs[:, 1] > threshold
        for pred, target, sample_id in zip(predictions, batch.masks, batch.ids):
            try:
                hd_value, asd_value = hausdorff(pred, target), asd(pred, target)
            except EmptyBoundaryError:
                hd_value = asd_value = None
            samples.append(
                SampleMetrics(
                    sample_id,
                    dice(pred, target),
                    iou(pred, target),
                    f1_micro(pred, target),
                    hd_value,
                    asd_value,
                )
            )
    return MetricsReport(samples)
