"""Tests for Adam, the checkpoint format, and the train/evaluate loops."""

import math
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np
import pytest

from transcc.data import (
    Dataset,
    PhantomConfig,
    Record,
    generate_dataset,
    load_dataset,
    write_sample,
)
from transcc.errors import (
    BadCheckpointError,
    MissingGradientError,
    NanLossError,
)
from transcc.layers import Parameter
from transcc.model import ModelConfig, TransCC
from transcc.tensor import Tensor
from transcc.training import (
    Adam,
    evaluate,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    train_model,
)

TINY = dict(
    image_size=32,
    embed_dim=16,
    depth=2,
    heads=2,
    expansion=2,
    dropout=0.0,
    taps=(1, 2),
    stem_channels=(2, 3, 4, 6),
    decoder_channels=(6, 6, 4, 4),
    skip_channels=(6,),
)

TINY_PHANTOMS = PhantomConfig(image_size=32, width_min=1.0, width_max=2.0, seed=5)


def adam_reference(p0: float, grads: list[float], lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam in pure Python floats."""
    p, m, v = float(p0), 0.0, 0.0
    history = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= lr * m_hat / (math.sqrt(v_hat) + eps)
        history.append(p)
    return history


class TestAdam:
    def test_matches_scalar_reference(self):
        grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 0.9, -0.9, 1.5, 0.01]
        param = Parameter(np.array([0.5], dtype=np.float64))
        optimizer = Adam([param], lr=1e-3)
        expected = adam_reference(0.5, grads)
        for g, want in zip(grads, expected):
            param.grad = np.array([g], dtype=np.float64)
            optimizer.step()
            assert abs(float(param.data[0]) - want) < 1e-12

    def test_first_step_moves_by_learning_rate(self):
        # With a single step, m_hat/sqrt(v_hat) = sign(g), so the update is
        # essentially -lr regardless of gradient magnitude.
        for g in (3.0, 0.01, -250.0):
            param = Parameter(np.array([1.0], dtype=np.float64))
            optimizer = Adam([param], lr=0.1)
            param.grad = np.array([g], dtype=np.float64)
            optimizer.step()
            assert float(param.data[0]) == pytest.approx(1.0 - math.copysign(0.1, g), rel=1e-6)

    def test_zero_gradient_is_fixed_point(self):
        param = Parameter(np.array([2.5], dtype=np.float64))
        optimizer = Adam([param])
        for _ in range(3):
            param.grad = np.zeros(1)
            optimizer.step()
        assert float(param.data[0]) == 2.5

    def test_converges_on_quadratic(self):
        param = Parameter(np.array([0.0], dtype=np.float64))
        optimizer = Adam([param], lr=0.1)
        for _ in range(300):
            param.grad = 2.0 * (param.data - 3.0)
            optimizer.step()
        assert abs(float(param.data[0]) - 3.0) < 1e-3

    def test_missing_gradient_raises(self):
        first = Parameter(np.zeros(2))
        second = Parameter(np.zeros((3, 3)))
        optimizer = Adam([first, second])
        first.grad = np.ones(2)
        with pytest.raises(MissingGradientError, match=r"\(3, 3\)"):
            optimizer.step()
        # A failed step must not advance the shared counter.
        assert optimizer.t == 0

    def test_step_counter_shared(self):
        params = [Parameter(np.zeros(1)), Parameter(np.zeros(1))]
        optimizer = Adam(params)
        for _ in range(3):
            for p in params:
                p.grad = np.ones(1)
            optimizer.step()
        assert optimizer.t == 3

    def test_updates_in_place(self):
        param = Parameter(np.array([1.0]))
        buffer = param.data
        optimizer = Adam([param])
        param.grad = np.ones(1)
        optimizer.step()
        assert param.data is buffer

    def test_zero_grad_clears(self):
        params = [Parameter(np.zeros(1)), Parameter(np.zeros(1))]
        optimizer = Adam(params)
        for p in params:
            p.grad = np.ones(1)
        optimizer.zero_grad()
        assert all(p.grad is None for p in params)


# --- checkpoint format --------------------------------------------------------


def encode_checkpoint(config_text: str, tensors) -> bytes:
    """Independent encoder following the documented byte layout."""
    config_bytes = config_text.encode("utf-8")
    out = [b"TCC1", struct.pack("<I", 1), struct.pack("<I", len(config_bytes)), config_bytes]
    for name, array in tensors:
        data = np.ascontiguousarray(array, dtype="<f4")
        name_bytes = name.encode("utf-8")
        out.append(struct.pack("<I", len(name_bytes)))
        out.append(name_bytes)
        out.append(struct.pack("<I", data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.tobytes())
    return b"".join(out)


def tiny_config_text() -> str:
    config = ModelConfig(**TINY)
    lines = []
    for key in sorted(f.name for f in fields(ModelConfig)):
        value = getattr(config, key)
        text = ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


class TestCheckpoint:
    def test_save_matches_documented_layout(self, tmp_path):
        model = TransCC(ModelConfig(**TINY), seed=4)
        path = tmp_path / "model.tcc"
        save_checkpoint(path, model)
        expected = encode_checkpoint(
            tiny_config_text(), [(n, h.data) for n, h in model.named_tensors()]
        )
        assert path.read_bytes() == expected

    def test_round_trip_bitwise(self, tmp_path):
        model = TransCC(ModelConfig(**TINY), seed=4)
        path = tmp_path / "model.tcc"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for (name_a, a), (name_b, b) in zip(model.named_tensors(), loaded.named_tensors()):
            assert name_a == name_b
            assert a.data.tobytes() == b.data.tobytes()

    def test_save_load_save_byte_identical(self, tmp_path):
        model = TransCC(ModelConfig(**TINY), seed=4)
        first = tmp_path / "a.tcc"
        second = tmp_path / "b.tcc"
        save_checkpoint(first, model)
        save_checkpoint(second, load_checkpoint(first))
        assert first.read_bytes() == second.read_bytes()

    def test_read_checkpoint_parses_all_tensors(self, tmp_path):
        model = TransCC(ModelConfig(**TINY), seed=4)
        path = tmp_path / "model.tcc"
        save_checkpoint(path, model)
        config, tensors = read_checkpoint(path)
        assert config == model.config
        names = [n for n, _ in model.named_tensors()]
        assert list(tensors) == names
        for name, holder in model.named_tensors():
            assert np.array_equal(tensors[name], holder.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tcc"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(BadCheckpointError, match="magic"):
            read_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "bad.tcc"
        path.write_bytes(b"TCC1" + struct.pack("<I", 2) + struct.pack("<I", 0))
        with pytest.raises(BadCheckpointError, match="version"):
            read_checkpoint(path)

    def test_truncations(self, tmp_path):
        model = TransCC(ModelConfig(**TINY), seed=4)
        path = tmp_path / "model.tcc"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        bad = tmp_path / "bad.tcc"
        for cut in (2, 6, 10, 40, len(raw) - 3):
            bad.write_bytes(raw[:cut])
            with pytest.raises(BadCheckpointError):
                read_checkpoint(bad)

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.tcc"
        path.write_bytes(encode_checkpoint("bogus=1\n", []))
        with pytest.raises(BadCheckpointError, match="bogus"):
            read_checkpoint(path)

    def test_invalid_config_value(self, tmp_path):
        text = tiny_config_text().replace("image_size=32", "image_size=33")
        path = tmp_path / "bad.tcc"
        path.write_bytes(encode_checkpoint(text, []))
        with pytest.raises(BadCheckpointError):
            read_checkpoint(path)

    def test_config_not_utf8(self, tmp_path):
        path = tmp_path / "bad.tcc"
        payload = b"\xff\xfe\xfd"
        path.write_bytes(b"TCC1" + struct.pack("<I", 1) + struct.pack("<I", 3) + payload)
        with pytest.raises(BadCheckpointError):
            read_checkpoint(path)

    def test_missing_tensor_on_load(self, tmp_path):
        model = TransCC(ModelConfig(**TINY), seed=4)
        tensors = [(n, h.data) for n, h in model.named_tensors()]
        path = tmp_path / "bad.tcc"
        path.write_bytes(encode_checkpoint(tiny_config_text(), tensors[:-1]))
        with pytest.raises(BadCheckpointError, match="missing tensor"):
            load_checkpoint(path)

    def test_extra_tensor_on_load(self, tmp_path):
        model = TransCC(ModelConfig(**TINY), seed=4)
        tensors = [(n, h.data) for n, h in model.named_tensors()]
        tensors.append(("unrelated.weight", np.zeros((2, 2), dtype=np.float32)))
        path = tmp_path / "bad.tcc"
        path.write_bytes(encode_checkpoint(tiny_config_text(), tensors))
        with pytest.raises(BadCheckpointError, match="extra"):
            load_checkpoint(path)

    def test_shape_mismatch_on_load(self, tmp_path):
        model = TransCC(ModelConfig(**TINY), seed=4)
        tensors = [
            (n, h.data.reshape(h.data.shape[::-1]) if n == "embed.convs.0.weight" else h.data)
            for n, h in model.named_tensors()
        ]
        path = tmp_path / "bad.tcc"
        path.write_bytes(encode_checkpoint(tiny_config_text(), tensors))
        with pytest.raises(BadCheckpointError, match="shape"):
            load_checkpoint(path)

    def test_nonexistent_path(self, tmp_path):
        with pytest.raises(BadCheckpointError):
            read_checkpoint(tmp_path / "nope.tcc")


# --- train loop ----------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyds")
    generate_dataset(root, count=4, cfg=TINY_PHANTOMS, train_fraction=1.0)
    return load_dataset(root)


class TestTrainModel:
    def test_zero_iterations_is_noop(self, tiny_dataset, tmp_path):
        model = TransCC(ModelConfig(**TINY), seed=0)
        before = {n: h.data.copy() for n, h in model.named_tensors()}
        trace = train_model(model, tiny_dataset, iterations=0, out_dir=tmp_path)
        assert trace == []
        for name, holder in model.named_tensors():
            assert np.array_equal(holder.data, before[name]), name
        assert (tmp_path / "checkpoint_final.tcc").exists()
        assert (tmp_path / "loss.csv").read_text() == "iteration,loss\n"

    def test_ten_iterations_bitwise_deterministic(self, tiny_dataset, tmp_path):
        traces = []
        blobs = []
        for run in ("a", "b"):
            model = TransCC(ModelConfig(**TINY), seed=0)
            trace = train_model(
                model, tiny_dataset, iterations=10, batch_size=2, lr=1e-3, seed=0
            )
            save_checkpoint(tmp_path / f"{run}.tcc", model)
            traces.append(trace)
            blobs.append((tmp_path / f"{run}.tcc").read_bytes())
        assert traces[0] == traces[1]
        assert blobs[0] == blobs[1]

    def test_trace_numbering_and_loss_file(self, tiny_dataset, tmp_path):
        model = TransCC(ModelConfig(**TINY), seed=0)
        trace = train_model(
            model,
            tiny_dataset,
            iterations=6,
            batch_size=2,
            seed=0,
            out_dir=tmp_path,
            checkpoint_every=3,
        )
        assert [i for i, _ in trace] == list(range(1, 7))
        assert all(math.isfinite(v) for _, v in trace)
        assert (tmp_path / "checkpoint_000003.tcc").exists()
        assert (tmp_path / "checkpoint_000006.tcc").exists()
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "iteration,loss"
        assert len(lines) == 7
        assert lines[1] == f"1,{trace[0][1]:.8f}"
        # The final checkpoint reflects the trained weights.
        final = load_checkpoint(tmp_path / "checkpoint_final.tcc")
        for (_, a), (_, b) in zip(final.named_tensors(), model.named_tensors()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_loss_decreases_on_tiny_overfit(self, tiny_dataset):
        model = TransCC(ModelConfig(**TINY), seed=0)
        trace = train_model(model, tiny_dataset, iterations=30, batch_size=2, seed=0)
        first = sum(v for _, v in trace[:5]) / 5
        last = sum(v for _, v in trace[-5:]) / 5
        assert last < first

    def test_nan_loss_raises(self, tiny_dataset):
        model = TransCC(ModelConfig(**TINY), seed=0)
        # Poison the classification head: its logits feed softmax directly, so
        # the NaN reaches the loss (earlier layers would launder NaN through
        # the zero branch of ReLU).
        handle = dict(model.named_tensors())["decoder.head.weight"]
        handle.data[:] = np.nan
        with pytest.raises(NanLossError, match="iteration 1"):
            train_model(model, tiny_dataset, iterations=1, batch_size=2)


# --- evaluate ------------------------------------------------------------------


class _StubModel:
    """Duck-typed model returning fixed foreground probabilities per sample."""

    def __init__(self, prob_fn):
        self.prob_fn = prob_fn
        self.eval_called = False

    def eval(self):
        self.eval_called = True
        return self

    def __call__(self, images: Tensor) -> Tensor:
        batch = images.data.shape[0]
        size = images.data.shape[2]
        fg = np.stack([self.prob_fn(images.data[b, 0]) for b in range(batch)])
        return Tensor(np.stack([1.0 - fg, fg], axis=1))


def _disk_dataset(tmp_path: Path, masks: list[np.ndarray], split: str = "test") -> Dataset:
    samples = tmp_path / "samples"
    records = []
    for i, mask in enumerate(masks):
        sample_id = f"{i:04d}"
        image = mask.astype(np.float32) * 0.5 + 0.25
        write_sample(samples, sample_id, image, mask)
        records.append(
            Record(
                sample_id,
                samples / f"{sample_id}_img.pgm",
                samples / f"{sample_id}_mask.pgm",
                split,
            )
        )
    return Dataset(tmp_path, records)


def _block_mask(r0, r1, c0, c1, size=16):
    mask = np.zeros((size, size), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


class TestEvaluate:
    def test_perfect_model_scores_perfectly(self, tmp_path):
        masks = [_block_mask(2, 6, 3, 9), _block_mask(8, 12, 1, 5), _block_mask(0, 3, 0, 16)]
        dataset = _disk_dataset(tmp_path, masks)
        # Reconstruct the mask from the image encoding used by _disk_dataset.
        stub = _StubModel(lambda img: np.where(img > 0.5, 0.9, 0.1))
        report = evaluate(stub, dataset, split="test", batch_size=2)
        assert stub.eval_called
        assert [s.sample_id for s in report.samples] == ["0000", "0001", "0002"]
        for sample in report.samples:
            assert sample.dice == 1.0
            assert sample.iou == 1.0
            assert sample.f1 == 1.0
            assert sample.hd == 0.0
            assert sample.asd == 0.0
        assert report.mean_dice == 1.0
        assert report.mean_hd == 0.0

    def test_all_background_prediction_excluded_from_distances(self, tmp_path):
        dataset = _disk_dataset(tmp_path, [_block_mask(4, 8, 4, 8)])
        stub = _StubModel(lambda img: np.full_like(img, 0.02))
        report = evaluate(stub, dataset)
        sample = report.samples[0]
        assert sample.dice == 0.0
        assert sample.hd is None and sample.asd is None
        assert report.mean_hd is None and report.mean_asd is None

    def test_split_selection(self, tmp_path):
        train_dir = tmp_path / "train_side"
        test_dir = tmp_path / "test_side"
        train_ds = _disk_dataset(train_dir, [_block_mask(1, 3, 1, 3)], split="train")
        test_ds = _disk_dataset(test_dir, [_block_mask(1, 3, 1, 3), _block_mask(5, 9, 5, 9)])
        records = train_ds.records + test_ds.records
        dataset = Dataset(tmp_path, records)
        stub = _StubModel(lambda img: np.where(img > 0.5, 0.9, 0.1))
        assert len(evaluate(stub, dataset, split="train").samples) == 1
        assert len(evaluate(stub, dataset, split="test").samples) == 2

    def test_threshold_controls_binarization(self, tmp_path):
        full = np.ones((16, 16), dtype=bool)
        dataset = _disk_dataset(tmp_path, [full])
        stub = _StubModel(lambda img: np.full_like(img, 0.4))
        assert evaluate(stub, dataset, threshold=0.3).samples[0].dice == 1.0
        assert evaluate(stub, dataset, threshold=0.5).samples[0].dice == 0.0

    def test_partial_final_batch_included(self, tmp_path):
        masks = [_block_mask(i + 1, i + 4, 2, 6) for i in range(5)]
        dataset = _disk_dataset(tmp_path, masks)
        stub = _StubModel(lambda img: np.where(img > 0.5, 0.9, 0.1))
        report = evaluate(stub, dataset, batch_size=2)
        assert len(report.samples) == 5
        assert report.mean_dice == 1.0
