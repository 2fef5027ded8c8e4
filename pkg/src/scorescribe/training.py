"""Adam training loop with CTC loss, checkpointing and deterministic resume.

Checkpoint wire format (all little-endian):

    magic "R2CK" | u32 version | u32 len + UTF-8 JSON meta block
    | u32 len + UTF-8 vocabulary block (one token per line)
    | u32 tensor count
    | per tensor: u32 name len + name, u8 dtype tag (1=f32, 2=f64),
      u32 rank, rank * u64 extents, raw values, u64 checksum of the values
    | u64 checksum over every preceding byte

Checksums are 8-byte BLAKE2b digests read as little-endian integers. The
byte stream is a pure function of the checkpoint contents.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import RunningStats, Tensor, add, no_grad, scale
from .ctc import ctc_loss, greedy_decode
from .data import Batch, Sample, Vocabulary, make_batch
from .layers import ParamRegistry
from .metrics import EvalReport, evaluate_pairs
from .model import ArchConfig, TranscriptionModel

CHECKPOINT_MAGIC = b"R2CK"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Non-finite value encountered during optimization."""


class CheckpointError(RuntimeError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Adam with bias correction; updates applied in float32."""

    def __init__(self, registry: ParamRegistry, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.registry = registry
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in registry.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in registry.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.registry.items():
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= self.lr * update


def clip_gradients(registry: ParamRegistry, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in registry:
        if p._grad is not None:
            total += float((p._grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in registry:
            if p._grad is not None:
                p._grad = p._grad * np.asarray(factor, dtype=p._grad.dtype)
    return norm


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    arch: ArchConfig
    vocab: Vocabulary
    params: dict[str, np.ndarray]
    bn_stats: dict[str, RunningStats]
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    adam: dict | None = None  # {"lr","beta1","beta2","eps","t","m":{..},"v":{..}}
    tags: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _digest64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


_DTYPE_TAGS = {1: np.float32, 2: np.float64}
_TAGS_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    tag = _TAGS_BY_DTYPE.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    name_b = name.encode("utf-8")
    raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    head = struct.pack("<I", len(name_b)) + name_b
    head += struct.pack("<BI", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + raw + struct.pack("<Q", _digest64(raw))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointChecksumError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _collect_tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    tensors = dict(ckpt.params)
    for name, st in ckpt.bn_stats.items():
        tensors[f"{name}.running_mean"] = st.mean
        tensors[f"{name}.running_var"] = st.var
    if ckpt.adam is not None:
        for name, arr in ckpt.adam["m"].items():
            tensors[f"adam.m.{name}"] = arr
        for name, arr in ckpt.adam["v"].items():
            tensors[f"adam.v.{name}"] = arr
    return tensors


def checkpoint_save(ckpt: Checkpoint, path):
    meta = {
        "arch": ckpt.arch.to_dict(),
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "tags": dict(ckpt.tags),
        "param_names": list(ckpt.params),
        "bn_state_names": list(ckpt.bn_stats),
        "bn_initialized": [n for n, s in ckpt.bn_stats.items() if s.initialized],
        "adam": None
        if ckpt.adam is None
        else {k: ckpt.adam[k] for k in ("lr", "beta1", "beta2", "eps", "t")},
    }
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    vocab_b = "".join(t + "\n" for t in ckpt.vocab.tokens).encode("utf-8")

    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", ckpt.version)
    body += struct.pack("<I", len(meta_b)) + meta_b
    body += struct.pack("<I", len(vocab_b)) + vocab_b
    tensors = _collect_tensors(ckpt)
    body += struct.pack("<I", len(tensors))
    for name in tensors:  # insertion order: params, bn stats, adam moments
        body += _pack_tensor(name, tensors[name])
    body += struct.pack("<Q", _digest64(bytes(body)))
    Path(path).write_bytes(bytes(body))


def checkpoint_load(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic, not a checkpoint file")
    if len(blob) < 16:
        raise CheckpointChecksumError("checkpoint truncated")
    tail = struct.unpack("<Q", blob[-8:])[0]
    if _digest64(blob[:-8]) != tail:
        raise CheckpointChecksumError(f"{path}: file checksum mismatch")
    r = _Reader(blob[:-8])
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    vocab = Vocabulary.from_text(r.take(r.u32()).decode("utf-8"))
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        tag = r.u8()
        dtype = _DTYPE_TAGS.get(tag)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize if rank else np.dtype(dtype).itemsize
        raw = r.take(nbytes)
        if _digest64(raw) != r.u64():
            raise CheckpointChecksumError(f"{path}: checksum mismatch for tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype).reshape(shape)

    params = {n: tensors[n] for n in meta["param_names"]}  # astype above already copied
    bn_stats = {}
    initialized = set(meta["bn_initialized"])
    for n in meta["bn_state_names"]:
        bn_stats[n] = RunningStats(
            mean=tensors[f"{n}.running_mean"].copy(),
            var=tensors[f"{n}.running_var"].copy(),
            initialized=n in initialized,
        )
    adam = None
    if meta["adam"] is not None:
        adam = dict(meta["adam"])
        adam["m"] = {n: tensors[f"adam.m.{n}"].copy() for n in meta["param_names"]}
        adam["v"] = {n: tensors[f"adam.v.{n}"].copy() for n in meta["param_names"]}
    return Checkpoint(
        arch=ArchConfig.from_dict(meta["arch"]),
        vocab=vocab,
        params=params,
        bn_stats=bn_stats,
        step=int(meta["step"]),
        epoch=int(meta["epoch"]),
        rng_state=meta["rng_state"],
        adam=adam,
        tags=dict(meta.get("tags", {})),
        version=version,
    )


def snapshot_model(model: TranscriptionModel, vocab: Vocabulary, *, step=0, epoch=0,
                   rng_state=None, optimizer: Adam | None = None, tags=None) -> Checkpoint:
    registry = model.registry()
    adam = None
    if optimizer is not None:
        adam = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "t": optimizer.t,
            "m": {n: optimizer.m[n].copy() for n in registry.names()},
            "v": {n: optimizer.v[n].copy() for n in registry.names()},
        }
    return Checkpoint(
        arch=model.config,
        vocab=vocab,
        params={n: p.data.copy() for n, p in registry.items()},
        bn_stats={n: s.copy() for n, s in model.bn_states().items()},
        step=optimizer.t if optimizer is not None else step,
        epoch=epoch,
        rng_state=rng_state,
        adam=adam,
        tags=dict(tags or {}),
    )


def restore_model(ckpt: Checkpoint, seed: int = 0) -> TranscriptionModel:
    """Instantiate a model and overwrite its tensors with checkpoint values."""
    model = TranscriptionModel(ckpt.arch, seed)
    registry = model.registry()
    if set(registry.names()) != set(ckpt.params):
        raise CheckpointError("checkpoint parameter names do not match the architecture")
    for name, p in registry.items():
        arr = ckpt.params[name]
        if tuple(arr.shape) != p.shape:
            raise CheckpointError(f"checkpoint tensor {name!r} has shape {arr.shape}, expected {p.shape}")
        p.data = arr.astype(p.dtype).copy()
    states = model.bn_states()
    for name, st in ckpt.bn_stats.items():
        if name not in states:
            raise CheckpointError(f"checkpoint has unknown batch-norm state {name!r}")
        states[name].mean = st.mean.copy()
        states[name].var = st.var.copy()
        states[name].initialized = st.initialized
    return model


# ---------------------------------------------------------------------------
# evaluation helper


def evaluate_model(model: TranscriptionModel, samples, vocab: Vocabulary, tags=None) -> EvalReport:
    """Greedy-decode every sample at its true width and score SER/ER."""
    triples = []
    with no_grad():
        for s in samples:
            lattice = model.lattice(s.image, "eval")
            pred = vocab.decode(greedy_decode(lattice.log_probs, vocab.blank_id))
            triples.append((s.id, s.tokens, pred))
    return evaluate_pairs(triples, tags=tags)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSettings:
    lr: float = 1e-3
    max_epochs: int = 50
    batch_size: int = 16
    clip_norm: float | None = 5.0
    seed: int = 7
    target_ser: float | None = None  # early stop once val SER <= target...
    target_er: float | None = None   # ...and val ER <= this (if set)
    min_epochs: int = 10


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ser: float
    val_er: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_ser:.4f}\t{self.val_er:.4f}"


@dataclass
class TrainResult:
    records: list[EpochRecord]
    best_epoch: int
    best_ser: float
    best_er: float
    stopped_early: bool


def batch_loss(model: TranscriptionModel, batch: Batch) -> Tensor:
    """Mean per-sample CTC loss over one batch (train mode).

    Each sample runs at its true width, so batch normalization sees the
    statistics evaluation will see and padded columns never touch the
    recurrent stack; the batch is the unit of gradient accumulation.
    """
    total = None
    for i, (width, label) in enumerate(zip(batch.widths, batch.labels)):
        image = Tensor(batch.images.data[i : i + 1, :, :, :width])
        [lattice] = model.forward(image, [width], "train")
        term = ctc_loss(lattice, label)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / len(batch))


def train(
    model: TranscriptionModel,
    train_samples: list[Sample],
    val_samples: list[Sample],
    vocab: Vocabulary,
    settings: TrainSettings,
    out_dir=None,
    resume: Checkpoint | None = None,
    tags=None,
) -> TrainResult:
    """Epoch loop: seeded shuffle, padded batches, CTC loss, Adam.

    After every epoch the validation set is decoded and scored; the best
    validation SER snapshot is kept as ``best.ckpt`` and the latest as
    ``last.ckpt`` (when ``out_dir`` is given), with an append-only loss
    curve in ``losses.tsv``. A non-finite loss or gradient aborts with the
    last finished epoch's checkpoints intact.
    """
    if not train_samples:
        raise ValueError("train: empty training set")
    registry = model.registry()
    optimizer = Adam(registry, lr=settings.lr)
    rng = np.random.default_rng(settings.seed)
    start_epoch = 0
    tags = dict(tags or {})

    if resume is not None:
        if resume.adam is not None:
            optimizer.t = int(resume.adam["t"])
            optimizer.lr = float(resume.adam["lr"])
            optimizer.beta1 = float(resume.adam["beta1"])
            optimizer.beta2 = float(resume.adam["beta2"])
            optimizer.eps = float(resume.adam["eps"])
            for n in registry.names():
                optimizer.m[n] = resume.adam["m"][n].copy()
                optimizer.v[n] = resume.adam["v"][n].copy()
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch

    out_dir = Path(out_dir) if out_dir is not None else None
    losses_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        losses_path = out_dir / "losses.tsv"
        if resume is None and losses_path.exists():
            losses_path.unlink()

    records: list[EpochRecord] = []
    best_ser = float("inf")
    best_er = float("inf")
    best_epoch = 0
    stopped_early = False

    def _save(name: str, epoch: int):
        if out_dir is None:
            return
        ckpt = snapshot_model(
            model,
            vocab,
            epoch=epoch,
            rng_state=rng.bit_generator.state,
            optimizer=optimizer,
            tags=tags,
        )
        checkpoint_save(ckpt, out_dir / name)

    for epoch in range(start_epoch + 1, settings.max_epochs + 1):
        order = rng.permutation(len(train_samples))
        shuffled = [train_samples[i] for i in order]
        batches = make_batch(shuffled, vocab, settings.batch_size, model.config.frame_stride)

        loss_sum = 0.0
        seen = 0
        for batch in batches:
            registry.zero_grad()
            loss = batch_loss(model, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            if settings.clip_norm is not None:
                clip_gradients(registry, settings.clip_norm)
            optimizer.step()
            loss_sum += value * len(batch)
            seen += len(batch)
        train_loss = loss_sum / seen

        report = evaluate_model(model, val_samples, vocab)
        record = EpochRecord(epoch, train_loss, report.ser, report.er)
        records.append(record)
        if losses_path is not None:
            with open(losses_path, "a", encoding="utf-8") as fh:
                fh.write(record.line() + "\n")

        _save("last.ckpt", epoch)
        if report.ser < best_ser:
            best_ser = report.ser
            best_er = report.er
            best_epoch = epoch
            _save("best.ckpt", epoch)

        if (
            settings.target_ser is not None
            and epoch >= settings.min_epochs
            and report.ser <= settings.target_ser
            and (settings.target_er is None or report.er <= settings.target_er)
        ):
            stopped_early = True
            break

    return TrainResult(
        records=records,
        best_epoch=best_epoch,
        best_ser=best_ser,
        best_er=best_er,
        stopped_early=stopped_early,
    )
