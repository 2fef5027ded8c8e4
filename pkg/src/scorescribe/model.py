"""Full transcription network.

Staff image in, per-frame class log-probabilities out: a stack of residual
recurrent convolutional blocks, a column-to-frame reshape, two
bidirectional LSTM layers and an affine classification head with
log-softmax. Every pooling block halves the width, so one output frame
covers ``2**len(blocks)`` input pixel columns (16 for the reference
four-block plan).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, affine, concat, log_softmax, narrow, reshape, transpose
from .blocks import ResidualRecurrentBlock
from .layers import LstmParams, ParamRegistry, bilstm_forward, glorot_uniform, init_lstm_params


@dataclass
class ArchConfig:
    """Architecture hyperparameters; ``num_classes`` includes the blank."""

    num_classes: int
    input_height: int = 128
    block_channels: tuple[int, ...] = (32, 64, 128, 256)
    rcl_steps: int = 2
    lstm_hidden: int = 256
    lstm_layers: int = 2

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(c < 1 for c in self.block_channels):
            raise ValueError(f"block channels must be positive, got {self.block_channels}")
        if self.input_height % self.frame_stride != 0:
            raise ValueError(
                f"input height {self.input_height} not divisible by {self.frame_stride}"
            )

    @property
    def frame_stride(self) -> int:
        return 2 ** len(self.block_channels)

    @property
    def feature_height(self) -> int:
        return self.input_height // self.frame_stride

    @property
    def feature_size(self) -> int:
        return self.block_channels[-1] * self.feature_height

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_height": self.input_height,
            "block_channels": list(self.block_channels),
            "rcl_steps": self.rcl_steps,
            "lstm_hidden": self.lstm_hidden,
            "lstm_layers": self.lstm_layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            num_classes=int(d["num_classes"]),
            input_height=int(d["input_height"]),
            block_channels=tuple(d["block_channels"]),
            rcl_steps=int(d["rcl_steps"]),
            lstm_hidden=int(d["lstm_hidden"]),
            lstm_layers=int(d["lstm_layers"]),
        )


@dataclass
class ProbLattice:
    """Per-frame class log-probabilities, [T, num_classes]."""

    log_probs: np.ndarray

    def __post_init__(self):
        if self.log_probs.ndim != 2:
            raise ShapeError(f"ProbLattice: expected [T, classes], got {self.log_probs.shape}")

    @property
    def frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.log_probs.shape[1]


def count_frames(width: int, frame_stride: int = 16) -> int:
    """Output frames produced by an input of ``width`` pixel columns."""
    if width < frame_stride:
        raise ShapeError(f"image too narrow: width {width} < {frame_stride}")
    return width // frame_stride


def map_to_sequence(features: Tensor) -> Tensor:
    """Reshape conv features [B, C, H, W] to frames [W, B, C*H].

    Each width column becomes one frame; the feature axis concatenates
    channel-major (index = c * H + h).
    """
    if features.data.ndim != 4:
        raise ShapeError(f"map_to_sequence: expected [B,C,H,W], got {features.shape}")
    B, C, H, W = features.shape
    return reshape(transpose(features, (3, 0, 1, 2)), (W, B, C * H))


def sequence_to_map(seq: Tensor, channels: int, height: int) -> Tensor:
    """Inverse of :func:`map_to_sequence` (round-trip tested)."""
    W, B, F = seq.shape
    if F != channels * height:
        raise ShapeError(f"sequence_to_map: feature size {F} != {channels}*{height}")
    return transpose(reshape(seq, (W, B, channels, height)), (1, 2, 3, 0))


class TranscriptionModel:
    """Assembled network with deterministic, seeded initialization."""

    def __init__(self, config: ArchConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        self.blocks = []
        cin = 1
        for cout in config.block_channels:
            self.blocks.append(ResidualRecurrentBlock(cin, cout, config.rcl_steps, rng, dtype))
            cin = cout
        self.lstms: list[tuple[LstmParams, LstmParams]] = []
        feat = config.feature_size
        for _ in range(config.lstm_layers):
            fwd = init_lstm_params(rng, feat, config.lstm_hidden, dtype)
            bwd = init_lstm_params(rng, feat, config.lstm_hidden, dtype)
            self.lstms.append((fwd, bwd))
            feat = 2 * config.lstm_hidden
        self.head_weight = Tensor(
            glorot_uniform(rng, (config.num_classes, feat), feat, config.num_classes, dtype),
            requires_grad=True,
        )
        self.head_bias = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True)

    def registry(self) -> ParamRegistry:
        reg = ParamRegistry()
        for i, block in enumerate(self.blocks, start=1):
            for name, tensor in block.params():
                reg.register(f"block{i}.{name}", tensor)
        for i, (fwd, bwd) in enumerate(self.lstms, start=1):
            for dname, p in (("fwd", fwd), ("bwd", bwd)):
                reg.register(f"lstm{i}.{dname}.w_x", p.w_x)
                reg.register(f"lstm{i}.{dname}.w_h", p.w_h)
                reg.register(f"lstm{i}.{dname}.bias", p.bias)
        reg.register("head.weight", self.head_weight)
        reg.register("head.bias", self.head_bias)
        return reg

    def bn_states(self) -> dict:
        states = {}
        for i, block in enumerate(self.blocks, start=1):
            for name, state in block.states():
                states[f"block{i}.{name}"] = state
        return states

    def forward(self, images: Tensor, widths=None, mode: str = "train") -> list[Tensor]:
        """Per-sample log-probability lattices, sliced to true frame counts.

        ``images`` is [B, 1, input_height, W]; ``widths`` are the unpadded
        pixel widths (defaults to the padded width for every sample).
        """
        cfg = self.config
        if images.data.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"model: expected [B,1,H,W] input, got {images.shape}")
        B, _, H, W = images.shape
        if H != cfg.input_height:
            raise ShapeError(f"model: input height {H} != configured {cfg.input_height}")
        if widths is None:
            widths = [W] * B
        if len(widths) != B:
            raise ShapeError(f"model: got {len(widths)} widths for batch of {B}")
        frame_counts = [count_frames(w, cfg.frame_stride) for w in widths]

        x = images
        for block in self.blocks:
            x = block.forward(x, mode)
        seq_all = map_to_sequence(x)  # [T_max, B, C*H']
        feat = seq_all.shape[2]

        # The recurrent stage runs on true-length sequences only, so padded
        # frames can never leak through the backward direction. Samples
        # sharing a frame count are batched together.
        groups: dict[int, list[int]] = {}
        for b, t_b in enumerate(frame_counts):
            groups.setdefault(t_b, []).append(b)

        out: list[Tensor | None] = [None] * B
        for t_b in sorted(groups):
            members = groups[t_b]
            if len(members) == B and t_b == seq_all.shape[0]:
                seq = seq_all
            else:
                cols = [narrow(narrow(seq_all, 0, 0, t_b), 1, b, 1) for b in members]
                seq = concat(cols, axis=1) if len(cols) > 1 else cols[0]
            for fwd, bwd in self.lstms:
                seq = bilstm_forward(seq, fwd, bwd)
            flat = reshape(seq, (t_b * len(members), seq.shape[2]))
            logits = affine(flat, self.head_weight, self.head_bias)
            lattices = reshape(log_softmax(logits), (t_b, len(members), cfg.num_classes))
            for j, b in enumerate(members):
                out[b] = reshape(narrow(lattices, 1, j, 1), (t_b, cfg.num_classes))
        return out

    def lattice(self, image: np.ndarray, mode: str = "eval") -> ProbLattice:
        """Single-image lattice as plain arrays (decode/eval path)."""
        if image.ndim != 3 or image.shape[0] != 1:
            raise ShapeError(f"model.lattice: expected [1,H,W] image, got {image.shape}")
        batch = Tensor(image[None, ...])
        [lat] = self.forward(batch, [image.shape[2]], mode)
        return ProbLattice(np.asarray(lat.data, dtype=np.float64))


def init_params(config: ArchConfig, seed: int) -> ParamRegistry:
    """Build a fresh parameter registry for ``config``; bit-reproducible per seed."""
    return TranscriptionModel(config, seed).registry()
