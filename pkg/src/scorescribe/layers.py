"""Recurrent layers and parameter bookkeeping.

LSTM gate order is fixed as (input, forget, cell candidate, output); the
four gate blocks are stacked along the first axis of the weight matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    affine,
    concat,
    mul,
    narrow,
    reshape,
    sigmoid,
    stack,
    tanh,
)


class ParamRegistry:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()


@dataclass
class LstmParams:
    """One direction of an LSTM layer.

    ``w_x`` is [4H, N], ``w_h`` is [4H, H], ``bias`` is [4H], with the gate
    blocks ordered (input, forget, cell, output) along the 4H axis.
    """

    w_x: Tensor
    w_h: Tensor
    bias: Tensor
    hidden: int

    def __post_init__(self):
        H = self.hidden
        if self.w_x.shape[0] != 4 * H or self.w_h.shape != (4 * H, H) or self.bias.shape != (4 * H,):
            raise ShapeError(
                f"LstmParams: inconsistent shapes w_x={self.w_x.shape} "
                f"w_h={self.w_h.shape} bias={self.bias.shape} for hidden={H}"
            )

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]


def lstm_cell(x_t: Tensor, h: Tensor, c: Tensor, params: LstmParams):
    """One LSTM step; returns the new (hidden, cell) pair."""
    H = params.hidden
    pre = add(affine(x_t, params.w_x, params.bias), affine(h, params.w_h))
    gate_i = sigmoid(narrow(pre, 1, 0, H))
    gate_f = sigmoid(narrow(pre, 1, H, H))
    gate_g = tanh(narrow(pre, 1, 2 * H, H))
    gate_o = sigmoid(narrow(pre, 1, 3 * H, H))
    c_new = add(mul(gate_f, c), mul(gate_i, gate_g))
    h_new = mul(gate_o, tanh(c_new))
    return h_new, c_new


def lstm_forward(seq: Tensor, params: LstmParams, direction: str = "fwd") -> Tensor:
    """Run an LSTM over [T, B, N], returning hidden states [T, B, H].

    Initial hidden and cell states are zero. Direction "bwd" consumes the
    sequence in reversed time and returns outputs re-aligned to input time,
    so outputs[t] summarizes the suffix starting at t.
    """
    if direction not in ("fwd", "bwd"):
        raise ValueError(f"lstm_forward: unknown direction {direction!r}")
    if seq.data.ndim != 3:
        raise ShapeError(f"lstm_forward: expected [T,B,N], got {seq.shape}")
    T, B, N = seq.shape
    if N != params.input_size:
        raise ShapeError(
            f"lstm_forward: input features {N} (dim 2) != params input size {params.input_size}"
        )
    H = params.hidden
    h = Tensor(np.zeros((B, H), dtype=seq.dtype))
    c = Tensor(np.zeros((B, H), dtype=seq.dtype))
    times = range(T) if direction == "fwd" else range(T - 1, -1, -1)
    outputs: list[Tensor | None] = [None] * T
    for t in times:
        x_t = reshape(narrow(seq, 0, t, 1), (B, N))
        h, c = lstm_cell(x_t, h, c, params)
        outputs[t] = h
    return stack(outputs, axis=0)


def bilstm_forward(seq: Tensor, fwd: LstmParams, bwd: LstmParams) -> Tensor:
    """Bidirectional LSTM: [forward ; backward] concatenated to [T, B, 2H]."""
    if fwd.hidden != bwd.hidden:
        raise ShapeError(
            f"bilstm_forward: hidden sizes differ ({fwd.hidden} vs {bwd.hidden})"
        )
    out_f = lstm_forward(seq, fwd, "fwd")
    out_b = lstm_forward(seq, bwd, "bwd")
    return concat([out_f, out_b], axis=2)


# ---------------------------------------------------------------------------
# initialization


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_lstm_params(rng: np.random.Generator, input_size: int, hidden: int, dtype=np.float32) -> LstmParams:
    """Glorot-uniform weights, zero bias except the forget gate bias of 1."""
    H = hidden
    w_x = glorot_uniform(rng, (4 * H, input_size), input_size, 4 * H, dtype)
    w_h = glorot_uniform(rng, (4 * H, H), H, 4 * H, dtype)
    bias = np.zeros(4 * H, dtype=dtype)
    bias[H : 2 * H] = 1.0
    return LstmParams(
        w_x=Tensor(w_x, requires_grad=True),
        w_h=Tensor(w_h, requires_grad=True),
        bias=Tensor(bias, requires_grad=True),
        hidden=H,
    )
