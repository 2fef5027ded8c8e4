"""Residual recurrent convolutional feature blocks.

Each block maps channels with a 1x1 convolution, refines the result with
two weight-shared recurrent convolutional units, adds the 1x1 output back
as a residual skip, and halves both spatial extents with a 2x2 max pool.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    RunningStats,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    conv2d,
    maxpool2d,
    relu,
)
from .layers import glorot_uniform


class RecurrentConvUnit:
    """3x3 conv + batch norm + ReLU applied recurrently with shared weights.

    The first pass consumes the unit input alone; each further unroll step
    re-injects that input, feeding conv(x0 + h). One conv weight, bias and
    batch-norm parameter set is reused at every step, so the parameter
    count does not depend on the unroll depth.
    """

    def __init__(self, channels: int, steps: int = 2, rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        C = channels
        fan = C * 9
        self.channels = C
        self.steps = int(steps)
        self.weight = Tensor(glorot_uniform(rng, (C, C, 3, 3), fan, fan, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)
        self.gamma = Tensor(np.ones(C, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)
        # Parameters are shared across unroll passes; running statistics are
        # not: each pass has its own activation distribution, and eval mode
        # must normalize every pass the way training did.
        self.bn_states = [RunningStats.create(C, dtype) for _ in range(self.steps + 1)]

    def _pass(self, x: Tensor, step: int, mode: str) -> Tensor:
        y = conv2d(x, self.weight, self.bias, stride=1, padding=1)
        y = batch_norm(y, self.gamma, self.beta, mode, self.bn_states[step])
        return relu(y)

    def forward(self, x0: Tensor, mode: str) -> Tensor:
        if x0.shape[1] != self.channels:
            raise ShapeError(
                f"RecurrentConvUnit: input has {x0.shape[1]} channels, unit expects {self.channels}"
            )
        h = self._pass(x0, 0, mode)
        for step in range(1, self.steps + 1):
            h = self._pass(add(x0, h), step, mode)
        return h

    def params(self):
        yield "conv.weight", self.weight
        yield "conv.bias", self.bias
        yield "bn.gamma", self.gamma
        yield "bn.beta", self.beta

    def states(self):
        for step, state in enumerate(self.bn_states):
            yield f"bn.pass{step}", state


class ResidualRecurrentBlock:
    """1x1 channel map, two recurrent conv units, residual skip, 2x2 pool.

    The skip connects the 1x1 output (not the raw block input) to the
    second unit's output; channel counts match by construction. Output
    spatial extents are floor-halved.
    """

    def __init__(self, in_channels: int, out_channels: int, steps: int = 2,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.reduce_weight = Tensor(
            glorot_uniform(rng, (out_channels, in_channels, 1, 1), in_channels, out_channels, dtype),
            requires_grad=True,
        )
        self.reduce_bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.rcl1 = RecurrentConvUnit(out_channels, steps, rng, dtype)
        self.rcl2 = RecurrentConvUnit(out_channels, steps, rng, dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"ResidualRecurrentBlock: input has {x.shape[1]} channels, block expects {self.in_channels}"
            )
        r = conv2d(x, self.reduce_weight, self.reduce_bias)
        y = self.rcl2.forward(self.rcl1.forward(r, mode), mode)
        return maxpool2d(add(r, y))

    def params(self):
        yield "reduce.weight", self.reduce_weight
        yield "reduce.bias", self.reduce_bias
        for unit_name, unit in (("rcl1", self.rcl1), ("rcl2", self.rcl2)):
            for name, tensor in unit.params():
                yield f"{unit_name}.{name}", tensor

    def states(self):
        for unit_name, unit in (("rcl1", self.rcl1), ("rcl2", self.rcl2)):
            for name, state in unit.states():
                yield f"{unit_name}.{name}", state
