"""Numerical self-verification.

Every differentiable op (and their compositions up to a full block plus
CTC microloss) is checked against 64-bit central finite differences; the
CTC loss is additionally checked against exhaustive path enumeration.
These functions back both the ``selfcheck`` CLI command and the
acceptance test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ctc as ctc_mod
from .autodiff import RunningStats, Tensor, grad_check
from .blocks import RecurrentConvUnit, ResidualRecurrentBlock
from .layers import LstmParams, lstm_forward
from .model import map_to_sequence


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'ok' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Random fixed projection to a scalar; catches layout/transpose bugs
    that a plain sum would miss."""
    w = Tensor(rng.normal(size=out.shape).astype(np.float64))
    return ad.tsum(ad.mul(out, w))


def _grad_result(name: str, report) -> CheckResult:
    return CheckResult(name, report.passed, f"max rel err {report.max_rel_err:.3e} (tol {report.tol:.0e})")


def check_conv2d_grad(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5, requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)

    def fn(x, w, b):
        return _weighted_sum(ad.conv2d(x, w, b, stride=1, padding=1), np.random.default_rng(seed + 1))

    report = grad_check(fn, [x, w, b], h=1e-5, tol=1e-4, names=["input", "weight", "bias"])
    return _grad_result("conv2d gradient", report)


def check_maxpool2d_grad(seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True, dtype=np.float64)

    def fn(x):
        return _weighted_sum(ad.maxpool2d(x), np.random.default_rng(seed + 1))

    report = grad_check(fn, [x], h=1e-6, tol=1e-5, names=["input"])
    return _grad_result("maxpool2d gradient", report)


def check_batch_norm_grad(seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True, dtype=np.float64)
    gamma = Tensor(1.0 + 0.1 * rng.normal(size=3), requires_grad=True, dtype=np.float64)
    beta = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)

    def fn(x, gamma, beta):
        state = RunningStats.create(3, np.float64)  # fresh: train mode mutates it
        return _weighted_sum(
            ad.batch_norm(x, gamma, beta, "train", state), np.random.default_rng(seed + 1)
        )

    report = grad_check(fn, [x, gamma, beta], h=1e-5, tol=1e-3, names=["input", "gamma", "beta"])
    return _grad_result("batch_norm gradient", report)


def check_affine_grad(seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(4, 7)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(5, 7)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.normal(size=5), requires_grad=True, dtype=np.float64)

    def fn(x, w, b):
        return _weighted_sum(ad.affine(x, w, b), np.random.default_rng(seed + 1))

    report = grad_check(fn, [x, w, b], h=1e-6, tol=1e-5, names=["input", "weight", "bias"])
    return _grad_result("affine gradient", report)


def check_log_softmax_grad(seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 6)) * 2.0, requires_grad=True, dtype=np.float64)

    def fn(x):
        return _weighted_sum(ad.log_softmax(x), np.random.default_rng(seed + 1))

    report = grad_check(fn, [x], h=1e-6, tol=1e-5, names=["logits"])
    return _grad_result("log_softmax gradient", report)


def check_relu_grad(seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    # keep coordinates away from the kink
    x = Tensor(rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4)),
               requires_grad=True, dtype=np.float64)

    def fn(x):
        return _weighted_sum(ad.relu(x), np.random.default_rng(seed + 1))

    report = grad_check(fn, [x], h=1e-6, tol=1e-6, names=["input"])
    return _grad_result("relu gradient", report)


def _tiny_lstm(seed: int, n: int = 2, h: int = 2) -> LstmParams:
    rng = np.random.default_rng(seed)
    return LstmParams(
        w_x=Tensor(rng.normal(size=(4 * h, n)) * 0.5, requires_grad=True, dtype=np.float64),
        w_h=Tensor(rng.normal(size=(4 * h, h)) * 0.5, requires_grad=True, dtype=np.float64),
        bias=Tensor(rng.normal(size=4 * h) * 0.5, requires_grad=True, dtype=np.float64),
        hidden=h,
    )


def check_lstm_grad(seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    params = _tiny_lstm(seed + 10)
    seq = Tensor(rng.normal(size=(3, 1, 2)), requires_grad=True, dtype=np.float64)

    def fn(*_):
        return _weighted_sum(lstm_forward(seq, params), np.random.default_rng(seed + 1))

    report = grad_check(
        fn, [seq, params.w_x, params.w_h, params.bias], h=1e-5, tol=1e-3,
        names=["seq", "w_x", "w_h", "bias"],
    )
    return _grad_result("lstm cell gradient (T=3)", report)


def check_rcl_grad(seed: int = 7) -> CheckResult:
    rng = np.random.default_rng(seed)
    unit = RecurrentConvUnit(2, steps=2, rng=np.random.default_rng(seed + 10), dtype=np.float64)
    unit.weight.data *= 0.5
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True, dtype=np.float64)

    def fn(x, w, b, gamma, beta):
        unit.bn_states = [RunningStats.create(2, np.float64) for _ in range(unit.steps + 1)]
        return _weighted_sum(unit.forward(x, "train"), np.random.default_rng(seed + 1))

    report = grad_check(
        fn, [x, unit.weight, unit.bias, unit.gamma, unit.beta], h=1e-5, tol=1e-3,
        names=["input", "conv.weight", "conv.bias", "gamma", "beta"],
    )
    return _grad_result("recurrent conv unit gradient", report)


def check_r2_block_grad(seed: int = 8) -> CheckResult:
    rng = np.random.default_rng(seed)
    block = ResidualRecurrentBlock(2, 3, steps=2, rng=np.random.default_rng(seed + 10), dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True, dtype=np.float64)
    tensors = [x] + [t for _, t in block.params()]
    names = ["input"] + [n for n, _ in block.params()]

    def fn(*_):
        for unit in (block.rcl1, block.rcl2):
            unit.bn_states = [RunningStats.create(3, np.float64) for _ in range(unit.steps + 1)]
        return _weighted_sum(block.forward(x, "train"), np.random.default_rng(seed + 1))

    report = grad_check(fn, tensors, h=1e-5, tol=1e-3, names=names)
    return _grad_result("residual recurrent block gradient", report)


def check_ctc_grad(seed: int = 9) -> CheckResult:
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True, dtype=np.float64)
    label = [0, 1, 0]

    def fn(logits):
        return ctc_mod.ctc_loss(ad.log_softmax(logits), label)

    report = grad_check(fn, [logits], h=1e-6, tol=1e-4, names=["logits"])
    return _grad_result("ctc loss gradient", report)


def check_block_ctc_microloss_grad(seed: int = 10) -> CheckResult:
    """Full pipeline slice: block -> frames -> affine -> log_softmax -> CTC (T=4)."""
    rng = np.random.default_rng(seed)
    block = ResidualRecurrentBlock(1, 2, steps=2, rng=np.random.default_rng(seed + 10), dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 1, 8, 8)), requires_grad=True, dtype=np.float64)
    head_w = Tensor(rng.normal(size=(3, 2 * 4)) * 0.5, requires_grad=True, dtype=np.float64)
    head_b = Tensor(rng.normal(size=3) * 0.1, requires_grad=True, dtype=np.float64)
    label = [1, 0]
    tensors = [x, head_w, head_b] + [t for _, t in block.params()]
    names = ["input", "head.weight", "head.bias"] + [n for n, _ in block.params()]

    def fn(*_):
        for unit in (block.rcl1, block.rcl2):
            unit.bn_states = [RunningStats.create(2, np.float64) for _ in range(unit.steps + 1)]
        feat = block.forward(x, "train")  # [1, 2, 4, 4]
        seq = map_to_sequence(feat)  # [4, 1, 8]
        flat = ad.reshape(seq, (4, 8))
        lattice = ad.log_softmax(ad.affine(flat, head_w, head_b))
        return ctc_mod.ctc_loss(lattice, label)

    report = grad_check(fn, tensors, h=1e-5, tol=1e-3, names=names)
    return _grad_result("block + CTC microloss gradient (T=4)", report)


# ---------------------------------------------------------------------------
# CTC oracle equivalence


def random_lattice(rng: np.random.Generator, T: int, K: int) -> np.ndarray:
    logits = rng.normal(size=(T, K)) * 2.0
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def random_feasible_label(rng: np.random.Generator, T: int, V: int, max_len: int):
    while True:
        L = int(rng.integers(0, max_len + 1))
        label = [int(v) for v in rng.integers(0, V, size=L)]
        if ctc_mod.min_frames(label) <= T:
            return label


def check_ctc_matches_brute_force(instances: int = 200, seed: int = 11, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(1, 5))
        lattice = random_lattice(rng, T, V + 1)
        label = random_feasible_label(rng, T, V, max_len=3)
        loss = ctc_mod.ctc_loss(lattice, label).item()
        p = ctc_mod.brute_force_likelihood(lattice, label)
        worst = max(worst, abs(loss - (-np.log(p))))
    return CheckResult(
        f"ctc vs brute force ({instances} instances)",
        worst < tol,
        f"max |log p| gap {worst:.3e} (tol {tol:.0e})",
    )


def check_total_probability(seed: int = 12, tol: float = 1e-9) -> CheckResult:
    """Sum of path probabilities over every possible collapsed label is 1."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for T, V in [(2, 1), (3, 2), (4, 3), (5, 2)]:
        lattice = random_lattice(rng, T, V + 1)
        paths, collapsed = ctc_mod._enumerate_paths(T, V + 1, V)
        targets = set(collapsed)
        total = sum(ctc_mod.brute_force_likelihood(lattice, list(t)) for t in targets)
        worst = max(worst, abs(total - 1.0))
    return CheckResult(
        "ctc total probability", worst < tol, f"max |1 - sum| {worst:.3e} (tol {tol:.0e})"
    )


GRADIENT_CHECKS = [
    check_conv2d_grad,
    check_maxpool2d_grad,
    check_batch_norm_grad,
    check_affine_grad,
    check_log_softmax_grad,
    check_relu_grad,
    check_lstm_grad,
    check_rcl_grad,
    check_r2_block_grad,
    check_ctc_grad,
    check_block_ctc_microloss_grad,
]


def run_gradient_suite() -> list[CheckResult]:
    return [check() for check in GRADIENT_CHECKS]


def run_all(ctc_instances: int = 200) -> list[CheckResult]:
    results = run_gradient_suite()
    results.append(check_ctc_matches_brute_force(instances=ctc_instances))
    results.append(check_total_probability())
    return results
