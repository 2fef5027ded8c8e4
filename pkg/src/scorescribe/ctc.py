"""Connectionist temporal classification.

Log-space forward/backward loss with an analytic gradient with respect to
the per-frame log-probabilities, an exhaustive path-enumeration oracle for
small instances, and the greedy decoder (merge adjacent repeats, drop
blanks).

The blank is always the last class index. Log-of-zero is represented by a
large negative guard value rather than -inf so the recursions never produce
NaN through inf - inf.
"""

from __future__ import annotations

import itertools

import numpy as np

from .autodiff import Tensor, _make_op
from .model import ProbLattice

LOG_ZERO = -1.0e30

LabelSequence = list  # class indices in [0, blank), blank excluded


class CtcError(ValueError):
    """Label/lattice combination violates a CTC precondition."""


def repeats(label) -> int:
    return sum(1 for a, b in zip(label, label[1:]) if a == b)


def min_frames(label) -> int:
    """Fewest frames able to emit ``label`` (repeats need a separating blank)."""
    return len(label) + repeats(label)


def extended_label(label, blank: int) -> np.ndarray:
    """Interleave blanks: l1, l2 ... becomes b, l1, b, l2, ..., b (length 2L+1)."""
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def _as_log_probs(lattice) -> np.ndarray:
    if isinstance(lattice, Tensor):
        arr = lattice.data
    elif isinstance(lattice, ProbLattice):
        arr = lattice.log_probs
    else:
        arr = np.asarray(lattice)
    if arr.ndim != 2:
        raise CtcError(f"lattice must be [T, classes], got shape {arr.shape}")
    return arr


def _validate(label, T: int, K: int, blank: int):
    for v in label:
        if not 0 <= v < blank:
            raise CtcError(f"label id {v} outside [0, {blank}) (blank={blank})")
    need = min_frames(label)
    if T < need:
        raise CtcError(
            f"label too long for lattice: {T} frames < {need} required "
            f"(length {len(label)} with {repeats(label)} adjacent repeats)"
        )


def _forward_backward(lp: np.ndarray, ext: np.ndarray, blank: int):
    """Alpha/beta tables (float64, log domain) and the total log-probability."""
    T = lp.shape[0]
    S = ext.size
    # transition from s-2 is legal only onto a non-blank differing from ext[s-2]
    can_skip = np.zeros(S, dtype=bool)
    if S > 2:
        can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), LOG_ZERO)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if S > 2:
            acc[2:] = np.where(can_skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = np.maximum(acc + lp[t, ext], LOG_ZERO)

    log_p = alpha[T - 1, S - 1]
    if S > 1:
        log_p = np.logaddexp(log_p, alpha[T - 1, S - 2])

    beta = np.full((T, S), LOG_ZERO)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        if S > 2:
            skip_in = np.logaddexp(acc[:-2], np.where(can_skip[2:], nxt[2:], LOG_ZERO))
            acc[:-2] = skip_in
        beta[t] = np.maximum(acc, LOG_ZERO)

    return alpha, beta, float(log_p)


def ctc_loss(lattice, label, blank: int | None = None) -> Tensor:
    """Negative log-probability of ``label`` under the lattice.

    Accepts the lattice as a Tensor (differentiable; the gradient with
    respect to the log-probabilities is computed from forward/backward
    posteriors) or as plain arrays for evaluation-only use.
    """
    lp32 = _as_log_probs(lattice)
    T, K = lp32.shape
    blank = K - 1 if blank is None else blank
    label = list(label)
    _validate(label, T, K, blank)

    lp = lp32.astype(np.float64)
    ext = extended_label(label, blank)
    alpha, beta, log_p = _forward_backward(lp, ext, blank)
    if not np.isfinite(log_p) or log_p <= LOG_ZERO / 2:
        raise CtcError("ctc_loss: label probability underflowed to zero")

    # d(-log P)/d(log p[t,k]) = -sum_{s: ext[s]=k} exp(alpha + beta - log P)
    ab = alpha + beta
    grad = np.zeros((T, K))
    for k in np.unique(ext):
        cols = ab[:, ext == k]
        m = cols.max(axis=1)
        safe = m > LOG_ZERO / 2
        gk = np.zeros(T)
        gk[safe] = -np.exp(
            m[safe] + np.log(np.exp(cols[safe] - m[safe, None]).sum(axis=1)) - log_p
        )
        grad[:, k] = gk

    loss_value = np.asarray(-log_p, dtype=lp32.dtype)
    if isinstance(lattice, Tensor):
        grad_typed = grad.astype(lp32.dtype)
        return _make_op(loss_value, (lattice,), lambda g: (g * grad_typed,))
    return Tensor(loss_value)


def collapse_path(path, blank: int) -> tuple:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return tuple(out)


_PATH_CACHE: dict = {}


def _enumerate_paths(T: int, K: int, blank: int):
    key = (T, K, blank)
    cached = _PATH_CACHE.get(key)
    if cached is None:
        paths = np.array(list(itertools.product(range(K), repeat=T)), dtype=np.int64)
        collapsed = [collapse_path(p, blank) for p in paths]
        cached = (paths, collapsed)
        _PATH_CACHE[key] = cached
    return cached


def brute_force_likelihood(lattice, label, blank: int | None = None) -> float:
    """Total probability of ``label`` by enumerating every frame path.

    Exponential in the frame count; guarded to at most 10**7 paths. This is
    the independent oracle the DP loss is checked against.
    """
    lp = _as_log_probs(lattice).astype(np.float64)
    T, K = lp.shape
    blank = K - 1 if blank is None else blank
    if K**T > 10**7:
        raise CtcError(f"brute force infeasible: {K}**{T} paths exceed guard")
    target = tuple(label)
    paths, collapsed = _enumerate_paths(T, K, blank)
    path_logp = lp[np.arange(T)[None, :], paths].sum(axis=1)
    mask = np.fromiter((c == target for c in collapsed), dtype=bool, count=len(collapsed))
    return float(np.exp(path_logp[mask]).sum())


def greedy_decode(lattice, blank: int | None = None) -> list[int]:
    """Framewise argmax followed by the collapse rule.

    A frame equal to its predecessor extends that symbol, so it is not
    emitted again; blanks separate genuine repeats and are dropped. Argmax
    ties resolve to the lowest class index.
    """
    lp = _as_log_probs(lattice)
    blank = lp.shape[1] - 1 if blank is None else blank
    best = lp.argmax(axis=1)
    out: list[int] = []
    prev = -1
    for c in best:
        c = int(c)
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return out
