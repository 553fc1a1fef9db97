"""CTC loss via log-space forward-backward, and greedy decoding.

The blank symbol is the last column of the log-probability matrix.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor, custom

NEG_INF = -np.inf


class CTCInfeasibleError(ValueError):
    """The label sequence needs more frames than the input provides."""


def min_frames(labels: Sequence[int]) -> int:
    """Frames needed to emit ``labels``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _logaddexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))
    return np.where(np.isfinite(m), out, NEG_INF)


def _forward_backward(lp: np.ndarray, labels: Sequence[int], blank: int):
    """Return (neg. log-likelihood, d loss / d lp) for a single (T, V) matrix."""
    T = lp.shape[0]
    L = len(labels)
    if min_frames(labels) > T:
        raise CTCInfeasibleError(f"{L} labels (needing {min_frames(labels)} frames) do not fit in {T} frames")
    S = 2 * L + 1
    ext = np.full(S, blank, dtype=np.intp)
    ext[1::2] = labels
    # skip transition s-2 -> s allowed when s is a label differing from s-2
    skip = np.zeros(S, dtype=bool)
    if L > 1:
        skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = lp[:, ext]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        jump = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))[:S], NEG_INF)
        alpha[t] = _logaddexp3(stay, step, jump) + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.concatenate((skip[2:], [False, False]))[:S]  # s -> s+2 allowed iff skip[s+2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))
        jump = np.where(skip_from, np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:S], NEG_INF)
        beta[t] = _logaddexp3(stay, step, jump) + emit[t]

    tail = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    log_p = float(tail)
    # alpha and beta both include the emission at t, so remove one copy
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - emit - log_p)
    occ = np.nan_to_num(occ, nan=0.0)
    grad = np.zeros_like(lp)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return -log_p, grad


def ctc_nll(log_probs: np.ndarray, labels: Sequence[int], blank: int | None = None) -> float:
    """Plain-array negative log-likelihood, no graph."""
    lp = np.asarray(log_probs, dtype=np.float64)
    return _forward_backward(lp, list(labels), lp.shape[1] - 1 if blank is None else blank)[0]


def ctc_loss(log_probs: Tensor, labels: Sequence[int]) -> Tensor:
    """-log P(labels | log_probs) for a single ``(T, V)`` log-probability matrix."""
    blank = log_probs.shape[1] - 1
    loss, grad = _forward_backward(log_probs.data, list(labels), blank)
    return custom(np.array(loss), (log_probs,), lambda g: (g * grad,))


def ctc_loss_batch(log_probs: Tensor, lengths: Sequence[int], labels: Sequence[Sequence[int]]) -> Tensor:
    """Mean CTC loss over a padded ``(B, T, V)`` batch."""
    blank = log_probs.shape[2] - 1
    B = log_probs.shape[0]
    grad = np.zeros_like(log_probs.data)
    total = 0.0
    for b in range(B):
        n = int(lengths[b])
        loss, g = _forward_backward(log_probs.data[b, :n], list(labels[b]), blank)
        total += loss
        grad[b, :n] = g
    grad /= B
    return custom(np.array(total / B), (log_probs,), lambda g: (g * grad,))


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """CTC many-to-one map: merge consecutive repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for s in path:
        s = int(s)
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def ctc_greedy_decode(log_probs) -> list[int]:
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return collapse(np.argmax(lp, axis=1), lp.shape[1] - 1)
