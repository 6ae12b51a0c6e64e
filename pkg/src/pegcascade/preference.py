"""Long- and short-term user preference encoders over topic-vector histories.

Every encoder has a single-history form (a ``(n_items, K)`` tensor in, one
vector out) and a batched form over many users.  The batched forms keep
sequences unpadded in effect: a per-step mask freezes the recurrent state
outside each user's real items, so results equal the per-user unroll.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigurationError(ValueError):
    pass


@dataclass
class RepostHistory:
    user_id: str
    items: list  # doc indices or theta rows, oldest first

    def __len__(self) -> int:
        return len(self.items)


def _uniform(rng, shape, fan_in):
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


class LSTMCell:
    """Standard four-gate LSTM; gate order in the packed weights is i, f, g, o."""

    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator, name: str = "lstm"):
        self.input_dim, self.hidden = input_dim, hidden
        self.w_x = ad.parameter(_uniform(rng, (input_dim, 4 * hidden), hidden), f"{name}.w_x")
        self.w_h = ad.parameter(_uniform(rng, (hidden, 4 * hidden), hidden), f"{name}.w_h")
        self.b = ad.parameter(np.zeros(4 * hidden), f"{name}.b")

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h, f"{prefix}.b": self.b}

    def step(self, x: Tensor, h: Tensor | None, c: Tensor | None) -> tuple[Tensor, Tensor]:
        d = self.hidden
        z = ad.linear(x, self.w_x, self.b)
        if h is not None:
            z = z + ad.matmul(h, self.w_h)
        i = ad.sigmoid(z[:, 0:d])
        f = ad.sigmoid(z[:, d : 2 * d])
        g = ad.tanh(z[:, 2 * d : 3 * d])
        o = ad.sigmoid(z[:, 3 * d : 4 * d])
        c_new = i * g if c is None else f * c + i * g
        return o * ad.tanh(c_new), c_new


def run_masked_lstm(
    cell: LSTMCell, inputs: Sequence[Tensor], mask: np.ndarray, reverse: bool = False
) -> list[Tensor]:
    """Unroll ``cell`` over ``inputs[t]`` (each ``(n, K)``) with zero initial state.

    ``mask[t, r]`` is 1 where row ``r`` has a real item at step ``t``; masked
    steps carry the previous state through unchanged.  Returns the hidden
    state after every step, in input order.
    """
    n_steps = len(inputs)
    n = mask.shape[1]
    d = cell.hidden
    order = range(n_steps - 1, -1, -1) if reverse else range(n_steps)
    h = c = None
    hs: list = [None] * n_steps
    for t in order:
        h_new, c_new = cell.step(inputs[t], h, c)
        m = mask[t].astype(float)
        if m.all():
            h, c = h_new, c_new
        else:
            keep = np.repeat(m[:, None], d, axis=1)
            if h is None:
                h = h_new * ad.constant(keep)
                c = c_new * ad.constant(keep)
            else:
                h = h_new * ad.constant(keep) + h * ad.constant(1.0 - keep)
                c = c_new * ad.constant(keep) + c * ad.constant(1.0 - keep)
        hs[t] = h
    return hs


# ------------------------------------------------------ single-history API


def _rows(history: Tensor) -> list[Tensor]:
    history = ad.as_tensor(history)
    if history.ndim != 2 or history.shape[0] < 1:
        raise ValueError(f"history must be a non-empty (n_items, K) matrix, got {history.shape}")
    k = history.shape[1]
    return [ad.reshape(history[i], (1, k)) for i in range(history.shape[0])]


def bilstm_long_term(history: Tensor, fwd: LSTMCell, bwd: LSTMCell) -> Tensor:
    """Mean over steps of ``[forward_h || backward_h]``."""
    xs = _rows(history)
    mask = np.ones((len(xs), 1))
    hf = run_masked_lstm(fwd, xs, mask)
    hb = run_masked_lstm(bwd, xs, mask, reverse=True)
    pooled = ad.concat([ad.concat(hf, axis=0), ad.concat(hb, axis=0)], axis=1)
    return ad.mean(pooled, axis=0)


@dataclass
class ASVDParams:
    w_h: Tensor  # (K, d_L)
    b_h: Tensor  # (d_L,)
    w_x: Tensor  # (d_L,)
    b_x: Tensor  # (1,)

    @classmethod
    def init(cls, k: int, d: int, rng: np.random.Generator, name: str = "asvd") -> "ASVDParams":
        return cls(
            ad.parameter(_uniform(rng, (k, d), k), f"{name}.w_h"),
            ad.parameter(np.zeros(d), f"{name}.b_h"),
            ad.parameter(_uniform(rng, (d,), d), f"{name}.w_x"),
            ad.parameter(np.zeros(1), f"{name}.b_x"),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w_h", "b_h", "w_x", "b_x")}


def asvd_attention(history: Tensor, p: ASVDParams) -> tuple[Tensor, Tensor]:
    """Item representations and their attention weights for one history."""
    history = ad.as_tensor(history)
    if history.ndim != 2 or history.shape[0] < 1:
        raise ValueError(f"history must be a non-empty (n_items, K) matrix, got {history.shape}")
    h = ad.sigmoid(ad.linear(history, p.w_h, p.b_h))
    scores = ad.sigmoid(ad.matmul(h, p.w_x) + p.b_x)
    return h, ad.softmax(scores, axis=0)


def asvd_long_term(history: Tensor, p: ASVDParams) -> Tensor:
    h, alpha = asvd_attention(history, p)
    return ad.matmul(alpha, h)


def lstm_short_term(history: Tensor, tau: int, cell: LSTMCell) -> Tensor:
    """Final hidden state after the last ``min(tau, n)`` items."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    xs = _rows(history)[-tau:]
    hs = run_masked_lstm(cell, xs, np.ones((len(xs), 1)))
    return ad.reshape(hs[-1], (cell.hidden,))


def fuse(p_long: Tensor | None, p_short: Tensor | None, weight: Tensor, bias: Tensor) -> Tensor:
    """Concatenate the available parts and project to the GNN input width.

    Works on single vectors or on row-stacked batches.
    """
    parts = [p for p in (p_long, p_short) if p is not None]
    if not parts:
        raise ConfigurationError("fuse needs at least one preference part")
    axis = parts[0].ndim - 1
    width = sum(p.shape[axis] for p in parts)
    if weight.shape[0] != width:
        raise ConfigurationError(
            f"fused preference width {width} does not match projection input {weight.shape[0]}"
        )
    cat = parts[0] if len(parts) == 1 else ad.concat(parts, axis=axis)
    return ad.linear(cat, weight, bias)


# ------------------------------------------------------------ batched API


def _gather_steps(doc_vectors: Tensor, seqs: Sequence[Sequence[int]]) -> tuple[list[Tensor], np.ndarray]:
    n = len(seqs)
    steps = max((len(s) for s in seqs), default=0)
    idx = np.zeros((steps, n), dtype=np.int64)
    mask = np.zeros((steps, n))
    for r, s in enumerate(seqs):
        idx[: len(s), r] = s
        mask[: len(s), r] = 1.0
    return [ad.take(doc_vectors, idx[t]) for t in range(steps)], mask


def batch_bilstm_long_term(doc_vectors: Tensor, seqs, fwd: LSTMCell, bwd: LSTMCell) -> Tensor:
    """Rows of P_L for users whose histories are index lists into ``doc_vectors``.

    Users with an empty history get a zero row (callers substitute a fallback).
    """
    xs, mask = _gather_steps(doc_vectors, seqs)
    n = len(seqs)
    width = fwd.hidden + bwd.hidden
    if not xs:
        return ad.constant(np.zeros((n, width)))
    hf = run_masked_lstm(fwd, xs, mask)
    hb = run_masked_lstm(bwd, xs, mask, reverse=True)
    total = None
    for t in range(len(xs)):
        term = ad.outer_mask(mask[t], ad.concat([hf[t], hb[t]], axis=1))
        total = term if total is None else total + term
    lengths = np.maximum(mask.sum(axis=0), 1.0)
    return ad.outer_mask(1.0 / lengths, total)


def batch_asvd_long_term(doc_vectors: Tensor, seqs, p: ASVDParams) -> Tensor:
    n = len(seqs)
    d = p.w_h.shape[1]
    flat = np.array([i for s in seqs for i in s], dtype=np.int64)
    owner = np.array([r for r, s in enumerate(seqs) for _ in s], dtype=np.int64)
    if flat.size == 0:
        return ad.constant(np.zeros((n, d)))
    h = ad.sigmoid(ad.linear(ad.take(doc_vectors, flat), p.w_h, p.b_h))
    scores = ad.sigmoid(ad.matmul(h, p.w_x) + p.b_x)
    alpha = ad.segment_softmax(scores, owner, n)
    weighted = ad.expand(ad.reshape(alpha, (flat.size, 1)), (flat.size, d)) * h
    return ad.segment_sum(weighted, owner, n)


def batch_lstm_short_term(doc_vectors: Tensor, seqs, tau: int, cell: LSTMCell) -> Tensor:
    n = len(seqs)
    windows = [list(s)[-tau:] if s else [] for s in seqs]
    xs, mask = _gather_steps(doc_vectors, windows)
    if not xs:
        return ad.constant(np.zeros((n, cell.hidden)))
    return run_masked_lstm(cell, xs, mask)[-1]


def with_fallback(rows: Tensor, has_history: np.ndarray, fallback: Tensor) -> Tensor:
    """Replace rows of users without history by a shared trainable vector."""
    has = has_history.astype(float)
    if has.all():
        return rows
    return ad.outer_mask(has, rows) + ad.outer_mask(1.0 - has, fallback)
