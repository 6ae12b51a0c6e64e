"""Registered finite-difference fixtures for every primitive and for the
composite losses (topic model, preference encoders, end-to-end GNN)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, finite_difference_check


@dataclass
class Fixture:
    f: Callable[[], ad.Tensor]
    leaves: list


def _weighted(out: ad.Tensor, rng) -> ad.Tensor:
    return ad.tsum(out * ad.constant(rng.normal(size=out.shape)))


def _leaf(rng, *shape, low=None, high=None):
    if low is not None:
        return ad.parameter(rng.uniform(low, high, size=shape))
    return ad.parameter(rng.normal(size=shape))


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.1, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return ad.parameter(x)


def _unary(op, **kw):
    def build(rng):
        x = kw.get("make", lambda r: _leaf(r, 3, 4))(rng)
        w = rng.normal(size=x.shape)
        return Fixture(lambda: ad.tsum(op(x) * ad.constant(w)), [x])

    return build


def _binary(op):
    def build(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        return Fixture(lambda: ad.tsum(op(a, b) * ad.constant(w)), [a, b])

    return build


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    return Fixture(lambda: ad.tsum(ad.matmul(a, b) * ad.constant(w)), [a, b])


def _div(rng):
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 3, 4, low=0.5, high=2.0)
    w = rng.normal(size=(3, 4))
    return Fixture(lambda: ad.tsum((a / b) * ad.constant(w)), [a, b])


def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 5)
    w = rng.normal(size=(2, 8))
    return Fixture(lambda: ad.tsum(ad.concat([a, b], axis=1) * ad.constant(w)), [a, b])


def _sum(rng):
    x = _leaf(rng, 3, 4)
    w = rng.normal(size=4)
    return Fixture(lambda: ad.tsum(ad.tsum(x, axis=0) * ad.constant(w)) + ad.tsum(x) * 0.5, [x])


def _mean(rng):
    x = _leaf(rng, 3, 4)
    w = rng.normal(size=3)
    return Fixture(lambda: ad.tsum(ad.mean(x, axis=1) * ad.constant(w)), [x])


def _softmax(rng):
    x = _leaf(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    return Fixture(lambda: ad.tsum(ad.softmax(x, axis=1) * ad.constant(w)) + ad.tsum(ad.softmax(x, axis=0) * ad.constant(w)), [x])


def _slice(rng):
    x = _leaf(rng, 4, 5)
    w = rng.normal(size=(2, 3))
    return Fixture(lambda: ad.tsum(x[1:3, 0:5:2] * ad.constant(w)), [x])


def _expand(rng):
    x = _leaf(rng, 1, 4)
    w = rng.normal(size=(3, 4))
    return Fixture(lambda: ad.tsum(ad.expand(x, (3, 4)) * ad.constant(w)), [x])


def _take(rng):
    x = _leaf(rng, 4, 3)
    idx = np.array([0, 2, 2, 3, 0])
    w = rng.normal(size=(5, 3))
    return Fixture(lambda: ad.tsum(ad.take(x, idx) * ad.constant(w)), [x])


def _segment_sum(rng):
    x = _leaf(rng, 5, 3)
    seg = np.array([0, 2, 2, 1, 0])
    w = rng.normal(size=(3, 3))
    return Fixture(lambda: ad.tsum(ad.segment_sum(x, seg, 3) * ad.constant(w)), [x])


def _segment_softmax(rng):
    x = _leaf(rng, 6)
    seg = np.array([0, 0, 1, 2, 2, 2])
    w = rng.normal(size=6)
    return Fixture(lambda: ad.tsum(ad.segment_softmax(x, seg, 3) * ad.constant(w)), [x])


def _transpose_reshape(rng):
    x = _leaf(rng, 2, 6)
    w = rng.normal(size=(4, 3))
    return Fixture(lambda: ad.tsum(ad.reshape(ad.transpose(x), (4, 3)) * ad.constant(w)), [x])


PRIMITIVES: dict[str, Callable] = {
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "softmax": _softmax,
    "matmul": _matmul,
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "multiply": _binary(ad.mul),
    "divide": _div,
    "concat": _concat,
    "sum": _sum,
    "mean": _mean,
    "log": _unary(ad.log, make=lambda r: _leaf(r, 3, 4, low=0.2, high=3.0)),
    "exp": _unary(ad.exp),
    "slice": _slice,
    "square": _unary(ad.square),
    "softplus": _unary(ad.softplus),
    "leaky_relu": _unary(lambda x: ad.leaky_relu(x, 0.2), make=lambda r: _away_from_zero(r, 3, 4)),
    "expand": _expand,
    "transpose_reshape": _transpose_reshape,
    "take": _take,
    "segment_sum": _segment_sum,
    "segment_softmax": _segment_softmax,
}


# -------------------------------------------------------------- composites


def topic_loss_fixture(rng) -> Fixture:
    from .topic import TopicModel, topic_loss

    vocab, k, n_docs = 12, 3, 5
    model = TopicModel(vocab, k, d_phi=4, hidden=6, rng=rng)
    counts = rng.integers(0, 4, size=(n_docs, vocab)).astype(float)
    counts[:, 0] += 1  # every document non-empty
    noise = rng.standard_normal((n_docs, k))
    leaves = list(model.params.values())
    return Fixture(lambda: topic_loss(counts, model, noise=noise), leaves)


def _history(rng, n=7, k=3):
    return ad.parameter(rng.uniform(0.05, 0.95, size=(n, k)))


def bilstm_fixture(rng) -> Fixture:
    from .preference import LSTMCell, bilstm_long_term

    hist = _history(rng)
    fwd, bwd = LSTMCell(3, 4, rng, "f"), LSTMCell(3, 4, rng, "b")
    w = rng.normal(size=8)
    leaves = [hist, fwd.w_x, fwd.w_h, fwd.b, bwd.w_x, bwd.w_h, bwd.b]
    return Fixture(lambda: ad.tsum(bilstm_long_term(hist, fwd, bwd) * ad.constant(w)), leaves)


def asvd_fixture(rng) -> Fixture:
    from .preference import ASVDParams, asvd_long_term

    hist = _history(rng)
    p = ASVDParams.init(3, 4, rng)
    p.b_h.data[:] = rng.normal(size=4)
    w = rng.normal(size=4)
    leaves = [hist, p.w_h, p.b_h, p.w_x, p.b_x]
    return Fixture(lambda: ad.tsum(asvd_long_term(hist, p) * ad.constant(w)), leaves)


def short_term_fixture(rng) -> Fixture:
    from .preference import LSTMCell, lstm_short_term

    hist = _history(rng)
    cell = LSTMCell(3, 4, rng, "s")
    w = rng.normal(size=4)
    leaves = [hist, cell.w_x, cell.w_h, cell.b]
    return Fixture(lambda: ad.tsum(lstm_short_term(hist, 5, cell) * ad.constant(w)), leaves)


def six_node_fixture(rng, d: int = 5, k: int = 3):
    """Small two-cascade batch over a 6-node follower graph."""
    from .influence import GnnLayerParams, SocialGraph, build_batch

    # (follower, followee)
    edges = [(1, 0), (2, 0), (3, 1), (4, 1), (4, 2), (5, 3), (5, 4), (0, 5), (2, 3)]
    graph = SocialGraph([f"n{i}" for i in range(6)], edges)
    nodes = list(range(6))
    batch = build_batch(graph, [nodes, nodes], [[0], [1, 2]])
    e0 = ad.parameter(rng.normal(size=(batch.n_nodes, d)))
    theta = ad.parameter(rng.uniform(0.1, 0.9, size=(batch.n_nodes, k)))
    layers = [GnnLayerParams.init(d, k, rng, f"g{l}") for l in range(2)]
    for p in layers:
        p.xi.data[:] = rng.normal(size=1)
        p.eta.data[:] = rng.normal(size=1)
        p.w_s.data *= 3.0
    return graph, batch, e0, theta, layers


def propagate_mrse_fixture(rng) -> Fixture:
    from .influence import predict_size, propagate
    from .training import mrse_loss

    _, batch, e0, theta, layers = six_node_fixture(rng)
    truth = np.array([4.0, 5.0])
    leaves = [e0, theta] + [t for p in layers for t in p.named_parameters("l").values()]

    def f():
        trace = propagate(batch, e0, theta, layers)
        return mrse_loss(predict_size(trace.final, batch), truth)

    return Fixture(f, leaves)


COMPOSITES: dict[str, Callable] = {
    "topic_loss": topic_loss_fixture,
    "bilstm_long_term": bilstm_fixture,
    "asvd_long_term": asvd_fixture,
    "lstm_short_term": short_term_fixture,
    "propagate_mrse": propagate_mrse_fixture,
}


def run_fixture(builder: Callable, seed: int, h: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    fx = builder(rng)
    return finite_difference_check(fx.f, fx.leaves, h=h, tol=tol)


def run_all(points: int = 10, h: float = 1e-6, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    """Worst report per registered op over ``points`` random points (composites: 1)."""
    out = []
    for name, builder in PRIMITIVES.items():
        reports = [run_fixture(builder, s, h, tol) for s in range(points)]
        out.append((name, max(reports, key=lambda r: r.max_rel_error)))
    for name, builder in COMPOSITES.items():
        out.append((name, run_fixture(builder, 0, h, tol)))
    return out
