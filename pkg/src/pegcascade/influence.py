"""Gated graph-attention propagation of activation probabilities.

Influence flows from a followee ``u`` to each follower ``v``; ``N(v)`` is the
set of accounts ``v`` follows.  Layers work on an edge list (``src`` = u,
``dst`` = v) so a batch of cascades is just a disjoint union of subgraphs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class SocialGraph:
    """Directed follower network with dense integer node ids."""

    def __init__(self, users: Sequence[str], edges: Sequence[tuple[int, int]] = ()):
        self.users = list(users)
        self.index = {u: i for i, u in enumerate(self.users)}
        if len(self.index) != len(self.users):
            raise DataError("duplicate user ids")
        pairs = sorted({(int(a), int(b)) for a, b in edges if a != b})
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        self.follower = arr[:, 0]
        self.followee = arr[:, 1]
        n = len(self.users)
        # influence edges u -> v: src = followee, dst = follower
        self.src = self.followee
        self.dst = self.follower
        self._followers = [[] for _ in range(n)]
        self._followees = [[] for _ in range(n)]
        for a, b in pairs:
            self._followers[b].append(a)
            self._followees[a].append(b)

    @classmethod
    def from_named_edges(cls, users: Sequence[str], named: Sequence[tuple[str, str]]) -> "SocialGraph":
        index = {u: i for i, u in enumerate(users)}
        return cls(users, [(index[a], index[b]) for a, b in named])

    def __len__(self) -> int:
        return len(self.users)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def in_neighbors(self, v: int) -> list[int]:
        """N(v): accounts whose activity reaches ``v``."""
        return self._followees[v]

    def out_neighbors(self, u: int) -> list[int]:
        """Accounts that ``u`` can influence (its followers)."""
        return self._followers[u]

    def named_edges(self) -> list[tuple[str, str]]:
        return [(self.users[a], self.users[b]) for a, b in zip(self.follower, self.followee)]


@dataclass
class CascadeInstance:
    item_id: str
    tokens: list[str]
    seeds: list[str]
    final_size: int
    adopters: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.final_size < len(set(self.seeds)):
            raise DataError(f"cascade {self.item_id}: final size {self.final_size} < {len(self.seeds)} seeds")


@dataclass
class GnnLayerParams:
    w: Tensor  # (d, d), applied as e @ w
    w_i: Tensor  # (d + K, d)
    w_s: Tensor  # (2d,): first half scores W e_u, second half W e_v
    a: Tensor  # (2d,): first half receiver v, second half sender u
    xi: Tensor  # (1,), squashed by sigmoid
    eta: Tensor  # (1,), squashed by sigmoid

    @classmethod
    def init(cls, d: int, k: int, rng: np.random.Generator, name: str = "gnn") -> "GnnLayerParams":
        def glorot(shape):
            lim = np.sqrt(6.0 / (shape[0] + shape[-1]))
            return rng.uniform(-lim, lim, size=shape)

        return cls(
            ad.parameter(glorot((d, d)), f"{name}.w"),
            ad.parameter(glorot((d + k, d)), f"{name}.w_i"),
            ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=2 * d), f"{name}.w_s"),
            ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=2 * d), f"{name}.a"),
            ad.parameter(np.zeros(1), f"{name}.xi"),
            ad.parameter(np.zeros(1), f"{name}.eta"),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w", "w_i", "w_s", "a", "xi", "eta")}

    @property
    def dim(self) -> int:
        return self.w.shape[0]


@dataclass
class GraphBatch:
    """Disjoint union of per-cascade subgraphs."""

    node_user: np.ndarray  # global user index of every local node
    src: np.ndarray
    dst: np.ndarray
    seed: np.ndarray  # bool per node
    owner: np.ndarray  # cascade index per node
    n_cascades: int

    @property
    def n_nodes(self) -> int:
        return int(self.node_user.size)


def build_batch(graph: SocialGraph, node_sets: Sequence[Sequence[int]], seed_sets: Sequence[Sequence[int]]) -> GraphBatch:
    users, srcs, dsts, seeds, owner = [], [], [], [], []
    offset = 0
    n = len(graph)
    for c, (nodes, sd) in enumerate(zip(node_sets, seed_sets)):
        nodes = np.asarray(sorted(set(int(x) for x in nodes)), dtype=np.int64)
        local = np.full(n, -1, dtype=np.int64)
        local[nodes] = np.arange(nodes.size)
        keep = (local[graph.src] >= 0) & (local[graph.dst] >= 0)
        srcs.append(local[graph.src[keep]] + offset)
        dsts.append(local[graph.dst[keep]] + offset)
        is_seed = np.zeros(nodes.size, dtype=bool)
        sd = [int(s) for s in sd]
        if any(local[s] < 0 for s in sd):
            raise DataError(f"cascade {c}: seed outside its node set")
        is_seed[local[sd]] = True
        users.append(nodes)
        seeds.append(is_seed)
        owner.append(np.full(nodes.size, c, dtype=np.int64))
        offset += nodes.size

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    return GraphBatch(
        cat(users, np.int64), cat(srcs, np.int64), cat(dsts, np.int64),
        cat(seeds, bool), cat(owner, np.int64), len(node_sets),
    )


# ------------------------------------------------------------ layer pieces


def gamma(x: np.ndarray) -> np.ndarray:
    """Step gate: 1 where x > 0, else 0."""
    return (np.asarray(x) > 0).astype(float)


def init_activation(batch: GraphBatch) -> Tensor:
    if batch.n_cascades and not batch.seed.any():
        log.warning("batch has no seed users; every activation starts at 0")
    return ad.constant(batch.seed.astype(float))


def gat_attention(we: Tensor, batch: GraphBatch, a: Tensor) -> Tensor:
    """Per-edge attention weight of sender ``src`` for receiver ``dst``."""
    d = we.shape[1]
    n = batch.n_nodes
    if batch.src.size == 0:
        return ad.constant(np.zeros(0))
    recv = ad.matmul(we, a[0:d])
    send = ad.matmul(we, a[d : 2 * d])
    scores = ad.leaky_relu(ad.take(recv, batch.dst) + ad.take(send, batch.src), 0.2)
    return ad.segment_softmax(scores, batch.dst, n)


def neighbor_influence(we: Tensor, s: Tensor, alpha: Tensor, batch: GraphBatch, theta_nodes: Tensor) -> Tensor:
    """``[sum_u s_u alpha_vu W e_u || Gamma(sum_u s_u) theta]`` for every node.

    The step gate is evaluated on forward values and carries no gradient.
    """
    n, d = we.shape
    n_edges = batch.src.size
    if n_edges:
        coef = alpha * ad.take(s, batch.src)
        msg = ad.expand(ad.reshape(coef, (n_edges, 1)), (n_edges, d)) * ad.take(we, batch.src)
        agg = ad.segment_sum(msg, batch.dst, n)
        s_in = np.zeros(n)
        np.add.at(s_in, batch.dst, s.data[batch.src])
    else:
        agg = ad.constant(np.zeros((n, d)))
        s_in = np.zeros(n)
    return ad.concat([agg, ad.outer_mask(gamma(s_in), theta_nodes)], axis=1)


def update_embedding(we: Tensor, influence: Tensor, p: GnnLayerParams) -> Tensor:
    xi = ad.sigmoid(p.xi)
    return ad.sigmoid(xi * we + (1.0 - xi) * ad.matmul(influence, p.w_i))


def update_activation(
    we: Tensor, s: Tensor, batch: GraphBatch, p: GnnLayerParams,
    clamp_seeds: bool = True, keep_untouched: bool = True,
) -> Tensor:
    """Gated activation update read entirely from layer-l values.

    ``keep_untouched`` leaves nodes with zero activation and no active
    in-neighbour at exactly 0 instead of the sigmoid's 0.5.
    """
    n, d = we.shape
    eta = ad.sigmoid(p.eta)
    score_u = ad.matmul(we, p.w_s[0:d])
    score_v = ad.matmul(we, p.w_s[d : 2 * d])
    s_in = np.zeros(n)
    if batch.src.size:
        np.add.at(s_in, batch.dst, s.data[batch.src])
        pushed = ad.segment_sum(ad.take(score_u * s, batch.src), batch.dst, n)
        mass = ad.segment_sum(ad.take(s, batch.src), batch.dst, n)
        inner = pushed + score_v * mass
    else:
        inner = ad.constant(np.zeros(n))
    out = ad.sigmoid((1.0 - eta) * s + eta * inner)
    if keep_untouched:
        touched = ((s_in > 0) | (s.data > 0)).astype(float)
        if not touched.all():
            out = out * ad.constant(touched)
    if clamp_seeds and batch.seed.any():
        sd = batch.seed.astype(float)
        out = out * ad.constant(1.0 - sd) + ad.constant(sd)
    return out


@dataclass
class PropagationTrace:
    embeddings: list[Tensor]
    activations: list[Tensor]
    attention: list[Tensor]

    @property
    def final(self) -> Tensor:
        return self.activations[-1]


def gnn_layer(e: Tensor, s: Tensor, batch: GraphBatch, theta_nodes: Tensor, p: GnnLayerParams, clamp_seeds=True):
    we = ad.matmul(e, p.w)
    alpha = gat_attention(we, batch, p.a)
    infl = neighbor_influence(we, s, alpha, batch, theta_nodes)
    e_next = update_embedding(we, infl, p)
    s_next = update_activation(we, s, batch, p, clamp_seeds=clamp_seeds)
    return e_next, s_next, alpha


def propagate(
    batch: GraphBatch, e0: Tensor, theta_nodes: Tensor, layers: Sequence[GnnLayerParams],
    clamp_seeds: bool = True,
) -> PropagationTrace:
    """Run every layer; each reads only the previous layer's state."""
    if len(layers) < 1:
        raise ValueError("need at least one GNN layer")
    if e0.shape[0] != batch.n_nodes:
        raise ValueError(f"{e0.shape[0]} embeddings for {batch.n_nodes} nodes")
    e, s = e0, init_activation(batch)
    trace = PropagationTrace([e], [s], [])
    for p in layers:
        e, s, alpha = gnn_layer(e, s, batch, theta_nodes, p, clamp_seeds)
        trace.embeddings.append(e)
        trace.activations.append(s)
        trace.attention.append(alpha)
    return trace


def predict_size(s: Tensor, batch: GraphBatch) -> Tensor:
    """Expected cascade sizes: per-cascade sum of final activations."""
    return ad.segment_sum(s, batch.owner, batch.n_cascades)


def sample_local_subgraph(
    graph: SocialGraph, seeds: Sequence[int], n_hops: int, neighbor_cap: int | None,
    rng: np.random.Generator,
) -> list[int]:
    """Nodes reachable from ``seeds`` along influence edges within ``n_hops``.

    Each expanded node contributes at most ``neighbor_cap`` followers, drawn
    uniformly without replacement.
    """
    if not seeds:
        raise ValueError("sample_local_subgraph needs at least one seed")
    chosen = set(int(s) for s in seeds)
    frontier = sorted(chosen)
    for _ in range(n_hops):
        nxt = []
        for u in frontier:
            cand = graph.out_neighbors(u)
            if neighbor_cap is not None and len(cand) > neighbor_cap:
                cand = [cand[i] for i in sorted(rng.choice(len(cand), size=neighbor_cap, replace=False))]
            for v in cand:
                if v not in chosen:
                    chosen.add(v)
                    nxt.append(v)
        frontier = sorted(nxt)
        if not frontier:
            break
    return sorted(chosen)
