"""The full cascade-size model: topics -> preferences -> influence GNN."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .influence import GnnLayerParams, GraphBatch, build_batch, predict_size, propagate
from .preference import (
    ASVDParams,
    ConfigurationError,
    LSTMCell,
    batch_asvd_long_term,
    batch_bilstm_long_term,
    batch_lstm_short_term,
    fuse,
    with_fallback,
)
from .topic import TopicModel, theta_tensor, topic_loss

VARIANTS = {
    "peg": {},
    "pegl": {},
    "pega": {"long_term": "asvd"},
    "peg-t": {"use_topics": False},
    "peg-s": {"use_short": False},
    "peg-l": {"use_long": False},
    "peg-d": {"use_preference": False},
}


@dataclass
class ModelConfig:
    n_topics: int = 4
    d_phi: int = 32
    topic_hidden: int = 100
    prior_std: float = 1.0
    d_long: int = 32
    d_short: int = 32
    d_g: int = 64
    n_layers: int = 2
    tau: int = 10
    long_term: str = "bilstm"
    use_long: bool = True
    use_short: bool = True
    use_preference: bool = True
    use_topics: bool = True

    def __post_init__(self):
        if self.long_term not in ("bilstm", "asvd"):
            raise ConfigurationError(f"unknown long-term encoder {self.long_term!r}")
        if not (self.use_long or self.use_short):
            raise ConfigurationError("at least one of the long/short-term parts must be kept")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "ModelConfig":
        key = variant.lower()
        if key not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        return cls(**{**kw, **VARIANTS[key]})

    @property
    def long_width(self) -> int:
        return 2 * self.d_long if self.long_term == "bilstm" else self.d_long


class PEGModel:
    def __init__(self, config: ModelConfig, vocab_size: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.config = cfg = config
        k = cfg.n_topics
        self.topic = TopicModel(vocab_size, k, cfg.d_phi, cfg.topic_hidden, cfg.prior_std, rng)
        self.tfidf_w = ad.parameter(rng.normal(0, 1 / np.sqrt(vocab_size), size=(vocab_size, k)), "tfidf.w")
        self.tfidf_b = ad.parameter(np.zeros(k), "tfidf.b")
        self.fwd = LSTMCell(k, cfg.d_long, rng, "pref.fwd")
        self.bwd = LSTMCell(k, cfg.d_long, rng, "pref.bwd")
        self.asvd = ASVDParams.init(k, cfg.d_long, rng, "pref.asvd")
        self.short = LSTMCell(k, cfg.d_short, rng, "pref.short")
        self.fallback_long = ad.parameter(np.zeros(cfg.long_width), "pref.fallback_long")
        self.fallback_short = ad.parameter(np.zeros(cfg.d_short), "pref.fallback_short")
        width = (cfg.long_width if cfg.use_long else 0) + (cfg.d_short if cfg.use_short else 0)
        lim = np.sqrt(6.0 / (width + cfg.d_g))
        self.fuse_w = ad.parameter(rng.uniform(-lim, lim, size=(width, cfg.d_g)), "pref.fuse_w")
        self.fuse_b = ad.parameter(np.zeros(cfg.d_g), "pref.fuse_b")
        self.layers = [GnnLayerParams.init(cfg.d_g, k, rng, f"gnn.{l}") for l in range(cfg.n_layers)]

    def named_parameters(self) -> dict[str, Tensor]:
        """Trainable tensors actually used by the configured variant, in fixed order."""
        cfg = self.config
        out: dict[str, Tensor] = {}
        if cfg.use_topics:
            out.update(self.topic.named_parameters("topic"))
        else:
            out.update({"tfidf.w": self.tfidf_w, "tfidf.b": self.tfidf_b})
        if cfg.use_long:
            if cfg.use_preference:
                if cfg.long_term == "bilstm":
                    out.update(self.fwd.named_parameters("pref.fwd"))
                    out.update(self.bwd.named_parameters("pref.bwd"))
                else:
                    out.update(self.asvd.named_parameters("pref.asvd"))
            out["pref.fallback_long"] = self.fallback_long
        if cfg.use_short:
            if cfg.use_preference:
                out.update(self.short.named_parameters("pref.short"))
            out["pref.fallback_short"] = self.fallback_short
        out["pref.fuse_w"] = self.fuse_w
        out["pref.fuse_b"] = self.fuse_b
        for l, p in enumerate(self.layers):
            out.update(p.named_parameters(f"gnn.{l}"))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {', '.join(missing)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != model shape {t.shape}")
            t.data = np.array(state[k], dtype=t.data.dtype)

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()

    # ------------------------------------------------------------ forward

    def doc_vectors(self, counts: np.ndarray, tfidf: np.ndarray) -> Tensor:
        if self.config.use_topics:
            return theta_tensor(counts, self.topic)
        return ad.sigmoid(ad.linear(ad.constant(tfidf), self.tfidf_w, self.tfidf_b))

    def user_embeddings(self, doc_vecs: Tensor, seqs: Sequence[Sequence[int]]) -> Tensor:
        """Fused initial node embeddings for users with the given history rows."""
        cfg = self.config
        n = len(seqs)
        has = np.array([len(s) > 0 for s in seqs]) if cfg.use_preference else np.zeros(n, bool)
        parts = []
        if cfg.use_long:
            if has.any():
                if cfg.long_term == "bilstm":
                    rows = batch_bilstm_long_term(doc_vecs, seqs, self.fwd, self.bwd)
                else:
                    rows = batch_asvd_long_term(doc_vecs, seqs, self.asvd)
                parts.append(with_fallback(rows, has, self.fallback_long))
            else:
                parts.append(ad.outer_mask(np.ones(n), self.fallback_long))
        if cfg.use_short:
            if has.any():
                rows = batch_lstm_short_term(doc_vecs, seqs, cfg.tau, self.short)
                parts.append(with_fallback(rows, has, self.fallback_short))
            else:
                parts.append(ad.outer_mask(np.ones(n), self.fallback_short))
        p_long = parts[0] if cfg.use_long else None
        p_short = parts[-1] if cfg.use_short else None
        return fuse(p_long, p_short, self.fuse_w, self.fuse_b)

    def forward(self, data: Dataset, cascade_idx: Sequence[int], node_sets: Sequence[Sequence[int]]):
        """Predicted sizes for ``cascade_idx`` on the given per-cascade node sets.

        Returns ``(sizes, batch, trace)``.
        """
        seeds = [data.seed_indices(c) for c in cascade_idx]
        batch = build_batch(data.graph, node_sets, seeds)
        users = np.unique(batch.node_user)
        hist_docs = sorted({d for u in users for d in data.histories[u]})
        casc_docs = [data.cascade_doc[c] for c in cascade_idx]
        docs = sorted(set(hist_docs) | set(casc_docs))
        local = {d: i for i, d in enumerate(docs)}
        vecs = self.doc_vectors(data.counts[docs], data.tfidf[docs])
        seqs = [[local[d] for d in data.histories[u]] for u in users]
        emb = self.user_embeddings(vecs, seqs)
        user_pos = np.searchsorted(users, batch.node_user)
        e0 = ad.take(emb, user_pos)
        node_doc = np.array([local[casc_docs[o]] for o in batch.owner], dtype=np.int64)
        theta_nodes = ad.take(vecs, node_doc)
        trace = propagate(batch, e0, theta_nodes, self.layers)
        return predict_size(trace.final, batch), batch, trace

    def topic_batch_loss(self, data: Dataset, cascade_idx, users, rng: np.random.Generator,
                         per_user: int = 4) -> Tensor | None:
        """Topic loss over the batch's cascade texts plus sampled history texts."""
        if not self.config.use_topics:
            return None
        docs = [data.cascade_doc[c] for c in cascade_idx]
        for u in users:
            h = data.histories[u]
            if h:
                take = min(per_user, len(h))
                docs.extend(int(h[i]) for i in sorted(rng.choice(len(h), size=take, replace=False)))
        counts = data.counts[docs]
        counts = counts[counts.sum(axis=1) > 0]
        if counts.shape[0] == 0:
            return None
        return topic_loss(counts, self.topic, rng=rng)

    def predict(self, data: Dataset, cascade_idx: Sequence[int], chunk: int = 64) -> np.ndarray:
        """Full-graph inference, no tape."""
        all_nodes = list(range(data.n_users))
        out = []
        for lo in range(0, len(cascade_idx), chunk):
            part = list(cascade_idx)[lo : lo + chunk]
            sizes, _, _ = self.forward(data, part, [all_nodes] * len(part))
            out.append(sizes.data.copy())
        return np.concatenate(out) if out else np.zeros(0)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
