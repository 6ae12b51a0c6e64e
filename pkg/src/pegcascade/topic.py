"""Neural topic model: a VAE over bag-of-words with a Laplace-approximated
Dirichlet prior whose parameters come from learned topic state vectors."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8


class EmptyVocabularyError(ValueError):
    pass


@dataclass
class Vocabulary:
    tokens: list[str]
    counts: list[int]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (tok, c) in enumerate(zip(self.tokens, self.counts)):
                fh.write(f"{tok}\t{i}\t{c}\n")

    @classmethod
    def from_tsv(cls, path) -> "Vocabulary":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected token<TAB>index<TAB>count")
                rows.append((int(parts[1]), parts[0], int(parts[2])))
        rows.sort()
        if [r[0] for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: indices are not dense")
        return cls([r[1] for r in rows], [r[2] for r in rows])


def build_vocabulary(
    corpus: Iterable[Sequence[str]], min_count: int = 30, stoplist: Iterable[str] = ()
) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times and not stoplisted.

    Ordering is by descending frequency, ties broken lexicographically.
    """
    freq: Counter = Counter()
    n_docs = 0
    for doc in corpus:
        freq.update(doc)
        n_docs += 1
    if n_docs == 0:
        raise ValueError("corpus is empty")
    stop = set(stoplist)
    kept = [(tok, c) for tok, c in freq.items() if c >= min_count and tok not in stop]
    if not kept:
        raise EmptyVocabularyError(f"no token reaches min_count={min_count}")
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocabulary([t for t, _ in kept], [c for _, c in kept])


@dataclass
class BagOfWords:
    doc_id: str
    counts: dict[int, int]

    @classmethod
    def from_tokens(cls, doc_id: str, tokens: Iterable[str], vocab: Vocabulary) -> "BagOfWords":
        c = Counter(vocab.index[t] for t in tokens if t in vocab.index)
        return cls(doc_id, dict(sorted(c.items())))

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def dense(self, vocab_size: int) -> np.ndarray:
        row = np.zeros(vocab_size)
        for i, c in self.counts.items():
            if not 0 <= i < vocab_size:
                raise IndexError(f"word index {i} outside vocabulary of size {vocab_size}")
            row[i] = c
        return row


def count_matrix(docs: Sequence[BagOfWords], vocab_size: int) -> np.ndarray:
    out = np.zeros((len(docs), vocab_size))
    for r, doc in enumerate(docs):
        for i, c in doc.counts.items():
            out[r, i] = c
    return out


def load_corpus_jsonl(path) -> list[tuple[str, list[str]]]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append((str(rec["id"]), list(rec["tokens"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed corpus record ({exc})") from exc
    return docs


# ------------------------------------------------------------------ model


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


@dataclass
class TopicPosterior:
    mu: Tensor
    logvar: Tensor
    theta: Tensor | None = None


@dataclass
class PriorParams:
    mu: Tensor
    var: Tensor
    alpha: Tensor


class TopicModel:
    """Encoder heads, topic-word matrix and topic state vectors.

    Parameters are stored as ``(fan_in, fan_out)`` matrices so that rows of a
    document batch multiply on the left.
    """

    def __init__(
        self,
        vocab_size: int,
        n_topics: int,
        d_phi: int = 32,
        hidden: int = 100,
        prior_std: float = 1.0,
        rng: np.random.Generator | None = None,
    ):
        if n_topics < 2:
            raise ValueError("need at least two topics")
        rng = rng or np.random.default_rng(0)
        self.vocab_size, self.n_topics, self.d_phi, self.hidden = vocab_size, n_topics, d_phi, hidden
        self.prior_std = prior_std
        p = ad.parameter
        self.params: dict[str, Tensor] = {
            "phi": p(rng.normal(0.0, prior_std, size=(n_topics, d_phi))),
            "w_alpha": p(rng.normal(0.0, 1.0 / np.sqrt(d_phi), size=d_phi)),
            "b_alpha": p(np.zeros(1)),
            "beta": p(rng.normal(0.0, 0.1, size=(n_topics, vocab_size))),
            "mu_w1": p(_glorot(rng, vocab_size, hidden)),
            "mu_b1": p(np.zeros(hidden)),
            "mu_w2": p(_glorot(rng, hidden, n_topics)),
            "mu_b2": p(np.zeros(n_topics)),
            "sig_w1": p(_glorot(rng, vocab_size, hidden)),
            "sig_b1": p(np.zeros(hidden)),
            "sig_w2": p(_glorot(rng, hidden, n_topics)),
            "sig_b2": p(np.zeros(n_topics)),
        }
        for name, t in self.params.items():
            t.name = name

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self, prefix: str = "topic") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}


def _normalize_counts(counts: np.ndarray) -> np.ndarray:
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def encode(counts: np.ndarray, model: TopicModel) -> TopicPosterior:
    """Posterior mean and diagonal log-variance for each row of ``counts``."""
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    if np.any(counts.sum(axis=1) <= 0):
        raise ValueError("cannot encode an empty document")
    return _encode_normalized(_normalize_counts(counts), model)


def _encode_normalized(x: np.ndarray, model: TopicModel) -> TopicPosterior:
    m = model.params
    xin = ad.constant(x)
    h_mu = ad.softplus(ad.linear(xin, m["mu_w1"], m["mu_b1"]))
    mu = ad.linear(h_mu, m["mu_w2"], m["mu_b2"])
    h_sig = ad.softplus(ad.linear(xin, m["sig_w1"], m["sig_b1"]))
    var = ad.softplus(ad.linear(h_sig, m["sig_w2"], m["sig_b2"]))
    logvar = ad.log(var + VAR_FLOOR)
    return TopicPosterior(mu, logvar)


def sample_theta(mu, logvar, noise, training: bool = True) -> Tensor:
    """Reparameterised draw ``sigmoid(mu + noise * exp(logvar / 2))``.

    With ``training=False`` the noise is ignored (treated as zero).
    """
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    if not training:
        return ad.sigmoid(mu)
    noise = ad.constant(noise)
    return ad.sigmoid(mu + noise * ad.exp(logvar * 0.5))


def laplace_from_alpha(alpha: Tensor) -> tuple[Tensor, Tensor]:
    """Logistic-normal mean and diagonal variance matching Dirichlet(alpha)."""
    alpha = ad.as_tensor(alpha)
    k = alpha.shape[0]
    if k < 2:
        raise ValueError("Laplace approximation needs K >= 2")
    log_a = ad.log(alpha)
    mu = log_a - ad.tsum(log_a) * (1.0 / k)
    inv_a = 1.0 / alpha
    var = inv_a * (1.0 - 2.0 / k) + ad.tsum(inv_a) * (1.0 / k**2)
    return mu, var


def laplace_prior(model: TopicModel) -> PriorParams:
    m = model.params
    alpha = ad.sigmoid(ad.linear(m["phi"], m["w_alpha"]) + m["b_alpha"])
    mu, var = laplace_from_alpha(alpha)
    return PriorParams(mu, var, alpha)


def kl_divergence(mu: Tensor, logvar: Tensor, prior_mu: Tensor, prior_var: Tensor) -> Tensor:
    """Per-row KL between diagonal Gaussians q=(mu, exp(logvar)) and the prior.

    Includes the ``-K`` constant so identical distributions give exactly 0.
    """
    mu = ad.as_tensor(mu)
    n, k = mu.shape
    pm = ad.expand(ad.reshape(prior_mu, (1, k)), (n, k))
    pv = ad.expand(ad.reshape(prior_var, (1, k)), (n, k))
    var = ad.exp(logvar)
    diff = pm - mu
    terms = var / pv + diff * diff / pv + ad.log(pv) - logvar
    return (ad.tsum(terms, axis=1) - k) * 0.5


def word_log_probs(theta: Tensor, beta: Tensor) -> Tensor:
    """Row-normalised mixture ``theta @ sigmoid(beta)`` in log space."""
    scores = ad.matmul(theta, ad.sigmoid(beta))
    n, v = scores.shape
    totals = ad.tsum(scores, axis=1, keepdims=True)
    probs = scores / ad.expand(totals, (n, v))
    return ad.log(probs + LOG_FLOOR)


def reconstruction(counts: np.ndarray, theta: Tensor, beta: Tensor) -> Tensor:
    counts = np.atleast_2d(counts)
    return ad.tsum(ad.constant(counts) * word_log_probs(theta, beta), axis=1)


def topic_loss(
    counts: np.ndarray,
    model: TopicModel,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Negative ELBO averaged over the documents in ``counts``.

    Pass ``noise`` to freeze the reparameterisation draw; otherwise it is
    drawn from ``rng``.
    """
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    if counts.shape[0] == 0:
        raise ValueError("topic loss needs at least one document")
    post = encode(counts, model)
    if noise is None:
        rng = rng or np.random.default_rng()
        noise = rng.standard_normal(post.mu.shape)
    theta = sample_theta(post.mu, post.logvar, noise, training=True)
    prior = laplace_prior(model)
    rec = reconstruction(counts, theta, model["beta"])
    kl = kl_divergence(post.mu, post.logvar, prior.mu, prior.var)
    return ad.mean(kl - rec)


def theta_tensor(counts: np.ndarray, model: TopicModel) -> Tensor:
    """Deterministic topic vectors, differentiable w.r.t. the encoder.

    Rows with no in-vocabulary words get the constant 0.5 fallback.
    """
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    empty = counts.sum(axis=1) <= 0
    post = _encode_normalized(_normalize_counts(counts), model)
    theta = ad.sigmoid(post.mu)
    if not empty.any():
        return theta
    keep = (~empty).astype(float)
    return ad.outer_mask(keep, theta) + ad.constant(np.outer(empty, np.full(model.n_topics, 0.5)))


def infer_theta(counts: np.ndarray, model: TopicModel) -> tuple[np.ndarray, np.ndarray]:
    """Inference-time topic vectors and a boolean flag for empty documents."""
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    empty = counts.sum(axis=1) <= 0
    return theta_tensor(counts, model).data.copy(), empty


def top_words(model: TopicModel, vocab: Vocabulary, n: int = 10) -> list[list[tuple[str, float]]]:
    beta = model["beta"].data
    out = []
    for k in range(beta.shape[0]):
        order = np.argsort(-beta[k], kind="stable")[:n]
        out.append([(vocab.tokens[i], float(beta[k, i])) for i in order])
    return out


def export_topics(model: TopicModel, vocab: Vocabulary, path, n: int = 10) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write("topic\trank\ttoken\tweight\n")
        for k, words in enumerate(top_words(model, vocab, n)):
            for r, (tok, w) in enumerate(words):
                fh.write(f"{k}\t{r}\t{tok}\t{w:.6f}\n")
