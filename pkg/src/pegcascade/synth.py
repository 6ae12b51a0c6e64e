"""Synthetic follower networks, repost histories and cascades with planted
topic preferences, written in the same formats as real data."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import (
    CASCADES_FILE,
    HISTORIES_FILE,
    META_FILE,
    NETWORK_FILE,
    CascadeRecord,
    HistoryItem,
    write_cascades,
    write_histories,
    write_network,
)
from .influence import SocialGraph

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass
class SynthConfig:
    n_users: int = 200
    mean_degree: int = 6
    n_topics: int = 4
    vocab_size: int = 120
    words_per_topic: int = 25
    doc_length: tuple = (8, 16)
    history_length: tuple = (10, 30)
    n_cascades: int = 300
    seeds_per_cascade: tuple = (1, 3)
    p0: float = 0.05
    gamma: float = 4.0
    mixture_concentration: float = 0.3
    drift_prob: float = 0.3
    drift_fraction: float = 0.3
    max_rounds: int = 10
    round_seconds: int = 3600
    observation_fraction: float = 0.05
    users_with_history: float = 1.0
    homophily: float = 8.0
    seed: int = 0

    def __post_init__(self):
        self.doc_length = tuple(self.doc_length)
        self.history_length = tuple(self.history_length)
        self.seeds_per_cascade = tuple(self.seeds_per_cascade)
        positive = ("n_users", "mean_degree", "n_topics", "vocab_size", "words_per_topic",
                    "n_cascades", "max_rounds", "round_seconds")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.homophily < 0:
            raise ValueError("homophily must be non-negative")
        if not 0 <= self.p0 <= 1 or self.p0 * (1 + self.gamma) > 1 or self.gamma < 0:
            raise ValueError("need 0 <= p0 and p0 * (1 + gamma) <= 1")
        if self.words_per_topic * self.n_topics > self.vocab_size:
            raise ValueError("vocab_size too small for the topic word blocks")
        if not 0 < self.observation_fraction <= 1:
            raise ValueError("observation_fraction must lie in (0, 1]")
        if self.seeds_per_cascade[0] < 1 or self.seeds_per_cascade[1] > self.n_users:
            raise ValueError("seeds_per_cascade out of range")

    @property
    def observation_window(self) -> int:
        """Seconds covered by the diffusion rounds that fit completely inside
        ``observation_fraction`` of the round horizon (0 keeps only the posters)."""
        return int(np.floor(self.observation_fraction * self.max_rounds + 1e-9)) * self.round_seconds

    def to_toml(self) -> str:
        return "".join(f"{f.name} = {json.dumps(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def load(cls, path) -> "SynthConfig":
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown synth config keys: {', '.join(bad)}")
        return cls(**d)


@dataclass
class SynthWorld:
    graph: SocialGraph
    histories: dict
    cascades: list
    topic_words: np.ndarray  # (n_topics, vocab_size) word distributions
    mixtures: np.ndarray  # current per-user topic mixture
    content_topic: list
    initial_seeds: list
    degenerate: list
    exposures: int
    adoptions: int
    config: SynthConfig

    def meta(self) -> dict:
        return {
            "observation_window": self.config.observation_window,
            "degenerate_cascades": self.degenerate,
            "content_topic": {c.id: int(t) for c, t in zip(self.cascades, self.content_topic)},
            "exposures": self.exposures,
            "adoptions": self.adoptions,
            "config": asdict(self.config),
        }


def _user_names(n: int) -> list[str]:
    width = max(4, len(str(n - 1)))
    return [f"u{i:0{width}d}" for i in range(n)]


def preferential_attachment(n: int, m: int, rng: np.random.Generator,
                            mixtures: np.ndarray | None = None, homophily: float = 0.0) -> list[tuple[int, int]]:
    """Each arriving user follows up to ``m`` earlier users, chosen with
    probability proportional to (followers + 1) * (1 + homophily * similarity),
    where similarity is the dot product of the two users' topic mixtures."""
    followers = np.zeros(n)
    edges = []
    for v in range(1, n):
        k = min(m, v)
        w = followers[:v] + 1.0
        if mixtures is not None and homophily > 0:
            w = w * (1.0 + homophily * (mixtures[:v] @ mixtures[v]))
        targets = rng.choice(v, size=k, replace=False, p=w / w.sum())
        for u in sorted(int(t) for t in targets):
            edges.append((v, u))
            followers[u] += 1
    return edges


def _topic_word_matrix(cfg: SynthConfig) -> np.ndarray:
    beta = np.full((cfg.n_topics, cfg.vocab_size), 0.02 / cfg.vocab_size)
    for k in range(cfg.n_topics):
        lo = k * cfg.words_per_topic
        beta[k, lo : lo + cfg.words_per_topic] += 0.98 / cfg.words_per_topic
    return beta / beta.sum(axis=1, keepdims=True)


def _draw_tokens(topic: int, beta: np.ndarray, cfg: SynthConfig, vocab: list[str], rng) -> list[str]:
    n = int(rng.integers(cfg.doc_length[0], cfg.doc_length[1] + 1))
    return [vocab[i] for i in rng.choice(cfg.vocab_size, size=n, p=beta[topic])]


def simulate_world(cfg: SynthConfig) -> SynthWorld:
    rng = np.random.default_rng(cfg.seed)
    names = _user_names(cfg.n_users)
    vocab = [f"w{i:03d}" for i in range(cfg.vocab_size)]
    beta = _topic_word_matrix(cfg)
    k = cfg.n_topics

    base = rng.dirichlet(np.full(k, cfg.mixture_concentration), size=cfg.n_users)
    current = base.copy()
    drift_topic = np.full(cfg.n_users, -1)
    for v in range(cfg.n_users):
        if rng.random() < cfg.drift_prob:
            new = int(rng.integers(k))
            drift_topic[v] = new
            current[v] = 0.2 * base[v] + 0.8 * np.eye(k)[new]
    edges = preferential_attachment(cfg.n_users, cfg.mean_degree, rng, current, cfg.homophily)
    graph = SocialGraph(names, edges)

    histories: dict[str, list[HistoryItem]] = {}
    doc_counter = 0
    for v in range(cfg.n_users):
        items = []
        if rng.random() < cfg.users_with_history:
            n_items = int(rng.integers(cfg.history_length[0], cfg.history_length[1] + 1))
            switch = int(np.ceil(n_items * (1 - cfg.drift_fraction))) if drift_topic[v] >= 0 else n_items
            for i in range(n_items):
                mix = current[v] if i >= switch else base[v]
                topic = int(rng.choice(k, p=mix))
                items.append(HistoryItem(f"h{doc_counter:06d}", _draw_tokens(topic, beta, cfg, vocab, rng), i * 60))
                doc_counter += 1
        histories[names[v]] = items

    start = max((len(h) for h in histories.values()), default=0) * 60 + cfg.round_seconds
    reach = np.array([len(graph.out_neighbors(v)) + 1.0 for v in range(cfg.n_users)])
    cascades, topics, initial, degenerate = [], [], [], []
    exposures = adoptions = 0
    for ci in range(cfg.n_cascades):
        topic = int(rng.integers(k))
        tokens = _draw_tokens(topic, beta, cfg, vocab, rng)
        n_seeds = int(rng.integers(cfg.seeds_per_cascade[0], cfg.seeds_per_cascade[1] + 1))
        seeds = sorted(int(s) for s in rng.choice(cfg.n_users, size=n_seeds, replace=False, p=reach / reach.sum()))
        active = set(seeds)
        adopters = [(names[s], start) for s in seeds]
        frontier = seeds
        for rnd in range(1, cfg.max_rounds + 1):
            new = []
            for u in frontier:
                for v in graph.out_neighbors(u):
                    if v in active:
                        continue
                    exposures += 1
                    p = cfg.p0 * (1.0 + cfg.gamma * current[v, topic])
                    if rng.random() < p:
                        active.add(v)
                        new.append(v)
                        adoptions += 1
            new.sort()
            adopters.extend((names[v], start + rnd * cfg.round_seconds) for v in new)
            frontier = new
            if not frontier:
                break
        cid = f"c{ci:05d}"
        cascades.append(CascadeRecord(cid, tokens, adopters, len(adopters)))
        topics.append(topic)
        initial.append(seeds)
        if len(adopters) == len(seeds):
            degenerate.append(cid)
    # timestamps are relative to each cascade's posting time
    for c in cascades:
        c.adopters = [(u, ts - start) for u, ts in c.adopters]
    return SynthWorld(graph, histories, cascades, beta, current, topics, initial, degenerate,
                      exposures, adoptions, cfg)


def generate(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write network, histories, cascades and a meta file under ``out_dir``."""
    world = simulate_world(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "network": out / NETWORK_FILE,
        "histories": out / HISTORIES_FILE,
        "cascades": out / CASCADES_FILE,
        "meta": out / META_FILE,
    }
    write_network(world.graph, paths["network"])
    write_histories(world.histories, paths["histories"])
    write_cascades(world.cascades, paths["cascades"])
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(world.meta(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    (out / "synth.toml").write_text(cfg.to_toml(), encoding="utf-8")
    return paths
