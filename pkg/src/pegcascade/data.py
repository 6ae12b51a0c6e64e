"""File formats and the in-memory dataset the model trains on.

Formats:
  network.tsv     follower<TAB>followee per line
  histories.jsonl {"user": ..., "history": [{"id", "tokens", "ts"}, ...]}
  cascades.jsonl  {"id", "tokens", "adopters": [{"user", "ts"}], "final_size"}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .influence import CascadeInstance, DataError, SocialGraph
from .topic import BagOfWords, Vocabulary, build_vocabulary, count_matrix

log = logging.getLogger(__name__)

NETWORK_FILE = "network.tsv"
HISTORIES_FILE = "histories.jsonl"
CASCADES_FILE = "cascades.jsonl"
META_FILE = "meta.json"


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


# ---------------------------------------------------------------- network


def load_network(path, extra_users: Sequence[str] = ()) -> SocialGraph:
    """Read an edge list; users are sorted lexicographically.

    Duplicate edges are dropped with a warning; self-loops are errors.
    """
    pairs = []
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{lineno}: expected follower<TAB>followee")
            if parts[0] == parts[1]:
                raise DataError(f"{path}:{lineno}: self-loop on {parts[0]!r}")
            pairs.append((parts[0], parts[1]))
    unique = set(pairs)
    if len(unique) != len(pairs):
        log.warning("%s: dropped %d duplicate edges", path, len(pairs) - len(unique))
    users = sorted({u for p in unique for u in p} | set(extra_users))
    return SocialGraph.from_named_edges(users, sorted(unique))


def write_network(graph: SocialGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in graph.named_edges():
            fh.write(f"{a}\t{b}\n")


# -------------------------------------------------------------- histories


@dataclass
class HistoryItem:
    id: str
    tokens: list[str]
    ts: int


def load_histories(path) -> dict[str, list[HistoryItem]]:
    out: dict[str, list[HistoryItem]] = {}
    path = Path(path)
    if not path.exists():
        return out
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items = [HistoryItem(str(h["id"]), list(h["tokens"]), int(h["ts"])) for h in rec["history"]]
                user = str(rec["user"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed history record ({exc})") from exc
            if any(a.ts > b.ts for a, b in zip(items, items[1:])):
                raise DataError(f"{path}:{lineno}: history of {user!r} is not sorted by ts")
            if user in out:
                raise DataError(f"{path}:{lineno}: duplicate user {user!r}")
            out[user] = items
    return out


def write_histories(histories: dict[str, list[HistoryItem]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user, items in histories.items():
            rec = {"user": user, "history": [{"id": h.id, "tokens": h.tokens, "ts": h.ts} for h in items]}
            fh.write(_dumps(rec) + "\n")


# --------------------------------------------------------------- cascades


@dataclass
class CascadeRecord:
    id: str
    tokens: list[str]
    adopters: list[tuple[str, int]]
    final_size: int

    def seeds(self, window: float) -> list[str]:
        """Distinct adopters observed at or before ``window`` seconds."""
        seen, out = set(), []
        for u, ts in self.adopters:
            if ts <= window and u not in seen:
                seen.add(u)
                out.append(u)
        return out

    def instance(self, window: float) -> CascadeInstance:
        return CascadeInstance(self.id, self.tokens, self.seeds(window), self.final_size, list(self.adopters))


def load_cascades(path, known_users=None) -> list[CascadeRecord]:
    out = []
    path = Path(path)
    unknown: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                adopters = [(str(a["user"]), int(a["ts"])) for a in rec["adopters"]]
                c = CascadeRecord(str(rec["id"]), list(rec["tokens"]), adopters, int(rec["final_size"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed cascade record ({exc})") from exc
            if c.final_size <= 0:
                raise DataError(f"{path}:{lineno}: final_size must be positive")
            if known_users is not None:
                unknown.update(u for u, _ in adopters if u not in known_users)
            out.append(c)
    if unknown:
        raise DataError(f"{path}: cascades reference unknown users: {', '.join(sorted(unknown))}")
    return out


def write_cascades(cascades: Sequence[CascadeRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in cascades:
            rec = {
                "id": c.id,
                "tokens": c.tokens,
                "adopters": [{"user": u, "ts": ts} for u, ts in c.adopters],
                "final_size": c.final_size,
            }
            fh.write(_dumps(rec) + "\n")


# ---------------------------------------------------------------- dataset


def tfidf_matrix(counts: np.ndarray) -> np.ndarray:
    """Smoothed tf-idf rows, L2-normalised; empty rows stay zero."""
    n = counts.shape[0]
    df = (counts > 0).sum(axis=0)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    tf = counts * idf
    norms = np.linalg.norm(tf, axis=1, keepdims=True)
    return np.divide(tf, norms, out=np.zeros_like(tf), where=norms > 0)


@dataclass
class Dataset:
    graph: SocialGraph
    vocab: Vocabulary
    doc_ids: list[str]
    counts: np.ndarray
    histories: list[list[int]]  # per user, doc indices oldest first
    cascades: list[CascadeInstance]
    cascade_doc: list[int]
    observation_window: float
    tfidf: np.ndarray = field(init=False)

    def __post_init__(self):
        self.tfidf = tfidf_matrix(self.counts)

    @property
    def n_users(self) -> int:
        return len(self.graph)

    def seed_indices(self, c: int) -> list[int]:
        return [self.graph.index[u] for u in self.cascades[c].seeds]

    def truths(self, idx: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self.cascades)) if idx is None else idx
        return np.array([self.cascades[i].final_size for i in idx], dtype=float)


def build_dataset(
    graph: SocialGraph,
    histories: dict[str, list[HistoryItem]],
    cascades: Sequence[CascadeRecord],
    observation_window: float,
    min_count: int = 5,
    stoplist=(),
    vocab: Vocabulary | None = None,
) -> Dataset:
    unknown = sorted(u for u in histories if u not in graph.index)
    if unknown:
        raise DataError(f"histories reference unknown users: {', '.join(unknown)}")
    doc_index: dict[str, int] = {}
    doc_tokens: list[list[str]] = []

    def add_doc(doc_id: str, tokens: list[str]) -> int:
        if doc_id not in doc_index:
            doc_index[doc_id] = len(doc_tokens)
            doc_tokens.append(tokens)
        return doc_index[doc_id]

    user_hist = [[] for _ in range(len(graph))]
    for user, items in histories.items():
        user_hist[graph.index[user]] = [add_doc(h.id, h.tokens) for h in items]
    instances, cascade_doc = [], []
    for c in cascades:
        inst = c.instance(observation_window)
        missing = [u for u in inst.seeds if u not in graph.index]
        if missing:
            raise DataError(f"cascade {c.id}: unknown users {', '.join(missing)}")
        if not inst.seeds:
            log.warning("cascade %s has no adopters inside the observation window", c.id)
        instances.append(inst)
        cascade_doc.append(add_doc(f"cascade:{c.id}", c.tokens))
    if vocab is None:
        vocab = build_vocabulary(doc_tokens, min_count=min_count, stoplist=stoplist)
    bows = [BagOfWords.from_tokens(str(i), toks, vocab) for i, toks in enumerate(doc_tokens)]
    ids = [None] * len(doc_tokens)
    for k, i in doc_index.items():
        ids[i] = k
    return Dataset(graph, vocab, ids, count_matrix(bows, len(vocab)), user_hist, instances,
                   cascade_doc, float(observation_window))


def load_meta(data_dir) -> dict:
    p = Path(data_dir) / META_FILE
    if not p.exists():
        return {}
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


def load_dataset(data_dir, observation_window: float | None = None, min_count: int = 5,
                 vocab: Vocabulary | None = None) -> Dataset:
    data_dir = Path(data_dir)
    for name in (NETWORK_FILE, CASCADES_FILE):
        if not (data_dir / name).exists():
            raise FileNotFoundError(str(data_dir / name))
    histories = load_histories(data_dir / HISTORIES_FILE)
    graph = load_network(data_dir / NETWORK_FILE, extra_users=list(histories))
    cascades = load_cascades(data_dir / CASCADES_FILE, known_users=graph.index)
    if observation_window is None:
        observation_window = float(load_meta(data_dir).get("observation_window", 0.0))
    return build_dataset(graph, histories, cascades, observation_window, min_count=min_count, vocab=vocab)
