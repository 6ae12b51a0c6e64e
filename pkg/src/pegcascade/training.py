"""Joint optimisation of the cascade-size and topic losses."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .influence import sample_local_subgraph
from .model import ModelConfig, PEGModel

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pegcascade-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    variant: str = "peg"
    lam: float = 0.1
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    patience: int = 10
    clip_norm: float = 5.0
    n_layers: int = 2
    n_topics: int = 4
    tau: int = 10
    d_phi: int = 32
    topic_hidden: int = 100
    d_long: int = 32
    d_short: int = 32
    d_g: int = 64
    neighbor_cap: int = 25
    history_texts_per_user: int = 4
    min_count: int = 5
    seed: int = 0
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")
        if self.batch_size < 1 or self.n_layers < 1 or self.tau < 1 or self.n_topics < 2:
            raise ValueError("batch_size, n_layers and tau must be >= 1 and n_topics >= 2")
        if self.learning_rate < 0 or self.lam < 0:
            raise ValueError("learning_rate and lam must be non-negative")

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_variant(
            self.variant, n_topics=self.n_topics, d_phi=self.d_phi, topic_hidden=self.topic_hidden,
            d_long=self.d_long, d_short=self.d_short, d_g=self.d_g, n_layers=self.n_layers, tau=self.tau,
        )

    def to_toml(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {json.dumps(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        out = {}
        for k, v in d.items():
            default = getattr(cls, k)
            out[k] = type(default)(v) if not isinstance(default, str) else str(v)
        return cls(**out)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


# ------------------------------------------------------------------ losses


def mrse_loss(pred, truth) -> Tensor:
    """Mean of ((pred - truth) / truth)^2."""
    pred = ad.as_tensor(pred)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if truth.size == 0 or pred.size != truth.size:
        raise ValueError(f"mrse_loss: {pred.size} predictions for {truth.size} truths")
    if np.any(truth <= 0):
        raise ValueError("mrse_loss: true sizes must be positive")
    rel = (ad.reshape(pred, truth.shape) - ad.constant(truth)) / ad.constant(truth)
    return ad.mean(rel * rel)


@dataclass
class LossParts:
    total: Tensor
    mrse: Tensor
    topic: Tensor | None


def joint_loss(model: PEGModel, data: Dataset, cascade_idx: Sequence[int], node_sets, lam: float,
               rng: np.random.Generator, per_user: int = 4) -> LossParts:
    """``L_m + lam * L_topic`` for one batch; the topic term is skipped at lam=0."""
    sizes, batch, _ = model.forward(data, cascade_idx, node_sets)
    lm = mrse_loss(sizes, data.truths(cascade_idx))
    lt = None
    if lam > 0:
        lt = model.topic_batch_loss(data, cascade_idx, np.unique(batch.node_user), rng, per_user)
    total = lm if lt is None else lm + lt * lam
    return LossParts(total, lm, lt)


# --------------------------------------------------------------- optimiser


@dataclass
class Adam:
    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p.data))
            self.v.setdefault(k, np.zeros_like(p.data))

    def step(self) -> None:
        for k, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {k}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params.values():
            p.grad = p.grad * scale
    return total


# ----------------------------------------------------------------- splits


def split_of(cascade_id: str, seed: int, fractions=(0.7, 0.1, 0.2)) -> str:
    """Assign a cascade to train/val/test from a hash of (id, seed)."""
    h = hashlib.sha256(f"{seed}:{cascade_id}".encode()).digest()
    u = int.from_bytes(h[:8], "big") / 2.0**64
    if u < fractions[0]:
        return "train"
    if u < fractions[0] + fractions[1]:
        return "val"
    return "test"


def make_splits(data: Dataset, cfg: TrainConfig) -> dict[str, list[int]]:
    fr = (cfg.train_frac, cfg.val_frac, cfg.test_frac)
    out = {"train": [], "val": [], "test": []}
    for i, c in enumerate(data.cascades):
        out[split_of(c.item_id, cfg.seed, fr)].append(i)
    for k, v in out.items():
        if not v:
            raise ValueError(f"{k} split is empty")
    return out


# -------------------------------------------------------------- checkpoint


def save_checkpoint(path, model: PEGModel, train_cfg: TrainConfig | None = None,
                    vocab_tokens: Sequence[str] | None = None, state: dict | None = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "train_config": asdict(train_cfg) if train_cfg else None,
        "vocab_size": model.topic.vocab_size,
        "vocab": list(vocab_tokens) if vocab_tokens is not None else None,
    }
    arrays = state if state is not None else model.state_dict()
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path) -> tuple[PEGModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        state = {k: z[k] for k in z.files if k != "__header__"}
    model = PEGModel(ModelConfig(**header["model_config"]), header["vocab_size"])
    model.load_state_dict(state)
    return model, header


# ------------------------------------------------------------------ train


@dataclass
class TrainResult:
    model: PEGModel
    best_state: dict
    best_epoch: int
    best_val_mrse: float
    log: list[dict]
    splits: dict[str, list[int]]

    def write_log(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_mrse"])
            for row in self.log:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_mrse"])])

    @property
    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.log]


def evaluate_mrse(model: PEGModel, data: Dataset, idx: Sequence[int]) -> float:
    pred = model.predict(data, idx)
    return float(mrse_loss(pred, data.truths(idx)).data)


def train(cfg: TrainConfig, data: Dataset, splits: dict[str, list[int]] | None = None,
          model: PEGModel | None = None) -> TrainResult:
    splits = splits or make_splits(data, cfg)
    for k in ("train", "val"):
        if not splits.get(k):
            raise ValueError(f"{k} split is empty")
    overlap = set(splits["train"]) & set(splits["val"]) | set(splits["train"]) & set(splits.get("test", []))
    if overlap:
        raise ValueError("train/val/test splits overlap")
    rng = np.random.default_rng(cfg.seed)
    model = model or PEGModel(cfg.model_config(), len(data.vocab), np.random.default_rng(cfg.seed))
    params = model.named_parameters()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    best_state = model.state_dict()
    best_val, best_epoch, stale = math.inf, 0, 0
    rows: list[dict] = []
    train_idx = list(splits["train"])

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_idx))
        weighted, seen = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = [train_idx[j] for j in order[lo : lo + cfg.batch_size]]
            node_sets = []
            for c in idx:
                seeds = data.seed_indices(c)
                node_sets.append(
                    sample_local_subgraph(data.graph, seeds, cfg.n_layers, cfg.neighbor_cap, rng) if seeds else []
                )
            model.zero_grad()
            with Tape() as tape:
                parts = joint_loss(model, data, idx, node_sets, cfg.lam, rng, cfg.history_texts_per_user)
            tape.backward(parts.total)
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            weighted += float(parts.total.data) * len(idx)
            seen += len(idx)
        train_loss = weighted / seen
        val = evaluate_mrse(model, data, splits["val"])
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_mrse": val})
        log.info("epoch %d train_loss %.6f val_mrse %.6f", epoch, train_loss, val)
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best_state = model.state_dict()
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                log.info("early stop after %d epochs without improvement", stale)
                break
    return TrainResult(model, best_state, best_epoch, best_val, rows, splits)
