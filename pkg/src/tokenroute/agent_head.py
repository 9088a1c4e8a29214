"""Agent tokens: a trainable embedding matrix appended to a frozen word head.

Only ``agent_embeddings`` ever changes. The word head is the frozen model's
(tied) output matrix and is read, never copied or written.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ChecksumMismatch, ConfigError, DuplicateAgent, UnknownAgent
from .frozen_lm import FrozenModel, softmax
from .prompts import RouterEncoder

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
INIT_NOISE = 0.01
LARGE_BACKBONE_LEARNING_RATE = 4e-5


@dataclass
class AgentTokenHead:
    word_head: np.ndarray = field(repr=False)
    agent_embeddings: np.ndarray
    agent_ids: list[str]
    active: np.ndarray
    trained: set[str] = field(default_factory=set)
    parent_checksum: str = ""

    @classmethod
    def empty(cls, model: FrozenModel) -> "AgentTokenHead":
        d = model.config.hidden_dim
        return cls(model.word_head, np.zeros((0, d)), [], np.zeros(0, dtype=bool), set(), model.checksum())

    @property
    def dim(self) -> int:
        return self.word_head.shape[1]

    @property
    def n_words(self) -> int:
        return self.word_head.shape[0]

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)

    def row(self, agent_id: str) -> int:
        try:
            return self.agent_ids.index(agent_id)
        except ValueError:
            raise UnknownAgent(f"agent {agent_id!r} has no token row") from None

    def trainable_parameter_count(self) -> int:
        return int(self.agent_embeddings.size)

    def copy(self) -> "AgentTokenHead":
        return AgentTokenHead(
            self.word_head,
            self.agent_embeddings.copy(),
            list(self.agent_ids),
            self.active.copy(),
            set(self.trained),
            self.parent_checksum,
        )

    def tombstone(self, agent_id: str) -> "AgentTokenHead":
        out = self.copy()
        out.active[out.row(agent_id)] = False
        return out

    def agent_logits(self, h: np.ndarray) -> np.ndarray:
        logits = self.agent_embeddings @ h
        return np.where(self.active, logits, -np.inf)


def extend_head(head: AgentTokenHead, agent_id: str, seed: int = 0) -> AgentTokenHead:
    if agent_id in head.agent_ids:
        raise DuplicateAgent(f"agent {agent_id!r} already has a token row")
    rng = np.random.default_rng(seed)
    new_row = head.word_head.mean(axis=0) + INIT_NOISE * rng.standard_normal(head.dim)
    out = head.copy()
    out.agent_embeddings = np.vstack([head.agent_embeddings, new_row[None, :]])
    out.agent_ids.append(agent_id)
    out.active = np.append(head.active, True)
    return out


def _check_h(h, head: AgentTokenHead) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (head.dim,):
        raise ValueError(f"hidden vector has shape {h.shape}, head expects ({head.dim},)")
    if not np.all(np.isfinite(h)):
        raise ValueError("hidden vector contains non-finite entries")
    return h


def extended_distribution(h, head: AgentTokenHead, mask_agents: bool = False) -> np.ndarray:
    """Next-token distribution over words followed by agent tokens."""
    h = _check_h(h, head)
    if mask_agents:
        # Same computation as the frozen model's own head, so the word slice
        # matches it exactly.
        words = softmax(head.word_head @ h)
        return np.concatenate([words, np.zeros(head.n_agents)])
    return softmax(np.concatenate([head.word_head @ h, head.agent_logits(h)]))




def token_gradient(h, target_row: int, head: AgentTokenHead) -> np.ndarray:
    """Gradient of -log P(agent target_row | h) with respect to the agent rows."""
    h = _check_h(h, head)
    if not 0 <= target_row < head.n_agents or not head.active[target_row]:
        raise IndexError(f"invalid target agent row {target_row}")
    p = extended_distribution(h, head)[head.n_words:]
    coeff = p.copy()
    coeff[target_row] -= 1.0
    return np.outer(coeff, h)


def nll(h, target_row: int, head: AgentTokenHead) -> float:
    h = _check_h(h, head)
    logits = np.concatenate([head.word_head @ h, head.agent_logits(h)])
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[head.n_words + target_row])


# --- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 1.0
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    freeze_existing: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    # Large enough to damp the per-coordinate normalization once gradients
    # get small, so directions the data barely touches are not blown up to
    # full step size. Routing of mixed multi-agent prompts depends on it.
    eps: float = 0.1
    # Rate that multiplies weight_decay in the decoupled shrink. Pinned to the
    # large-backbone rate so a scaled-up learning_rate does not also scale the
    # regularization; None gives the textbook lr * weight_decay.
    decay_rate: float | None = LARGE_BACKBONE_LEARNING_RATE

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.decay_rate is not None and self.decay_rate < 0:
            raise ConfigError("decay_rate must be >= 0")

    @property
    def shrink_per_step(self) -> float:
        rate = self.learning_rate if self.decay_rate is None else self.decay_rate
        return rate * self.weight_decay

    @classmethod
    def large_backbone_preset(cls, **overrides) -> "TrainConfig":
        """Optimizer settings reported for the 8B-parameter backbone."""
        return cls(**{"learning_rate": LARGE_BACKBONE_LEARNING_RATE, "weight_decay": 1.0, "epochs": 10, "eps": 1e-8,
                      "decay_rate": None, **overrides})


@dataclass
class LossTrace:
    epoch_losses: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epoch_losses)


def training_features(head, demo_sets, model: FrozenModel, encoder: RouterEncoder | None = None):
    """Final-position hidden states and target rows for every demonstration."""
    encoder = encoder or RouterEncoder(model)
    feats, targets = [], []
    for demo_set in demo_sets:
        if demo_set.agent_id not in head.agent_ids:
            raise UnknownAgent(f"demonstrations given for unenrolled agent {demo_set.agent_id!r}")
        row = head.row(demo_set.agent_id)
        if not head.active[row]:
            raise UnknownAgent(f"agent {demo_set.agent_id!r} has been removed")
        for demo in demo_set.items:
            feats.append(encoder.last_hidden(demo.task_text, demo.state_text))
            targets.append(row)
    if not feats:
        raise ValueError("training corpus is empty")
    return np.array(feats), np.array(targets, dtype=np.int64)


def train(
    head: AgentTokenHead,
    demo_sets,
    model: FrozenModel,
    config: TrainConfig,
    encoder: RouterEncoder | None = None,
) -> tuple[AgentTokenHead, LossTrace]:
    """Fit agent rows so each demonstration's prompt predicts its agent token.

    Minimizes the summed negative log-likelihood of the agent token over all
    demonstrations with AdamW. With ``freeze_existing`` only rows that have
    never been trained move; the other agents' demonstrations still act as
    negatives for them.
    """
    if isinstance(demo_sets, Mapping):
        demo_sets = list(demo_sets.values())
    if head.parent_checksum and head.parent_checksum != model.checksum():
        raise ChecksumMismatch("head was built on a different frozen model")
    out = head.copy()
    trace = LossTrace()
    if config.epochs == 0:
        return out, trace

    H, targets = training_features(head, demo_sets, model, encoder)
    word_logits = H @ head.word_head.T  # frozen, computed once
    if config.freeze_existing:
        trainable = np.array([a not in head.trained for a in head.agent_ids]) & head.active
    else:
        trainable = head.active.copy()
    mask = trainable[:, None].astype(np.float64)

    W = out.agent_embeddings
    shrink = config.shrink_per_step
    m = np.zeros_like(W)
    v = np.zeros_like(W)
    rng = np.random.default_rng(config.seed)
    n = len(targets)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            hb, tb = H[idx], targets[idx]
            agent_logits = np.where(head.active, hb @ W.T, -np.inf)
            logits = np.concatenate([word_logits[idx], agent_logits], axis=1)
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            p_agents = probs[:, head.n_words:]
            total += float(-np.log(p_agents[np.arange(len(idx)), tb]).sum())
            coeff = p_agents.copy()
            coeff[np.arange(len(idx)), tb] -= 1.0
            grad = (coeff.T @ hb) / len(idx) * mask

            step += 1
            m = config.beta1 * m + (1 - config.beta1) * grad
            v = config.beta2 * v + (1 - config.beta2) * grad**2
            m_hat = m / (1 - config.beta1**step)
            v_hat = v / (1 - config.beta2**step)
            update = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps) + shrink * W
            W = W - update * mask
        trace.epoch_losses.append(total / n)
        logger.info("epoch %d mean nll %.4f", epoch + 1, trace.epoch_losses[-1])

    out.agent_embeddings = W
    out.trained |= {a for a, t in zip(head.agent_ids, trainable) if t}
    return out, trace


# --- checkpoints --------------------------------------------------------------


def head_to_dict(head: AgentTokenHead) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "d": head.dim,
        "agent_ids": list(head.agent_ids),
        "agent_embeddings": [row.tolist() for row in head.agent_embeddings],
        "active": [bool(a) for a in head.active],
        "trained": sorted(head.trained),
        "parent_checksum": head.parent_checksum,
    }


def head_from_dict(payload: dict, model: FrozenModel) -> AgentTokenHead:
    if payload.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported head format {payload.get('format_version')!r}")
    if payload["parent_checksum"] != model.checksum():
        raise ChecksumMismatch("head checkpoint belongs to a different frozen model")
    d = int(payload["d"])
    if d != model.config.hidden_dim:
        raise ConfigError(f"head dimension {d} does not match model dimension {model.config.hidden_dim}")
    rows = np.array(payload["agent_embeddings"], dtype=np.float64).reshape(-1, d)
    return AgentTokenHead(
        model.word_head,
        rows,
        list(payload["agent_ids"]),
        np.array(payload["active"], dtype=bool).reshape(-1),
        set(payload["trained"]),
        payload["parent_checksum"],
    )


def save_head(head: AgentTokenHead, path: str | Path) -> None:
    Path(path).write_text(json.dumps(head_to_dict(head)))


def load_head(path: str | Path, model: FrozenModel) -> AgentTokenHead:
    return head_from_dict(json.loads(Path(path).read_text()), model)
