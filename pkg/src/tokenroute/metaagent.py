"""Inference over the extended head: mode selection, routing and planning.

Router mode decodes greedily over words and agent tokens and stops at the
first agent token. Manager mode narrows the pool to the top-k agent tokens,
puts only those agents' documents in the manager prompt, and parses the
returned ``###Agent:subtask###`` lines into a :class:`Plan`.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .agent_head import AgentTokenHead, extended_distribution
from .errors import (
    AgentOutOfScope,
    ConfigError,
    ConsecutiveAgentError,
    PlanParseError,
    RoutingUndecided,
    TokenRouteError,
    UntrainedHead,
)
from .frozen_lm import FrozenModel
from .prompts import RouterEncoder, manager_prompt, mode_prompt
from .registry import AgentRegistry, render_context

logger = logging.getLogger(__name__)

ROUTER = "router"
MANAGER = "manager"
MODES = ("auto", ROUTER, MANAGER)


@dataclass(frozen=True)
class ManagerConfig:
    k: int = 5
    max_steps: int = 64
    mode_override: str = "auto"
    # Offline mode heuristic: manager when at least two agent tokens each
    # hold this share of the agent-token mass.
    manager_share: float = 0.10

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.mode_override not in MODES:
            raise ConfigError(f"mode_override must be one of {MODES}")
        if not 0 < self.manager_share <= 0.5:
            raise ConfigError("manager_share must lie in (0, 0.5]")


@dataclass(frozen=True)
class RoutingDecision:
    agent_id: str
    steps_taken: int
    top: tuple[tuple[str, float], ...]
    decoded: tuple[str, ...] = ()


@dataclass(frozen=True)
class Plan:
    steps: tuple[tuple[str, str], ...]
    mode: str = MANAGER

    def __post_init__(self):
        for (a, _), (b, _) in zip(self.steps, self.steps[1:]):
            if a == b:
                raise ConsecutiveAgentError(f"agent {a!r} is assigned two consecutive subtasks")

    @property
    def agents(self) -> list[str]:
        return [a for a, _ in self.steps]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "steps": [{"agent": a, "subtask": s} for a, s in self.steps]}


class Completer(Protocol):
    def complete(self, prompt: str) -> str: ...


def _require_trained(head: AgentTokenHead) -> None:
    if not head.trained or not head.active.any():
        raise UntrainedHead("the agent-token head has not been trained")


def _encoder(model: FrozenModel, encoder: RouterEncoder | None) -> RouterEncoder:
    return encoder if encoder is not None else RouterEncoder(model)


def agent_probabilities(task: str, state: str, head: AgentTokenHead, model: FrozenModel,
                        encoder: RouterEncoder | None = None) -> np.ndarray:
    """Agent-token slice of the extended distribution at the router prompt's last position."""
    h = _encoder(model, encoder).last_hidden(task, state)
    return extended_distribution(h, head)[head.n_words:]


def top_k_agents(task: str, state: str, head: AgentTokenHead, model: FrozenModel, k: int,
                 encoder: RouterEncoder | None = None) -> list[tuple[str, float]]:
    _require_trained(head)
    n_active = int(head.active.sum())
    if not 1 <= k <= n_active:
        raise ConfigError(f"k={k} but only {n_active} agents are active")
    p = agent_probabilities(task, state, head, model, encoder)
    order = np.argsort(-p, kind="stable")  # ties keep the lower row first
    return [(head.agent_ids[i], float(p[i])) for i in order[:k]]


def route(task: str, state: str, head: AgentTokenHead, model: FrozenModel,
          cfg: ManagerConfig = ManagerConfig(), encoder: RouterEncoder | None = None) -> RoutingDecision:
    """Greedy decoding over words and agent tokens until an agent token wins."""
    _require_trained(head)
    enc = _encoder(model, encoder)
    room = model.config.max_context - len(enc.prompt_ids(task, state))
    decoded: list[int] = []
    for step in range(1, cfg.max_steps + 1):
        h = enc.hidden_rows(decoded, task, state)[-1] if decoded else enc.last_hidden(task, state)
        dist = extended_distribution(h, head)
        best = int(np.argmax(dist))
        if best >= head.n_words:
            top = np.argsort(-dist, kind="stable")[:10]
            names = model.vocab.token_strings
            snapshot = tuple(
                (names[i] if i < head.n_words else head.agent_ids[i - head.n_words], float(dist[i])) for i in top
            )
            words = tuple(model.vocab.token_strings[i] for i in decoded)
            return RoutingDecision(head.agent_ids[best - head.n_words], step, snapshot, words)
        decoded.append(best)
        if len(decoded) >= room:
            break
    raise RoutingUndecided(f"no agent token within {len(decoded)} decoding steps")


def heuristic_mode(task: str, state: str, head: AgentTokenHead, model: FrozenModel,
                   cfg: ManagerConfig = ManagerConfig(), encoder: RouterEncoder | None = None) -> str:
    p = agent_probabilities(task, state, head, model, encoder)
    share = p / p.sum()
    return MANAGER if int((share >= cfg.manager_share).sum()) >= 2 else ROUTER


def parse_mode(text: str) -> str:
    lines = [ln.strip().lower() for ln in text.strip().splitlines() if ln.strip()]
    if lines:
        words = re.findall(r"[a-z]+", lines[-1])
        if words and words[-1] in (ROUTER, MANAGER):
            return words[-1]
    raise ValueError(f"no mode on the last line of {text!r}")


def select_mode(task: str, state: str, cfg: ManagerConfig, head: AgentTokenHead, model: FrozenModel,
                gen: Completer | None = None, encoder: RouterEncoder | None = None) -> str:
    if not task.strip():
        raise ValueError("task must be non-empty")
    if cfg.mode_override != "auto":
        return cfg.mode_override
    if gen is not None and not isinstance(gen, RuleBasedPlanner):
        try:
            return parse_mode(gen.complete(mode_prompt(task, state)))
        except (TokenRouteError, OSError, ValueError) as exc:
            logger.warning("mode selection by generator failed (%s); using router", exc)
            return ROUTER
    return heuristic_mode(task, state, head, model, cfg, encoder)


# --- plans --------------------------------------------------------------------

_PLAN_RE = re.compile(r"###([^:#\n]+):(.*?)###")


def parse_plan(text: str) -> Plan:
    steps = tuple((name.strip(), sub.strip()) for name, sub in _PLAN_RE.findall(text))
    if not steps:
        raise PlanParseError("no ###Agent:subtask### assignments found")
    return Plan(steps, MANAGER)


def format_plan(steps: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"###{a}:{s}###" for a, s in steps)


_CONNECTIVE_RE = re.compile(
    r"\s*(?:[,;]\s*(?:and\s+)?then|[,;]\s*after\s+that|[,;]\s*next|[,;]\s*finally|\band\s+then|\bafter\s+that|;)\s*,?\s*",
    re.IGNORECASE,
)


def split_subtasks(task: str) -> list[str]:
    return [p.strip(" ,.") for p in _CONNECTIVE_RE.split(task) if p.strip(" ,.")]


class RuleBasedPlanner:
    """Offline stand-in for the base model's plan generation.

    Splits the task at sequencing connectives, routes each fragment among the
    candidate agents by agent-token probability, and folds consecutive
    fragments that land on the same agent into one subtask.
    """

    def __init__(self, model: FrozenModel, head: AgentTokenHead, encoder: RouterEncoder | None = None):
        self.model = model
        self.head = head
        self.encoder = _encoder(model, encoder)

    def assign(self, fragment: str, state: str, candidates: Sequence[str]) -> str:
        p = agent_probabilities(fragment, state, self.head, self.model, self.encoder)
        rows = [self.head.row(a) for a in candidates]
        return candidates[int(np.argmax(p[rows]))]

    def plan_steps(self, task: str, state: str, candidates: Sequence[str]) -> list[tuple[str, str]]:
        steps: list[tuple[str, str]] = []
        for fragment in split_subtasks(task) or [task]:
            agent = self.assign(fragment, state, candidates)
            if steps and steps[-1][0] == agent:
                steps[-1] = (agent, f"{steps[-1][1]}, and then {fragment}")
            else:
                steps.append((agent, fragment))
        return steps

    def complete(self, prompt: str, task: str = "", state: str = "", candidates: Sequence[str] = ()) -> str:
        return format_plan(self.plan_steps(task, state, candidates))


def plan(task: str, state: str, head: AgentTokenHead, model: FrozenModel, registry: AgentRegistry,
         cfg: ManagerConfig = ManagerConfig(), gen: Completer | None = None,
         encoder: RouterEncoder | None = None) -> Plan:
    """Manager mode: top-k agents, narrowed prompt, parsed and scope-checked plan."""
    enc = _encoder(model, encoder)
    selected = [a for a, _ in top_k_agents(task, state, head, model, cfg.k, enc)]
    prompt = manager_prompt(task, render_context(registry, selected), state)
    if gen is None:
        gen = RuleBasedPlanner(model, head, enc)
    if isinstance(gen, RuleBasedPlanner):
        text = gen.complete(prompt, task, state, selected)
    else:
        text = gen.complete(prompt)
    result = parse_plan(text)
    if len(result.steps) < 2:
        raise PlanParseError(f"a manager plan needs at least two assignments, got {len(result.steps)}")
    for agent in result.agents:
        if agent not in selected:
            raise AgentOutOfScope(f"plan assigns {agent!r}, which is not among the top-{cfg.k} agents {selected}")
    return result


@dataclass
class MetaAgent:
    """Bundles a frozen model, trained head and registry behind one encoder."""

    model: FrozenModel
    head: AgentTokenHead
    registry: AgentRegistry
    cfg: ManagerConfig = field(default_factory=ManagerConfig)
    gen: Completer | None = None

    def __post_init__(self):
        self.encoder = RouterEncoder(self.model)

    def select_mode(self, task: str, state: str = "") -> str:
        return select_mode(task, state, self.cfg, self.head, self.model, self.gen, self.encoder)

    def route(self, task: str, state: str = "") -> RoutingDecision:
        return route(task, state, self.head, self.model, self.cfg, self.encoder)

    def top_k(self, task: str, state: str = "", k: int | None = None) -> list[tuple[str, float]]:
        return top_k_agents(task, state, self.head, self.model, k or self.cfg.k, self.encoder)

    def plan(self, task: str, state: str = "") -> Plan:
        return plan(task, state, self.head, self.model, self.registry, self.cfg, self.gen, self.encoder)

    def dispatch(self, task: str, state: str = "") -> tuple[str, Plan]:
        """Pick a mode and return the resulting plan (one step in router mode)."""
        mode = self.select_mode(task, state)
        if mode == ROUTER:
            return mode, Plan(((self.route(task, state).agent_id, task),), ROUTER)
        return mode, self.plan(task, state)
