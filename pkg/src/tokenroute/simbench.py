"""Simulated collaboration benchmark.

Single-agent templates (instruction, capability tags, state writes) are
composed into multi-agent tasks whose ground truth is known by construction.
Scripted agents execute plans against a key-value state, and each task is
scored on agent selection, subtask decomposition and final-state goals.
"""

from __future__ import annotations

import itertools
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import TokenRouteError, UnknownExecutor
from .metaagent import MetaAgent, Plan
from .self_instruct import SimilarityScorer

logger = logging.getLogger(__name__)

SUBTASK_THRESHOLD = 0.77
CONNECTIVE = ", and then "
REPORT_VERSION = 1

TextScore = Callable[[str, str], float]


@dataclass(frozen=True)
class Subtask:
    agent_id: str
    text: str
    tags: tuple[str, ...] = ()
    writes: tuple[tuple[str, str], ...] = ()

    @classmethod
    def from_template(cls, template: Mapping) -> "Subtask":
        return cls(
            template["agent"],
            template["instruction"],
            tuple(template.get("tags", ())),
            tuple(sorted(template.get("writes", {}).items())),
        )

    def to_dict(self) -> dict:
        return {"agent": self.agent_id, "instruction": self.text, "tags": list(self.tags), "writes": dict(self.writes)}


@dataclass(frozen=True)
class SimTask:
    instruction: str
    ground_truth_subtasks: tuple[Subtask, ...]
    initial_state: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.ground_truth_subtasks:
            raise ValueError("a task needs at least one ground-truth subtask")

    @property
    def ground_truth_agents(self) -> frozenset[str]:
        return frozenset(s.agent_id for s in self.ground_truth_subtasks)

    @property
    def goal(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for sub in self.ground_truth_subtasks:
            out.update(sub.writes)
        return out

    @property
    def state_text(self) -> str:
        return "; ".join(f"{k}={v}" for k, v in self.initial_state)

    def to_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "initial_state": dict(self.initial_state),
            "subtasks": [s.to_dict() for s in self.ground_truth_subtasks],
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "SimTask":
        subs = tuple(Subtask.from_template(s) for s in payload["subtasks"])
        return cls(payload["instruction"], subs, tuple(sorted(payload.get("initial_state", {}).items())))


@dataclass(frozen=True)
class LogEntry:
    agent_id: str
    subtask: str
    outcome: str


@dataclass
class SimState:
    values: dict[str, str] = field(default_factory=dict)
    log: list[LogEntry] = field(default_factory=list)

    def record(self, agent_id: str, subtask: str, outcome: str) -> None:
        self.log.append(LogEntry(agent_id, subtask, outcome))


@dataclass(frozen=True)
class ScriptedAgent:
    agent_id: str
    capability_tags: frozenset[str]
    writable_keys: frozenset[str]

    def apply(self, state: SimState, writes: Iterable[tuple[str, str]]) -> None:
        writes = list(writes)
        illegal = [k for k, _ in writes if k not in self.writable_keys]
        if illegal:
            raise PermissionError(f"{self.agent_id} may not write {illegal}")
        state.values.update(writes)


def scripted_agents(subtasks: Iterable[Subtask]) -> dict[str, ScriptedAgent]:
    """One scripted executor per agent, with the tags and keys its templates use."""
    tags: dict[str, set[str]] = {}
    keys: dict[str, set[str]] = {}
    for sub in subtasks:
        tags.setdefault(sub.agent_id, set()).update(sub.tags)
        keys.setdefault(sub.agent_id, set()).update(k for k, _ in sub.writes)
    return {a: ScriptedAgent(a, frozenset(tags[a]), frozenset(keys[a])) for a in tags}


def agents_for_suite(tasks: Iterable[SimTask]) -> dict[str, ScriptedAgent]:
    return scripted_agents(s for t in tasks for s in t.ground_truth_subtasks)


# --- synthesis ----------------------------------------------------------------


def compatible(*subtasks: Subtask) -> bool:
    """Distinct agents and disjoint goal keys."""
    agents = [s.agent_id for s in subtasks]
    keys = [k for s in subtasks for k, _ in s.writes]
    return len(set(agents)) == len(agents) and len(set(keys)) == len(keys)


def compose(subtasks: Sequence[Subtask], connective: str = CONNECTIVE) -> SimTask:
    instruction = connective.join(s.text.rstrip(" .") for s in subtasks)
    return SimTask(instruction, tuple(subtasks))


def synthesize_multi_tasks(
    singles: Sequence[Subtask | Mapping],
    compatibility: Callable[..., bool] = compatible,
    triples: bool = False,
    connective: str = CONNECTIVE,
) -> list[SimTask]:
    """Every ordered pair (and, with ``triples``, triple) of compatible templates."""
    items = [s if isinstance(s, Subtask) else Subtask.from_template(s) for s in singles]
    if len(items) < 2:
        raise ValueError("need at least two single-agent templates")
    sizes = (2, 3) if triples else (2,)
    out = []
    for size in sizes:
        for combo in itertools.permutations(items, size):
            if compatibility(*combo):
                out.append(compose(combo, connective))
    return out


def sample_suite(tasks: Sequence[SimTask], n: int, seed: int = 0) -> list[SimTask]:
    if n >= len(tasks):
        return list(tasks)
    picks = sorted(random.Random(seed).sample(range(len(tasks)), n))
    return [tasks[i] for i in picks]


def save_suite(tasks: Sequence[SimTask], path: str | Path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in tasks], indent=1))


def load_suite(path: str | Path) -> list[SimTask]:
    return [SimTask.from_dict(rec) for rec in json.loads(Path(path).read_text())]


# --- metrics ------------------------------------------------------------------


def agent_match(predicted: Iterable[str], truth: Iterable[str], jaccard: bool = False) -> float:
    predicted, truth = set(predicted), set(truth)
    if jaccard:
        union = predicted | truth
        return len(predicted & truth) / len(union) if union else 1.0
    return 1.0 if predicted == truth else 0.0


def _steps(plan) -> list[tuple[str, str]]:
    if isinstance(plan, Plan):
        return list(plan.steps)
    return [(s.agent_id, s.text) if isinstance(s, Subtask) else tuple(s) for s in plan]


def subtask_acc(
    predicted,
    truth,
    score: TextScore,
    threshold: float = SUBTASK_THRESHOLD,
) -> float:
    """Share of ground-truth subtasks matched one-to-one by a same-agent prediction.

    Pairs are taken greedily in order of decreasing similarity; a pair only
    counts when its similarity reaches ``threshold``. Extra predictions are
    not penalized.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred, gold = _steps(predicted), _steps(truth)
    if not gold:
        return 0.0
    pairs = sorted(
        ((score(p_text, g_text), gi, pi)
         for gi, (g_agent, g_text) in enumerate(gold)
         for pi, (p_agent, p_text) in enumerate(pred)
         if p_agent == g_agent),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    used_g, used_p, matched = set(), set(), 0
    for s, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        matched += s >= threshold
    return matched / len(gold)


def execute_plan(
    plan,
    task: SimTask,
    agents: Mapping[str, ScriptedAgent],
    score: TextScore,
    threshold: float = SUBTASK_THRESHOLD,
) -> SimState:
    """Dispatch the plan's steps in order against a copy of the task's initial state.

    A step succeeds when the agent's tags cover the tags of the ground-truth
    subtask the step text is closest to, and the step text is at least
    ``threshold``-similar to one of that agent's own ground-truth subtasks.
    Success applies that subtask's writes. Failures are logged and execution
    moves on.
    """
    steps = _steps(plan)
    for agent_id, _ in steps:
        if agent_id not in agents:
            raise UnknownExecutor(f"no scripted executor for {agent_id!r}")
    state = SimState(dict(task.initial_state))
    gold = task.ground_truth_subtasks
    for agent_id, text in steps:
        agent = agents[agent_id]
        nearest = max(gold, key=lambda g: score(text, g.text))
        if not set(nearest.tags) <= agent.capability_tags:
            state.record(agent_id, text, "missing_tags")
            continue
        own = [g for g in gold if g.agent_id == agent_id]
        best = max(own, key=lambda g: score(text, g.text), default=None)
        if best is None or score(text, best.text) < threshold:
            state.record(agent_id, text, "no_match")
            continue
        agent.apply(state, best.writes)
        state.record(agent_id, text, "ok")
    return state


def execution_acc(final: SimState, task: SimTask) -> float:
    return 1.0 if all(final.values.get(k) == v for k, v in task.goal.items()) else 0.0


# --- suite runner -------------------------------------------------------------


@dataclass
class Report:
    records: list[dict]
    config: dict = field(default_factory=dict)

    def aggregate(self, name: str) -> float | None:
        vals = [r[name] for r in self.records]
        return sum(vals) / len(vals) if vals else None

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_VERSION,
            "config": self.config,
            "n_tasks": len(self.records),
            "aggregates": {
                "agent_match": self.aggregate("agent_match"),
                "subtask_acc": self.aggregate("subtask_acc"),
                "execution_acc": self.aggregate("execution_acc"),
            },
            "records": self.records,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def _score_fn(meta_or_score) -> TextScore:
    if isinstance(meta_or_score, MetaAgent):
        return SimilarityScorer(meta_or_score.model).score_texts
    return meta_or_score


def run_task(
    task: SimTask,
    meta: MetaAgent | None,
    agents: Mapping[str, ScriptedAgent],
    score: TextScore,
    threshold: float = SUBTASK_THRESHOLD,
    ground_truth: bool = False,
) -> dict:
    mode, error = "ground_truth", None
    plan_steps: list[tuple[str, str]] = []
    if ground_truth:
        plan_steps = [(s.agent_id, s.text) for s in task.ground_truth_subtasks]
    else:
        try:
            mode, result = meta.dispatch(task.instruction, task.state_text)
            plan_steps = list(result.steps)
        except TokenRouteError as exc:
            mode = "failed"
            error = f"{type(exc).__name__}: {exc}"
            logger.info("task %r failed: %s", task.instruction, error)
    final = execute_plan(plan_steps, task, agents, score, threshold)
    return {
        "instruction": task.instruction,
        "mode": mode,
        "truth_agents": sorted(task.ground_truth_agents),
        "predicted_agents": sorted({a for a, _ in plan_steps}),
        "plan": [{"agent": a, "subtask": s} for a, s in plan_steps],
        "log": [{"agent": e.agent_id, "outcome": e.outcome} for e in final.log],
        "agent_match": agent_match((a for a, _ in plan_steps), task.ground_truth_agents),
        "subtask_acc": subtask_acc(plan_steps, task.ground_truth_subtasks, score, threshold),
        "execution_acc": execution_acc(final, task),
        "error": error,
    }


def run_suite(
    tasks: Sequence[SimTask],
    meta: MetaAgent | None,
    agents: Mapping[str, ScriptedAgent] | None = None,
    score: TextScore | None = None,
    threshold: float = SUBTASK_THRESHOLD,
    ground_truth: bool = False,
) -> Report:
    """Run every task through the metaagent (or its own ground-truth plan) and score it.

    Task-level failures (undecided routing, unparsable or out-of-scope plans)
    score zero on that task and never abort the run.
    """
    if score is None:
        if meta is None:
            raise ValueError("a scorer is required when no metaagent is given")
        score = _score_fn(meta)
    if not ground_truth and meta is None:
        raise ValueError("a metaagent is required unless running ground-truth plans")
    agents = dict(agents if agents is not None else agents_for_suite(tasks))
    if meta is not None:
        # Enrolled agents outside the suite still get an executor, one that can
        # do nothing, so a misrouted step fails inside its task.
        for agent_id in meta.registry.active_ids():
            agents.setdefault(agent_id, ScriptedAgent(agent_id, frozenset(), frozenset()))
    records = [run_task(t, meta, agents, score, threshold, ground_truth) for t in tasks]
    config = {
        "harness": "ground_truth" if ground_truth else "metaagent",
        "threshold": threshold,
        "mode_override": meta.cfg.mode_override if meta is not None and not ground_truth else None,
        "k": meta.cfg.k if meta is not None and not ground_truth else None,
    }
    return Report(records, config)
