"""Self-instruct bootstrapping of per-agent demonstration sets.

Candidates come from a :class:`Generator` (offline template mutator or a
remote HTTP service), are scored with a greedy token-matching similarity over
the frozen model's contextual embeddings, and pass a two-sided similarity
band before being merged into the agent's set.
"""

from __future__ import annotations

import json
import logging
import random
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .errors import ConfigError, GenerationFailed, StalledBootstrap
from .frozen_lm import FrozenModel, encode, split_words

logger = logging.getLogger(__name__)

SEED = "seed"


@dataclass(frozen=True)
class Demonstration:
    task_text: str
    state_text: str = ""

    def __post_init__(self):
        if not self.task_text.strip():
            raise ValueError("demonstration task_text must be non-empty")

    @property
    def key(self) -> tuple[str, str]:
        return (self.task_text, self.state_text)


def generated(round_index: int) -> str:
    return f"generated:{round_index}"


@dataclass
class DemonstrationSet:
    agent_id: str
    items: list[Demonstration] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.provenance) < len(self.items):
            self.provenance += [SEED] * (len(self.items) - len(self.provenance))
        seen = set()
        for item in self.items:
            if item.key in seen:
                raise ValueError(f"duplicate demonstration {item.task_text!r}")
            seen.add(item.key)

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, demo: Demonstration) -> bool:
        return any(item.key == demo.key for item in self.items)

    def add(self, demo: Demonstration, provenance: str = SEED) -> bool:
        if demo in self:
            return False
        self.items.append(demo)
        self.provenance.append(provenance)
        return True

    def head(self, n: int) -> "DemonstrationSet":
        return DemonstrationSet(self.agent_id, self.items[:n], self.provenance[:n])

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"task_text": d.task_text, "state_text": d.state_text, "provenance": p}) + "\n"
            for d, p in zip(self.items, self.provenance)
        )

    @classmethod
    def from_jsonl(cls, agent_id: str, text: str) -> "DemonstrationSet":
        out = cls(agent_id)
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                out.add(Demonstration(rec["task_text"], rec.get("state_text", "")), rec.get("provenance", SEED))
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, agent_id: str, path: str | Path) -> "DemonstrationSet":
        return cls.from_jsonl(agent_id, Path(path).read_text())


@dataclass(frozen=True)
class FilterConfig:
    tau1: float = 0.8
    tau2: float = 0.9
    target_size: int = 100
    max_rounds: int = 20
    candidates_per_round: int = 40
    aggregate: str = "min"

    def __post_init__(self):
        if not 0 < self.tau1 < 1 or not 0 < self.tau2 <= 1:
            raise ConfigError("tau1 must lie in (0, 1) and tau2 in (0, 1]")
        if self.tau1 >= self.tau2:
            raise ConfigError(f"tau1 ({self.tau1}) must be below tau2 ({self.tau2})")
        if self.aggregate not in ("min", "mean"):
            raise ConfigError("aggregate must be 'min' or 'mean'")


# --- similarity ---------------------------------------------------------------


class SimilarityScorer:
    """Greedy token-matching F1 between task texts (no IDF, no rescaling).

    Contextual embeddings are cached per text; the model is only read.
    """

    def __init__(self, model: FrozenModel):
        self.model = model
        self._cache: dict[str, np.ndarray] = {}

    def embeddings(self, text: str) -> np.ndarray:
        emb = self._cache.get(text)
        if emb is None:
            tokens = self.model.tokenize(text)
            if len(tokens) < 2:
                raise ValueError(f"text renders to no tokens: {text!r}")
            rows = encode(tokens, self.model).matrix[1:]  # drop BOS
            emb = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            self._cache[text] = emb
        return emb

    def score_texts(self, a: str, b: str) -> float:
        ea, eb = self.embeddings(a), self.embeddings(b)
        cos = ea @ eb.T
        recall = cos.max(axis=1).mean()
        precision = cos.max(axis=0).mean()
        # Written symmetrically so score(a, b) == score(b, a) bit-for-bit.
        return float(2 * precision * recall / (precision + recall))

    def __call__(self, a: Demonstration, b: Demonstration) -> float:
        return self.score_texts(a.task_text, b.task_text)


def similarity(a: Demonstration, b: Demonstration, model: FrozenModel) -> float:
    return SimilarityScorer(model)(a, b)


# --- filtering ----------------------------------------------------------------

Score = Callable[[Demonstration, Demonstration], float]


def priority(candidate: Demonstration, existing: Sequence[Demonstration], cfg: FilterConfig, score: Score) -> float:
    """Distance of a candidate's scores to the nearest band edge, aggregated over the existing set."""
    if not existing:
        return 0.0
    dists = [min(abs(s - cfg.tau1), abs(s - cfg.tau2)) for s in (score(candidate, y) for y in existing)]
    return min(dists) if cfg.aggregate == "min" else float(np.mean(dists))


def greedy_filter(
    candidates: Sequence[Demonstration],
    existing: DemonstrationSet | Sequence[Demonstration],
    cfg: FilterConfig,
    score: Score | FrozenModel,
) -> list[Demonstration]:
    if isinstance(score, FrozenModel):
        score = SimilarityScorer(score)
    pool = list(existing.items if isinstance(existing, DemonstrationSet) else existing)
    prio = [priority(c, pool, cfg, score) for c in candidates]
    order = sorted(range(len(candidates)), key=lambda i: -prio[i])  # stable: ties keep input order
    accepted: list[Demonstration] = []
    for i in order:
        cand = candidates[i]
        if all(cfg.tau1 <= score(cand, y) <= cfg.tau2 for y in pool + accepted):
            accepted.append(cand)
    return accepted


# --- generators ---------------------------------------------------------------


class Generator(Protocol):
    def generate(self, seeds: Sequence[Demonstration], capability_text: str, n: int) -> list[Demonstration]: ...


OPENERS = (
    "please", "can you", "could you", "help me", "i need to",
    "i want to", "go ahead and", "kindly", "quickly", "now",
)
STOPWORDS = frozenset(
    """a an and as at be by can cannot for from in into is it its no not of on or
    such that the their this to using uses via when with without also items
    specializes tasks task handles variants relies include includes including
    capable able""".split()
)


def _is_keyword(word: str) -> bool:
    return (word.isalnum() or "_" in word) and word not in STOPWORDS and len(word) > 1


def capability_keywords(capability_text: str) -> list[str]:
    seen: dict[str, None] = {}
    for word in split_words(capability_text):
        if _is_keyword(word):
            seen.setdefault(word, None)
    return list(seen)


def keyword_lists(capability_text: str) -> list[list[str]]:
    """Runs of keywords joined only by commas or "and"/"or".

    Items of one enumerated list in a description tend to play the same role
    ("sort, filter, pivot"), so they are safe substitutes for each other.
    """
    groups: list[list[str]] = []
    run: list[str] = []
    for word in split_words(capability_text):
        if _is_keyword(word):
            if word not in run:
                run.append(word)
        elif word not in {",", "and", "or"}:
            if run:
                groups.append(run)
            run = []
    if run:
        groups.append(run)
    return groups


def _strip_opener(words: list[str]) -> list[str]:
    for phrase in sorted(OPENERS, key=len, reverse=True):
        p = phrase.split()
        if words[: len(p)] == p:
            return words[len(p):]
    return words


class TemplateGenerator:
    """Offline generator: recombines seed tasks with capability keywords.

    Each candidate starts from a random seed task, swaps one or two
    capability keywords for siblings from the same enumerated list in the
    description, and re-dresses the request with an opener drawn from a
    paraphrase table.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.calls = 0

    def generate(self, seeds: Sequence[Demonstration], capability_text: str, n: int) -> list[Demonstration]:
        rng = random.Random(f"{self.seed}:{self.calls}")
        self.calls += 1
        if n <= 0 or not seeds:
            return []
        siblings = {w: group for group in keyword_lists(capability_text) for w in group}
        out: dict[tuple[str, str], Demonstration] = {}
        for _ in range(4 * n):
            if len(out) >= n:
                break
            base = rng.choice(list(seeds))
            words = _strip_opener(split_words(base.task_text))
            slots = [i for i, w in enumerate(words) if w in siblings]
            for i in rng.sample(slots, k=min(len(slots), rng.randint(1, 2))):
                words[i] = rng.choice(siblings[words[i]])
            demo = Demonstration(f"{rng.choice(OPENERS)} {' '.join(words)}", base.state_text)
            out.setdefault(demo.key, demo)
        return list(out.values())


class RemoteGenerator:
    """HTTP generator: POSTs ``{capability_text, seed_examples, n}`` to ``endpoint``.

    The service answers with a JSON list of ``{task_text, state_text}`` objects
    (a bare string is taken as a task text). ``complete`` posts ``{prompt}`` to
    ``<endpoint>/complete`` and expects ``{"text": ...}``.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, token: str | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.token = token

    def _post(self, url: str, payload: dict):
        req = urllib.request.Request(url, data=json.dumps(payload).encode(), method="POST")
        req.add_header("Content-Type", "application/json")
        if self.token:
            req.add_header("Authorization", f"Bearer {self.token}")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode())

    def generate(self, seeds: Sequence[Demonstration], capability_text: str, n: int) -> list[Demonstration]:
        body = {
            "capability_text": capability_text,
            "seed_examples": [{"task_text": s.task_text, "state_text": s.state_text} for s in seeds],
            "n": n,
        }
        raw = self._post(self.endpoint, body)
        out = []
        for rec in raw[:n]:
            if isinstance(rec, str):
                out.append(Demonstration(rec))
            else:
                out.append(Demonstration(rec["task_text"], rec.get("state_text", "")))
        return out

    def complete(self, prompt: str) -> str:
        return str(self._post(self.endpoint + "/complete", {"prompt": prompt})["text"])


# --- bootstrap ----------------------------------------------------------------


def generate_round(
    demo_set: DemonstrationSet,
    doc,
    gen: Generator,
    n: int,
    round_index: int = 0,
) -> list[Demonstration]:
    if n <= 0:
        return []
    if not len(demo_set):
        raise ValueError("cannot generate from an empty demonstration set")
    try:
        raw = gen.generate(list(demo_set.items), _capability_text(doc), n)
    except (OSError, TimeoutError, urllib.error.URLError, ValueError, KeyError) as exc:
        raise GenerationFailed(round_index, repr(exc)) from exc
    out: list[Demonstration] = []
    seen = {item.key for item in demo_set.items}
    for demo in raw[:n]:
        if demo.key not in seen:
            seen.add(demo.key)
            out.append(demo)
    return out


@dataclass
class BootstrapLog:
    accepted_per_round: list[int] = field(default_factory=list)
    generated_per_round: list[int] = field(default_factory=list)


def _capability_text(doc) -> str:
    return doc if isinstance(doc, str) else doc.capabilities


def seed_set(doc) -> DemonstrationSet:
    """The enrollment document's own demonstrations as a starting set."""
    out = DemonstrationSet(doc.name)
    for demo in doc.demonstrations:
        out.add(Demonstration(demo.task_text, demo.state_text))
    return out


def bootstrap(
    doc,
    gen: Generator,
    cfg: FilterConfig,
    score: Score | FrozenModel,
    log: BootstrapLog | None = None,
    seeds: DemonstrationSet | None = None,
) -> DemonstrationSet:
    """Grow the document's demonstrations to ``cfg.target_size`` items.

    Stops after ``cfg.max_rounds`` rounds, and raises
    :class:`StalledBootstrap` (carrying the partial set) after three
    consecutive rounds without a single accepted candidate. ``seeds``
    overrides the document's own demonstrations as the starting set.
    """
    seeds = seeds if seeds is not None else seed_set(doc)
    if not len(seeds):
        raise ValueError("bootstrap needs at least one seed demonstration")
    if isinstance(score, FrozenModel):
        score = SimilarityScorer(score)
    log = log if log is not None else BootstrapLog()
    current = DemonstrationSet(seeds.agent_id, list(seeds.items), list(seeds.provenance))
    dry_rounds = 0
    for r in range(1, cfg.max_rounds + 1):
        if len(current) >= cfg.target_size:
            break
        candidates = generate_round(current, doc, gen, cfg.candidates_per_round, r)
        accepted = greedy_filter(candidates, current, cfg, score)
        room = cfg.target_size - len(current)
        for demo in accepted[:room]:
            current.add(demo, generated(r))
        log.generated_per_round.append(len(candidates))
        log.accepted_per_round.append(min(len(accepted), room))
        logger.info("%s round %d: %d candidates, %d accepted, size %d",
                    current.agent_id, r, len(candidates), len(accepted), len(current))
        dry_rounds = dry_rounds + 1 if not accepted else 0
        if dry_rounds >= 3:
            raise StalledBootstrap(
                f"{current.agent_id}: no candidate accepted for 3 consecutive rounds (size {len(current)})",
                partial=current,
            )
    return current


def score_distribution(items: Sequence[Demonstration], score: Score) -> dict:
    """Percentiles of all pairwise scores within a set, for picking band thresholds."""
    vals = [score(a, b) for i, a in enumerate(items) for b in items[i + 1:]]
    if not vals:
        return {"pairs": 0}
    pct = np.percentile(vals, [5, 25, 50, 75, 95])
    return {
        "pairs": len(vals),
        "min": float(min(vals)),
        "p05": float(pct[0]),
        "p25": float(pct[1]),
        "median": float(pct[2]),
        "p75": float(pct[3]),
        "p95": float(pct[4]),
        "max": float(max(vals)),
    }


def pooled_seed_scores(seed_sets: Iterable[Sequence[Demonstration]], score: Score) -> list[float]:
    """Every within-set pairwise score, pooled across agents."""
    return [score(a, b) for items in seed_sets for i, a in enumerate(items) for b in items[i + 1:]]


def calibrate_band(scores: Sequence[float]) -> tuple[float, float]:
    """Band spanning the observed within-agent seed scores.

    A scorer built on a different encoder puts related tasks at different
    absolute values, so the band is read off the seed forms themselves: the
    lowest score two seeds of the same agent reach is the relevance floor, the
    highest is the near-duplicate ceiling.
    """
    if not scores:
        raise ValueError("no seed pairs to calibrate from")
    lo, hi = float(min(scores)), float(max(scores))
    if not 0 < lo < hi <= 1:
        raise ConfigError(f"seed scores span [{lo}, {hi}], which is not a usable band")
    return lo, hi
