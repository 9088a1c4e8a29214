"""Command-line entry point.

A project is a directory holding ``tokenroute.json`` (configuration) plus the
artifacts the commands produce: the frozen model, the agent registry, the
agent-token head, per-agent demonstration files, suites and reports.

Exit codes: 0 success, 1 task-level failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import synthetic
from .agent_head import AgentTokenHead, TrainConfig, load_head, save_head, train
from .errors import (
    ChecksumMismatch,
    ConfigError,
    DocumentError,
    TokenRouteError,
    UntrainedHead,
)
from .frozen_lm import ModelConfig, Vocabulary, build_model, load_model, save_model
from .metaagent import ManagerConfig, MetaAgent
from .prompts import template
from .registry import AgentRegistry, enroll, load_document, remove
from .self_instruct import (
    OPENERS,
    BootstrapLog,
    DemonstrationSet,
    FilterConfig,
    RemoteGenerator,
    SimilarityScorer,
    StalledBootstrap,
    TemplateGenerator,
    bootstrap,
    calibrate_band,
    pooled_seed_scores,
    score_distribution,
    seed_set,
)
from .simbench import Report, agents_for_suite, load_suite, run_suite, sample_suite, save_suite, synthesize_multi_tasks

logger = logging.getLogger("tokenroute")

CONFIG_NAME = "tokenroute.json"
ENDPOINT_ENV = "TOKENROUTE_GENERATOR_URL"
TOKEN_ENV = "TOKENROUTE_GENERATOR_TOKEN"
BASE_CORPUS = [*OPENERS, "State:", "and then", "after that", "next", "finally", "; , ."]


def project_vocabulary(corpus: list[str]) -> Vocabulary:
    """Vocabulary over the prompt templates, generator phrases and the given texts."""
    return Vocabulary.from_corpus(BASE_CORPUS + [template(n) for n in ("router", "manager", "mode")] + list(corpus))


class UsageError(Exception):
    pass


@dataclass
class Paths:
    model: str = "model.json"
    registry: str = "registry.json"
    head: str = "head.json"
    demos: str = "demos"
    suites: str = "suites"
    reports: str = "reports"


@dataclass
class GeneratorConfig:
    endpoint: str | None = None
    timeout: float = 30.0


@dataclass
class ModelSettings:
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_context: int = 256


@dataclass
class ProjectConfig:
    seed: int = 0
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    # "calibrated" reads the band off the enrolled agents' seed demonstrations;
    # "fixed" uses filter.tau1 / filter.tau2 as given.
    band: str = "calibrated"
    manager: ManagerConfig = field(default_factory=ManagerConfig)
    paths: Paths = field(default_factory=Paths)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ProjectConfig":
        sections = {
            "model": ModelSettings, "train": TrainConfig, "filter": FilterConfig,
            "manager": ManagerConfig, "paths": Paths, "generator": GeneratorConfig,
        }
        kwargs = {}
        for key, value in payload.items():
            if key in sections:
                try:
                    kwargs[key] = sections[key](**value)
                except TypeError as exc:
                    raise ConfigError(f"bad '{key}' section: {exc}") from None
            elif key in ("seed", "band"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = cls(**kwargs)
        if cfg.band not in ("calibrated", "fixed"):
            raise ConfigError("band must be 'calibrated' or 'fixed'")
        return cfg


class Project:
    def __init__(self, root: Path, config: ProjectConfig, config_path: Path):
        self.root = root
        self.config = config
        self.config_path = config_path
        self._model = None

    @classmethod
    def open(cls, root: str, config_path: str | None = None) -> "Project":
        root_path = Path(root)
        path = Path(config_path) if config_path else root_path / CONFIG_NAME
        if path.exists():
            try:
                payload = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            config = ProjectConfig.from_dict(payload)
        elif config_path:
            raise ConfigError(f"config file {path} does not exist")
        else:
            config = ProjectConfig()
        return cls(root_path, config, path)

    def path(self, name: str) -> Path:
        return self.root / getattr(self.config.paths, name)

    def save_config(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_path.write_text(json.dumps(self.config.to_dict(), indent=2) + "\n")

    # -- artifacts --

    def has_model(self) -> bool:
        return self.path("model").exists()

    def init_model(self, corpus: list[str], seed: int):
        vocab = project_vocabulary(corpus)
        m = self.config.model
        cfg = ModelConfig(len(vocab), m.hidden_dim, m.n_layers, m.n_heads, m.max_context, seed)
        self._model = build_model(cfg, vocab)
        self.root.mkdir(parents=True, exist_ok=True)
        save_model(self._model, self.path("model"))
        return self._model

    @property
    def model(self):
        if self._model is None:
            if not self.has_model():
                raise UntrainedHead("no frozen model yet; run 'init' or 'enroll' first")
            self._model = load_model(self.path("model"))
        return self._model

    def registry(self) -> AgentRegistry:
        p = self.path("registry")
        return AgentRegistry.load(p) if p.exists() else AgentRegistry()

    def head(self) -> AgentTokenHead:
        p = self.path("head")
        return load_head(p, self.model) if p.exists() else AgentTokenHead.empty(self.model)

    def demo_path(self, agent_id: str) -> Path:
        return self.path("demos") / f"{agent_id}.jsonl"

    def generator(self, seed: int):
        endpoint = self.config.generator.endpoint or os.environ.get(ENDPOINT_ENV)
        if endpoint:
            return RemoteGenerator(endpoint, self.config.generator.timeout, os.environ.get(TOKEN_ENV))
        return TemplateGenerator(seed)

    def completer(self):
        endpoint = self.config.generator.endpoint or os.environ.get(ENDPOINT_ENV)
        if endpoint:
            return RemoteGenerator(endpoint, self.config.generator.timeout, os.environ.get(TOKEN_ENV))
        return None


# --- output -------------------------------------------------------------------


def emit(args, payload: dict, text: str) -> None:
    payload = {"command": args.command, "seed": args.effective_seed, **payload}
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(text)


def _state_arg(args) -> str:
    if getattr(args, "state", None):
        return Path(args.state).read_text(encoding="utf-8").strip()
    return ""


# --- commands -----------------------------------------------------------------


def cmd_init(args, project: Project) -> int:
    corpus = [Path(p).read_text(encoding="utf-8") for p in args.docs]
    for suite in args.suite:
        corpus += [t.instruction for t in load_suite(suite)]
    if project.has_model() and not args.force:
        raise UsageError(f"{project.path('model')} exists; pass --force to rebuild")
    project.config.seed = args.effective_seed
    project.save_config()
    model = project.init_model(corpus, args.effective_seed)
    emit(args, {"vocab_size": model.config.vocab_size, "checksum": model.checksum()},
         f"built frozen model: vocab {model.config.vocab_size}, checksum {model.checksum()[:16]}")
    return 0


def cmd_synth_world(args, project: Project) -> int:
    out = Path(args.out)
    (out / "docs").mkdir(parents=True, exist_ok=True)
    domains = synthetic.DOMAINS + ((synthetic.LATE_DOMAIN,) if args.late else ())
    docs = []
    for dom in domains:
        path = out / "docs" / f"{dom.name}.txt"
        path.write_text(synthetic.document_text(dom), encoding="utf-8")
        docs.append(str(path))
    singles = synthetic.single_templates()
    tasks = sample_suite(synthesize_multi_tasks(singles), args.tasks, args.effective_seed)
    save_suite(tasks, out / "suite.json")
    (out / "singles.json").write_text(json.dumps(singles, indent=1))
    emit(args, {"documents": docs, "suite": str(out / "suite.json"), "tasks": len(tasks)},
         f"wrote {len(docs)} documents and {len(tasks)} tasks to {out}")
    return 0


def cmd_enroll(args, project: Project) -> int:
    docs = [load_document(p) for p in args.docs]
    if not project.has_model():
        project.config.seed = args.effective_seed
        project.save_config()
        project.init_model([Path(p).read_text(encoding="utf-8") for p in args.docs], args.effective_seed)
    registry, head = project.registry(), project.head()
    ids = []
    for doc in docs:
        agent_id, head = enroll(registry, doc, head, seed=args.effective_seed + head.n_agents)
        ids.append(agent_id)
    registry.save(project.path("registry"))
    save_head(head, project.path("head"))
    emit(args, {"enrolled": ids, "agents": registry.active_ids(),
                "trainable_parameters": head.trainable_parameter_count()},
         f"enrolled {', '.join(ids)}; pool size {len(registry)}, "
         f"trainable parameters {head.trainable_parameter_count()}")
    return 0


def cmd_remove(args, project: Project) -> int:
    registry, head = project.registry(), project.head()
    head = remove(registry, args.agent, head)
    registry.save(project.path("registry"))
    save_head(head, project.path("head"))
    emit(args, {"removed": args.agent, "agents": registry.active_ids()}, f"removed {args.agent}")
    return 0


def _band(project: Project, registry: AgentRegistry, args) -> tuple[float, float]:
    if args.tau1 is not None or args.tau2 is not None or project.config.band == "fixed":
        tau1 = args.tau1 if args.tau1 is not None else project.config.filter.tau1
        tau2 = args.tau2 if args.tau2 is not None else project.config.filter.tau2
        return tau1, tau2
    scorer = SimilarityScorer(project.model)
    seeds = [seed_set(registry.document(a)).items for a in registry.active_ids()]
    return calibrate_band(pooled_seed_scores(seeds, scorer))


def cmd_gen_data(args, project: Project) -> int:
    registry = project.registry()
    agents = registry.active_ids() if args.all else args.agent
    if not agents:
        raise UsageError("name at least one --agent, or pass --all")
    for a in agents:
        registry.document(a)
    tau1, tau2 = _band(project, registry, args)
    base = project.config.filter
    target = args.target if args.target is not None else base.target_size
    cfg = FilterConfig(tau1, tau2, target, base.max_rounds, base.candidates_per_round, base.aggregate)
    scorer = SimilarityScorer(project.model)
    project.path("demos").mkdir(parents=True, exist_ok=True)
    results, failed = {}, []
    for agent_id in agents:
        doc = registry.document(agent_id)
        gen = project.generator(args.effective_seed + registry.rows[agent_id])
        log = BootstrapLog()
        try:
            demos = bootstrap(doc, gen, cfg, scorer, log)
        except StalledBootstrap as exc:
            demos = exc.partial
            failed.append(agent_id)
            logger.warning("%s", exc)
        demos.save(project.demo_path(agent_id))
        results[agent_id] = {"size": len(demos), "accepted_per_round": log.accepted_per_round,
                             "file": str(project.demo_path(agent_id))}
    lines = [f"band [{tau1:.4f}, {tau2:.4f}]"] + [f"{a}: {r['size']} demonstrations" for a, r in results.items()]
    if failed:
        lines.append(f"stalled before target: {', '.join(failed)}")
    emit(args, {"tau1": tau1, "tau2": tau2, "target": target, "agents": results, "stalled": failed}, "\n".join(lines))
    return 1 if failed else 0


def cmd_train(args, project: Project) -> int:
    registry, head = project.registry(), project.head()
    model = project.model
    overrides = {k: v for k, v in {
        "epochs": args.epochs, "learning_rate": args.lr, "weight_decay": args.weight_decay,
        "batch_size": args.batch_size,
    }.items() if v is not None}
    cfg = dataclasses.replace(project.config.train, seed=args.effective_seed,
                              freeze_existing=args.freeze_existing or project.config.train.freeze_existing,
                              **overrides)
    sets = []
    for agent_id in registry.active_ids():
        path = project.demo_path(agent_id)
        if path.exists():
            sets.append(DemonstrationSet.load(agent_id, path))
        else:
            logger.warning("%s has no generated demonstrations; training on its enrollment form", agent_id)
            sets.append(seed_set(registry.document(agent_id)))
    before = model.checksum()
    trained, trace = train(head, sets, model, cfg)
    if model.checksum() != before:
        raise ChecksumMismatch("frozen model changed during training")
    save_head(trained, project.path("head"))
    losses = [round(x, 6) for x in trace.epoch_losses]
    emit(args, {"epoch_losses": trace.epoch_losses, "trainable_parameters": trained.trainable_parameter_count(),
                "model_checksum": before, "examples": sum(len(s) for s in sets)},
         f"trained {len(sets)} agents on {sum(len(s) for s in sets)} demonstrations; epoch losses {losses}")
    return 0


def _meta(project: Project, k: int | None = None, mode: str | None = None) -> MetaAgent:
    cfg = project.config.manager
    cfg = dataclasses.replace(cfg, **{key: v for key, v in {"k": k, "mode_override": mode}.items() if v is not None})
    registry = project.registry()
    head = project.head()
    registry.check_head(head)
    return MetaAgent(project.model, head, registry, cfg, project.completer())


def cmd_route(args, project: Project) -> int:
    meta = _meta(project)
    decision = meta.route(args.task, _state_arg(args))
    emit(args, {"agent": decision.agent_id, "steps": decision.steps_taken,
                "top": [{"token": t, "p": p} for t, p in decision.top]},
         f"{decision.agent_id} (after {decision.steps_taken} step{'s' if decision.steps_taken > 1 else ''})")
    return 0


def cmd_plan(args, project: Project) -> int:
    meta = _meta(project, k=args.k)
    state = _state_arg(args)
    top = meta.top_k(args.task, state)
    result = meta.plan(args.task, state)
    text = "\n".join(f"{i}. {a}: {s}" for i, (a, s) in enumerate(result.steps, 1))
    emit(args, {"top_k": [{"agent": a, "p": p} for a, p in top], "plan": result.to_dict()["steps"]}, text)
    return 0


def cmd_bench(args, project: Project) -> int:
    tasks = load_suite(args.suite)
    if args.limit is not None:
        tasks = sample_suite(tasks, args.limit, args.effective_seed)
    ground_truth = args.harness == "ground-truth"
    if ground_truth:
        meta = None
        score = SimilarityScorer(project.model).score_texts
    else:
        meta = _meta(project, k=args.k, mode=args.mode)
        score = None
    if meta is None:
        report = run_suite(tasks, None, agents_for_suite(tasks), score, args.threshold, ground_truth=True)
    else:
        report = run_suite(tasks, meta, agents_for_suite(tasks), score, args.threshold)
    report.config["seed"] = args.effective_seed
    report.config["suite"] = str(args.suite)
    out = Path(args.out) if args.out else project.path("reports") / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    agg = report.to_dict()["aggregates"]
    emit(args, {"report": str(out), "n_tasks": len(tasks), "aggregates": agg}, _format_aggregates(agg, len(tasks)))
    return 0


def _format_aggregates(agg: dict, n: int) -> str:
    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"
    return (f"tasks {n}: AgentMatch {fmt(agg['agent_match'])}, SubtaskAcc {fmt(agg['subtask_acc'])}, "
            f"ExecutionAcc {fmt(agg['execution_acc'])}")


def cmd_calibrate(args, project: Project) -> int:
    registry = project.registry()
    if not len(registry):
        raise UsageError("no agents enrolled")
    scorer = SimilarityScorer(project.model)
    per_agent = {a: score_distribution(seed_set(registry.document(a)).items, scorer) for a in registry.active_ids()}
    tau1, tau2 = calibrate_band(pooled_seed_scores(
        [seed_set(registry.document(a)).items for a in registry.active_ids()], scorer))
    if args.write:
        project.config.filter = dataclasses.replace(project.config.filter, tau1=tau1, tau2=tau2)
        project.config.band = "fixed"
        project.save_config()
    emit(args, {"tau1": tau1, "tau2": tau2, "per_agent": per_agent, "written": args.write},
         f"calibrated band [{tau1:.4f}, {tau2:.4f}] from {len(per_agent)} agents' seed demonstrations"
         + (" (written to config)" if args.write else ""))
    return 0


def cmd_report(args, project: Project) -> int:
    try:
        payload = json.loads(Path(args.file).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.file}: {exc}") from None
    agg = payload["aggregates"]
    emit(args, {"n_tasks": payload["n_tasks"], "aggregates": agg, "config": payload.get("config", {})},
         _format_aggregates(agg, payload["n_tasks"]))
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--project", default=".", help="project directory (default: current directory)")
    common.add_argument("--config", help=f"config file (default: <project>/{CONFIG_NAME})")
    common.add_argument("--seed", type=int, help="seed for every random choice (default: the config's seed)")
    common.add_argument("--json", action="store_true", help="print machine-readable JSON")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="tokenroute",
        description="Route tasks to enrolled agents through agent tokens on a frozen language model.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("init", parents=[common], help="build the frozen model for a project")
    p.add_argument("--docs", nargs="*", default=[], help="enrollment documents whose words join the vocabulary")
    p.add_argument("--suite", action="append", default=[], help="suite file whose instructions join the vocabulary")
    p.add_argument("--force", action="store_true", help="rebuild an existing model")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("synth-world", parents=[common], help="write the synthetic agent documents and a task suite")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tasks", type=int, default=120, help="number of two-agent tasks in the suite (default: 120)")
    p.add_argument("--late", action="store_true", help="also write the held-back late-enrollment agent")
    p.set_defaults(func=cmd_synth_world)

    p = sub.add_parser("enroll", parents=[common], help="enroll agents from their documents")
    p.add_argument("docs", nargs="+", help="enrollment document files")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("remove", parents=[common], help="retire an enrolled agent")
    p.add_argument("agent")
    p.set_defaults(func=cmd_remove)

    p = sub.add_parser("gen-data", parents=[common], help="bootstrap demonstrations by self-instruct")
    p.add_argument("--agent", action="append", default=[], help="agent id (repeatable)")
    p.add_argument("--all", action="store_true", help="every enrolled agent")
    p.add_argument("--target", type=int, help="demonstrations per agent (default: config, 100)")
    p.add_argument("--tau1", type=float, help="lower similarity bound (fixes the band)")
    p.add_argument("--tau2", type=float, help="upper similarity bound (fixes the band)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the agent tokens")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--freeze-existing", action="store_true", help="only train agents that were never trained")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("route", parents=[common], help="route one task to a single agent")
    p.add_argument("task")
    p.add_argument("--state", help="file holding the serialized system state")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("plan", parents=[common], help="decompose a task over the top-k agents")
    p.add_argument("task")
    p.add_argument("--k", type=int, help="agents kept in scope (default: config, 5)")
    p.add_argument("--state", help="file holding the serialized system state")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("bench", parents=[common], help="run a collaboration suite")
    p.add_argument("--suite", required=True, help="suite file (JSON list of tasks)")
    p.add_argument("--out", help="report file (default: <project>/reports/report.json)")
    p.add_argument("--mode", choices=["auto", "router", "manager"], help="force a mode (default: config)")
    p.add_argument("--harness", choices=["metaagent", "ground-truth"], default="metaagent",
                   help="ground-truth executes each task's own subtasks, bypassing the metaagent")
    p.add_argument("--k", type=int)
    p.add_argument("--threshold", type=float, default=0.77, help="subtask similarity threshold (default: 0.77)")
    p.add_argument("--limit", type=int, help="run a seeded sample of this many tasks")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("calibrate-scorer", parents=[common], help="similarity distribution of the seed demonstrations")
    p.add_argument("--write", action="store_true", help="store the calibrated band in the config")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", parents=[common], help="summarize a bench report")
    p.add_argument("file")
    p.set_defaults(func=cmd_report)
    return parser


USAGE_ERRORS = (UsageError, ConfigError, ChecksumMismatch, DocumentError, FileNotFoundError, IsADirectoryError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        project = Project.open(args.project, args.config)
        args.effective_seed = args.seed if args.seed is not None else project.config.seed
        return args.func(args, project)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TokenRouteError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
