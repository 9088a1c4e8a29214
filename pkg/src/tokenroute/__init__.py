"""Agent tokens on a frozen language model: enrollment, routing, planning and evaluation."""

from .agent_head import AgentTokenHead, TrainConfig, extend_head, extended_distribution, token_gradient, train
from .errors import TokenRouteError
from .frozen_lm import FrozenModel, ModelConfig, Vocabulary, base_distribution, build_model, encode, tokenize
from .metaagent import ManagerConfig, MetaAgent, Plan, RoutingDecision, parse_plan, plan, route, select_mode, top_k_agents
from .registry import AgentDocument, AgentRegistry, enroll, parse_document, render_context
from .self_instruct import Demonstration, DemonstrationSet, FilterConfig, bootstrap, greedy_filter, similarity
from .simbench import SimTask, agent_match, execute_plan, execution_acc, run_suite, subtask_acc, synthesize_multi_tasks

__version__ = "0.1.0"

__all__ = [
    "AgentDocument", "AgentRegistry", "AgentTokenHead", "Demonstration", "DemonstrationSet", "FilterConfig",
    "FrozenModel", "ManagerConfig", "MetaAgent", "ModelConfig", "Plan", "RoutingDecision", "SimTask",
    "TokenRouteError", "TrainConfig", "Vocabulary", "agent_match", "base_distribution", "bootstrap",
    "build_model", "encode", "enroll", "execute_plan", "execution_acc", "extend_head", "extended_distribution",
    "greedy_filter", "parse_document", "parse_plan", "plan", "render_context", "route", "run_suite",
    "select_mode", "similarity", "subtask_acc", "synthesize_multi_tasks", "token_gradient", "tokenize",
    "top_k_agents", "train",
]
