"""Prompt templates and the router-prompt encoder shared by training and inference."""

from __future__ import annotations

from functools import lru_cache
from importlib.resources import files

import numpy as np

from .frozen_lm import UNK_ID, FrozenModel, PrefixCache, split_words

TASK_SLOT = "{task_name}"
DOCS_SLOT = "{agent_k_document}"


@lru_cache(maxsize=None)
def template(name: str) -> str:
    # The asset files end with a newline; rendered prompts add their own.
    return files("tokenroute").joinpath(f"prompts/{name}.txt").read_text(encoding="utf-8").removesuffix("\n")


def state_block(state: str) -> str:
    # Text channel for system state. Nothing is appended for an empty state so
    # the final position stays on the task's own words.
    state = state.strip()
    return f"\nState: {state}" if state else ""


def router_prompt(task: str, state: str = "") -> str:
    return template("router").replace(TASK_SLOT, task) + state_block(state)


def manager_prompt(task: str, documents: str, state: str = "") -> str:
    text = template("manager").replace(DOCS_SLOT, documents).replace(TASK_SLOT, task)
    return text + state_block(state) + "\n"


def mode_prompt(task: str, state: str = "") -> str:
    return template("mode").replace(TASK_SLOT, task) + state_block(state) + "\n"


class RouterEncoder:
    """Hidden states at the router prompt's final position, with the fixed
    template prefix encoded once."""

    def __init__(self, model: FrozenModel):
        self.model = model
        prefix_text = template("router").split(TASK_SLOT)[0]
        self._prefix_ids = model.tokenize(prefix_text).ids
        self._cache = PrefixCache(model, self._prefix_ids)
        self._memo: dict[tuple[str, str], np.ndarray] = {}

    def suffix_ids(self, task: str, state: str = "") -> list[int]:
        rest = router_prompt(task, state)[len(template("router").split(TASK_SLOT)[0]):]
        ids = [self.model.vocab.id_of.get(w, UNK_ID) for w in split_words(rest)]
        room = self.model.config.max_context - len(self._prefix_ids)
        # An over-long task loses its beginning; the final position is what routes.
        return ids[-room:] if len(ids) > room else ids

    def prompt_ids(self, task: str, state: str = "") -> list[int]:
        return list(self._prefix_ids) + self.suffix_ids(task, state)

    def hidden_rows(self, extra_ids: list[int], task: str, state: str = "") -> np.ndarray:
        return self._cache.encode(self.suffix_ids(task, state) + list(extra_ids)).matrix

    def last_hidden(self, task: str, state: str = "") -> np.ndarray:
        key = (task, state)
        h = self._memo.get(key)
        if h is None:
            h = self._cache.encode(self.suffix_ids(task, state)).last
            self._memo[key] = h
        return h
