"""Agent pool: enrollment documents, stable identities and head rows.

An enrollment document is plain text::

    AgentName: SlideAgent
    # Applications:
    Terminal,LibreOffice Impress
    # Capabilities
    ...
    # Limitations
    ...
    # Demonstrations
    Demonstration_1: add a title slide ...
    <path_to_demonstration_image_1>
    End!

Section headers are matched case-insensitively and in any order. The
misspelled ``Demostation`` form is accepted everywhere ``Demonstration`` is.
An agent's id is its name; removed ids stay reserved.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .agent_head import AgentTokenHead, extend_head
from .errors import DocumentError, DuplicateAgent, MissingSection, UnknownAgent

FORMAT_VERSION = 1
SECTIONS = ("applications", "capabilities", "limitations", "demonstrations")

_NAME_RE = re.compile(r"^\s*agent\s*name\s*:\s*(.*?)\s*$", re.IGNORECASE)
_HEADER_RE = re.compile(r"^\s*#\s*(applications|capabilities|limitations|demonstrations|demostations)\s*:?\s*$", re.IGNORECASE)
_DEMO_RE = re.compile(r"^\s*#?\s*demo(?:nstra|sta)tion\\?_(\d+)\s*:\s*(.*)$", re.IGNORECASE)
_IMAGE_RE = re.compile(r"^\s*<(path[^>]*)>\s*$", re.IGNORECASE)
_STATE_RE = re.compile(r"^\s*state\s*:\s*(.*)$", re.IGNORECASE)
_END_RE = re.compile(r"^\s*end!\s*$", re.IGNORECASE)
_ELLIPSIS_RE = re.compile(r"^\s*\.{3,}\s*$")


@dataclass(frozen=True)
class DemoStub:
    task_text: str
    state_text: str = ""
    image: str = ""


@dataclass(frozen=True)
class AgentDocument:
    name: str
    applications: tuple[str, ...]
    capabilities: str
    limitations: str
    demonstrations: tuple[DemoStub, ...]

    def __post_init__(self):
        if not self.name.strip():
            raise DocumentError("agent name is empty")
        if not self.demonstrations:
            raise DocumentError(f"{self.name}: document has no demonstrations")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["applications"] = list(self.applications)
        out["demonstrations"] = [asdict(d) for d in self.demonstrations]
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "AgentDocument":
        return cls(
            payload["name"],
            tuple(payload["applications"]),
            payload["capabilities"],
            payload["limitations"],
            tuple(DemoStub(**d) for d in payload["demonstrations"]),
        )


def _section_key(word: str) -> str:
    word = word.lower()
    return "demonstrations" if word == "demostations" else word


def _demo_from_lines(lines: list[str], image: str) -> DemoStub:
    task, state = [], []
    for line in lines:
        m = _STATE_RE.match(line)
        if m:
            state.append(m.group(1).strip())
        elif line.strip():
            (state if state else task).append(line.strip())
    return DemoStub(" ".join(task), " ".join(state), image)


def parse_document(text: str) -> AgentDocument:
    name = ""
    sections: dict[str, list[str]] = {}
    current = None
    demos: list[DemoStub] = []
    demo_lines: list[str] | None = None
    demo_image = ""

    def close_demo():
        nonlocal demo_lines, demo_image
        if demo_lines is not None:
            stub = _demo_from_lines(demo_lines, demo_image)
            if stub.task_text:
                demos.append(stub)
        demo_lines, demo_image = None, ""

    for line in text.splitlines():
        if _END_RE.match(line):
            break
        if not name and current is None and (m := _NAME_RE.match(line)):
            name = m.group(1)
            continue
        if m := _HEADER_RE.match(line):
            close_demo()
            current = _section_key(m.group(1))
            sections.setdefault(current, [])
            continue
        if current is None:
            continue
        if current == "demonstrations":
            if m := _DEMO_RE.match(line):
                close_demo()
                demo_lines = [m.group(2)]
            elif m := _IMAGE_RE.match(line):
                if demo_lines is not None and not demo_image:
                    demo_image = m.group(1)
            elif demo_lines is not None and not _ELLIPSIS_RE.match(line):
                demo_lines.append(line)
            continue
        if not _ELLIPSIS_RE.match(line):
            sections[current].append(line)
    close_demo()

    for section in SECTIONS:
        if section not in sections:
            raise MissingSection(f"document is missing the '# {section.capitalize()}' section")
    if not name.strip():
        raise DocumentError("document has no 'AgentName:' line")

    def body(key: str) -> str:
        return "\n".join(sections[key]).strip()

    apps = tuple(a.strip() for a in re.split(r"[,\n]", body("applications")) if a.strip())
    return AgentDocument(name, apps, body("capabilities"), body("limitations"), tuple(demos))


def render_document(doc: AgentDocument) -> str:
    lines = [
        f"AgentName: {doc.name}",
        "",
        "# Applications:",
        ",".join(doc.applications),
        "",
        "# Capabilities",
        doc.capabilities,
        "",
        "# Limitations",
        doc.limitations,
        "",
        "# Demonstrations",
        "",
    ]
    for k, demo in enumerate(doc.demonstrations, 1):
        lines.append(f"Demonstration_{k}: {demo.task_text}")
        if demo.state_text:
            lines.append(f"State: {demo.state_text}")
        if demo.image:
            lines.append(f"<{demo.image}>")
        lines.append("")
    lines.append("End!")
    return "\n".join(lines) + "\n"


def load_document(path: str | Path) -> AgentDocument:
    return parse_document(Path(path).read_text(encoding="utf-8"))


@dataclass
class AgentRegistry:
    """Insertion-ordered agent documents with their head rows.

    Writes (enroll, remove) take a lock; reads do not.
    """

    documents: dict[str, AgentDocument] = field(default_factory=dict)
    rows: dict[str, int] = field(default_factory=dict)
    removed: set[str] = field(default_factory=set)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.active_ids())

    def __contains__(self, agent_id: str) -> bool:
        return agent_id in self.documents and agent_id not in self.removed

    def active_ids(self) -> list[str]:
        return [a for a in self.documents if a not in self.removed]

    def document(self, agent_id: str) -> AgentDocument:
        if agent_id not in self:
            raise UnknownAgent(f"agent {agent_id!r} is not enrolled")
        return self.documents[agent_id]

    def row(self, agent_id: str) -> int:
        self.document(agent_id)
        return self.rows[agent_id]

    def check_head(self, head: AgentTokenHead) -> None:
        """Raise unless every registry row points at the same id in ``head``."""
        for agent_id, row in self.rows.items():
            if row >= head.n_agents or head.agent_ids[row] != agent_id:
                raise UnknownAgent(f"head row {row} does not hold agent {agent_id!r}")
            if head.active[row] == (agent_id in self.removed):
                raise UnknownAgent(f"head and registry disagree on whether {agent_id!r} is removed")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "agents": [
                {
                    "agent_id": agent_id,
                    "row": self.rows[agent_id],
                    "removed": agent_id in self.removed,
                    "document": doc.to_dict(),
                }
                for agent_id, doc in self.documents.items()
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AgentRegistry":
        if payload.get("format_version") != FORMAT_VERSION:
            raise DocumentError(f"unsupported registry format {payload.get('format_version')!r}")
        reg = cls()
        for rec in payload["agents"]:
            reg.documents[rec["agent_id"]] = AgentDocument.from_dict(rec["document"])
            reg.rows[rec["agent_id"]] = int(rec["row"])
            if rec["removed"]:
                reg.removed.add(rec["agent_id"])
        return reg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "AgentRegistry":
        return cls.from_dict(json.loads(Path(path).read_text()))


def enroll(
    registry: AgentRegistry,
    doc: AgentDocument | str,
    head: AgentTokenHead,
    seed: int = 0,
) -> tuple[str, AgentTokenHead]:
    """Add an agent to the pool and give it a fresh token row."""
    if isinstance(doc, str):
        doc = parse_document(doc)
    with registry._lock:
        if doc.name in registry.documents:
            raise DuplicateAgent(f"agent {doc.name!r} is already enrolled (ids are never reused)")
        new_head = extend_head(head, doc.name, seed)
        registry.documents[doc.name] = doc
        registry.rows[doc.name] = new_head.n_agents - 1
    return doc.name, new_head


def remove(registry: AgentRegistry, agent_id: str, head: AgentTokenHead) -> AgentTokenHead:
    """Retire an agent; its row stays in place with its logit forced to -inf."""
    with registry._lock:
        registry.document(agent_id)
        registry.removed.add(agent_id)
        return head.tombstone(agent_id)


def context_block(doc: AgentDocument) -> str:
    return (
        f"AgentName: {doc.name}\n"
        f"Applications: {', '.join(doc.applications)}\n"
        f"Capabilities: {doc.capabilities}\n"
        f"Limitations: {doc.limitations}\n"
    )


def render_context(registry: AgentRegistry, agent_ids: list[str]) -> str:
    """Context blocks for the given agents, in the given order."""
    return "\n".join(context_block(registry.document(a)) for a in agent_ids)
