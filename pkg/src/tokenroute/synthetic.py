"""A seeded synthetic agent pool for offline experiments and tests.

Twenty desktop-style agents, each with its own capability vocabulary (no
content word is shared between two agents), enrollment documents with ten
seed demonstrations, single-agent benchmark templates with goal keys, and a
held-out task sampler for routing accuracy.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .self_instruct import OPENERS


@dataclass(frozen=True)
class Domain:
    name: str
    applications: tuple[str, ...]
    tag: str
    verbs: tuple[str, ...]
    objects: tuple[str, ...]
    modifiers: tuple[str, ...]
    tool: str

    @property
    def keywords(self) -> tuple[str, ...]:
        return self.verbs + self.objects + self.modifiers + (self.tool,)


DOMAINS: tuple[Domain, ...] = (
    Domain("SheetAgent", ("LibreOffice Calc",), "spreadsheet",
           ("sum", "sort", "pivot", "filter"),
           ("cell", "column", "worksheet", "formula"),
           ("numeric", "totals", "weighted"), "openpyxl"),
    Domain("WriterAgent", ("LibreOffice Writer",), "document",
           ("indent", "justify", "paginate", "hyphenate"),
           ("paragraph", "heading", "margin", "footnote"),
           ("bold", "italic", "serif"), "docx2python"),
    Domain("SlideAgent", ("Terminal", "LibreOffice Impress"), "presentation",
           ("animate", "present", "rehearse", "transition"),
           ("slide", "presentation", "pptx", "speaker_notes"),
           ("widescreen", "keynote", "animated"), "python_pptx"),
    Domain("VLCAgent", ("VLC media player",), "video",
           ("snap", "stream", "rewind", "loop"),
           ("video", "clip", "snapshot", "subtitle"),
           ("fullscreen", "muted", "looped"), "vlc"),
    Domain("ChromeAgent", ("Google Chrome",), "browser",
           ("browse", "bookmark", "incognito", "reload"),
           ("tab", "cookie", "homepage", "extension"),
           ("private", "cached", "pinned"), "chrome"),
    Domain("MailAgent", ("Thunderbird",), "email",
           ("reply", "forward", "archive_mail", "compose"),
           ("inbox", "email", "attachment", "signature_block"),
           ("unread", "promotional", "flagged"), "thunderbird"),
    Domain("ImageAgent", ("GIMP",), "image",
           ("crop", "brighten", "desaturate", "resize"),
           ("photo", "image", "pixel", "layer"),
           ("grayscale", "contrast", "transparent"), "imagemagick"),
    Domain("CodeAgent", ("VS Code",), "code",
           ("lint", "refactor", "debug", "format_code"),
           ("editor", "workspace", "keybinding", "snippet"),
           ("syntax", "unused", "deprecated"), "vscode"),
    Domain("ShellAgent", ("Terminal",), "shell",
           ("chmod", "chown", "symlink", "grep"),
           ("permission", "directory", "process", "symlink_target"),
           ("recursive", "executable", "hidden"), "bash"),
    Domain("DriveAgent", ("Google Drive",), "cloud",
           ("upload", "sync", "share", "backup"),
           ("drive", "cloud", "quota", "folder_share"),
           ("shared", "synced", "offline"), "rclone"),
    Domain("CalendarAgent", ("GNOME Calendar",), "calendar",
           ("schedule", "reschedule", "invite", "cancel"),
           ("meeting", "event", "appointment", "reminder"),
           ("weekly", "recurring", "tentative"), "ical"),
    Domain("MusicAgent", ("Rhythmbox",), "music",
           ("shuffle", "enqueue", "crossfade", "repeat"),
           ("playlist", "song", "album", "track"),
           ("acoustic", "jazz", "lossless"), "rhythmbox"),
    Domain("MapAgent", ("GNOME Maps",), "maps",
           ("navigate", "geocode", "locate", "route"),
           ("map", "location", "destination", "waypoint"),
           ("nearest", "scenic", "toll_free"), "osm"),
    Domain("PDFAgent", ("Okular",), "pdf",
           ("annotate", "watermark", "highlight", "redact"),
           ("pdf", "annotation", "signature", "bookmark_pdf"),
           ("searchable", "encrypted", "scanned"), "pypdf"),
    Domain("GitAgent", ("Terminal", "Git"), "git",
           ("commit", "rebase", "stash", "cherry_pick"),
           ("repository", "branch", "remote_branch", "tag"),
           ("upstream", "detached", "signed"), "git"),
    Domain("DatabaseAgent", ("SQLite",), "database",
           ("query", "vacuum", "migrate", "index"),
           ("sqlite", "schema", "record", "table"),
           ("relational", "primary", "foreign"), "sqlalchemy"),
    Domain("WeatherAgent", ("GNOME Weather",), "weather",
           ("forecast", "measure", "predict", "alert"),
           ("temperature", "humidity", "rainfall", "wind"),
           ("celsius", "fahrenheit", "hourly"), "openweather"),
    Domain("ContactsAgent", ("GNOME Contacts",), "contacts",
           ("dial", "merge_contact", "favorite", "import_vcard"),
           ("contact", "phone", "nickname", "birthday"),
           ("mobile", "duplicate", "starred"), "vobject"),
    Domain("NotesAgent", ("Joplin",), "notes",
           ("jot", "checklist", "tag_note", "pin_note"),
           ("note", "notebook", "todo", "reminder_note"),
           ("daily", "archived", "shared_note"), "joplin"),
    Domain("PrinterAgent", ("CUPS",), "printer",
           ("print", "duplex", "collate", "queue"),
           ("printer", "toner", "cartridge", "tray"),
           ("color", "monochrome", "draft"), "cups"),
)

# Held back from the default pool; used to exercise late enrollment.
LATE_DOMAIN = Domain("TranslateAgent", ("Terminal",), "translation",
                     ("translate", "transliterate", "localize", "detect_language"),
                     ("phrase", "glossary", "locale", "dialect"),
                     ("bilingual", "formal", "colloquial"), "argos")

assert len({kw for dom in DOMAINS + (LATE_DOMAIN,) for kw in dom.keywords}) == sum(
    len(dom.keywords) for dom in DOMAINS + (LATE_DOMAIN,)
), "synthetic capability vocabularies must be disjoint"


def domain_by_name(name: str) -> Domain:
    for dom in DOMAINS + (LATE_DOMAIN,):
        if dom.name == name:
            return dom
    raise KeyError(name)


def sample_task(dom: Domain, rng: random.Random) -> str:
    opener = rng.choice(OPENERS)
    phrases = [f"the {rng.choice(dom.modifiers)} {rng.choice(dom.objects)}" for _ in range(rng.randint(2, 4))]
    core = f"{rng.choice(dom.verbs)} {' and '.join(phrases)}"
    if rng.random() < 0.5:
        core += f" with {dom.tool}"
    return f"{opener} {core}"


def capability_text(dom: Domain) -> str:
    return (
        f"Specializes in tasks that {', '.join(dom.verbs)} items such as "
        f"{', '.join(dom.objects)}. Handles {', '.join(dom.modifiers)} variants "
        f"and relies on {dom.tool}."
    )


def limitation_text(dom: Domain) -> str:
    return f"Cannot operate outside {', '.join(dom.applications)}; no GUI-free fallback."


def seed_demonstrations(dom: Domain, n: int = 10, seed: int = 0) -> list[str]:
    rng = random.Random(f"seed-demos:{dom.name}:{seed}")
    out: list[str] = []
    while len(out) < n:
        task = sample_task(dom, rng)
        if task not in out:
            out.append(task)
    return out


def document_text(dom: Domain, n_demos: int = 10, seed: int = 0) -> str:
    demos = seed_demonstrations(dom, n_demos, seed)
    lines = [
        f"AgentName: {dom.name}",
        "",
        "# Applications:",
        ",".join(dom.applications),
        "",
        "# Capabilities",
        capability_text(dom),
        "",
        "# Limitations",
        limitation_text(dom),
        "",
        "# Demonstrations",
        "",
    ]
    for k, demo in enumerate(demos, 1):
        lines += [f"Demonstration_{k}: {demo}", f"<path_to_demonstration_image_{k}>", ""]
    lines.append("End!")
    return "\n".join(lines) + "\n"


def heldout_tasks(dom: Domain, n: int, seed: int = 1, exclude=()) -> list[str]:
    rng = random.Random(f"heldout:{dom.name}:{seed}")
    excluded = set(exclude)
    out: list[str] = []
    for _ in range(50 * n):
        if len(out) == n:
            break
        task = sample_task(dom, rng)
        if task not in excluded and task not in out:
            out.append(task)
    return out


def single_templates(per_agent: int = 4, seed: int = 0) -> list[dict]:
    """Single-agent benchmark templates with the state they must produce."""
    templates = []
    for dom in DOMAINS:
        rng = random.Random(f"singles:{dom.name}:{seed}")
        for j in range(per_agent):
            verb, mod, obj = dom.verbs[j % 4], dom.modifiers[j % 3], dom.objects[(j + j // 4) % 4]
            other = f"{dom.modifiers[(j + 1) % 3]} {dom.objects[(j + 2) % 4]}"
            instruction = f"{verb} the {mod} {obj} and the {other} with {dom.tool}"
            if rng.random() < 0.5:
                instruction = f"{rng.choice(OPENERS)} {instruction}"
            templates.append({
                "agent": dom.name,
                "instruction": instruction,
                "tags": [dom.tag],
                "writes": {f"{dom.tag}.{obj}": f"{verb}:{mod}"},
            })
    return templates


def corpus_texts() -> list[str]:
    """Every string the synthetic world can emit, for vocabulary construction."""
    texts = list(OPENERS) + ["with the", "and then", "first , next ; after that"]
    for dom in DOMAINS + (LATE_DOMAIN,):
        texts += [dom.name, " ".join(dom.applications), capability_text(dom), limitation_text(dom)]
        texts.append(" ".join(dom.keywords))
    return texts
