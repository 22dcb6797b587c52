"""Prompt templates as versioned text assets.

Each template is one complete prompt bound to a reply schema; rendering
substitutes only the named placeholders below, leaving the JSON schema
examples inside the template text untouched.  Empty optional sections
render as "(none)" so the model is never shown a dangling header.
"""

from __future__ import annotations

import re
from importlib import resources

from ..schemas import REGISTRY

# template id -> (asset file, schema id, placeholder names)
TEMPLATES = {
    "query_gen": ("query_gen.txt", "query_draft", ("natural_language_question", "context")),
    "mesh_gen": ("mesh_gen.txt", "mesh_list", ("natural_language_question", "context")),
    "mesh_select": (
        "mesh_select.txt",
        "mesh_select",
        ("natural_language_question", "context", "candidate_terms"),
    ),
    "critique": (
        "critique.txt",
        "critic_feedback",
        ("natural_language_question", "candidate_terms", "current_query", "search_meta"),
    ),
    "mesh_update": (
        "mesh_update.txt",
        "mesh_list",
        ("natural_language_question", "candidate_terms", "term_feedback"),
    ),
    "refine": (
        "refine.txt",
        "query_draft",
        ("natural_language_question", "term_feedback", "search_meta", "search_history"),
    ),
    "filter": ("filter.txt", "filter_verdicts", ("natural_language_question", "records")),
    "extract": ("extract.txt", "evidence_items", ("natural_language_question", "records")),
    "coverage_check": (
        "coverage_check.txt",
        "coverage_check",
        ("natural_language_question", "search_results_str", "context"),
    ),
    "summary": ("summary.txt", "summary", ("raw_sources",)),
    "qa": (
        "qa.txt",
        "qa_answer",
        ("natural_language_question", "task_instruction", "context", "sources"),
    ),
    "reflect": (
        "reflect.txt",
        "query_draft",
        ("natural_language_question", "verified_sources", "rationale_answer", "search_history"),
    ),
    "judge": ("judge.txt", "judge", ("natural_language_question", "answer_a", "answer_b")),
}

# Every template's schema must have a registered validator.
_missing = {schema for _, schema, _ in TEMPLATES.values()} - set(REGISTRY)
assert not _missing, f"templates bound to unregistered schemas: {_missing}"

_cache: dict[str, str] = {}


def schema_of(template_id: str) -> str:
    return TEMPLATES[template_id][1]


def _load(template_id: str) -> str:
    if template_id not in _cache:
        filename = TEMPLATES[template_id][0]
        _cache[template_id] = (
            resources.files(__package__).joinpath(filename).read_text(encoding="utf-8")
        )
    return _cache[template_id]


def render(template_id: str, **fields: str) -> str:
    """Fill a template's placeholders; unknown or missing names are errors."""
    _, _, names = TEMPLATES[template_id]
    unknown = set(fields) - set(names)
    if unknown:
        raise KeyError(f"template {template_id!r} has no placeholders {sorted(unknown)}")
    text = _load(template_id)
    for name in names:
        value = fields.get(name, "")
        if not str(value).strip():
            value = "(none)"
        text = text.replace("{" + name + "}", str(value))
    leftover = re.search(r"\{[a-z_]+\}", text)
    if leftover:
        raise RuntimeError(f"unresolved placeholder {leftover.group(0)} in {template_id!r}")
    return text
