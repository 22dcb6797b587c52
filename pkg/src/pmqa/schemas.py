"""Envelope extraction and validation for structured model replies.

Every model-facing stage binds its prompt to a schema id registered
here.  Extraction locates the first well-formed JSON object in a raw
reply (tolerating markdown code fences), then the schema's validator
normalizes it: Yes/No-style fields become booleans, enum domains are
enforced, and missing required fields are reported so the gateway can
re-ask with a corrective message.
"""

from __future__ import annotations

import json
import re


class SchemaError(Exception):
    """Reply did not yield a valid envelope.

    reason is one of "no_object_found", "missing_fields", "bad_enum".
    """

    def __init__(self, reason: str, detail: str = "", fields: tuple = ()):
        self.reason = reason
        self.fields = tuple(fields)
        msg = reason if not detail else f"{reason}: {detail}"
        super().__init__(msg)


_FENCE_RE = re.compile(r"```(?:[a-zA-Z0-9_-]*)\s*\n(.*?)```", re.DOTALL)


def _first_json_object(text: str):
    decoder = json.JSONDecoder()
    for candidate in [m.group(1) for m in _FENCE_RE.finditer(text)] + [text]:
        idx = candidate.find("{")
        while idx != -1:
            try:
                value, _ = decoder.raw_decode(candidate[idx:])
            except json.JSONDecodeError:
                idx = candidate.find("{", idx + 1)
                continue
            if isinstance(value, dict):
                return value
            idx = candidate.find("{", idx + 1)
    raise SchemaError("no_object_found", "reply contains no JSON object")


def as_bool(value, field: str) -> bool:
    """Normalize yes/no/true/false (any case) or a real boolean."""
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        folded = value.strip().casefold()
        if folded in ("yes", "true"):
            return True
        if folded in ("no", "false"):
            return False
    raise SchemaError("bad_enum", f"{field} must be yes/no, got {value!r}", (field,))


def _require(obj: dict, *names: str) -> None:
    missing = [n for n in names if n not in obj]
    if missing:
        raise SchemaError("missing_fields", ", ".join(missing), tuple(missing))


def _as_str(value, field: str, allow_empty: bool = True) -> str:
    if not isinstance(value, str):
        raise SchemaError("bad_enum", f"{field} must be a string", (field,))
    if not allow_empty and not value.strip():
        raise SchemaError("bad_enum", f"{field} must be nonempty", (field,))
    return value


def _as_list(value, field: str) -> list:
    if not isinstance(value, list):
        raise SchemaError("bad_enum", f"{field} must be a list", (field,))
    return value


# ----------------------------------------------------------------------
# Per-schema validators; each returns a normalized plain dict.
# ----------------------------------------------------------------------


def _validate_query_draft(obj: dict) -> dict:
    _require(obj, "query")
    return {
        "query": _as_str(obj["query"], "query", allow_empty=False).strip(),
        "rationale": _as_str(obj.get("rationale", ""), "rationale"),
    }


def _validate_mesh_list(obj: dict) -> dict:
    _require(obj, "terms")
    terms = []
    for i, item in enumerate(_as_list(obj["terms"], "terms")):
        if not isinstance(item, dict):
            raise SchemaError("bad_enum", f"terms[{i}] must be an object", ("terms",))
        _require(item, "term")
        terms.append(
            {
                "term": _as_str(item["term"], "term", allow_empty=False).strip(),
                "rationale": _as_str(item.get("rationale", ""), "rationale"),
            }
        )
    return {"terms": terms}


def _validate_mesh_select(obj: dict) -> dict:
    _require(obj, "selected")
    selected = [
        _as_str(t, "selected", allow_empty=False).strip()
        for t in _as_list(obj["selected"], "selected")
    ]
    return {"selected": selected}


_FEEDBACK_DIMS = ("coverage", "alignment", "redundancy")


def _validate_aggregate_feedback(obj: dict) -> dict:
    out = {}
    for dim in _FEEDBACK_DIMS:
        value = obj.get(dim)
        if not isinstance(value, int) or isinstance(value, bool) or value not in (-1, 0, 1):
            raise SchemaError("bad_enum", f"feedback.{dim} must be -1, 0, or 1", (dim,))
        out[dim] = value
        out[f"{dim}_suggestion"] = _as_str(obj.get(f"{dim}_suggestion", ""), "suggestion")
    return out


def _validate_critic_feedback(obj: dict) -> dict:
    has_terms = isinstance(obj.get("terms"), list) and obj.get("terms")
    has_feedback = isinstance(obj.get("feedback"), dict)
    if not has_terms and not has_feedback:
        raise SchemaError("missing_fields", "terms or feedback", ("terms", "feedback"))

    terms = []
    if has_terms:
        for i, item in enumerate(obj["terms"]):
            if not isinstance(item, dict):
                raise SchemaError("bad_enum", f"terms[{i}] must be an object", ("terms",))
            _require(item, "term", "coverage", "alignment", "redundancy")
            entry = {
                "term": _as_str(item["term"], "term", allow_empty=False).strip(),
                "coverage": as_bool(item["coverage"], "coverage"),
                "coverage_rationale": _as_str(item.get("coverage_rationale", ""), "coverage_rationale"),
                "alignment": as_bool(item["alignment"], "alignment"),
                "alignment_rationale": _as_str(item.get("alignment_rationale", ""), "alignment_rationale"),
                "redundancy": as_bool(item["redundancy"], "redundancy"),
                "redundancy_rationale": _as_str(
                    item.get("redundancy_rationale", ""), "redundancy_rationale"
                ),
            }
            if "boolean_hint" in item and item["boolean_hint"]:
                entry["boolean_hint"] = _as_str(item["boolean_hint"], "boolean_hint")
            terms.append(entry)

    if has_feedback:
        feedback = _validate_aggregate_feedback(obj["feedback"])
        form = "both" if has_terms else "aggregate"
    else:
        # Derive the aggregate signals from per-term verdicts: coverage and
        # alignment hold when every term passes; redundancy signal is 1
        # when no term was flagged redundant.
        feedback = {
            "coverage": 1 if all(t["coverage"] for t in terms) else 0,
            "coverage_suggestion": "",
            "alignment": 1 if all(t["alignment"] for t in terms) else 0,
            "alignment_suggestion": "",
            "redundancy": 1 if not any(t["redundancy"] for t in terms) else 0,
            "redundancy_suggestion": "",
        }
        form = "per_term"

    return {"terms": terms, "feedback": feedback, "form": form}


def _validate_filter_verdicts(obj: dict) -> dict:
    _require(obj, "verdicts")
    verdicts = []
    for i, item in enumerate(_as_list(obj["verdicts"], "verdicts")):
        if not isinstance(item, dict):
            raise SchemaError("bad_enum", f"verdicts[{i}] must be an object", ("verdicts",))
        _require(item, "pmid", "keep")
        verdicts.append(
            {
                "pmid": str(item["pmid"]).strip(),
                "keep": as_bool(item["keep"], "keep"),
                "rationale": _as_str(item.get("rationale", ""), "rationale"),
            }
        )
    return {"verdicts": verdicts}


def _validate_evidence_items(obj: dict) -> dict:
    _require(obj, "items")
    items = []
    for i, item in enumerate(_as_list(obj["items"], "items")):
        if not isinstance(item, dict):
            raise SchemaError("bad_enum", f"items[{i}] must be an object", ("items",))
        _require(item, "pmid", "aligned")
        items.append(
            {
                "pmid": str(item["pmid"]).strip(),
                "passage": _as_str(item.get("passage", ""), "passage"),
                "aligned": as_bool(item["aligned"], "aligned"),
                "rationale": _as_str(item.get("rationale", ""), "rationale"),
            }
        )
    return {"items": items}


def _validate_coverage_check(obj: dict) -> dict:
    _require(obj, "is_sufficient")
    needed = obj.get("needed_pmids", [])
    return {
        "is_sufficient": as_bool(obj["is_sufficient"], "is_sufficient"),
        "rationale": _as_str(obj.get("rationale", ""), "rationale"),
        "needed_pmids": [str(p).strip() for p in _as_list(needed, "needed_pmids")],
    }


def _validate_summary(obj: dict) -> dict:
    _require(obj, "verified_sources")
    return {"verified_sources": _as_str(obj["verified_sources"], "verified_sources")}


def _validate_qa_answer(obj: dict) -> dict:
    _require(obj, "answer")
    return {
        "answer": _as_str(obj["answer"], "answer", allow_empty=False).strip(),
        "rationale": _as_str(obj.get("rationale", ""), "rationale"),
    }


JUDGE_DIMENSIONS = (
    "Reasoning Soundness",
    "Evidence Grounding",
    "Clinical Relevance",
    "Trustworthiness",
)


def _judge_key(name: str) -> str:
    return name.strip().casefold().replace("_", " ")


def _validate_judge_side(obj: dict, side: str) -> dict:
    by_key = {_judge_key(k): v for k, v in obj.items()}
    scores = {}
    for dim in JUDGE_DIMENSIONS:
        entry = by_key.get(_judge_key(dim))
        if entry is None:
            raise SchemaError("missing_fields", f"{side}.{dim}", (dim,))
        if not isinstance(entry, dict) or "score" not in entry:
            raise SchemaError("bad_enum", f"{side}.{dim} needs a score object", (dim,))
        score = entry["score"]
        if not isinstance(score, int) or isinstance(score, bool) or not 1 <= score <= 5:
            raise SchemaError("bad_enum", f"{side}.{dim} score must be 1-5", (dim,))
        scores[dim] = {
            "score": score,
            "justification": _as_str(entry.get("justification", ""), "justification"),
        }
    return scores


def _validate_judge(obj: dict) -> dict:
    by_key = {_judge_key(k): v for k, v in obj.items()}
    side_a = by_key.get("answer a")
    side_b = by_key.get("answer b")
    if not isinstance(side_a, dict) or not isinstance(side_b, dict):
        raise SchemaError("missing_fields", "Answer A / Answer B", ("Answer A", "Answer B"))
    verdict = by_key.get("verdict")
    if not isinstance(verdict, str) or verdict.strip().casefold() not in ("a", "b", "tie"):
        raise SchemaError("bad_enum", "verdict must be A, B, or tie", ("verdict",))
    folded = verdict.strip().casefold()
    return {
        "answer_a": _validate_judge_side(side_a, "Answer A"),
        "answer_b": _validate_judge_side(side_b, "Answer B"),
        "verdict": "tie" if folded == "tie" else folded.upper(),
    }


REGISTRY = {
    "query_draft": _validate_query_draft,
    "mesh_list": _validate_mesh_list,
    "mesh_select": _validate_mesh_select,
    "critic_feedback": _validate_critic_feedback,
    "filter_verdicts": _validate_filter_verdicts,
    "evidence_items": _validate_evidence_items,
    "coverage_check": _validate_coverage_check,
    "summary": _validate_summary,
    "qa_answer": _validate_qa_answer,
    "judge": _validate_judge,
}

# Short restatement of each envelope, appended as the corrective message
# when a reply fails validation and the gateway re-asks.
REMINDERS = {
    "query_draft": 'Reply with JSON only: {"query": "<PubMed query string>", "rationale": "<brief explanation>"}',
    "mesh_list": 'Reply with JSON only: {"terms": [{"term": "<MeSH term>", "rationale": "<why>"}]}',
    "mesh_select": 'Reply with JSON only: {"selected": ["<term exactly as offered>", ...]}',
    "critic_feedback": (
        'Reply with JSON only: {"terms": [{"term": "...", "coverage": "Yes|No", "coverage_rationale": "...", '
        '"alignment": "Yes|No", "alignment_rationale": "...", "redundancy": "Yes|No", '
        '"redundancy_rationale": "...", "boolean_hint": "..."}], '
        '"feedback": {"coverage": -1|0|1, "coverage_suggestion": "...", "alignment": -1|0|1, '
        '"alignment_suggestion": "...", "redundancy": -1|0|1, "redundancy_suggestion": "..."}}'
    ),
    "filter_verdicts": 'Reply with JSON only: {"verdicts": [{"pmid": "...", "keep": "Yes|No", "rationale": "..."}]}',
    "evidence_items": (
        'Reply with JSON only: {"items": [{"pmid": "...", "passage": "...", "aligned": "Yes|No", "rationale": "..."}]}'
    ),
    "coverage_check": (
        'Reply with JSON only: {"is_sufficient": true|false, "rationale": "...", "needed_pmids": ["..."]}'
    ),
    "summary": 'Reply with JSON only: {"verified_sources": "<single rewritten paragraph>"}',
    "qa_answer": 'Reply with JSON only: {"answer": "<per task instruction>", "rationale": "<explanation>"}',
    "judge": (
        'Reply with JSON only: {"Answer A": {<four dimensions, each {"score": 1-5, "justification": "..."}>}, '
        '"Answer B": {...}, "verdict": "A"|"B"|"tie"}'
    ),
}

assert set(REMINDERS) == set(REGISTRY)


def extract_envelope(raw_text: str, schema_id: str):
    """Locate and validate the reply envelope for the given schema."""
    if schema_id not in REGISTRY:
        raise KeyError(f"unregistered schema {schema_id!r}")
    if not raw_text:
        raise SchemaError("no_object_found", "empty reply")
    obj = _first_json_object(raw_text)
    return REGISTRY[schema_id](obj)
