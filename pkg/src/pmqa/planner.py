"""Search planning: candidate MeSH terms, subset selection, first query draft.

Selection is closed-world: the model must pick terms verbatim from the
offered pool, which keeps the working set a true subset of what was
proposed.  The question's publication-date window, when present, is
injected into the draft deterministically rather than trusted to the
model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

from . import prompts
from .ledger import CostLedger
from .llm import ChatRequest, LlmGateway
from .query import AndSeq, DateRange, QuerySyntaxError, mesh_terms_of, normalize_query, parse_query, render_query, with_date_window
from .schemas import SchemaError
from .trace import SessionTrace

logger = logging.getLogger(__name__)


class EmptyPlan(Exception):
    """The model produced no usable terms after a re-ask."""


class PlanningFailure(Exception):
    """No syntactically valid initial query after a re-draft."""


@dataclass(frozen=True)
class MeshCandidate:
    term: str
    rationale: str = ""
    selected: bool = False

    def __post_init__(self):
        if not self.term.strip():
            raise ValueError("candidate term must be nonempty")


@dataclass
class QuestionSpec:
    """One question plus its task framing and optional gold annotations."""

    id: str
    question: str
    task_spec: str = ""
    context: Optional[str] = None
    date_window: Optional[DateRange] = None
    label_set: Optional[tuple] = None
    gold_label: Optional[str] = None
    gold_mesh: Optional[set] = None

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError("question must be nonempty")
        if self.label_set is not None:
            self.label_set = tuple(self.label_set)


def candidates_block(pool) -> str:
    return "\n".join(
        f"- {c.term}" + (f": {c.rationale}" if c.rationale else "") for c in pool
    )


class Planner:
    def __init__(self, llm: LlmGateway, temperature: float = 0.0):
        self.llm = llm
        self.temperature = temperature

    def _ask(self, template_id: str, fields: dict, ledger, stage: str,
             followup: Optional[str] = None):
        prompt = prompts.render(template_id, **fields)
        blocks = [("user", prompt)]
        if followup:
            blocks.append(("user", followup))
        request = ChatRequest(tuple(blocks), prompts.schema_of(template_id), self.temperature)
        return self.llm.complete(request, ledger, stage=stage)

    def generate_candidates(self, spec: QuestionSpec, ledger: Optional[CostLedger] = None,
                            trace: Optional[SessionTrace] = None) -> list[MeshCandidate]:
        """Propose a broad candidate pool, deduplicated case-insensitively."""
        fields = {
            "natural_language_question": spec.question,
            "context": spec.context or "",
        }
        followup = None
        for _ in range(2):
            resp = self._ask("mesh_gen", fields, ledger, "mesh_gen", followup)
            seen: dict[str, MeshCandidate] = {}
            for item in resp.parsed["terms"]:
                key = item["term"].casefold()
                seen.setdefault(key, MeshCandidate(item["term"], item["rationale"]))
            if seen:
                pool = list(seen.values())
                if trace is not None:
                    trace.planner["candidates"] = [
                        {"term": c.term, "rationale": c.rationale} for c in pool
                    ]
                return pool
            followup = "The terms list was empty. Propose at least one candidate MeSH term."
        raise EmptyPlan("no candidate terms after re-ask")

    def select_candidates(self, pool: list[MeshCandidate], spec: QuestionSpec,
                          ledger: Optional[CostLedger] = None,
                          trace: Optional[SessionTrace] = None) -> list[MeshCandidate]:
        """Model-chosen subset of the pool; terms outside the pool are rejected."""
        if not pool:
            raise ValueError("candidate pool must be nonempty")
        if len(pool) == 1:
            selected = [replace(pool[0], selected=True)]
            if trace is not None:
                trace.planner["selected"] = [c.term for c in selected]
                trace.planner["selection_forced"] = True
            return selected

        fields = {
            "natural_language_question": spec.question,
            "context": spec.context or "",
            "candidate_terms": candidates_block(pool),
        }
        by_key = {c.term.casefold(): c for c in pool}
        followup = None
        for _ in range(2):
            resp = self._ask("mesh_select", fields, ledger, "mesh_select", followup)
            picked = resp.parsed["selected"]
            unknown = [t for t in picked if t.casefold() not in by_key]
            if unknown:
                raise SchemaError(
                    "bad_enum",
                    f"selected terms not in the offered pool: {unknown}",
                    ("selected",),
                )
            keys = {t.casefold() for t in picked}
            if keys:
                selected = [replace(c, selected=True) for c in pool if c.term.casefold() in keys]
                if trace is not None:
                    trace.planner["selected"] = [c.term for c in selected]
                return selected
            followup = "The selection was empty. Select at least one term from the candidate list."
        raise EmptyPlan("no terms selected after re-ask")

    def draft_initial_query(self, selected: list[MeshCandidate], spec: QuestionSpec,
                            ledger: Optional[CostLedger] = None,
                            trace: Optional[SessionTrace] = None) -> AndSeq:
        """Draft, validate, window, and normalize the first query."""
        if not selected:
            raise ValueError("selected terms must be nonempty")
        context_parts = []
        if spec.context:
            context_parts.append(spec.context)
        context_parts.append("Build the query from these selected MeSH terms:\n" + candidates_block(selected))
        fields = {
            "natural_language_question": spec.question,
            "context": "\n\n".join(context_parts),
        }
        followup = None
        for _ in range(2):
            resp = self._ask("query_gen", fields, ledger, "query_gen", followup)
            draft = resp.parsed["query"]
            try:
                parsed = parse_query(draft)
            except QuerySyntaxError as exc:
                logger.info("unparseable draft %r: %s", draft, exc)
                followup = (
                    f"The query {draft!r} is not valid ({exc}). "
                    "Redraft it following the requirements exactly."
                )
                continue
            if spec.date_window is not None:
                q0 = with_date_window(parsed, spec.date_window)
                windowed = True
            else:
                q0 = normalize_query(parsed)
                windowed = False
            dropped = sorted(
                c.term for c in selected if c.term.casefold() not in mesh_terms_of(q0)
            )
            if trace is not None:
                trace.planner["initial_query"] = render_query(q0)
                trace.planner["draft"] = draft
                trace.planner["window_injected"] = windowed
                trace.planner["dropped_terms"] = dropped
                if dropped:
                    trace.flag("query_gen", "dropped_terms", ", ".join(dropped))
            return q0
        raise PlanningFailure("no parseable query after re-draft")

    def plan(self, spec: QuestionSpec, ledger: Optional[CostLedger] = None,
             trace: Optional[SessionTrace] = None) -> tuple[AndSeq, list[MeshCandidate]]:
        """Full stage-1 pass: candidates, selection, initial query."""
        pool = self.generate_candidates(spec, ledger, trace)
        selected = self.select_candidates(pool, spec, ledger, trace)
        q0 = self.draft_initial_query(selected, spec, ledger, trace)
        return q0, selected
