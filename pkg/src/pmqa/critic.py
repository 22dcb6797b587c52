"""Iterative query refinement driven by a three-signal critique.

Each iteration searches the current query, critiques every working MeSH
term against the retrieved titles/abstracts (coverage, alignment,
redundancy), revises the term set, drafts a refined query, normalizes
it, and appends it to the history.  The loop stops when the aggregate
signals all read 1, when the refined query repeats an earlier one, or
when the iteration budget runs out.

An empty result set is handled before the iteration is charged: the
query is broadened deterministically (drop the newest untagged term,
else relax the newest MeSH term to untagged) and re-searched, at most
twice per session.  Every failure path degrades to the best query so
far rather than raising.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

from . import prompts
from .ledger import CostLedger
from .llm import ChatRequest, LlmGateway
from .planner import MeshCandidate, QuestionSpec, candidates_block
from .pubmed import EmptyResult, NetworkError, PubMedGateway, RateLimited, SearchResult
from .query import (
    AndSeq,
    FieldTag,
    QuerySyntaxError,
    Term,
    normalize_query,
    parse_query,
    render_query,
    with_date_window,
)
from .schemas import SchemaError
from .trace import SessionTrace

logger = logging.getLogger(__name__)

DIMENSIONS = ("Coverage", "Alignment", "Redundancy")

STOP_CONVERGED = "converged"
STOP_BUDGET = "budget_exhausted"
STOP_EMPTY_BROADENED = "empty_result_broadened"
STOP_ABORTED = "aborted"


@dataclass(frozen=True)
class CritiqueEntry:
    term: str
    dimension: str
    verdict: bool
    rationale: str = ""
    boolean_hint: Optional[str] = None

    def __post_init__(self):
        if self.dimension not in DIMENSIONS:
            raise ValueError(f"unknown dimension {self.dimension!r}")
        if self.boolean_hint is not None and self.dimension != "Redundancy":
            raise ValueError("boolean_hint only accompanies Redundancy entries")


@dataclass
class CritiqueResult:
    entries: list
    aggregates: dict
    form: str  # per_term | aggregate | both | forced_empty

    def tri_signal(self) -> bool:
        return all(self.aggregates.get(d) == 1 for d in ("coverage", "alignment", "redundancy"))

    def flagged_terms(self) -> set:
        """Terms judged both redundant and misaligned; must not survive unchanged."""
        verdicts: dict[str, dict] = {}
        for e in self.entries:
            verdicts.setdefault(e.term.casefold(), {})[e.dimension] = e.verdict
        return {
            term
            for term, v in verdicts.items()
            if v.get("Redundancy") is True and v.get("Alignment") is False
        }


@dataclass
class RefinementState:
    iteration: int
    mesh_pool: list
    query: AndSeq
    history: list
    critiques: list = field(default_factory=list)
    aggregate_feedback: Optional[dict] = None
    stop_reason: Optional[str] = None
    stop_note: str = ""
    broadening_count: int = 0


def _metadata_block(metadata) -> str:
    parts = []
    for i, (title, abstract) in enumerate(metadata, 1):
        entry = f"{i}. Title: {title}"
        if abstract:
            entry += f"\n   Abstract: {abstract}"
        parts.append(entry)
    return "\n".join(parts)


def _history_block(history, extra=()) -> str:
    lines = [f"{i}. {render_query(q)}" for i, q in enumerate(history, 1)]
    for note in extra:
        lines.append(f"- also searched (broadened): {note}")
    return "\n".join(lines)


def _feedback_block(crit: CritiqueResult) -> str:
    lines = []
    for e in crit.entries:
        line = f"- {e.term} / {e.dimension}: {'Yes' if e.verdict else 'No'}"
        if e.rationale:
            line += f" ({e.rationale})"
        if e.boolean_hint:
            line += f" [suggested linkage: {e.boolean_hint}]"
        lines.append(line)
    agg = crit.aggregates
    lines.append(
        "Aggregate signals: coverage={coverage}, alignment={alignment}, redundancy={redundancy}".format(**agg)
    )
    for dim in ("coverage", "alignment", "redundancy"):
        suggestion = agg.get(f"{dim}_suggestion", "")
        if suggestion:
            lines.append(f"  {dim} suggestion: {suggestion}")
    return "\n".join(lines)


class SelfCritic:
    """Runs the critique-update-refine loop for one session at a time."""

    def __init__(self, llm: LlmGateway, pubmed: PubMedGateway, budget: int = 3,
                 page_size: int = 20, max_broadenings: int = 2,
                 critic_metadata_cap: int = 20, temperature: float = 0.0):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.llm = llm
        self.pubmed = pubmed
        self.budget = budget
        self.page_size = page_size
        self.max_broadenings = max_broadenings
        self.critic_metadata_cap = critic_metadata_cap
        self.temperature = temperature

    # -- critique -------------------------------------------------------

    def critique(self, state: RefinementState, metadata, spec: QuestionSpec,
                 ledger: Optional[CostLedger] = None) -> CritiqueResult:
        """Judge each pool term (and the result set) against the metadata.

        Without metadata there is nothing to judge: the aggregate
        signals are forced to -1 and no model call is spent.
        """
        if not state.mesh_pool:
            raise ValueError("mesh pool must be nonempty")
        if not metadata:
            aggregates = {
                "coverage": -1,
                "coverage_suggestion": "no results retrieved",
                "alignment": -1,
                "alignment_suggestion": "no results retrieved",
                "redundancy": -1,
                "redundancy_suggestion": "no results retrieved",
            }
            return CritiqueResult([], aggregates, "forced_empty")

        capped = list(metadata)[: self.critic_metadata_cap]
        prompt = prompts.render(
            "critique",
            natural_language_question=spec.question,
            candidate_terms=candidates_block(state.mesh_pool),
            current_query=render_query(state.query),
            search_meta=_metadata_block(capped),
        )
        request = ChatRequest((("user", prompt),), "critic_feedback", self.temperature)
        resp = self.llm.complete(request, ledger, stage="critique")
        parsed = resp.parsed

        entries = []
        for item in parsed["terms"]:
            for dimension in DIMENSIONS:
                key = dimension.lower()
                entries.append(
                    CritiqueEntry(
                        term=item["term"],
                        dimension=dimension,
                        verdict=item[key],
                        rationale=item.get(f"{key}_rationale", ""),
                        boolean_hint=item.get("boolean_hint") if dimension == "Redundancy" else None,
                    )
                )
        return CritiqueResult(entries, parsed["feedback"], parsed["form"])

    # -- pool update ----------------------------------------------------

    def update_pool(self, state: RefinementState, crit: CritiqueResult, spec: QuestionSpec,
                    ledger: Optional[CostLedger] = None,
                    trace: Optional[SessionTrace] = None) -> tuple[list, list]:
        """Revise the term set from the critique; returns (pool, actions).

        Terms flagged redundant and misaligned may not survive unchanged:
        if the model keeps one verbatim it is removed here (or, when
        removal would empty the pool, re-rationalized), and the action is
        recorded.
        """
        if crit is None:
            raise ValueError("critique result required")
        prompt = prompts.render(
            "mesh_update",
            natural_language_question=spec.question,
            candidate_terms=candidates_block(state.mesh_pool),
            term_feedback=_feedback_block(crit),
        )
        previous = {c.term.casefold(): c for c in state.mesh_pool}
        new_pool = None
        followup = None
        for _ in range(2):
            blocks = [("user", prompt)]
            if followup:
                blocks.append(("user", followup))
            request = ChatRequest(tuple(blocks), "mesh_list", self.temperature)
            resp = self.llm.complete(request, ledger, stage="mesh_update")
            seen: dict[str, MeshCandidate] = {}
            for item in resp.parsed["terms"]:
                key = item["term"].casefold()
                seen.setdefault(key, MeshCandidate(item["term"], item["rationale"], selected=True))
            if seen:
                new_pool = list(seen.values())
                break
            followup = "The revised terms list was empty. Return the full revised term set."
        if new_pool is None:
            if trace is not None:
                trace.flag("mesh_update", "pool_fallback", "model emptied the pool twice; kept previous")
            return list(state.mesh_pool), [{"term": c.term, "action": "kept_fallback"} for c in state.mesh_pool]

        actions = []
        flagged = crit.flagged_terms()
        surviving = []
        for cand in new_pool:
            key = cand.term.casefold()
            if key in flagged:
                prior = previous.get(key)
                if prior is not None and prior.rationale == cand.rationale:
                    # unchanged survivor: remove, unless it is all we have
                    if len(new_pool) > 1:
                        actions.append({"term": cand.term, "action": "removed_forced"})
                        continue
                    cand = replace(
                        cand,
                        rationale=(cand.rationale + " [kept despite redundancy: sole remaining term]").strip(),
                    )
                    actions.append({"term": cand.term, "action": "re_rationalized_forced"})
                else:
                    actions.append({"term": cand.term, "action": "re_rationalized"})
            surviving.append(cand)
        for key, prior in previous.items():
            if key in flagged and key not in {c.term.casefold() for c in new_pool}:
                actions.append({"term": prior.term, "action": "removed"})
        return surviving, actions

    # -- query refinement ------------------------------------------------

    def refine_query(self, state: RefinementState, metadata, spec: QuestionSpec,
                     ledger: Optional[CostLedger] = None,
                     trace: Optional[SessionTrace] = None,
                     crit: Optional[CritiqueResult] = None,
                     broadened_notes=()) -> tuple[AndSeq, bool]:
        """Draft the next query; returns (query, converged).

        converged is set when the draft repeats a history entry or when
        drafting failed and the previous query is reused.
        """
        feedback = _feedback_block(crit) if crit is not None else candidates_block(state.mesh_pool)
        if crit is not None:
            feedback = "Current terms:\n" + candidates_block(state.mesh_pool) + "\n\nFeedback:\n" + feedback
        prompt = prompts.render(
            "refine",
            natural_language_question=spec.question,
            term_feedback=feedback,
            search_meta=_metadata_block(list(metadata)[: self.critic_metadata_cap]),
            search_history=_history_block(state.history, broadened_notes),
        )
        history_strings = {render_query(q) for q in state.history}

        followup = None
        for _ in range(2):
            blocks = [("user", prompt)]
            if followup:
                blocks.append(("user", followup))
            request = ChatRequest(tuple(blocks), "query_draft", self.temperature)
            try:
                resp = self.llm.complete(request, ledger, stage="refine")
            except SchemaError as exc:
                if trace is not None:
                    trace.flag("refine", "schema_failure", str(exc))
                return state.query, True
            draft = resp.parsed["query"]
            try:
                parsed = parse_query(draft)
            except QuerySyntaxError as exc:
                logger.info("unparseable refined draft %r: %s", draft, exc)
                followup = (
                    f"The query {draft!r} is not valid ({exc}). "
                    "Redraft it following the requirements exactly."
                )
                continue
            if spec.date_window is not None:
                refined = with_date_window(parsed, spec.date_window)
            else:
                refined = normalize_query(parsed)
            return refined, render_query(refined) in history_strings
        if trace is not None:
            trace.flag("refine", "redraft_failure", "reused previous query")
        return state.query, True

    # -- broadening -------------------------------------------------------

    @staticmethod
    def broaden(q: AndSeq) -> Optional[AndSeq]:
        """One deterministic relaxation step for a query that matched nothing.

        Drops the last untagged term when there is one to drop; otherwise
        relaxes the last MeSH term to untagged.  None when no step applies.
        """
        children = list(q.children)
        for i in range(len(children) - 1, -1, -1):
            child = children[i]
            if isinstance(child, Term) and child.tag is FieldTag.UNTAGGED and len(children) > 1:
                del children[i]
                return normalize_query(AndSeq(tuple(children)))
        for i in range(len(children) - 1, -1, -1):
            child = children[i]
            if isinstance(child, Term) and child.tag is FieldTag.MESH:
                children[i] = Term(child.text, FieldTag.UNTAGGED)
                return normalize_query(AndSeq(tuple(children)))
        return None

    # -- main loop --------------------------------------------------------

    def run_refinement(self, spec: QuestionSpec, q0: AndSeq, pool: list,
                       ledger: Optional[CostLedger] = None,
                       trace: Optional[SessionTrace] = None) -> tuple[AndSeq, RefinementState]:
        """Run the loop; always returns the best query so far plus state."""
        state = RefinementState(iteration=0, mesh_pool=list(pool), query=q0, history=[q0])
        iterations = []
        broadened_notes = []
        final_search_empty = False
        converged = False
        aborted_note = None

        for t in range(1, self.budget + 1):
            state.iteration = t
            iter_record = {"t": t, "broadenings": []}
            result: Optional[SearchResult] = None
            search_q = state.query

            while True:
                try:
                    result = self.pubmed.search(search_q, self.page_size, ledger=ledger)
                    break
                except EmptyResult:
                    if state.broadening_count < self.max_broadenings:
                        broadened = self.broaden(search_q)
                        if broadened is not None:
                            state.broadening_count += 1
                            iter_record["broadenings"].append(
                                {"from": render_query(search_q), "to": render_query(broadened)}
                            )
                            broadened_notes.append(render_query(broadened))
                            search_q = broadened
                            continue
                    result = None
                    break
                except (NetworkError, RateLimited) as exc:
                    aborted_note = f"search backend failure: {exc}"
                    result = None
                    break

            if aborted_note:
                iter_record["error"] = aborted_note
                iterations.append(iter_record)
                break

            state.query = search_q
            final_search_empty = result is None
            metadata = [(r.title, r.abstract) for r in result.records] if result else []
            iter_record["searched_query"] = render_query(search_q)
            iter_record["result_count"] = len(metadata)

            try:
                crit = self.critique(state, metadata, spec, ledger)
            except SchemaError as exc:
                aborted_note = f"critique schema failure: {exc}"
                iter_record["error"] = aborted_note
                iterations.append(iter_record)
                break
            state.critiques.append(crit)
            state.aggregate_feedback = crit.aggregates
            iter_record["aggregates"] = {
                d: crit.aggregates[d] for d in ("coverage", "alignment", "redundancy")
            }
            iter_record["critique_form"] = crit.form
            iter_record["critique_entries"] = [
                {
                    "term": e.term,
                    "dimension": e.dimension,
                    "verdict": e.verdict,
                    "rationale": e.rationale,
                    **({"boolean_hint": e.boolean_hint} if e.boolean_hint else {}),
                }
                for e in crit.entries
            ]

            try:
                new_pool, actions = self.update_pool(state, crit, spec, ledger, trace)
            except SchemaError as exc:
                aborted_note = f"pool update schema failure: {exc}"
                iter_record["error"] = aborted_note
                iterations.append(iter_record)
                break
            state.mesh_pool = new_pool
            iter_record["pool_after"] = [c.term for c in new_pool]
            iter_record["pool_actions"] = actions

            refined, duplicate = self.refine_query(
                state, metadata, spec, ledger, trace, crit=crit, broadened_notes=broadened_notes
            )
            state.history.append(refined)
            state.query = refined
            iter_record["refined_query"] = render_query(refined)

            converged = crit.tri_signal() or duplicate
            iter_record["converged"] = converged
            iterations.append(iter_record)
            if converged:
                break

        if aborted_note:
            state.stop_reason = STOP_ABORTED
            state.stop_note = aborted_note
        elif final_search_empty:
            state.stop_reason = STOP_EMPTY_BROADENED
            state.stop_note = f"search stayed empty after {state.broadening_count} broadening(s)"
        elif converged:
            state.stop_reason = STOP_CONVERGED
            state.stop_note = (
                f"{state.broadening_count} broadening(s) applied" if state.broadening_count else ""
            )
        else:
            state.stop_reason = STOP_BUDGET
            state.stop_note = (
                f"{state.broadening_count} broadening(s) applied" if state.broadening_count else ""
            )

        q_star = state.history[-1]
        if trace is not None:
            trace.refinement = {
                "history": [render_query(q) for q in state.history],
                "iterations": iterations,
                "stop_reason": state.stop_reason,
                "stop_note": state.stop_note,
                "broadening_count": state.broadening_count,
                "final_query": render_query(q_star),
                "final_pool": [c.term for c in state.mesh_pool],
            }
            trace.stop_reasons["refinement"] = state.stop_reason
        return q_star, state
