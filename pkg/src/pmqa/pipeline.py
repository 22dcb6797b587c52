"""Per-question session runners: the full pipeline and three baseline modes.

All four modes share the same prompt assets and gateways:

* ``reasoner``        plan -> critique/refine loop -> batched retrieval
                      with early stopping -> cited synthesis
* ``llm_only``        one answer call, no retrieval (0 search calls)
* ``one_shot_rag``    one generated query, one search, summarize, answer
                      (exactly 1 search call)
* ``self_reflection`` draft an answer, then reflect: each round revises
                      the query from answer/source gaps, searches, and
                      redrafts (at most 1 + reflection-budget searches)

A session never raises: failures land in the trace and the outcome
record under a small taxonomy (no_articles, api_error, format_error,
planning_failure) so benchmark runs keep going.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional

from . import prompts
from .config import RunConfig
from .critic import SelfCritic
from .ledger import CostLedger, QuestionMetrics
from .llm import ChatRequest, LlmGateway
from .planner import EmptyPlan, Planner, PlanningFailure, QuestionSpec
from .pubmed import EmptyResult, NetworkError, PubMedGateway, RateLimited, SearchResult
from .query import QuerySyntaxError, mesh_terms_of, normalize_query, parse_query, render_query
from .retriever import EvidenceItem, ReflectiveRetriever
from .schemas import SchemaError
from .synthesis import AnswerFormatError, FinalResponse, SummaryOfEvidence, Synthesizer
from .trace import SessionTrace

logger = logging.getLogger(__name__)

FAILURE_NO_ARTICLES = "no_articles"
FAILURE_API = "api_error"
FAILURE_FORMAT = "format_error"
FAILURE_PLANNING = "planning_failure"


@dataclass
class SessionResult:
    spec: QuestionSpec
    response: Optional[FinalResponse]
    trace: SessionTrace
    ledger: CostLedger
    metrics: QuestionMetrics

    def output_record(self) -> dict:
        return {
            "id": self.spec.id,
            "answer": self.response.answer if self.response else None,
            "rationale": self.response.rationale if self.response else None,
            "citations": sorted(self.response.cited_pmids) if self.response else [],
            "ledger": self.ledger.totals(),
            "stop_reasons": self.trace.stop_reasons,
            "failure": self.trace.failure,
        }


def _new_trace(spec: QuestionSpec, config: RunConfig, mode: str) -> SessionTrace:
    trace = SessionTrace(
        question_id=spec.id,
        question=spec.question,
        task_spec=spec.task_spec,
        context=spec.context,
        created_at=time.time(),
    )
    trace.config = dict(config.echo(), mode=mode)
    return trace


def _finish(spec, trace, ledger, response, *, predicted_mesh=None, esd=None,
            grounded=None, failure=None) -> SessionResult:
    if failure is not None:
        trace.failure = {"kind": failure[0], "detail": failure[1]}
    trace.record_ledger(ledger)
    metrics = QuestionMetrics(
        question_id=spec.id,
        ledger=ledger,
        predicted_label=response.answer if response else None,
        gold_label=spec.gold_label,
        predicted_mesh=predicted_mesh or set(),
        gold_mesh=spec.gold_mesh,
        esd=esd,
        evidence_grounded=grounded,
        failure=failure[0] if failure else None,
    )
    return SessionResult(spec, response, trace, ledger, metrics)


def _records_as_pool(records) -> list:
    """Treat retrieved records as an evidence pool for the baseline modes."""
    pool = []
    for r in records:
        passage = f"{r.title}. {r.abstract}".strip(". ").strip() or f"article {r.pmid}"
        pool.append(EvidenceItem(r.pmid, passage, True, "retrieved record", batch_index=1))
    return pool


# ----------------------------------------------------------------------
# reasoner
# ----------------------------------------------------------------------


def run_reasoner(spec: QuestionSpec, config: RunConfig, llm: LlmGateway,
                 pubmed: PubMedGateway) -> SessionResult:
    ledger = CostLedger()
    trace = _new_trace(spec, config, "reasoner")
    planner = Planner(llm, temperature=config.temperature("query_gen"))
    critic = SelfCritic(
        llm,
        pubmed,
        budget=config.refine_budget,
        page_size=config.m_max,
        temperature=config.temperature("critique"),
    )
    retriever = ReflectiveRetriever(
        llm, m=config.m, m_max=config.m_max, token_budget=config.token_budget,
        temperature=config.temperature("extract"),
    )
    synth = Synthesizer(llm, temperature=config.temperature("answer"))

    failure = None
    try:
        q0, selected = planner.plan(spec, ledger, trace)
        q_star, state = critic.run_refinement(spec, q0, selected, ledger, trace)
        predicted_mesh = mesh_terms_of(q_star)

        result: Optional[SearchResult] = None
        try:
            result = pubmed.search(q_star, config.m_max, ledger=ledger)
        except EmptyResult:
            trace.flag("search", "empty_final_result", render_query(q_star))
            failure = (FAILURE_NO_ARTICLES, "optimized query retrieved nothing")

        outcome = retriever.run_retrieval(result, spec, ledger, trace)
        soe = synth.summarize(list(outcome.pool), spec, ledger, trace)
        response = synth.answer(spec, soe, ledger, trace)
        return _finish(
            spec, trace, ledger, response,
            predicted_mesh=predicted_mesh, esd=outcome.esd,
            grounded=response.evidence_grounded, failure=failure,
        )
    except (PlanningFailure, EmptyPlan) as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_PLANNING, str(exc)))
    except (NetworkError, RateLimited) as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_API, str(exc)))
    except (SchemaError, AnswerFormatError) as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_FORMAT, str(exc)))


# ----------------------------------------------------------------------
# llm_only
# ----------------------------------------------------------------------


def run_llm_only(spec: QuestionSpec, config: RunConfig, llm: LlmGateway,
                 pubmed: PubMedGateway) -> SessionResult:
    ledger = CostLedger()
    trace = _new_trace(spec, config, "llm_only")
    synth = Synthesizer(llm, temperature=config.temperature("answer"))
    try:
        response = synth.answer(spec, SummaryOfEvidence("", frozenset(), empty=True),
                                ledger, trace)
        trace.stop_reasons["mode"] = "llm_only"
        return _finish(spec, trace, ledger, response)
    except (SchemaError, AnswerFormatError) as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_FORMAT, str(exc)))
    except (NetworkError, RateLimited) as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_API, str(exc)))


# ----------------------------------------------------------------------
# one_shot_rag
# ----------------------------------------------------------------------


def _generate_query(spec: QuestionSpec, config: RunConfig, llm: LlmGateway,
                    ledger: CostLedger, trace: SessionTrace):
    """Direct question-to-query drafting shared by the baseline modes."""
    fields = {
        "natural_language_question": spec.question,
        "context": spec.context or "",
    }
    followup = None
    for _ in range(2):
        prompt = prompts.render("query_gen", **fields)
        blocks = [("user", prompt)]
        if followup:
            blocks.append(("user", followup))
        request = ChatRequest(tuple(blocks), "query_draft", config.temperature("query_gen"))
        draft = llm.complete(request, ledger, stage="query_gen").parsed["query"]
        try:
            parsed = parse_query(draft)
        except QuerySyntaxError as exc:
            followup = f"The query {draft!r} is not valid ({exc}). Redraft it."
            continue
        if spec.date_window is not None:
            from .query import with_date_window

            return with_date_window(parsed, spec.date_window)
        return normalize_query(parsed)
    raise PlanningFailure("no parseable query after re-draft")


def run_one_shot_rag(spec: QuestionSpec, config: RunConfig, llm: LlmGateway,
                     pubmed: PubMedGateway) -> SessionResult:
    ledger = CostLedger()
    trace = _new_trace(spec, config, "one_shot_rag")
    synth = Synthesizer(llm, temperature=config.temperature("answer"))
    failure = None
    try:
        query = _generate_query(spec, config, llm, ledger, trace)
        trace.planner["initial_query"] = render_query(query)
        records = ()
        try:
            records = pubmed.search(query, config.m_max, ledger=ledger).records
        except EmptyResult:
            trace.flag("search", "empty_result", render_query(query))
            failure = (FAILURE_NO_ARTICLES, "query retrieved nothing")
        pool = _records_as_pool(records)
        soe = synth.summarize(pool, spec, ledger, trace)
        response = synth.answer(spec, soe, ledger, trace)
        trace.stop_reasons["mode"] = "one_shot_rag"
        return _finish(
            spec, trace, ledger, response,
            predicted_mesh=mesh_terms_of(query),
            grounded=response.evidence_grounded, failure=failure,
        )
    except PlanningFailure as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_PLANNING, str(exc)))
    except (NetworkError, RateLimited) as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_API, str(exc)))
    except (SchemaError, AnswerFormatError) as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_FORMAT, str(exc)))


# ----------------------------------------------------------------------
# self_reflection
# ----------------------------------------------------------------------


def run_self_reflection(spec: QuestionSpec, config: RunConfig, llm: LlmGateway,
                        pubmed: PubMedGateway) -> SessionResult:
    ledger = CostLedger()
    trace = _new_trace(spec, config, "self_reflection")
    synth = Synthesizer(llm, temperature=config.temperature("answer"))
    rounds = []
    failure = None
    try:
        query = _generate_query(spec, config, llm, ledger, trace)
        history = [query]
        accumulated: dict = {}

        def search_into(q) -> bool:
            try:
                for r in pubmed.search(q, config.m_max, ledger=ledger).records:
                    accumulated.setdefault(r.pmid, r)
                return True
            except EmptyResult:
                trace.flag("search", "empty_result", render_query(q))
                return False

        search_into(query)
        soe = synth.summarize(_records_as_pool(accumulated.values()), spec, ledger, trace)
        response = synth.answer(spec, soe, ledger, trace)

        for round_no in range(1, config.refine_budget + 1):
            fields = {
                "natural_language_question": spec.question,
                "verified_sources": soe.text,
                "rationale_answer": f"{response.answer}: {response.rationale}",
                "search_history": "\n".join(
                    f"{i}. {render_query(q)}" for i, q in enumerate(history, 1)
                ),
            }
            request = ChatRequest(
                (("user", prompts.render("reflect", **fields)),),
                "query_draft",
                config.temperature("reflect"),
            )
            try:
                draft = llm.complete(request, ledger, stage="reflect").parsed["query"]
                revised = normalize_query(parse_query(draft))
                if spec.date_window is not None:
                    from .query import with_date_window

                    revised = with_date_window(revised, spec.date_window)
            except (SchemaError, QuerySyntaxError) as exc:
                trace.flag("reflect", "bad_revision", str(exc))
                break
            if render_query(revised) in {render_query(q) for q in history}:
                rounds.append({"round": round_no, "query": render_query(revised), "repeat": True})
                break
            history.append(revised)
            hit = search_into(revised)
            rounds.append({"round": round_no, "query": render_query(revised), "hit": hit})
            soe = synth.summarize(_records_as_pool(accumulated.values()), spec, ledger, trace)
            response = synth.answer(spec, soe, ledger, trace)

        trace.refinement = {
            "history": [render_query(q) for q in history],
            "rounds": rounds,
        }
        trace.stop_reasons["mode"] = "self_reflection"
        if not accumulated:
            failure = (FAILURE_NO_ARTICLES, "no searches retrieved records")
        return _finish(
            spec, trace, ledger, response,
            predicted_mesh=mesh_terms_of(history[-1]),
            grounded=response.evidence_grounded, failure=failure,
        )
    except PlanningFailure as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_PLANNING, str(exc)))
    except (NetworkError, RateLimited) as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_API, str(exc)))
    except (SchemaError, AnswerFormatError) as exc:
        return _finish(spec, trace, ledger, None, failure=(FAILURE_FORMAT, str(exc)))


MODES: dict[str, Callable] = {
    "reasoner": run_reasoner,
    "llm_only": run_llm_only,
    "one_shot_rag": run_one_shot_rag,
    "self_reflection": run_self_reflection,
}
