"""Batched evidence retrieval with early stopping.

The top-ranked records are coarse-screened by title/abstract in one
call, survivors are processed in rank order in batches, and after every
batch a sufficiency check decides whether to keep reading.  The loop
also stops when two consecutive batches contribute nothing to the pool
(diminishing yield) or when the cumulative token spend of the batch
loop crosses the configured budget at a batch boundary.

Degraded paths are conservative: a failed screening keeps the record, a
failed extraction yields an unaligned item, a failed sufficiency check
keeps reading.  All three are flagged in the trace.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from . import prompts
from .ledger import CostLedger
from .llm import ChatRequest, LlmGateway
from .planner import QuestionSpec
from .pubmed import SearchResult
from .schemas import SchemaError
from .trace import SessionTrace

logger = logging.getLogger(__name__)

STOP_SUFFICIENT = "sufficient"
STOP_EXHAUSTED = "exhausted"
STOP_TOKEN_BUDGET = "token_budget"


@dataclass(frozen=True)
class FilterVerdict:
    pmid: str
    keep: bool
    rationale: str = ""
    defaulted: bool = False


@dataclass(frozen=True)
class EvidenceItem:
    pmid: str
    passage: str
    aligned: bool
    rationale: str = ""
    batch_index: int = 1
    coerced: bool = False

    def __post_init__(self):
        if self.batch_index < 1:
            raise ValueError("batch_index is 1-based")


@dataclass
class RetrievalOutcome:
    kept: tuple
    pool: tuple
    batches_processed: int
    esd: int
    stop_reason: str
    diminishing: bool = False

    def __post_init__(self):
        if not all(item.aligned and item.passage for item in self.pool):
            raise ValueError("pool may only hold aligned items with passages")


def _records_block(records) -> str:
    parts = []
    for r in records:
        entry = f"PMID: {r.pmid}\nTitle: {r.title}"
        if r.abstract:
            entry += f"\nAbstract: {r.abstract}"
        parts.append(entry)
    return "\n\n".join(parts)


def _pool_block(pool) -> str:
    return "\n".join(f"- {item.passage} [PMID: {item.pmid}]" for item in pool)


class ReflectiveRetriever:
    def __init__(self, llm: LlmGateway, m: int = 5, m_max: int = 20,
                 token_budget: Optional[int] = None, diminishing_streak: int = 2,
                 temperature: float = 0.0):
        if m < 1:
            raise ValueError("batch size m must be >= 1")
        if m_max < 1:
            raise ValueError("m_max must be >= 1")
        self.llm = llm
        self.m = m
        self.m_max = m_max
        self.token_budget = token_budget
        self.diminishing_streak = diminishing_streak
        self.temperature = temperature

    def _complete(self, template_id, fields, ledger, stage, usage=None):
        prompt = prompts.render(template_id, **fields)
        request = ChatRequest((("user", prompt),), prompts.schema_of(template_id), self.temperature)
        resp = self.llm.complete(request, ledger, stage=stage)
        if usage is not None:
            usage.append(resp.input_tokens + resp.output_tokens)
        return resp

    # -- coarse screening -------------------------------------------------

    def coarse_filter(self, records, spec: QuestionSpec,
                      ledger: Optional[CostLedger] = None,
                      trace: Optional[SessionTrace] = None) -> list:
        """One keep/drop verdict per record, capped at the screening budget.

        A record the model skipped, and every record when the whole call
        fails, defaults to keep=True.
        """
        screened = list(records)[: self.m_max]
        if not screened:
            return []
        try:
            resp = self._complete(
                "filter",
                {
                    "natural_language_question": spec.question,
                    "records": _records_block(screened),
                },
                ledger,
                "filter",
            )
            by_pmid = {v["pmid"]: v for v in resp.parsed["verdicts"]}
        except SchemaError as exc:
            if trace is not None:
                trace.flag("filter", "schema_failure", f"kept all screened records: {exc}")
            by_pmid = {}
        verdicts = []
        for record in screened:
            got = by_pmid.get(record.pmid)
            if got is None:
                verdicts.append(FilterVerdict(record.pmid, True, "screening failed", defaulted=True))
                if trace is not None and by_pmid:
                    trace.flag("filter", "missing_verdict", record.pmid)
            else:
                verdicts.append(FilterVerdict(record.pmid, got["keep"], got["rationale"]))
        return verdicts

    # -- batch extraction --------------------------------------------------

    def extract_batch(self, batch, batch_index: int, spec: QuestionSpec,
                      ledger: Optional[CostLedger] = None,
                      trace: Optional[SessionTrace] = None, usage=None) -> list:
        """One evidence item per record; alignment gates entry to the pool."""
        if not 1 <= len(batch) <= self.m:
            raise ValueError(f"batch must hold 1..{self.m} records")
        try:
            resp = self._complete(
                "extract",
                {
                    "natural_language_question": spec.question,
                    "records": _records_block(batch),
                },
                ledger,
                "extract",
                usage,
            )
            by_pmid = {i["pmid"]: i for i in resp.parsed["items"]}
        except SchemaError as exc:
            if trace is not None:
                trace.flag("extract", "schema_failure", f"batch {batch_index}: {exc}")
            by_pmid = {}
        items = []
        for record in batch:
            got = by_pmid.get(record.pmid)
            if got is None:
                items.append(
                    EvidenceItem(record.pmid, "", False, "extraction failed", batch_index)
                )
                continue
            aligned = got["aligned"]
            coerced = False
            if aligned and not got["passage"].strip():
                # aligned with no passage violates pool purity; demote it
                aligned = False
                coerced = True
                if trace is not None:
                    trace.flag("extract", "empty_passage_coerced", record.pmid)
            items.append(
                EvidenceItem(
                    record.pmid, got["passage"], aligned, got["rationale"], batch_index, coerced
                )
            )
        return items

    # -- sufficiency check ---------------------------------------------------

    def coverage_check(self, pool, spec: QuestionSpec,
                       ledger: Optional[CostLedger] = None,
                       trace: Optional[SessionTrace] = None, usage=None) -> dict:
        """Is the pooled evidence enough to answer? Failure means keep reading."""
        try:
            resp = self._complete(
                "coverage_check",
                {
                    "natural_language_question": spec.question,
                    "search_results_str": _pool_block(pool),
                    "context": spec.context or "",
                },
                ledger,
                "coverage",
                usage,
            )
            return dict(resp.parsed, defaulted=False)
        except SchemaError as exc:
            if trace is not None:
                trace.flag("coverage", "schema_failure", str(exc))
            return {
                "is_sufficient": False,
                "rationale": "sufficiency check failed; continuing",
                "needed_pmids": [],
                "defaulted": True,
            }

    # -- main loop -------------------------------------------------------------

    def run_retrieval(self, result: Optional[SearchResult], spec: QuestionSpec,
                      ledger: Optional[CostLedger] = None,
                      trace: Optional[SessionTrace] = None) -> RetrievalOutcome:
        """Screen, batch, extract, and stop early; never raises on model failures.

        The token budget covers the batch loop (extraction plus
        sufficiency checks) and is evaluated at batch boundaries, after
        sufficiency: a batch that satisfies coverage wins over a budget
        crossing in the same batch.
        """
        records = list(result.records) if result is not None else []
        verdicts = self.coarse_filter(records, spec, ledger, trace)
        kept = [r for r, v in zip(records[: self.m_max], verdicts) if v.keep]
        batches = [kept[i : i + self.m] for i in range(0, len(kept), self.m)]

        pool: list = []
        usage: list = []
        batch_traces = []
        batches_processed = 0
        stop_reason = STOP_EXHAUSTED
        diminishing = False
        zero_streak = 0

        for b, batch in enumerate(batches, 1):
            items = self.extract_batch(batch, b, spec, ledger, trace, usage)
            new_aligned = [i for i in items if i.aligned]
            pool.extend(new_aligned)
            zero_streak = 0 if new_aligned else zero_streak + 1
            check = self.coverage_check(pool, spec, ledger, trace, usage)
            batches_processed = b
            tokens_used = sum(usage)
            batch_traces.append(
                {
                    "index": b,
                    "pmids": [r.pmid for r in batch],
                    "items": [
                        {
                            "pmid": i.pmid,
                            "passage": i.passage,
                            "aligned": i.aligned,
                            "rationale": i.rationale,
                            **({"coerced": True} if i.coerced else {}),
                        }
                        for i in items
                    ],
                    "new_aligned": len(new_aligned),
                    "check": check,
                    "tokens_used_cum": tokens_used,
                }
            )
            if check["is_sufficient"]:
                stop_reason = STOP_SUFFICIENT
                break
            if zero_streak >= self.diminishing_streak:
                stop_reason = STOP_EXHAUSTED
                diminishing = True
                break
            if self.token_budget is not None and tokens_used >= self.token_budget:
                stop_reason = STOP_TOKEN_BUDGET
                break

        esd = sum(len(b) for b in batches[:batches_processed])
        outcome = RetrievalOutcome(
            kept=tuple(kept),
            pool=tuple(pool),
            batches_processed=batches_processed,
            esd=esd,
            stop_reason=stop_reason,
            diminishing=diminishing,
        )
        if trace is not None:
            trace.retrieval = {
                "query": result.query if result is not None else None,
                "total_hits": result.total_hits if result is not None else 0,
                "screened": len(records[: self.m_max]),
                "verdicts": [
                    {
                        "pmid": v.pmid,
                        "keep": v.keep,
                        "rationale": v.rationale,
                        **({"defaulted": True} if v.defaulted else {}),
                    }
                    for v in verdicts
                ],
                "kept_pmids": [r.pmid for r in kept],
                "batches": batch_traces,
                "batches_processed": batches_processed,
                "esd": esd,
                "stop_reason": stop_reason,
                "diminishing": diminishing,
                "loop_tokens": sum(usage),
            }
            trace.stop_reasons["retrieval"] = stop_reason
        return outcome
