"""Evidence synthesis: citation-preserving summary, then the final answer.

Citation closure is enforced mechanically at both steps.  A summary
citing an article outside the pool gets one re-ask, after which the
offending markers are stripped; the final answer's citations are held
to the summary's, so end to end every cited PMID traces back to an
extracted, alignment-checked passage.  An empty pool degrades to a
citation-free answer from model knowledge, flagged as ungrounded.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Optional

from . import prompts
from .ledger import CostLedger
from .llm import ChatRequest, LlmGateway
from .planner import QuestionSpec
from .schemas import SchemaError
from .trace import SessionTrace

logger = logging.getLogger(__name__)

# [PMID: 123] or [PMID: 123, PMID: 456], whitespace-tolerant
_CITE_RE = re.compile(r"\[\s*PMID\s*:\s*\d+(?:\s*,\s*PMID\s*:\s*\d+)*\s*\]", re.IGNORECASE)
_ID_RE = re.compile(r"PMID\s*:\s*(\d+)", re.IGNORECASE)


class AnswerFormatError(Exception):
    """The answer would not conform to the declared label set."""


@dataclass(frozen=True)
class SummaryOfEvidence:
    text: str
    cited_pmids: frozenset
    empty: bool = False


@dataclass(frozen=True)
class FinalResponse:
    answer: str
    rationale: str
    cited_pmids: frozenset
    evidence_grounded: bool


def parse_citations(text: str) -> list:
    """All cited PMIDs in marker order, first occurrence kept."""
    found = []
    for marker in _CITE_RE.finditer(text):
        for pmid in _ID_RE.findall(marker.group(0)):
            if pmid not in found:
                found.append(pmid)
    return found


def strip_invalid_citations(text: str, valid: set) -> tuple[str, list]:
    """Remove citation ids outside ``valid``; returns (text, stripped ids)."""
    stripped = []

    def rebuild(match: re.Match) -> str:
        ids = _ID_RE.findall(match.group(0))
        keep = [i for i in ids if i in valid]
        stripped.extend(i for i in ids if i not in valid)
        if not keep:
            return ""
        return "[" + ", ".join(f"PMID: {i}" for i in keep) + "]"

    cleaned = _CITE_RE.sub(rebuild, text)
    cleaned = re.sub(r"[ \t]{2,}", " ", cleaned)
    cleaned = re.sub(r" +([,.;)])", r"\1", cleaned)
    return cleaned.strip(), stripped


def _sources_block(pool) -> str:
    return "\n".join(f"- {item.passage} [PMID: {item.pmid}]" for item in pool)


def _mechanical_summary(pool) -> str:
    return " ".join(f"{item.passage} [PMID: {item.pmid}]" for item in pool)


class Synthesizer:
    def __init__(self, llm: LlmGateway, temperature: float = 0.0,
                 max_output_tokens: Optional[int] = None):
        self.llm = llm
        self.temperature = temperature
        self.max_output_tokens = max_output_tokens

    def _complete(self, template_id, fields, ledger, stage, followup=None):
        blocks = [("user", prompts.render(template_id, **fields))]
        if followup:
            blocks.append(("user", followup))
        request = ChatRequest(
            tuple(blocks), prompts.schema_of(template_id), self.temperature,
            self.max_output_tokens,
        )
        return self.llm.complete(request, ledger, stage=stage)

    def summarize(self, pool, spec: QuestionSpec, ledger: Optional[CostLedger] = None,
                  trace: Optional[SessionTrace] = None) -> SummaryOfEvidence:
        """Distill the pool into one cited paragraph; closure enforced."""
        if not pool:
            if trace is not None:
                trace.flag("summary", "empty_pool", "no evidence to summarize")
            return SummaryOfEvidence("", frozenset(), empty=True)

        valid = {item.pmid for item in pool}
        fields = {"raw_sources": _sources_block(pool)}
        try:
            text = self._complete("summary", fields, ledger, "summary").parsed["verified_sources"]
            cited = parse_citations(text)
            invalid = [p for p in cited if p not in valid]
            if invalid:
                followup = (
                    f"Your paragraph cited PMIDs not present in the raw sources: {invalid}. "
                    f"Rewrite it citing only: {sorted(valid)}."
                )
                text = self._complete("summary", fields, ledger, "summary", followup).parsed[
                    "verified_sources"
                ]
                cited = parse_citations(text)
                invalid = [p for p in cited if p not in valid]
                if invalid:
                    text, stripped = strip_invalid_citations(text, valid)
                    if trace is not None:
                        trace.flag("summary", "hallucinated_citation", ", ".join(stripped))
        except SchemaError as exc:
            text = _mechanical_summary(pool)
            if trace is not None:
                trace.flag("summary", "schema_failure", f"fell back to concatenation: {exc}")

        soe = SummaryOfEvidence(text, frozenset(parse_citations(text)))
        if trace is not None:
            trace.synthesis["soe_text"] = soe.text
            trace.synthesis["soe_cited"] = sorted(soe.cited_pmids)
        return soe

    def _normalize_label(self, answer: str, label_set) -> Optional[str]:
        cleaned = answer.strip().strip(".!,;:").casefold()
        for label in label_set:
            if cleaned == label.casefold():
                return label
        return None

    def answer(self, spec: QuestionSpec, soe: SummaryOfEvidence,
               ledger: Optional[CostLedger] = None,
               trace: Optional[SessionTrace] = None) -> FinalResponse:
        """Task-conforming answer whose citations are a subset of the summary's."""
        fields = {
            "natural_language_question": spec.question,
            "task_instruction": spec.task_spec,
            "context": spec.context or "",
            "sources": soe.text,
        }
        followup = None
        answer_text = rationale = None
        for _ in range(2):
            parsed = self._complete("qa", fields, ledger, "answer", followup).parsed
            answer_text, rationale = parsed["answer"], parsed["rationale"]
            if spec.label_set is None:
                break
            normalized = self._normalize_label(answer_text, spec.label_set)
            if normalized is not None:
                answer_text = normalized
                break
            followup = (
                f"The answer {answer_text!r} is not an allowed label. "
                f"Answer with exactly one of: {', '.join(spec.label_set)}."
            )
        else:
            raise AnswerFormatError(
                f"answer {answer_text!r} not in label set {spec.label_set}"
            )

        cited = parse_citations(rationale)
        invalid = [p for p in cited if p not in soe.cited_pmids]
        if invalid:
            rationale, stripped = strip_invalid_citations(rationale, set(soe.cited_pmids))
            cited = parse_citations(rationale)
            if trace is not None:
                trace.flag("answer", "hallucinated_citation", ", ".join(stripped))

        response = FinalResponse(
            answer=answer_text,
            rationale=rationale,
            cited_pmids=frozenset(cited),
            evidence_grounded=bool(set(cited) & set(soe.cited_pmids)),
        )
        if trace is not None:
            trace.synthesis.update(
                {
                    "answer": response.answer,
                    "rationale": response.rationale,
                    "cited_pmids": sorted(response.cited_pmids),
                    "evidence_grounded": response.evidence_grounded,
                }
            )
        return response
