"""Session audit trail: everything one question's run did, replayable offline.

Each pipeline stage writes its section as plain JSON-serializable data.
``canonical_json`` excludes volatile fields (wall-clock timestamps) so
two scripted runs of the same session compare byte-identical; the full
form keeps them for operators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .ledger import CostLedger


class TraceFormatError(Exception):
    pass


_SECTIONS = ("planner", "refinement", "retrieval", "synthesis", "ledger", "stop_reasons")


@dataclass
class SessionTrace:
    question_id: str = ""
    question: str = ""
    task_spec: str = ""
    context: Optional[str] = None
    config: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)
    refinement: dict = field(default_factory=dict)
    retrieval: dict = field(default_factory=dict)
    synthesis: dict = field(default_factory=dict)
    ledger: dict = field(default_factory=dict)
    stop_reasons: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    failure: Optional[dict] = None
    created_at: Optional[float] = None

    def flag(self, stage: str, kind: str, detail: str = "") -> None:
        self.flags.append({"stage": stage, "kind": kind, "detail": detail})

    def record_ledger(self, ledger: CostLedger) -> None:
        self.ledger = ledger.as_dict()

    def as_dict(self, volatile: bool = True) -> dict:
        out = {
            "question_id": self.question_id,
            "question": self.question,
            "task_spec": self.task_spec,
            "context": self.context,
            "config": self.config,
            "planner": self.planner,
            "refinement": self.refinement,
            "retrieval": self.retrieval,
            "synthesis": self.synthesis,
            "ledger": self.ledger,
            "stop_reasons": self.stop_reasons,
            "flags": self.flags,
            "failure": self.failure,
        }
        if volatile:
            out["created_at"] = self.created_at
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.as_dict(volatile=False), sort_keys=True, ensure_ascii=False)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, ensure_ascii=False, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SessionTrace":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise TraceFormatError("trace must be a JSON object")
        missing = [k for k in ("question_id", "question", "ledger") if k not in data]
        if missing:
            raise TraceFormatError(f"trace missing required fields: {', '.join(missing)}")
        trace = cls(
            question_id=data["question_id"],
            question=data["question"],
            task_spec=data.get("task_spec", ""),
            context=data.get("context"),
            config=data.get("config", {}),
            planner=data.get("planner", {}),
            refinement=data.get("refinement", {}),
            retrieval=data.get("retrieval", {}),
            synthesis=data.get("synthesis", {}),
            ledger=data.get("ledger", {}),
            stop_reasons=data.get("stop_reasons", {}),
            flags=data.get("flags", []),
            failure=data.get("failure"),
            created_at=data.get("created_at"),
        )
        return trace

    def render_report(self) -> str:
        """Pure re-rendering of the session for the replay command."""
        lines = [f"question {self.question_id}: {self.question}"]
        if self.planner:
            selected = ", ".join(self.planner.get("selected", []))
            lines.append(f"  plan: selected [{selected}]")
            lines.append(f"  initial query: {self.planner.get('initial_query', '')}")
        if self.refinement:
            for it in self.refinement.get("iterations", []):
                agg = it.get("aggregates", {})
                lines.append(
                    f"  refine t={it.get('t')}: searched {it.get('searched_query', '')!r} "
                    f"({it.get('result_count', 0)} hits) "
                    f"feedback c={agg.get('coverage')} a={agg.get('alignment')} r={agg.get('redundancy')}"
                    + (" [broadened]" if it.get("broadenings") else "")
                )
            lines.append(
                f"  refinement stop: {self.refinement.get('stop_reason', '')} "
                f"-> {self.refinement.get('final_query', '')}"
            )
        if self.retrieval:
            lines.append(
                f"  retrieval: kept {len(self.retrieval.get('kept_pmids', []))} of "
                f"{self.retrieval.get('screened', 0)} screened; "
                f"{self.retrieval.get('batches_processed', 0)} batches, "
                f"{self.retrieval.get('esd', 0)} articles before stop "
                f"({self.retrieval.get('stop_reason', '')})"
            )
        if self.synthesis:
            cited = ", ".join(self.synthesis.get("cited_pmids", []))
            lines.append(f"  answer: {self.synthesis.get('answer', '')!r} citing [{cited}]")
            lines.append(f"  grounded: {self.synthesis.get('evidence_grounded')}")
        totals = self.ledger.get("totals", {})
        recomputed = CostLedger.recompute_totals(self.ledger.get("events", []))
        lines.append(
            "  ledger: "
            + "  ".join(f"{k}={v}" for k, v in totals.items())
            + ("  (events consistent)" if recomputed == totals else "  (EVENT MISMATCH)")
        )
        for fl in self.flags:
            lines.append(f"  flag[{fl.get('stage')}]: {fl.get('kind')} {fl.get('detail', '')}".rstrip())
        if self.failure:
            lines.append(f"  FAILURE: {self.failure.get('kind')}: {self.failure.get('detail', '')}")
        return "\n".join(lines)
