"""Per-session cost accounting and benchmark-level aggregation.

Every model call and every literature-search call lands in a session
ledger as an event, bucketed by pipeline stage, so that totals can be
recomputed from the event log during trace replay.  Aggregation turns a
run's per-question metrics into the benchmark report: cost means (and
ratios against a named baseline run), accuracy, evidence-grounded
response rate, MeSH precision/recall, and the retrieval-depth
histogram.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from statistics import mean
from typing import Optional

STAGES = frozenset(
    {
        "mesh_gen",
        "mesh_select",
        "query_gen",
        "critique",
        "mesh_update",
        "refine",
        "search",
        "filter",
        "extract",
        "coverage",
        "summary",
        "answer",
        "reflect",
        "judge",
    }
)

ESD_BUCKETS = ("0", "1-5", "6-10", "11-15", "16-20", "21+")


class LedgerError(Exception):
    pass


@dataclass
class StageCounts:
    input_tokens: int = 0
    output_tokens: int = 0
    llm_calls: int = 0
    search_calls: int = 0

    def as_dict(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "llm_calls": self.llm_calls,
            "search_calls": self.search_calls,
        }


class CostLedger:
    """Single-writer accumulator for one session's cost indicators."""

    def __init__(self):
        self.input_tokens = 0
        self.output_tokens = 0
        self.llm_calls = 0
        self.search_calls = 0
        self.stages: dict[str, StageCounts] = {}
        self.events: list[dict] = []
        self.estimated_calls: set[int] = set()

    def _stage(self, stage: str) -> StageCounts:
        if stage not in STAGES:
            raise LedgerError(f"unregistered stage {stage!r}")
        return self.stages.setdefault(stage, StageCounts())

    def record_llm(self, stage: str, input_tokens: int, output_tokens: int, estimated: bool = False) -> int:
        """Record one model call; returns the call id within this session."""
        bucket = self._stage(stage)
        call_id = self.llm_calls
        self.llm_calls += 1
        self.input_tokens += input_tokens
        self.output_tokens += output_tokens
        bucket.llm_calls += 1
        bucket.input_tokens += input_tokens
        bucket.output_tokens += output_tokens
        if estimated:
            self.estimated_calls.add(call_id)
        self.events.append(
            {
                "kind": "llm",
                "stage": stage,
                "input_tokens": input_tokens,
                "output_tokens": output_tokens,
                "estimated": estimated,
            }
        )
        return call_id

    def record_search(self, stage: str = "search") -> None:
        bucket = self._stage(stage)
        self.search_calls += 1
        bucket.search_calls += 1
        self.events.append({"kind": "search", "stage": stage})

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens

    def totals(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "llm_calls": self.llm_calls,
            "search_calls": self.search_calls,
        }

    def check_conservation(self) -> bool:
        """Stage-breakdown sums must equal the stored totals exactly."""
        summed = StageCounts()
        for counts in self.stages.values():
            summed.input_tokens += counts.input_tokens
            summed.output_tokens += counts.output_tokens
            summed.llm_calls += counts.llm_calls
            summed.search_calls += counts.search_calls
        return summed.as_dict() == self.totals()

    def as_dict(self) -> dict:
        return {
            "totals": self.totals(),
            "stages": {name: c.as_dict() for name, c in sorted(self.stages.items())},
            "estimated_calls": sorted(self.estimated_calls),
            "events": self.events,
        }

    @staticmethod
    def recompute_totals(events: list[dict]) -> dict:
        """Rebuild the four indicators from an event log (trace replay)."""
        totals = {"input_tokens": 0, "output_tokens": 0, "llm_calls": 0, "search_calls": 0}
        for ev in events:
            if ev.get("kind") == "llm":
                totals["llm_calls"] += 1
                totals["input_tokens"] += int(ev.get("input_tokens", 0))
                totals["output_tokens"] += int(ev.get("output_tokens", 0))
            elif ev.get("kind") == "search":
                totals["search_calls"] += 1
        return totals


# ----------------------------------------------------------------------
# Benchmark aggregation
# ----------------------------------------------------------------------


@dataclass
class QuestionMetrics:
    """Everything aggregation needs from one answered question."""

    question_id: str
    ledger: CostLedger
    predicted_label: Optional[str] = None
    gold_label: Optional[str] = None
    predicted_mesh: set = field(default_factory=set)
    gold_mesh: Optional[set] = None
    esd: Optional[int] = None
    evidence_grounded: Optional[bool] = None
    failure: Optional[str] = None


def esd_bucket(esd: int) -> str:
    if esd <= 0:
        return "0"
    if esd <= 5:
        return "1-5"
    if esd <= 10:
        return "6-10"
    if esd <= 15:
        return "11-15"
    if esd <= 20:
        return "16-20"
    return "21+"


@dataclass
class BenchmarkAggregate:
    run_id: str
    n_questions: int
    cost_means: dict
    esd_histogram: dict
    accuracy: Optional[float]
    accuracy_denominator: int
    egr: Optional[float]
    egr_denominator: int
    mesh_precision: Optional[float]
    mesh_recall: Optional[float]
    mesh_denominator: int
    division_flags: list
    failures: dict
    baseline_run_id: Optional[str] = None
    cost_ratios: Optional[dict] = None

    def as_dict(self) -> dict:
        out = {
            "run_id": self.run_id,
            "n_questions": self.n_questions,
            "cost_means": self.cost_means,
            "esd_histogram": self.esd_histogram,
            "accuracy": self.accuracy,
            "accuracy_denominator": self.accuracy_denominator,
            "egr": self.egr,
            "egr_denominator": self.egr_denominator,
            "mesh_precision": self.mesh_precision,
            "mesh_recall": self.mesh_recall,
            "mesh_denominator": self.mesh_denominator,
            "division_flags": self.division_flags,
            "failures": self.failures,
        }
        if self.baseline_run_id is not None:
            out["baseline_run_id"] = self.baseline_run_id
            out["cost_ratios"] = self.cost_ratios
        return out

    def render_table(self) -> str:
        lines = [f"run: {self.run_id}  (n={self.n_questions})"]
        lines.append(
            "  cost/question: "
            + "  ".join(f"{k}={v:.2f}" for k, v in self.cost_means.items())
        )
        if self.cost_ratios is not None:
            lines.append(
                f"  vs baseline {self.baseline_run_id}: "
                + "  ".join(
                    f"{k}=x{v:.2f}" if v is not None else f"{k}=n/a"
                    for k, v in self.cost_ratios.items()
                )
            )
        if self.accuracy is not None:
            lines.append(f"  accuracy: {self.accuracy:.2%} over {self.accuracy_denominator} labeled")
        if self.egr is not None:
            lines.append(f"  evidence-grounded rate: {self.egr:.2%} over {self.egr_denominator}")
        if self.mesh_precision is not None:
            lines.append(
                f"  mesh precision/recall: {self.mesh_precision:.4f} / {self.mesh_recall:.4f}"
                f" over {self.mesh_denominator} annotated"
            )
        hist = "  ".join(f"{b}:{self.esd_histogram.get(b, 0)}" for b in ESD_BUCKETS)
        lines.append(f"  articles-before-stop histogram: {hist}")
        if self.failures:
            lines.append("  failures: " + "  ".join(f"{k}={v}" for k, v in sorted(self.failures.items())))
        return "\n".join(lines)


def mesh_scores(predicted: set, gold: set) -> tuple[float, float, bool]:
    """Case-folded set precision/recall; empty sides score 0 with a flag."""
    pred = {t.casefold() for t in predicted}
    gold_f = {t.casefold() for t in gold}
    if not pred or not gold_f:
        return 0.0, 0.0, True
    hit = len(pred & gold_f)
    return hit / len(pred), hit / len(gold_f), False


def aggregate(
    run: list[QuestionMetrics],
    run_id: str = "run",
    baseline: Optional[BenchmarkAggregate] = None,
) -> BenchmarkAggregate:
    """Fold per-question metrics into the benchmark report.

    Precision/recall are macro-averaged over questions carrying gold
    annotations; accuracy over questions with gold labels; ratios are
    emitted only when a baseline aggregate is supplied.
    """
    if not run:
        raise LedgerError("cannot aggregate an empty run")

    cost_means = {
        "input_tokens": mean(q.ledger.input_tokens for q in run),
        "output_tokens": mean(q.ledger.output_tokens for q in run),
        "llm_calls": mean(q.ledger.llm_calls for q in run),
        "search_calls": mean(q.ledger.search_calls for q in run),
    }

    histogram = {b: 0 for b in ESD_BUCKETS}
    for q in run:
        if q.esd is not None:
            histogram[esd_bucket(q.esd)] += 1

    labeled = [q for q in run if q.gold_label is not None and q.predicted_label is not None]
    correct = sum(1 for q in labeled if q.predicted_label.casefold() == q.gold_label.casefold())
    accuracy = correct / len(labeled) if labeled else None

    grounded_known = [q for q in run if q.evidence_grounded is not None]
    egr = (
        sum(1 for q in grounded_known if q.evidence_grounded) / len(grounded_known)
        if grounded_known
        else None
    )

    annotated = [q for q in run if q.gold_mesh is not None]
    flags = []
    precisions, recalls = [], []
    for q in annotated:
        p, r, flagged = mesh_scores(q.predicted_mesh, q.gold_mesh)
        precisions.append(p)
        recalls.append(r)
        if flagged:
            flags.append(q.question_id)
    mesh_p = mean(precisions) if precisions else None
    mesh_r = mean(recalls) if recalls else None

    failures: dict[str, int] = {}
    for q in run:
        if q.failure:
            failures[q.failure] = failures.get(q.failure, 0) + 1

    ratios = None
    if baseline is not None:
        ratios = {}
        for key, value in cost_means.items():
            base = baseline.cost_means.get(key)
            ratios[key] = (value / base) if base else None

    return BenchmarkAggregate(
        run_id=run_id,
        n_questions=len(run),
        cost_means=cost_means,
        esd_histogram=histogram,
        accuracy=accuracy,
        accuracy_denominator=len(labeled),
        egr=egr,
        egr_denominator=len(grounded_known),
        mesh_precision=mesh_p,
        mesh_recall=mesh_r,
        mesh_denominator=len(annotated),
        division_flags=flags,
        failures=failures,
        baseline_run_id=baseline.run_id if baseline is not None else None,
        cost_ratios=ratios,
    )


def export_jsonl(path, run: list[QuestionMetrics], agg: BenchmarkAggregate) -> None:
    """One record per question plus a trailing summary record."""
    with open(path, "w", encoding="utf-8") as fh:
        for q in run:
            fh.write(
                json.dumps(
                    {
                        "kind": "question",
                        "id": q.question_id,
                        "ledger": q.ledger.totals(),
                        "predicted_label": q.predicted_label,
                        "gold_label": q.gold_label,
                        "predicted_mesh": sorted(q.predicted_mesh),
                        "gold_mesh": sorted(q.gold_mesh) if q.gold_mesh is not None else None,
                        "esd": q.esd,
                        "evidence_grounded": q.evidence_grounded,
                        "failure": q.failure,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        fh.write(json.dumps({"kind": "summary", **agg.as_dict()}, sort_keys=True) + "\n")
