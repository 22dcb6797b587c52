"""Benchmark harness: datasets, mode runs, artifacts, pairwise judging.

Datasets are line-delimited JSON in two flavors: ``pubmedqa-style``
(yes/no/maybe label set, optional context, year window, and gold MeSH
annotations) and ``mcq-style`` (lettered options defining the label
set).  A run writes one trace per question plus per-question outcome
records and the aggregate report.

Judging is pairwise with randomized presentation order: position is
swapped by a seeded coin flip, recorded, and undone before aggregation,
and a pair is judged only when both runs predicted the gold label, so
the comparison isolates explanation quality from correctness.
"""

from __future__ import annotations

import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean
from typing import Optional

from . import prompts
from .config import ConfigError, RunConfig
from .ledger import BenchmarkAggregate, CostLedger, aggregate, export_jsonl
from .llm import ChatRequest, LlmGateway, OpenAIChatBackend, ScriptedBackend
from .pipeline import MODES, SessionResult
from .planner import QuestionSpec
from .pubmed import EntrezBackend, FixtureBackend, PubMedGateway, TokenBucket
from .query import DateRange
from .schemas import JUDGE_DIMENSIONS, SchemaError

logger = logging.getLogger(__name__)

PUBMEDQA_LABELS = ("yes", "no", "maybe")
PUBMEDQA_TASK = "Answer yes, no, or maybe, with a brief justification."
MCQ_TASK = "Answer with the letter of the correct option."

FORMATS = ("pubmedqa-style", "mcq-style")


class FormatError(Exception):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass
class DatasetRecord:
    id: str
    question: str
    task_spec: str
    label_set: tuple
    context: Optional[str] = None
    label: Optional[str] = None
    year_window: Optional[DateRange] = None
    gold_mesh: Optional[set] = None
    options: Optional[dict] = None

    def to_spec(self) -> QuestionSpec:
        question = self.question
        if self.options:
            rendered = "\n".join(f"{k}. {v}" for k, v in sorted(self.options.items()))
            question = f"{question}\nOptions:\n{rendered}"
        return QuestionSpec(
            id=self.id,
            question=question,
            task_spec=self.task_spec,
            context=self.context,
            date_window=self.year_window,
            label_set=self.label_set,
            gold_label=self.label,
            gold_mesh=set(self.gold_mesh) if self.gold_mesh is not None else None,
        )


def _parse_window(raw, line: int) -> DateRange:
    if isinstance(raw, str):
        lo, sep, hi = raw.partition(":")
        if not sep:
            raise FormatError(line, f"year_window {raw!r} must look like YYYY:YYYY")
        start, end = lo, hi
    elif isinstance(raw, (list, tuple)) and len(raw) == 2:
        start, end = str(raw[0]), str(raw[1])
    else:
        raise FormatError(line, f"year_window must be a range string or pair, got {raw!r}")
    try:
        return DateRange(start.strip(), end.strip())
    except ValueError as exc:
        raise FormatError(line, str(exc)) from exc


def load_dataset(path, format_id: str) -> list:
    """Validate every record up front; one bad line fails the load."""
    if format_id not in FORMATS:
        raise ValueError(f"unknown dataset format {format_id!r}")
    records = []
    seen_ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(line_no, f"not a JSON record: {exc}") from exc
            if not isinstance(obj, dict):
                raise FormatError(line_no, "record must be a JSON object")
            if not str(obj.get("question", "")).strip():
                raise FormatError(line_no, "question is required")
            record_id = str(obj.get("id", "")).strip()
            if not record_id:
                raise FormatError(line_no, "id is required")
            if record_id in seen_ids:
                raise FormatError(line_no, f"duplicate id {record_id!r}")
            seen_ids.add(record_id)

            if format_id == "pubmedqa-style":
                label_set = PUBMEDQA_LABELS
                task = obj.get("task_spec") or PUBMEDQA_TASK
                options = None
            else:
                options = obj.get("options")
                if not isinstance(options, dict) or len(options) < 2:
                    raise FormatError(line_no, "mcq records need an options object with >= 2 entries")
                label_set = tuple(sorted(options))
                task = obj.get("task_spec") or MCQ_TASK

            label = obj.get("label")
            if label is not None:
                label = str(label)
                if label.casefold() not in {l.casefold() for l in label_set}:
                    raise FormatError(line_no, f"label {label!r} outside label set {label_set}")

            window = obj.get("year_window")
            gold_mesh = obj.get("gold_mesh")
            if gold_mesh is not None and not isinstance(gold_mesh, list):
                raise FormatError(line_no, "gold_mesh must be a list of terms")

            records.append(
                DatasetRecord(
                    id=record_id,
                    question=str(obj["question"]),
                    task_spec=str(task),
                    label_set=label_set,
                    context=obj.get("context"),
                    label=label,
                    year_window=_parse_window(window, line_no) if window is not None else None,
                    gold_mesh=set(map(str, gold_mesh)) if gold_mesh is not None else None,
                    options=options,
                )
            )
    return records


# ----------------------------------------------------------------------
# Gateways
# ----------------------------------------------------------------------


def build_llm_gateway(config: RunConfig) -> LlmGateway:
    if config.llm_backend == "mock":
        if not config.script_path:
            raise ConfigError("mock llm backend needs script_path")
        backend = ScriptedBackend.from_jsonl(config.script_path)
    else:
        if not config.base_url or not config.model:
            raise ConfigError("live llm backend needs base_url and model")
        backend = OpenAIChatBackend(config.base_url, config.model, config.api_key)
    return LlmGateway(backend, transport_retries=config.retry_attempts)


def build_search_gateway(config: RunConfig) -> PubMedGateway:
    if config.search_backend == "fixture":
        if not config.fixture_path:
            raise ConfigError("fixture search backend needs fixture_path")
        backend = FixtureBackend.from_jsonl(config.fixture_path)
    else:
        backend = EntrezBackend(
            api_key=config.ncbi_api_key,
            email=config.ncbi_email,
            rate_limiter=TokenBucket(config.rate_limit_rps),
        )
    return PubMedGateway(backend, retry_attempts=config.retry_attempts)


# ----------------------------------------------------------------------
# Mode runs
# ----------------------------------------------------------------------


@dataclass
class RunArtifact:
    run_id: str
    mode: str
    results: list  # SessionResult, sorted by question id
    aggregate: BenchmarkAggregate
    out_dir: Optional[Path] = None


def run_mode(records, mode: str, config: RunConfig,
             llm: Optional[LlmGateway] = None,
             pubmed: Optional[PubMedGateway] = None,
             out_dir=None, run_id: Optional[str] = None,
             baseline: Optional[BenchmarkAggregate] = None) -> RunArtifact:
    """Run every dataset record through one mode and write the artifact.

    Questions dispatch concurrently up to config.parallelism, except
    with the scripted backend, whose turn order only makes sense
    sequentially.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
    llm = llm or build_llm_gateway(config)
    pubmed = pubmed or build_search_gateway(config)
    run_id = run_id or mode
    runner = MODES[mode]

    specs = [r.to_spec() for r in records]
    parallelism = config.parallelism
    if parallelism > 1 and isinstance(llm.backend, ScriptedBackend):
        logger.info("scripted backend: forcing sequential execution")
        parallelism = 1

    if parallelism == 1:
        results = [runner(spec, config, llm, pubmed) for spec in specs]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(lambda s: runner(s, config, llm, pubmed), specs))
    results.sort(key=lambda r: r.spec.id)

    agg = aggregate([r.metrics for r in results], run_id=run_id, baseline=baseline)
    artifact = RunArtifact(run_id, mode, results, agg)
    if out_dir is not None:
        artifact.out_dir = Path(out_dir)
        _write_artifact(artifact, config)
    return artifact


def _write_artifact(artifact: RunArtifact, config: RunConfig) -> None:
    out = artifact.out_dir
    traces_dir = out / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    for result in artifact.results:
        (traces_dir / f"{result.spec.id}.json").write_text(
            result.trace.to_json(), encoding="utf-8"
        )
    with open(out / "results.jsonl", "w", encoding="utf-8") as fh:
        for result in artifact.results:
            fh.write(json.dumps(result.output_record(), sort_keys=True) + "\n")
    export_jsonl(out / "aggregate.jsonl", [r.metrics for r in artifact.results], artifact.aggregate)
    (out / "aggregate.txt").write_text(artifact.aggregate.render_table() + "\n", encoding="utf-8")
    (out / "run.json").write_text(
        json.dumps(
            {"run_id": artifact.run_id, "mode": artifact.mode, "config": config.echo()},
            sort_keys=True,
            indent=2,
        ),
        encoding="utf-8",
    )


def load_run_results(run_dir) -> dict:
    """id -> output record from a run directory's results.jsonl."""
    out = {}
    with open(Path(run_dir) / "results.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                record = json.loads(line)
                out[record["id"]] = record
    return out


def load_run_aggregate(run_dir) -> BenchmarkAggregate:
    with open(Path(run_dir) / "aggregate.jsonl", "r", encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    summary = [r for r in rows if r.get("kind") == "summary"]
    if not summary:
        raise ValueError(f"{run_dir}: aggregate.jsonl holds no summary row")
    data = summary[0]
    return BenchmarkAggregate(
        run_id=data["run_id"],
        n_questions=data["n_questions"],
        cost_means=data["cost_means"],
        esd_histogram=data["esd_histogram"],
        accuracy=data.get("accuracy"),
        accuracy_denominator=data.get("accuracy_denominator", 0),
        egr=data.get("egr"),
        egr_denominator=data.get("egr_denominator", 0),
        mesh_precision=data.get("mesh_precision"),
        mesh_recall=data.get("mesh_recall"),
        mesh_denominator=data.get("mesh_denominator", 0),
        division_flags=data.get("division_flags", []),
        failures=data.get("failures", {}),
        baseline_run_id=data.get("baseline_run_id"),
        cost_ratios=data.get("cost_ratios"),
    )


# ----------------------------------------------------------------------
# Pairwise judging
# ----------------------------------------------------------------------


@dataclass
class JudgeVerdict:
    question_id: str
    scores_a: dict  # dimension -> {"score": int, "justification": str}
    scores_b: dict
    verdict: str  # "A" | "B" | "tie", in the caller's original labeling
    swapped: bool


@dataclass
class JudgeReport:
    dimensions: dict
    overall: dict
    judged: int
    excluded: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "dimensions": self.dimensions,
            "overall": self.overall,
            "judged": self.judged,
            "excluded": self.excluded,
            "skipped": self.skipped,
        }


def build_judge_gateway(config: RunConfig, answer_model: Optional[str] = None) -> LlmGateway:
    """Judge backend; refuses to reuse the answering model unless overridden."""
    answer_model = answer_model if answer_model is not None else config.model
    if config.llm_backend == "live":
        if not config.judge_model:
            raise ConfigError("judging needs judge_model")
        if config.judge_model == answer_model and not config.allow_same_judge_model:
            raise ConfigError(
                "judge_model equals the answering model; set allow_same_judge_model to override"
            )
        return LlmGateway(OpenAIChatBackend(config.base_url, config.judge_model, config.api_key))
    return build_llm_gateway(config)


def judge_pair(question: str, answer_a: str, answer_b: str, judge: LlmGateway,
               rng: random.Random, question_id: str = "",
               ledger: Optional[CostLedger] = None) -> JudgeVerdict:
    """One pairwise comparison with recorded, undone position randomization."""
    if not answer_a.strip() or not answer_b.strip():
        raise ValueError("both answers must be nonempty")
    swapped = rng.random() < 0.5
    first, second = (answer_b, answer_a) if swapped else (answer_a, answer_b)
    prompt = prompts.render(
        "judge",
        natural_language_question=question,
        answer_a=first,
        answer_b=second,
    )
    request = ChatRequest((("user", prompt),), "judge")
    parsed = judge.complete(request, ledger, stage="judge").parsed
    scores_first, scores_second = parsed["answer_a"], parsed["answer_b"]
    verdict = parsed["verdict"]
    if swapped:
        scores_first, scores_second = scores_second, scores_first
        verdict = {"A": "B", "B": "A"}.get(verdict, verdict)
    return JudgeVerdict(question_id, scores_first, scores_second, verdict, swapped)


def aggregate_judgments(verdicts) -> JudgeReport:
    """Per-dimension win/tie/loss from scores plus overall verdict tallies."""
    dims = {}
    n = len(verdicts)
    for dim in JUDGE_DIMENSIONS:
        win = sum(1 for v in verdicts if v.scores_a[dim]["score"] > v.scores_b[dim]["score"])
        loss = sum(1 for v in verdicts if v.scores_a[dim]["score"] < v.scores_b[dim]["score"])
        tie = n - win - loss
        dims[dim] = {
            "win": win,
            "tie": tie,
            "loss": loss,
            "win_pct": 100.0 * win / n if n else 0.0,
            "tie_pct": 100.0 * tie / n if n else 0.0,
            "loss_pct": 100.0 * loss / n if n else 0.0,
            "mean_a": mean(v.scores_a[dim]["score"] for v in verdicts) if n else None,
            "mean_b": mean(v.scores_b[dim]["score"] for v in verdicts) if n else None,
        }
    overall = {
        "A": sum(1 for v in verdicts if v.verdict == "A"),
        "B": sum(1 for v in verdicts if v.verdict == "B"),
        "tie": sum(1 for v in verdicts if v.verdict == "tie"),
    }
    return JudgeReport(dimensions=dims, overall=overall, judged=n)


def judge_runs(run_a: dict, run_b: dict, gold_labels: dict, judge: LlmGateway,
               seed: int = 0, ledger: Optional[CostLedger] = None,
               questions: Optional[dict] = None) -> JudgeReport:
    """Judge explanation quality where both runs answered correctly.

    run_a/run_b map question id -> output record; pairs where either
    side missed the gold label are excluded, and pairs whose judge reply
    stays malformed are skipped with a flag.  questions maps id -> the
    question text shown to the judge.
    """
    rng = random.Random(seed)
    questions = questions or {}
    verdicts = []
    excluded, skipped = [], []
    for qid in sorted(set(run_a) & set(run_b)):
        gold = gold_labels.get(qid)
        a, b = run_a[qid], run_b[qid]
        if gold is None or not a.get("answer") or not b.get("answer"):
            excluded.append(qid)
            continue
        if a["answer"].casefold() != gold.casefold() or b["answer"].casefold() != gold.casefold():
            excluded.append(qid)
            continue
        answer_a = f"{a['answer']}: {a.get('rationale') or ''}"
        answer_b = f"{b['answer']}: {b.get('rationale') or ''}"
        try:
            verdicts.append(
                judge_pair(questions.get(qid, qid), answer_a, answer_b, judge, rng, qid, ledger)
            )
        except SchemaError as exc:
            logger.warning("judge pair %s skipped: %s", qid, exc)
            skipped.append(qid)
    report = aggregate_judgments(verdicts)
    report.excluded = excluded
    report.skipped = skipped
    return report
