"""Operator surface: ask one question, run benchmarks, judge runs, replay traces.

Configuration precedence is flags > environment > config file >
defaults; the fully resolved values are echoed into every trace.
Exit codes: 0 success, 2 usage/config problems, 3 planning failure,
4 network exhaustion, 5 answer format failure, 1 other errors.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import ConfigError, RunConfig
from .harness import (
    FORMATS,
    FormatError,
    build_judge_gateway,
    build_llm_gateway,
    build_search_gateway,
    judge_runs,
    load_dataset,
    load_run_aggregate,
    load_run_results,
    run_mode,
)
from .ledger import CostLedger
from .pipeline import (
    FAILURE_API,
    FAILURE_FORMAT,
    FAILURE_PLANNING,
    MODES,
    run_reasoner,
)
from .planner import QuestionSpec
from .query import DateRange
from .trace import SessionTrace, TraceFormatError

EXIT_PLANNING = 3
EXIT_NETWORK = 4
EXIT_ANSWER_FORMAT = 5

_FAILURE_EXITS = {
    FAILURE_PLANNING: EXIT_PLANNING,
    FAILURE_API: EXIT_NETWORK,
    FAILURE_FORMAT: EXIT_ANSWER_FORMAT,
}


def _config_options(fn):
    options = [
        click.option("--config", "config_file", type=click.Path(), default=None,
                     help="JSON config file."),
        click.option("--backend", type=click.Choice(["mock", "live"]), default=None,
                     help="Model/search backend pair: mock uses the script and fixture files."),
        click.option("--model", default=None, help="Model name for the live backend."),
        click.option("--base-url", default=None, help="Chat-completions base URL."),
        click.option("--script", "script_path", type=click.Path(), default=None,
                     help="Scripted model turns (JSONL) for the mock backend."),
        click.option("--fixture", "fixture_path", type=click.Path(), default=None,
                     help="Fixture corpus (JSONL) for offline search."),
        click.option("--mesh-budget", "refine_budget", type=int, default=None,
                     help="Refinement iteration budget."),
        click.option("--batch-size", "m", type=int, default=None, help="Evidence batch size."),
        click.option("--max-articles", "m_max", type=int, default=None,
                     help="Ranked-article screening budget."),
        click.option("--token-budget", type=int, default=None,
                     help="Retrieval token budget (unset = unlimited)."),
        click.option("--parallelism", type=int, default=None,
                     help="Concurrent questions in benchmark runs."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _resolve(config_file, backend, **flags) -> RunConfig:
    if backend is not None:
        flags["llm_backend"] = backend
        flags["search_backend"] = "live" if backend == "live" else "fixture"
    try:
        return RunConfig.resolve(flags=flags, config_file=config_file)
    except ConfigError as exc:
        raise click.UsageError(str(exc))


@click.group()
def main():
    """Literature-grounded biomedical question answering over PubMed."""


@main.command()
@click.argument("question")
@_config_options
@click.option("--task", default="Answer the question and justify your reasoning.",
              help="Task instruction handed to the answer stage.")
@click.option("--labels", default=None,
              help="Comma-separated label set the answer must use, e.g. yes,no,maybe.")
@click.option("--context", default=None, help="Additional context for the question.")
@click.option("--window", default=None, help="Publication window, e.g. 1990:2000.")
@click.option("--trace", "trace_path", type=click.Path(), default=None,
              help="Write the session trace to this file.")
def ask(question, task, labels, context, window, trace_path, config_file, backend, **flags):
    """Answer one question through the full pipeline."""
    config = _resolve(config_file, backend, **flags)
    date_window = None
    if window:
        try:
            lo, _, hi = window.partition(":")
            date_window = DateRange(lo, hi)
        except ValueError as exc:
            raise click.UsageError(f"bad --window: {exc}")
    spec = QuestionSpec(
        id="cli",
        question=question,
        task_spec=task,
        context=context,
        date_window=date_window,
        label_set=tuple(l.strip() for l in labels.split(",")) if labels else None,
    )
    try:
        llm = build_llm_gateway(config)
        pubmed = build_search_gateway(config)
    except ConfigError as exc:
        raise click.UsageError(str(exc))

    result = run_reasoner(spec, config, llm, pubmed)
    if trace_path:
        Path(trace_path).write_text(result.trace.to_json(), encoding="utf-8")
        click.echo(f"trace: {trace_path}")
    if result.response is not None:
        click.echo(f"answer: {result.response.answer}")
        click.echo(f"rationale: {result.response.rationale}")
        if result.response.cited_pmids:
            click.echo("citations: " + ", ".join(sorted(result.response.cited_pmids)))
        click.echo(
            "cost: "
            + "  ".join(f"{k}={v}" for k, v in result.ledger.totals().items())
        )
    if result.trace.failure is not None:
        kind = result.trace.failure["kind"]
        click.echo(f"failure: {kind}: {result.trace.failure['detail']}", err=True)
        # a degraded session that still produced an answer is a success
        if result.response is None:
            sys.exit(_FAILURE_EXITS.get(kind, 1))


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(sorted(MODES)), default="reasoner")
@click.option("--format", "format_id", type=click.Choice(FORMATS), default="pubmedqa-style")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Run artifact directory (default: <out_dir>/<mode> from config).")
@click.option("--baseline", "baseline_dir", type=click.Path(exists=True), default=None,
              help="Earlier run directory; emits cost ratios against it.")
@_config_options
def bench(dataset, mode, format_id, out_dir, baseline_dir, config_file, backend, **flags):
    """Run a dataset through one mode and write the aggregate report."""
    config = _resolve(config_file, backend, **flags)
    try:
        records = load_dataset(dataset, format_id)
    except FormatError as exc:
        raise click.ClickException(f"dataset: {exc}")
    baseline = load_run_aggregate(baseline_dir) if baseline_dir else None
    out = Path(out_dir) if out_dir else Path(config.out_dir) / mode
    try:
        artifact = run_mode(records, mode, config, out_dir=out, baseline=baseline)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    click.echo(artifact.aggregate.render_table())
    click.echo(f"artifact: {out}")


@main.command()
@click.option("--run-a", "run_a_dir", required=True, type=click.Path(exists=True))
@click.option("--run-b", "run_b_dir", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True),
              help="Dataset with gold labels; only pairs both runs got right are judged.")
@click.option("--format", "format_id", type=click.Choice(FORMATS), default="pubmedqa-style")
@click.option("--seed", type=int, default=0, help="Seed for presentation-order randomization.")
@click.option("--out", "out_path", type=click.Path(), default=None)
@_config_options
def judge(run_a_dir, run_b_dir, dataset, format_id, seed, out_path, config_file, backend, **flags):
    """Pairwise explanation-quality judging between two run artifacts."""
    config = _resolve(config_file, backend, **flags)
    try:
        records = load_dataset(dataset, format_id)
    except FormatError as exc:
        raise click.ClickException(f"dataset: {exc}")
    gold = {r.id: r.label for r in records if r.label is not None}
    questions = {r.id: r.question for r in records}
    try:
        gateway = build_judge_gateway(config)
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    ledger = CostLedger()
    report = judge_runs(
        load_run_results(run_a_dir), load_run_results(run_b_dir), gold, gateway,
        seed=seed, ledger=ledger, questions=questions,
    )
    payload = dict(report.as_dict(), judge_ledger=ledger.totals())
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text + "\n", encoding="utf-8")
        click.echo(f"report: {out_path}")
    else:
        click.echo(text)


@main.command()
@click.argument("trace_path", type=click.Path(exists=True))
def replay(trace_path):
    """Re-render a stored session trace; pure, no network."""
    try:
        trace = SessionTrace.from_json(Path(trace_path).read_text(encoding="utf-8"))
    except TraceFormatError as exc:
        raise click.ClickException(f"trace: {exc}")
    click.echo(trace.render_report())


if __name__ == "__main__":
    main()
