import json

import pytest

from pmqa.ledger import CostLedger
from pmqa.pubmed import ArticleRecord, SearchResult
from pmqa.retriever import EvidenceItem, ReflectiveRetriever
from pmqa.trace import SessionTrace

from conftest import scripted_gateway, turn


def records(n, start=1):
    return tuple(
        ArticleRecord(str(100 + i), i, f"title {i}", f"abstract {i}")
        for i in range(start, start + n)
    )


def result_of(recs):
    return SearchResult("q", recs, len(recs), fetched_at=None)


def filter_turn(keep_pmids, all_pmids, tokens=(0, 0)):
    verdicts = [
        {"pmid": p, "keep": "Yes" if p in keep_pmids else "No", "rationale": "r"}
        for p in all_pmids
    ]
    return turn("filter_verdicts", {"verdicts": verdicts}, *tokens)


def extract_turn(aligned_pmids, batch_pmids, tokens=(0, 0)):
    items = [
        {
            "pmid": p,
            "passage": f"finding from {p}" if p in aligned_pmids else "",
            "aligned": "Yes" if p in aligned_pmids else "No",
            "rationale": "r",
        }
        for p in batch_pmids
    ]
    return turn("evidence_items", {"items": items}, *tokens)


def check_turn(sufficient, tokens=(0, 0)):
    return turn(
        "coverage_check",
        {"is_sufficient": sufficient, "rationale": "r", "needed_pmids": []},
        *tokens,
    )


def retriever(turns, **kw):
    kw.setdefault("m", 5)
    kw.setdefault("m_max", 20)
    return ReflectiveRetriever(scripted_gateway(turns), **kw)


# ----------------------------------------------------------------------
# coarse_filter
# ----------------------------------------------------------------------


def test_filter_caps_at_screening_budget(spec):
    recs = records(30)
    pmids = [r.pmid for r in recs[:20]]
    r = retriever([filter_turn(pmids, pmids)])
    verdicts = r.coarse_filter(recs, spec)
    assert len(verdicts) == 20
    assert [v.pmid for v in verdicts] == pmids


def test_filter_keeps_rank_order_of_survivors(spec):
    recs = records(5)
    pmids = [r.pmid for r in recs]
    r = retriever([filter_turn({"101", "103", "104"}, pmids)])
    verdicts = r.coarse_filter(recs, spec)
    kept = [v.pmid for v in verdicts if v.keep]
    assert kept == ["101", "103", "104"]


def test_filter_schema_failure_defaults_to_keep(spec):
    recs = records(3)
    r = retriever([turn("filter_verdicts", "no json here")])
    r.llm.schema_retries = 0
    trace = SessionTrace(question_id="q", question=spec.question)
    verdicts = r.coarse_filter(recs, spec, trace=trace)
    assert all(v.keep and v.defaulted for v in verdicts)
    assert any(f["kind"] == "schema_failure" for f in trace.flags)


def test_filter_missing_verdict_defaults_to_keep(spec):
    recs = records(3)
    r = retriever([filter_turn({"101"}, ["101", "102"])])  # 103 omitted by model
    verdicts = r.coarse_filter(recs, spec)
    assert verdicts[2].keep and verdicts[2].defaulted


def test_filter_no_records_makes_no_call(spec):
    assert retriever([]).coarse_filter([], spec) == []


# ----------------------------------------------------------------------
# extract_batch
# ----------------------------------------------------------------------


def test_extract_one_item_per_record(spec):
    recs = records(5)
    pmids = [r.pmid for r in recs]
    r = retriever([extract_turn({"101", "104"}, pmids)])
    items = r.extract_batch(recs, 1, spec)
    assert len(items) == 5
    assert sum(i.aligned for i in items) == 2


def test_extract_empty_passage_with_aligned_is_coerced(spec):
    recs = records(1)
    r = retriever(
        [
            turn(
                "evidence_items",
                {"items": [{"pmid": "101", "passage": "  ", "aligned": "Yes", "rationale": "r"}]},
            )
        ]
    )
    trace = SessionTrace(question_id="q", question=spec.question)
    items = r.extract_batch(recs, 1, spec, trace=trace)
    assert not items[0].aligned and items[0].coerced
    assert any(f["kind"] == "empty_passage_coerced" for f in trace.flags)


def test_extract_missing_record_yields_failed_item(spec):
    recs = records(2)
    r = retriever([extract_turn({"101"}, ["101"])])  # 102 omitted
    items = r.extract_batch(recs, 1, spec)
    assert items[1].rationale == "extraction failed"
    assert not items[1].aligned


def test_extract_batch_size_validated(spec):
    r = retriever([], m=2)
    with pytest.raises(ValueError):
        r.extract_batch(records(3), 1, spec)
    with pytest.raises(ValueError):
        r.extract_batch([], 1, spec)


def test_evidence_item_validation():
    with pytest.raises(ValueError):
        EvidenceItem("1", "p", True, batch_index=0)


# ----------------------------------------------------------------------
# run_retrieval
# ----------------------------------------------------------------------


def test_early_stop_at_first_sufficient_batch(spec):
    recs = records(12)
    pmids = [r.pmid for r in recs]
    turns = [
        filter_turn(set(pmids), pmids),
        extract_turn(set(pmids[:5]), pmids[:5]),
        check_turn(True),
    ]
    out = retriever(turns).run_retrieval(result_of(recs), spec)
    assert out.stop_reason == "sufficient"
    assert out.batches_processed == 1
    assert out.esd == 5
    assert len(out.pool) == 5


def test_exhaustion_partitions_tail_batch(spec):
    recs = records(12)
    pmids = [r.pmid for r in recs]
    turns = [filter_turn(set(pmids), pmids)]
    for batch in (pmids[:5], pmids[5:10], pmids[10:]):
        turns.append(extract_turn(set(batch), batch))
        turns.append(check_turn(False))
    out = retriever(turns).run_retrieval(result_of(recs), spec)
    assert out.stop_reason == "exhausted"
    assert out.batches_processed == 3
    assert out.esd == 12
    assert [len(b) for b in (pmids[:5], pmids[5:10], pmids[10:])] == [5, 5, 2]


def test_zero_records_outcome(spec):
    out = retriever([]).run_retrieval(result_of(()), spec)
    assert out.stop_reason == "exhausted"
    assert out.pool == () and out.kept == ()
    assert out.esd == 0 and out.batches_processed == 0


def test_all_dropped_by_filter(spec):
    recs = records(4)
    pmids = [r.pmid for r in recs]
    out = retriever([filter_turn(set(), pmids)]).run_retrieval(result_of(recs), spec)
    assert out.kept == ()
    assert out.esd == 0
    assert out.stop_reason == "exhausted"


def test_diminishing_yield_stops_after_two_dry_batches(spec):
    recs = records(15)
    pmids = [r.pmid for r in recs]
    turns = [
        filter_turn(set(pmids), pmids),
        extract_turn(set(), pmids[:5]),
        check_turn(False),
        extract_turn(set(), pmids[5:10]),
        check_turn(False),
    ]
    out = retriever(turns).run_retrieval(result_of(recs), spec)
    assert out.stop_reason == "exhausted"
    assert out.diminishing
    assert out.batches_processed == 2
    assert out.esd == 10


def test_dry_streak_resets_on_yield(spec):
    recs = records(15)
    pmids = [r.pmid for r in recs]
    turns = [
        filter_turn(set(pmids), pmids),
        extract_turn(set(), pmids[:5]),
        check_turn(False),
        extract_turn({pmids[5]}, pmids[5:10]),
        check_turn(False),
        extract_turn(set(), pmids[10:]),
        check_turn(False),
    ]
    out = retriever(turns).run_retrieval(result_of(recs), spec)
    assert out.batches_processed == 3
    assert not out.diminishing


def test_token_budget_exit_at_batch_boundary(spec):
    recs = records(20)
    pmids = [r.pmid for r in recs]
    # loop tokens per batch: extract 100+20, check 30+10 = 160
    turns = [filter_turn(set(pmids), pmids, tokens=(50, 10))]
    for i in range(0, 20, 5):
        batch = pmids[i : i + 5]
        turns.append(extract_turn(set(batch), batch, tokens=(100, 20)))
        turns.append(check_turn(False, tokens=(30, 10)))
    out = retriever(turns, token_budget=450).run_retrieval(result_of(recs), spec)
    # cumulative loop tokens: 160, 320, 480 -> crossing inside batch 3
    assert out.stop_reason == "token_budget"
    assert out.batches_processed == 3
    assert out.esd == 15


def test_unlimited_budget_never_exits_on_tokens(spec):
    recs = records(6)
    pmids = [r.pmid for r in recs]
    turns = [filter_turn(set(pmids), pmids, tokens=(10 **(6), 10 ** 6))]
    for batch in (pmids[:5], pmids[5:]):
        turns.append(extract_turn(set(batch), batch, tokens=(10 ** 6, 10 ** 6)))
        turns.append(check_turn(False, tokens=(10 ** 6, 10 ** 6)))
    out = retriever(turns, token_budget=None).run_retrieval(result_of(recs), spec)
    assert out.stop_reason == "exhausted"


def test_sufficiency_wins_over_budget_in_same_batch(spec):
    recs = records(5)
    pmids = [r.pmid for r in recs]
    turns = [
        filter_turn(set(pmids), pmids),
        extract_turn(set(pmids), pmids, tokens=(1000, 1000)),
        check_turn(True, tokens=(1000, 1000)),
    ]
    out = retriever(turns, token_budget=1).run_retrieval(result_of(recs), spec)
    assert out.stop_reason == "sufficient"


def test_pool_is_monotone_and_pure(spec):
    recs = records(10)
    pmids = [r.pmid for r in recs]
    turns = [
        filter_turn(set(pmids), pmids),
        extract_turn({"101", "103"}, pmids[:5]),
        check_turn(False),
        extract_turn({"107"}, pmids[5:]),
        check_turn(True),
    ]
    trace = SessionTrace(question_id="q", question=spec.question)
    out = retriever(turns).run_retrieval(result_of(recs), spec, trace=trace)
    assert [i.pmid for i in out.pool] == ["101", "103", "107"]
    assert all(i.aligned and i.passage for i in out.pool)
    batch_pools = [b["new_aligned"] for b in trace.retrieval["batches"]]
    assert batch_pools == [2, 1]


def test_ledger_counts_loop_calls(spec):
    recs = records(5)
    pmids = [r.pmid for r in recs]
    turns = [
        filter_turn(set(pmids), pmids, tokens=(10, 1)),
        extract_turn(set(pmids), pmids, tokens=(20, 2)),
        check_turn(True, tokens=(5, 1)),
    ]
    ledger = CostLedger()
    retriever(turns).run_retrieval(result_of(recs), spec, ledger=ledger)
    assert ledger.llm_calls == 3
    assert ledger.stages["filter"].llm_calls == 1
    assert ledger.stages["extract"].llm_calls == 1
    assert ledger.stages["coverage"].llm_calls == 1
    assert ledger.input_tokens == 35 and ledger.output_tokens == 4
