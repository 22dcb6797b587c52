import json

import pytest

from pmqa.ledger import CostLedger
from pmqa.pubmed import (
    AbstractEntry,
    ArticleRecord,
    EmptyResult,
    FixtureBackend,
    NetworkError,
    PubMedGateway,
    RateLimited,
    SearchResult,
    TokenBucket,
)
from pmqa.query import parse_query

CORPUS = [
    {"pmid": "111", "title": "Leukotrienes in asthma", "abstract": "Asthma pathways involve leukotrienes.",
     "pub_date": "1995", "mesh_terms": ["Asthma", "Leukotrienes"]},
    {"pmid": "222", "title": "Asthma in children", "abstract": "Pediatric asthma management.",
     "pub_date": "1998", "mesh_terms": ["Asthma", "Child"]},
    {"pmid": "333", "title": "Asthma drug trial", "abstract": "Montelukast reduces symptoms of asthma.",
     "pub_date": "2003", "mesh_terms": ["Asthma"]},
    {"pmid": "444", "title": "Diabetes care", "abstract": "Insulin dosing.", "pub_date": "1999",
     "mesh_terms": ["Diabetes Mellitus"]},
]


def gateway(docs=None, **kw):
    return PubMedGateway(FixtureBackend(docs if docs is not None else CORPUS), **kw)


# ----------------------------------------------------------------------
# Fixture search semantics
# ----------------------------------------------------------------------


def test_fixture_matching_and_truncation():
    gw = gateway()
    result = gw.search(parse_query("Asthma[mesh]"), max_records=20)
    assert [r.pmid for r in result.records] == ["111", "222", "333"]
    assert result.total_hits == 3
    assert [r.rank for r in result.records] == [1, 2, 3]


def test_fixture_zero_matches_is_empty_result():
    with pytest.raises(EmptyResult):
        gateway().search(parse_query("Zebrafish[mesh]"))


def test_fixture_truncates_to_max_records():
    docs = [
        {"pmid": str(1000 + i), "title": f"asthma study {i}", "abstract": "", "pub_date": "2000"}
        for i in range(50)
    ]
    result = gateway(docs).search(parse_query("asthma"), max_records=20)
    assert len(result.records) == 20
    assert result.total_hits == 50


def test_fixture_and_requires_every_child():
    result = gateway().search(parse_query("Asthma[mesh] AND Leukotrienes[mesh]"), max_records=20)
    assert [r.pmid for r in result.records] == ["111"]


def test_fixture_rank_by_match_count_then_pmid():
    result = gateway().search(parse_query("(asthma OR Leukotrienes)"), max_records=20)
    # 111 matches both OR members; 222 and 333 match one each, pmid order.
    assert [r.pmid for r in result.records] == ["111", "222", "333"]


def test_fixture_explicit_rank_table_wins():
    docs = [dict(d) for d in CORPUS]
    docs[2]["ranks"] = {"Asthma[mesh]": 1}
    docs[0]["ranks"] = {"Asthma[mesh]": 2}
    result = gateway(docs).search(parse_query("Asthma[mesh]"))
    assert [r.pmid for r in result.records] == ["333", "111"]


def test_fixture_date_window_filters():
    result = gateway().search(parse_query("Asthma[mesh] AND 1990:2000[pdat]"))
    assert [r.pmid for r in result.records] == ["111", "222"]


def test_fixture_or_group_match():
    result = gateway().search(parse_query("(Leukotrienes[mesh] OR Montelukast)"))
    assert {r.pmid for r in result.records} == {"111", "333"}


def test_fixture_deterministic_replay():
    r1 = gateway(clock=lambda: 0.0).search(parse_query("Asthma[mesh]"))
    r2 = gateway(clock=lambda: 0.0).search(parse_query("Asthma[mesh]"))
    assert r1 == r2


def test_fixture_duplicate_pmid_rejected():
    with pytest.raises(ValueError):
        FixtureBackend([{"pmid": "1", "title": "a"}, {"pmid": "1", "title": "b"}])


def test_from_jsonl(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text("\n".join(json.dumps(d) for d in CORPUS))
    gw = PubMedGateway(FixtureBackend.from_jsonl(path))
    assert gw.search(parse_query("Diabetes Mellitus[mesh]")).records[0].pmid == "444"


def test_search_records_one_ledger_call_even_on_empty():
    ledger = CostLedger()
    gw = gateway()
    gw.search(parse_query("Asthma[mesh]"), ledger=ledger)
    with pytest.raises(EmptyResult):
        gw.search(parse_query("Zebrafish[mesh]"), ledger=ledger)
    assert ledger.search_calls == 2


# ----------------------------------------------------------------------
# fetch_abstracts
# ----------------------------------------------------------------------


def test_fetch_abstracts_known_and_missing():
    out = gateway().fetch_abstracts(["111", "222", "999"])
    assert out["111"].title == "Leukotrienes in asthma"
    assert not out["111"].missing
    assert out["999"] == AbstractEntry("", "", missing=True)


def test_fetch_abstracts_dedups_before_transmission():
    calls = []

    class SpyBackend(FixtureBackend):
        def fetch(self, pmids):
            calls.append(list(pmids))
            return super().fetch(pmids)

    gw = PubMedGateway(SpyBackend(CORPUS))
    gw.fetch_abstracts(["111", "111", "222"])
    assert calls == [["111", "222"]]


def test_fetch_abstracts_validates_input():
    with pytest.raises(ValueError):
        gateway().fetch_abstracts([])
    with pytest.raises(ValueError):
        gateway().fetch_abstracts(["abc"])


# ----------------------------------------------------------------------
# Records and results
# ----------------------------------------------------------------------


def test_article_record_validation():
    with pytest.raises(ValueError):
        ArticleRecord(pmid="x1", rank=1, title="t")
    with pytest.raises(ValueError):
        ArticleRecord(pmid="1", rank=0, title="t")


def test_search_result_rank_contiguity():
    a = ArticleRecord("1", 1, "t")
    with pytest.raises(ValueError):
        SearchResult("q", (a, ArticleRecord("2", 3, "t")), 2)
    with pytest.raises(ValueError):
        SearchResult("q", (a, ArticleRecord("1", 2, "t")), 2)


# ----------------------------------------------------------------------
# Retry and rate limiting
# ----------------------------------------------------------------------


class FlakySearchBackend:
    def __init__(self, failures, exc=NetworkError("boom")):
        self.failures = failures
        self.exc = exc
        self.calls = 0

    def search(self, query_string, max_records):
        self.calls += 1
        if self.calls <= self.failures:
            raise self.exc
        return (ArticleRecord("1", 1, "t"),), 1

    def fetch(self, pmids):
        self.calls += 1
        if self.calls <= self.failures:
            raise self.exc
        return {p: AbstractEntry("t", "a") for p in pmids}


def test_retry_recovers_from_transient_network_error():
    naps = []
    backend = FlakySearchBackend(2)
    gw = PubMedGateway(backend, retry_attempts=3, sleeper=naps.append)
    result = gw.search("asthma")
    assert result.total_hits == 1
    assert backend.calls == 3
    assert naps == [0.5, 1.0]


def test_retry_exhaustion_propagates_typed_error():
    gw = PubMedGateway(FlakySearchBackend(5), retry_attempts=3, sleeper=lambda _: None)
    with pytest.raises(NetworkError):
        gw.search("asthma")


def test_rate_limited_is_retried_then_propagated():
    gw = PubMedGateway(
        FlakySearchBackend(5, exc=RateLimited("slow down")),
        retry_attempts=2,
        sleeper=lambda _: None,
    )
    with pytest.raises(RateLimited):
        gw.search("asthma")


def test_token_bucket_throttles_beyond_rate():
    now = [0.0]
    naps = []

    def clock():
        return now[0]

    def sleeper(delay):
        naps.append(delay)
        now[0] += delay

    bucket = TokenBucket(rate=3.0, clock=clock, sleeper=sleeper)
    for _ in range(3):
        bucket.acquire()
    assert naps == []  # burst capacity covers the first three
    bucket.acquire()
    assert len(naps) == 1 and naps[0] == pytest.approx(1 / 3)


def test_token_bucket_refills_with_time():
    now = [0.0]
    naps = []
    bucket = TokenBucket(rate=3.0, clock=lambda: now[0], sleeper=naps.append)
    for _ in range(3):
        bucket.acquire()
    now[0] += 1.0  # a full second restores the burst
    for _ in range(3):
        bucket.acquire()
    assert naps == []
