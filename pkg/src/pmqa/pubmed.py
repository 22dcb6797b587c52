"""Literature search gateway: live NCBI E-utilities or an offline fixture corpus.

The live backend talks to esearch/efetch over HTTPS behind a shared
token-bucket rate limiter (E-utilities policy: 3 requests/second
without an API key) and retries transient failures with exponential
backoff.  The fixture backend evaluates queries against a line-delimited
document corpus and is bit-deterministic, which is what every scripted
test relies on.

An empty result set is a signal the refinement loop reacts to, not a
failure, so it surfaces as the typed ``EmptyResult`` exception rather
than an empty payload that could be mistaken for success.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Optional, Union

import requests

from .ledger import CostLedger
from .query import AndSeq, DateNode, OrGroup, QueryExpr, Term, parse_query, render_query

logger = logging.getLogger(__name__)


class NetworkError(Exception):
    """Transient transport failure; retried with backoff, then propagated."""


class RateLimited(Exception):
    """Backend asked us to slow down (HTTP 429)."""


class EmptyResult(Exception):
    """The search matched nothing: total_hits == 0."""

    def __init__(self, query: str):
        super().__init__(f"no results for {query!r}")
        self.query = query


@dataclass(frozen=True)
class ArticleRecord:
    pmid: str
    rank: int
    title: str
    abstract: str = ""
    pub_date: Optional[str] = None

    def __post_init__(self):
        if not self.pmid or not self.pmid.isdigit():
            raise ValueError(f"pmid must be a nonempty digit string, got {self.pmid!r}")
        if self.rank < 1:
            raise ValueError("rank is 1-based")


@dataclass(frozen=True)
class SearchResult:
    query: str
    records: tuple
    total_hits: int
    fetched_at: Optional[float] = None

    def __post_init__(self):
        pmids = [r.pmid for r in self.records]
        if len(set(pmids)) != len(pmids):
            raise ValueError("duplicate pmid in result set")
        if [r.rank for r in self.records] != list(range(1, len(self.records) + 1)):
            raise ValueError("ranks must be 1..N without gaps")
        object.__setattr__(self, "records", tuple(self.records))


@dataclass(frozen=True)
class AbstractEntry:
    title: str
    abstract: str
    missing: bool = False
    pub_date: Optional[str] = None


class TokenBucket:
    """Shared request throttle: at most ``rate`` acquisitions per second."""

    def __init__(self, rate: float = 3.0, clock=time.monotonic, sleeper=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.clock = clock
        self.sleeper = sleeper
        self._lock = threading.Lock()
        self._tokens = rate
        self._last = clock()

    def acquire(self) -> None:
        with self._lock:
            now = self.clock()
            self._tokens = min(self.rate, self._tokens + (now - self._last) * self.rate)
            self._last = now
            if self._tokens < 1.0:
                wait = (1.0 - self._tokens) / self.rate
                self.sleeper(wait)
                self._last = self.clock()
                self._tokens = 1.0
            self._tokens -= 1.0


# ----------------------------------------------------------------------
# Fixture backend
# ----------------------------------------------------------------------


class FixtureBackend:
    """Offline corpus: one JSON document per line.

    Document fields: pmid, title, abstract, optional pub_date, optional
    mesh_terms list, optional per-query rank table ``ranks`` mapping a
    canonical query string to this document's rank for that query.

    When any document carries an explicit rank for the incoming query
    string, those documents are the result set in rank order.  Otherwise
    boolean evaluation over title/abstract/mesh decides membership and
    results are ordered by matched-term count descending, pmid ascending.
    """

    def __init__(self, docs: list[dict]):
        seen = set()
        for doc in docs:
            pmid = str(doc.get("pmid", ""))
            if not pmid.isdigit():
                raise ValueError(f"fixture document without numeric pmid: {doc!r}")
            if pmid in seen:
                raise ValueError(f"duplicate pmid {pmid} in fixture corpus")
            seen.add(pmid)
        self.docs = [dict(doc, pmid=str(doc["pmid"])) for doc in docs]

    @classmethod
    def from_jsonl(cls, path) -> "FixtureBackend":
        docs = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    docs.append(json.loads(line))
        return cls(docs)

    @staticmethod
    def _doc_text(doc: dict) -> str:
        mesh = " ".join(doc.get("mesh_terms", []))
        return f"{doc.get('title', '')} {doc.get('abstract', '')} {mesh}".casefold()

    @staticmethod
    def _term_matches(term: Term, doc: dict) -> bool:
        needle = term.text.casefold()
        if term.tag.value == "mesh":
            mesh = {m.casefold() for m in doc.get("mesh_terms", [])}
            if needle in mesh:
                return True
        return needle in FixtureBackend._doc_text(doc)

    @classmethod
    def _matches(cls, q: AndSeq, doc: dict) -> bool:
        for child in q.children:
            if isinstance(child, Term):
                if not cls._term_matches(child, doc):
                    return False
            elif isinstance(child, OrGroup):
                if not any(cls._term_matches(t, doc) for t in child.children):
                    return False
            elif isinstance(child, DateNode):
                pub = doc.get("pub_date")
                if not pub or not child.range.contains(str(pub)):
                    return False
        return True

    @classmethod
    def _match_count(cls, q: AndSeq, doc: dict) -> int:
        count = 0
        for child in q.children:
            if isinstance(child, Term):
                count += cls._term_matches(child, doc)
            elif isinstance(child, OrGroup):
                count += sum(cls._term_matches(t, doc) for t in child.children)
        return count

    def search(self, query_string: str, max_records: int):
        explicit = [
            (int(doc["ranks"][query_string]), doc)
            for doc in self.docs
            if query_string in doc.get("ranks", {})
        ]
        if explicit:
            ordered = [doc for _, doc in sorted(explicit, key=lambda p: p[0])]
        else:
            q = parse_query(query_string)
            matched = [doc for doc in self.docs if self._matches(q, doc)]
            matched.sort(key=lambda d: (-self._match_count(q, d), int(d["pmid"])))
            ordered = matched
        total = len(ordered)
        records = tuple(
            ArticleRecord(
                pmid=doc["pmid"],
                rank=i + 1,
                title=doc.get("title", ""),
                abstract=doc.get("abstract", ""),
                pub_date=str(doc["pub_date"]) if doc.get("pub_date") else None,
            )
            for i, doc in enumerate(ordered[:max_records])
        )
        return records, total

    def fetch(self, pmids: list[str]) -> dict:
        by_pmid = {doc["pmid"]: doc for doc in self.docs}
        out = {}
        for pmid in pmids:
            doc = by_pmid.get(pmid)
            if doc is None:
                out[pmid] = AbstractEntry("", "", missing=True)
            else:
                out[pmid] = AbstractEntry(doc.get("title", ""), doc.get("abstract", ""))
        return out


# ----------------------------------------------------------------------
# Live NCBI E-utilities backend
# ----------------------------------------------------------------------

EUTILS_BASE = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"


class EntrezBackend:
    """esearch + efetch against PubMed; credentials come from config."""

    def __init__(self, api_key: str = "", email: str = "", tool: str = "pmqa",
                 timeout: float = 10.0, rate_limiter: Optional[TokenBucket] = None,
                 session: Optional[requests.Session] = None, base_url: str = EUTILS_BASE):
        self.api_key = api_key
        self.email = email
        self.tool = tool
        self.timeout = timeout
        self.rate_limiter = rate_limiter or TokenBucket()
        self.session = session or requests.Session()
        self.base_url = base_url.rstrip("/")

    def _get(self, endpoint: str, params: dict):
        merged = dict(params, tool=self.tool)
        if self.api_key:
            merged["api_key"] = self.api_key
        if self.email:
            merged["email"] = self.email
        self.rate_limiter.acquire()
        try:
            resp = self.session.get(f"{self.base_url}/{endpoint}", params=merged, timeout=self.timeout)
        except requests.RequestException as exc:
            raise NetworkError(str(exc)) from exc
        if resp.status_code == 429:
            raise RateLimited("E-utilities rate limit hit")
        if resp.status_code >= 500:
            raise NetworkError(f"E-utilities returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise NetworkError(f"E-utilities returned HTTP {resp.status_code}: {resp.text[:200]}")
        return resp

    def search(self, query_string: str, max_records: int):
        resp = self._get(
            "esearch.fcgi",
            {
                "db": "pubmed",
                "term": query_string,
                "retmax": max_records,
                "retmode": "json",
                "sort": "relevance",
            },
        )
        try:
            result = resp.json()["esearchresult"]
            total = int(result["count"])
            idlist = list(result.get("idlist", []))
        except (ValueError, KeyError) as exc:
            raise NetworkError(f"malformed esearch payload: {exc}") from exc
        if total == 0 or not idlist:
            return (), total
        entries = self.fetch(idlist)
        records = []
        for i, pmid in enumerate(idlist[:max_records]):
            entry = entries.get(pmid, AbstractEntry("", "", missing=True))
            records.append(
                ArticleRecord(
                    pmid=pmid,
                    rank=i + 1,
                    title=entry.title,
                    abstract=entry.abstract,
                    pub_date=entry.pub_date,
                )
            )
        return tuple(records), total

    _MONTHS = {m: i for i, m in enumerate(
        ("jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"), 1)}

    @classmethod
    def _parse_pub_date(cls, article) -> Optional[str]:
        date_el = article.find(".//Article/Journal/JournalIssue/PubDate")
        if date_el is None:
            return None
        year = (date_el.findtext("Year") or "").strip()
        if year.isdigit():
            month_raw = (date_el.findtext("Month") or "").strip().casefold()
            month = cls._MONTHS.get(month_raw[:3])
            if month is None and month_raw.isdigit():
                month = int(month_raw)
            day = (date_el.findtext("Day") or "").strip()
            if month and day.isdigit():
                return f"{year}/{month:02d}/{int(day):02d}"
            return year
        # MedlineDate fallback, e.g. "1998 Nov-Dec": keep the leading year
        medline = (date_el.findtext("MedlineDate") or "").strip()
        match = re.search(r"\b(\d{4})\b", medline)
        return match.group(1) if match else None

    def fetch(self, pmids: list[str]) -> dict:
        resp = self._get(
            "efetch.fcgi",
            {"db": "pubmed", "id": ",".join(pmids), "retmode": "xml", "rettype": "abstract"},
        )
        try:
            root = ET.fromstring(resp.content)
        except ET.ParseError as exc:
            raise NetworkError(f"malformed efetch XML: {exc}") from exc
        out = {}
        for article in root.iter("PubmedArticle"):
            pmid_el = article.find(".//MedlineCitation/PMID")
            if pmid_el is None or not (pmid_el.text or "").strip():
                continue
            pmid = pmid_el.text.strip()
            title_el = article.find(".//Article/ArticleTitle")
            title = "".join(title_el.itertext()).strip() if title_el is not None else ""
            abstract = " ".join(
                "".join(el.itertext()).strip()
                for el in article.findall(".//Abstract/AbstractText")
            ).strip()
            out[pmid] = AbstractEntry(title, abstract, pub_date=self._parse_pub_date(article))
        for pmid in pmids:
            out.setdefault(pmid, AbstractEntry("", "", missing=True))
        return out


# ----------------------------------------------------------------------
# Gateway facade
# ----------------------------------------------------------------------


class PubMedGateway:
    """Backend-agnostic search surface with retry and ledger accounting."""

    def __init__(self, backend, retry_attempts: int = 3, backoff_base: float = 0.5,
                 sleeper=time.sleep, clock=time.time):
        self.backend = backend
        self.retry_attempts = retry_attempts
        self.backoff_base = backoff_base
        self.sleeper = sleeper
        self.clock = clock

    def _with_retry(self, fn, *args):
        last = None
        for attempt in range(self.retry_attempts):
            try:
                return fn(*args)
            except (NetworkError, RateLimited) as exc:
                last = exc
                if attempt + 1 < self.retry_attempts:
                    delay = self.backoff_base * (2 ** attempt)
                    logger.warning("search backend error (%s); retry in %.1fs", exc, delay)
                    self.sleeper(delay)
        raise last

    def search(self, q: Union[QueryExpr, str], max_records: int = 20,
               ledger: Optional[CostLedger] = None) -> SearchResult:
        """Run one relevance-ranked search; raises EmptyResult on zero hits.

        Exactly one search call is charged to the ledger per invocation,
        whatever the outcome.
        """
        if max_records < 1:
            raise ValueError("max_records must be >= 1")
        query_string = q if isinstance(q, str) else render_query(q)
        if ledger is not None:
            ledger.record_search()
        records, total = self._with_retry(self.backend.search, query_string, max_records)
        if total == 0:
            raise EmptyResult(query_string)
        return SearchResult(query_string, tuple(records), total, fetched_at=self.clock())

    def fetch_abstracts(self, pmids: list[str],
                        ledger: Optional[CostLedger] = None) -> dict:
        """Title/abstract per pmid; unknown pmids come back flagged missing.

        Input order is preserved and duplicates are dropped before the
        backend sees them.
        """
        if not pmids:
            raise ValueError("pmids must be nonempty")
        deduped = list(dict.fromkeys(pmids))
        for pmid in deduped:
            if not pmid.isdigit():
                raise ValueError(f"invalid pmid {pmid!r}")
        return self._with_retry(self.backend.fetch, deduped)
