import json

import pytest

from pmqa.llm import LlmGateway, ScriptedBackend, ScriptedTurn
from pmqa.planner import QuestionSpec
from pmqa.pubmed import FixtureBackend, PubMedGateway


def turn(schema_id, payload, input_tokens=0, output_tokens=0, contains=None):
    """Scripted turn whose reply is the JSON encoding of payload."""
    reply = payload if isinstance(payload, str) else json.dumps(payload)
    return ScriptedTurn(schema_id, reply, input_tokens, output_tokens, contains)


def scripted_gateway(turns, **kw):
    return LlmGateway(ScriptedBackend(turns), **kw)


def fixture_pubmed(docs, **kw):
    kw.setdefault("clock", lambda: 0.0)
    return PubMedGateway(FixtureBackend(docs), **kw)


@pytest.fixture
def spec():
    return QuestionSpec(
        id="q1",
        question="Do leukotrienes play a key role in asthma?",
        task_spec="Answer yes, no, or maybe, with a brief justification.",
        label_set=("yes", "no", "maybe"),
    )


CORPUS = [
    {
        "pmid": "111",
        "title": "Leukotrienes in asthma",
        "abstract": "Leukotriene pathways drive airway inflammation in asthma.",
        "pub_date": "1995",
        "mesh_terms": ["Asthma", "Leukotrienes"],
    },
    {
        "pmid": "222",
        "title": "Asthma in children",
        "abstract": "Pediatric asthma management and wheeze outcomes.",
        "pub_date": "1998",
        "mesh_terms": ["Asthma", "Child", "Wheeze"],
    },
    {
        "pmid": "333",
        "title": "Asthma drug trial",
        "abstract": "Montelukast, a leukotriene receptor antagonist, reduces asthma symptoms.",
        "pub_date": "2003",
        "mesh_terms": ["Asthma", "Leukotrienes"],
    },
]


def reasoner_script(
    tokens=(10, 5),
    summary_text="Leukotriene pathways drive airway inflammation in asthma [PMID: 111], "
    "and blocking them reduces symptoms [PMID: 333].",
    answer="yes",
    rationale="Leukotrienes drive inflammation [PMID: 111] and their "
    "blockade improves asthma [PMID: 333].",
    extra_summary_turns=(),
):
    """Scripted turns for one deterministic full-pipeline session.

    Plan (3 calls), one refinement iteration converging by redrafting
    the same query (3 calls), then screening, one extraction batch, the
    sufficiency check, summary, and answer (5 calls): 11 model calls and
    2 search calls against the shared corpus.
    """
    i, o = tokens
    query = "Asthma[mesh] AND Leukotrienes[mesh]"
    return [
        turn("mesh_list", {"terms": [{"term": "Asthma", "rationale": "disease"},
                                     {"term": "Leukotrienes", "rationale": "mediator"}]}, i, o),
        turn("mesh_select", {"selected": ["Asthma", "Leukotrienes"]}, i, o),
        turn("query_draft", {"query": query, "rationale": "core concepts"}, i, o),
        turn(
            "critic_feedback",
            {
                "terms": [
                    {"term": "Asthma", "coverage": "Yes", "alignment": "Yes", "redundancy": "No"},
                    {"term": "Leukotrienes", "coverage": "Yes", "alignment": "Yes", "redundancy": "No"},
                ],
                "feedback": {
                    "coverage": 1, "coverage_suggestion": "",
                    "alignment": 1, "alignment_suggestion": "",
                    "redundancy": 1, "redundancy_suggestion": "",
                },
            },
            i, o,
        ),
        turn("mesh_list", {"terms": [{"term": "Asthma", "rationale": "disease"},
                                     {"term": "Leukotrienes", "rationale": "mediator"}]}, i, o),
        turn("query_draft", {"query": query, "rationale": "stable"}, i, o),
        turn(
            "filter_verdicts",
            {"verdicts": [{"pmid": "111", "keep": "Yes", "rationale": "on point"},
                          {"pmid": "333", "keep": "Yes", "rationale": "trial evidence"}]},
            i, o,
        ),
        turn(
            "evidence_items",
            {"items": [
                {"pmid": "111", "passage": "Leukotriene pathways drive airway inflammation in asthma.",
                 "aligned": "Yes", "rationale": "direct"},
                {"pmid": "333", "passage": "Montelukast, a leukotriene receptor antagonist, reduces asthma symptoms.",
                 "aligned": "Yes", "rationale": "mechanistic"},
            ]},
            i, o,
        ),
        turn("coverage_check", {"is_sufficient": True, "rationale": "both arms covered",
                                "needed_pmids": []}, i, o),
        turn("summary", {"verified_sources": summary_text}, i, o),
        *extra_summary_turns,
        turn("qa_answer", {"answer": answer, "rationale": rationale}, i, o),
    ]
