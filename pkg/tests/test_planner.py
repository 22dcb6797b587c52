import pytest

from pmqa.ledger import CostLedger
from pmqa.planner import EmptyPlan, MeshCandidate, Planner, PlanningFailure, QuestionSpec
from pmqa.query import DateRange, mesh_terms_of, normalize_query, render_query
from pmqa.schemas import SchemaError
from pmqa.trace import SessionTrace

from conftest import scripted_gateway, turn


def planner(turns):
    return Planner(scripted_gateway(turns))


# ----------------------------------------------------------------------
# generate_candidates
# ----------------------------------------------------------------------


def test_generate_dedups_and_keeps_rationales(spec):
    p = planner(
        [
            turn(
                "mesh_list",
                {
                    "terms": [
                        {"term": "Asthma", "rationale": "core disease concept"},
                        {"term": "asthma", "rationale": "duplicate casing"},
                        {"term": "Leukotrienes", "rationale": "mediator under study"},
                    ]
                },
            )
        ]
    )
    pool = p.generate_candidates(spec)
    assert [c.term for c in pool] == ["Asthma", "Leukotrienes"]
    assert all(not c.selected for c in pool)
    assert all(c.rationale for c in pool)


def test_generate_empty_twice_is_empty_plan(spec):
    p = planner(
        [
            turn("mesh_list", {"terms": []}),
            turn("mesh_list", {"terms": []}, contains="empty"),
        ]
    )
    with pytest.raises(EmptyPlan):
        p.generate_candidates(spec)


def test_generate_recovers_on_reask(spec):
    p = planner(
        [
            turn("mesh_list", {"terms": []}),
            turn("mesh_list", {"terms": [{"term": "Asthma", "rationale": "r"}]}),
        ]
    )
    assert [c.term for c in p.generate_candidates(spec)] == ["Asthma"]


# ----------------------------------------------------------------------
# select_candidates
# ----------------------------------------------------------------------


def _pool(*names):
    return [MeshCandidate(n, f"why {n}") for n in names]


def test_select_marks_exactly_the_picked_terms(spec):
    p = planner([turn("mesh_select", {"selected": ["Asthma", "Leukotrienes", "Humans"]})])
    pool = _pool("Asthma", "Leukotrienes", "Humans", "Child", "Adult")
    chosen = p.select_candidates(pool, spec)
    assert [c.term for c in chosen] == ["Asthma", "Leukotrienes", "Humans"]
    assert all(c.selected for c in chosen)


def test_select_closed_world_violation(spec):
    p = planner([turn("mesh_select", {"selected": ["Zebrafish"]})])
    with pytest.raises(SchemaError) as exc:
        p.select_candidates(_pool("Asthma", "Child"), spec)
    assert exc.value.reason == "bad_enum"


def test_select_singleton_pool_forced_without_model_call(spec):
    p = planner([])  # any model call would blow up on script exhaustion
    trace = SessionTrace(question_id="q1", question=spec.question)
    chosen = p.select_candidates(_pool("Asthma"), spec, trace=trace)
    assert [c.term for c in chosen] == ["Asthma"]
    assert chosen[0].selected
    assert trace.planner["selection_forced"] is True


def test_select_empty_twice_is_empty_plan(spec):
    p = planner(
        [
            turn("mesh_select", {"selected": []}),
            turn("mesh_select", {"selected": []}),
        ]
    )
    with pytest.raises(EmptyPlan):
        p.select_candidates(_pool("Asthma", "Child"), spec)


# ----------------------------------------------------------------------
# draft_initial_query
# ----------------------------------------------------------------------


def test_draft_with_window_injection(spec):
    spec.date_window = DateRange("1990", "2000")
    p = planner(
        [turn("query_draft", {"query": "Asthma[mesh] AND Leukotrienes[mesh]", "rationale": "r"})]
    )
    trace = SessionTrace(question_id="q1", question=spec.question)
    q0 = p.draft_initial_query(_pool("Asthma", "Leukotrienes"), spec, trace=trace)
    assert render_query(q0) == "Asthma[mesh] AND Leukotrienes[mesh] AND 1990:2000[pdat]"
    assert trace.planner["window_injected"] is True
    assert trace.planner["dropped_terms"] == []


def test_draft_keeps_model_supplied_matching_window(spec):
    spec.date_window = DateRange("1990", "2000")
    p = planner(
        [
            turn(
                "query_draft",
                {"query": "Asthma[mesh] AND 1990:2000[pdat]", "rationale": "windowed"},
            )
        ]
    )
    q0 = p.draft_initial_query(_pool("Asthma"), spec)
    assert render_query(q0) == "Asthma[mesh] AND 1990:2000[pdat]"


def test_draft_unparseable_twice_is_planning_failure(spec):
    p = planner(
        [
            turn("query_draft", {"query": "asthma AND", "rationale": ""}),
            turn("query_draft", {"query": "asthma OR OR", "rationale": ""}, contains="not valid"),
        ]
    )
    with pytest.raises(PlanningFailure):
        p.draft_initial_query(_pool("Asthma"), spec)


def test_draft_records_dropped_terms(spec):
    p = planner([turn("query_draft", {"query": "Asthma[mesh]", "rationale": "narrowed"})])
    trace = SessionTrace(question_id="q1", question=spec.question)
    q0 = p.draft_initial_query(_pool("Asthma", "Leukotrienes"), spec, trace=trace)
    assert trace.planner["dropped_terms"] == ["Leukotrienes"]
    assert any(f["kind"] == "dropped_terms" for f in trace.flags)
    assert mesh_terms_of(q0) == {"asthma"}


def test_draft_output_is_normalization_fixed(spec):
    p = planner(
        [turn("query_draft", {"query": "children AND Asthma[mesh] AND Asthma[mesh]", "rationale": ""})]
    )
    q0 = p.draft_initial_query(_pool("Asthma"), spec)
    assert normalize_query(q0) == q0
    assert render_query(q0) == "Asthma[mesh] AND children"


def test_plan_runs_all_three_stages(spec):
    p = planner(
        [
            turn("mesh_list", {"terms": [{"term": "Asthma", "rationale": "a"},
                                         {"term": "Leukotrienes", "rationale": "b"}]}),
            turn("mesh_select", {"selected": ["Asthma", "Leukotrienes"]}),
            turn("query_draft", {"query": "Asthma[mesh] AND Leukotrienes[mesh]", "rationale": ""}),
        ]
    )
    ledger = CostLedger()
    q0, selected = p.plan(spec, ledger)
    assert render_query(q0) == "Asthma[mesh] AND Leukotrienes[mesh]"
    assert ledger.llm_calls == 3
    assert ledger.stages["mesh_gen"].llm_calls == 1


def test_question_spec_validation():
    with pytest.raises(ValueError):
        QuestionSpec(id="x", question="   ")
