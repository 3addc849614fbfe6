import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapflow.graph import CycleError, DependencyGraph, TaskNode, topological_levels
from gapflow.trace import (
    EmptySearch,
    EventKind,
    EventTooLarge,
    MalformedNodeElement,
    MalformedTag,
    NestedTag,
    PlanError,
    Rollout,
    RolloutRecord,
    StreamParser,
    TraceError,
    TraceEvent,
    DuplicateTaskId,
    UnknownTaskReference,
    UnknownToolSyntax,
    join_queries,
    parse_graph_dsl,
    parse_observation,
    parse_plan,
    parse_stream,
    render_observation,
    serialize_events,
    serialize_graph_dsl,
    split_queries,
)
from helpers import FIXTURES

K = EventKind

PAPER_GRAPH = """
<node id="s1">search("capital of France")</node>
<node id="s2">search("capital of Germany")</node>
<node id="s3" depends="s1">search("population of {s1}")</node>
<node id="s4" depends="s2">search("population of {s2}")</node>
"""


@pytest.fixture(scope="module")
def case_text():
    return (FIXTURES / "case_trajectory.txt").read_text()


def test_case_trajectory_events(case_text):
    events = parse_stream(case_text)
    assert [e.kind for e in events] == [K.THINK, K.PLAN, K.THINK, K.SEARCH, K.OBSERVATION, K.THINK, K.ANSWER]
    assert len(events[3].parsed) == 2
    assert len(events[4].parsed) == 2
    assert events[4].parsed[0].startswith("John Frankenheimer (1930-2002)")
    assert events[6].parsed == ["director"]


def test_case_plan(case_text):
    plan = next(e for e in parse_stream(case_text) if e.kind is K.PLAN)
    graph = plan.parsed
    assert graph.ids == ["Task1", "Task2", "Task3"]
    assert set(graph.edges) == {("Task1", "Task3"), ("Task2", "Task3")}
    assert topological_levels(graph).as_sets() == [{"Task1", "Task2"}, {"Task3"}]
    assert graph["Task1"].description == "Search for John Frankenheimer's occupations and career"


def test_single_answer():
    events = parse_stream("<answer>42</answer>")
    assert events == [TraceEvent(K.ANSWER, "42")]
    assert events[0].parsed == ["42"]


def test_mismatched_close_tag():
    with pytest.raises(MalformedTag):
        parse_stream("<search>a</answer>")


def test_stray_close_tag():
    with pytest.raises(MalformedTag):
        parse_stream("text </think>")


def test_nested_tags_rejected():
    with pytest.raises(NestedTag):
        parse_stream("<think>a <search>b</search></think>")


def test_prose_and_unknown_tags_ignored():
    events = parse_stream("hello <foo>x</foo> <think>keep <b>this</b></think> bye")
    assert events == [TraceEvent(K.THINK, "keep <b>this</b>")]


def test_unclosed_tail_is_partial():
    events = parse_stream("<think>a</think><search>half a que")
    assert events[-1] == TraceEvent(K.SEARCH, "half a que", partial=True)


def test_aliases_keep_their_tag():
    events = parse_stream("<tool>x | y</tool><graph>" + PAPER_GRAPH + "</graph>")
    assert events[0].kind is K.SEARCH and events[0].tag == "tool"
    assert events[1].kind is K.PLAN and events[1].tag == "graph"
    assert len(events[1].parsed) == 4
    assert parse_stream(serialize_events(events)) == events


def test_body_cap():
    with pytest.raises(EventTooLarge):
        parse_stream("<think>" + "x" * 100 + "</think>", max_body=50)


def test_streaming_split_tags_match_whole_parse(case_text):
    rng = random.Random(3)
    for _ in range(50):
        parser = StreamParser()
        events = []
        pos = 0
        while pos < len(case_text):
            step = rng.randint(1, 12)
            events.extend(parser.feed(case_text[pos : pos + step]))
            pos += step
        assert parser.finish() is None
        assert events == parse_stream(case_text)


def test_split_queries_examples():
    assert split_queries(
        "John Frankenheimer occupation career director | Tiffanie DeBartolo occupation career director novelist"
    ) == [
        "John Frankenheimer occupation career director",
        "Tiffanie DeBartolo occupation career director novelist",
    ]
    assert split_queries("capital of France") == ["capital of France"]
    assert split_queries("a|b | c") == ["a", "b", "c"]


@pytest.mark.parametrize("body", ["", "  ", " | |"])
def test_empty_search(body):
    with pytest.raises(EmptySearch):
        split_queries(body)


@given(st.lists(st.text(alphabet=st.characters(blacklist_characters="|"), min_size=1).map(str.strip).filter(bool), min_size=1))
def test_split_join_identity(queries):
    parts = split_queries(join_queries(queries))
    assert parts == queries
    assert all(parts)


def test_single_task_plan():
    graph = parse_plan("Task 1: who wrote it\n- Dependencies: none")
    assert graph.ids == ["Task1"] and graph.edges == []


def test_plan_unknown_reference():
    with pytest.raises(UnknownTaskReference):
        parse_plan("Task 1: a\n- Dependencies: Task9")


def test_plan_duplicate_id():
    with pytest.raises(DuplicateTaskId):
        parse_plan("Task 1: a\nTask 1: b")


def test_plan_cycle():
    with pytest.raises(CycleError):
        parse_plan("Task 1: a\n- Dependencies: Task 2\nTask 2: b\n- Dependencies: Task 1")


def test_plan_field_style():
    body = """
- Task ID: Task1, Description: capital of France, Dependencies: none
- Task ID: Task2
  Description: population of that city
  Dependencies: Task1
"""
    graph = parse_plan(body)
    assert graph.ids == ["Task1", "Task2"]
    assert graph["Task2"].depends == ("Task1",)
    assert graph["Task1"].query_template == "capital of France"


def test_plan_short_references():
    graph = parse_plan("Task 1: a\n- Dependencies: none\nTask 2: b\n- Dependencies: T1")
    assert graph.edges == [("Task1", "Task2")]


def test_plan_without_tasks():
    with pytest.raises(PlanError):
        parse_plan("just prose")


def test_graph_dsl_paper_listing():
    graph = parse_graph_dsl(PAPER_GRAPH)
    assert graph.ids == ["s1", "s2", "s3", "s4"]
    assert graph.edges == [("s1", "s3"), ("s2", "s4")]
    assert graph["s3"].query_template == "population of {s1}"
    assert topological_levels(graph).as_sets() == [{"s1", "s2"}, {"s3", "s4"}]


def test_graph_dsl_single_node():
    graph = parse_graph_dsl('<node id="s1">search("x")</node>')
    assert graph["s1"].tool_name == "search" and graph["s1"].query_template == "x"


def test_graph_dsl_depends_order_round_trip():
    body = '<node id="s1">search("a")</node><node id="s2">search("b")</node>' \
        '<node id="s3" depends="s2,s1">calculator("{s2} + {s1}")</node>'
    graph = parse_graph_dsl(body)
    assert graph["s3"].depends == ("s2", "s1")
    assert parse_graph_dsl(serialize_graph_dsl(graph)) == graph


def test_graph_dsl_escaped_quotes():
    graph = DependencyGraph((TaskNode("a", "", "search", 'say "hi" \\ there'),))
    assert parse_graph_dsl(serialize_graph_dsl(graph))["a"].query_template == 'say "hi" \\ there'


@pytest.mark.parametrize(
    "body, error",
    [
        ('<node id="s1">search("x")</node> stray', MalformedNodeElement),
        ('<node>search("x")</node>', MalformedNodeElement),
        ('<node id="s1" depends=s2>search("x")</node>', MalformedNodeElement),
        ('<node id="s1">search x</node>', UnknownToolSyntax),
        ('<node id="s1" depends="s1">search("x")</node>', CycleError),
    ],
)
def test_graph_dsl_errors(body, error):
    with pytest.raises(error):
        parse_graph_dsl(body)


def test_render_observation_round_trip():
    block = render_observation(["docA", "docB"])
    (event,) = parse_stream(block)
    assert event.kind is K.OBSERVATION
    assert event.parsed == ["docA", "docB"]


def test_render_empty_observation():
    assert parse_stream(render_observation([])) == [TraceEvent(K.OBSERVATION, "")]


def test_render_observation_labels(case_text):
    docs = next(e for e in parse_stream(case_text) if e.kind is K.OBSERVATION).parsed
    block = render_observation(docs, ["John Frankenheimer", "Tiffanie DeBartolo"])
    assert "Doc 1 - John Frankenheimer:" in block and "Doc 2 - Tiffanie DeBartolo:" in block
    assert parse_stream(block)[0].parsed == docs


def test_observation_without_doc_headers():
    assert parse_observation("  free text  ") == ["free text"]


safe_text = st.text(alphabet=st.sampled_from("abcXYZ 019\n\t.,:;-!?\"'{}()|&<>/"), max_size=40)


@settings(max_examples=200)
@given(st.lists(safe_text.filter(lambda t: not t.lstrip("\n").startswith("Doc ")), max_size=5))
def test_observation_round_trip_property(results):
    assert parse_stream(render_observation(results))[0].parsed == results


@settings(max_examples=200)
@given(st.lists(st.tuples(st.sampled_from(list(EventKind)), safe_text), max_size=8))
def test_serialize_parse_identity(items):
    events = [TraceEvent(kind, body) for kind, body in items]
    assert parse_stream(serialize_events(events)) == events


def test_rollout_record_round_trip_is_bit_exact(case_text):
    rollout = Rollout("Q?", parse_stream(case_text), n_in=10, n_out=5)
    record = RolloutRecord(rollout, ["director"], True)
    line = record.to_json()
    again = RolloutRecord.from_json(line)
    assert again.rollout == rollout
    assert again.to_json() == line
    doc = json.loads(line)
    assert set(doc) == {"schema_version", "question", "events", "n_in", "n_out", "final_answer", "correct"}
    assert doc["events"][0] == {"kind": "think", "body": rollout.events[0].body}


def test_rollout_check_invariants():
    ok = Rollout("q", [TraceEvent(K.SEARCH, "a"), TraceEvent(K.OBSERVATION, ""), TraceEvent(K.ANSWER, "x")])
    ok.check()
    with pytest.raises(TraceError):
        Rollout("q", [TraceEvent(K.OBSERVATION, "")]).check()
    with pytest.raises(TraceError):
        Rollout("q", [TraceEvent(K.ANSWER, "x"), TraceEvent(K.THINK, "y")]).check()


def test_event_tag_must_fit_kind():
    with pytest.raises(TraceError):
        TraceEvent(K.THINK, "x", tag="search")
