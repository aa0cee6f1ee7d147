import json
import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_graph, ref
from envsynth.core import ParamSpec, ToolSpec
from envsynth.errors import RemoteError, TooLargeError
from envsynth.sampler import (ParamClass, SamplerConfig, check_closure, classify_params,
                              enumerate_feasible_chains, is_valid, load_chain, sample_priors, save_chain,
                              topology_sample)
from envsynth.toolgraph import DependencyGraph, ToolRef, build_graph, semantic_match, tools_by_ref


@pytest.fixture
def graph(travel):
    return build_graph([travel])


@pytest.fixture
def classes(graph):
    return classify_params(graph.tools)


def _param(graph, tool, name):
    return next(p for p in graph.tool(ref(tool)).inputs if p.name == name)


def test_id_suffix_is_internal(classes):
    assert classes.of(ref("get_hotel_details"), "hotel_id") == "internal"
    assert classes.of(ref("cancel_booking"), "booking_id") == "internal"


def test_plain_name_is_external(classes):
    assert classes.of(ref("search_hotels"), "city") == "external"
    assert classes.of(ref("book_hotel"), "guest_name") == "external"


def test_hint_takes_precedence():
    t = ToolSpec("resume", "", (ParamSpec("session_id", classification_hint="external"),), ())
    tools = {ToolRef("e", "resume"): t}
    assert classify_params(tools, "hints").of(ToolRef("e", "resume"), "session_id") == "external"
    assert classify_params(tools, "heuristic").of(ToolRef("e", "resume"), "session_id") == "internal"


def test_description_rules():
    t = ToolSpec("t", "", (ParamSpec("ticket", "value returned by open_ticket"),
                           ParamSpec("who", "unique identifier of the agent"),
                           ParamSpec("id"), ParamSpec("note")), ())
    c = classify_params({ToolRef("e", "t"): t})
    assert [c.of(ToolRef("e", "t"), n) for n in ("ticket", "who", "id", "note")] == \
        ["internal", "internal", "internal", "external"]


def test_remote_classifier():
    t = ToolSpec("t", "", (ParamSpec("x"),), ())
    c = classify_params({ToolRef("e", "t"): t}, "remote", classifier=lambda p: {"class": "internal"})
    assert c.of(ToolRef("e", "t"), "x") == "internal"
    with pytest.raises(RemoteError):
        classify_params({ToolRef("e", "t"): t}, "remote", classifier=lambda p: {"class": "maybe"})
    with pytest.raises(RemoteError):
        classify_params({ToolRef("e", "t"): t}, "remote", endpoint="http://127.0.0.1:9/x")


def test_classification_is_total(travel):
    tools = tools_by_ref([travel])
    c = classify_params(tools)
    assert len(c) == sum(len(t.inputs) for t in tools.values())


def test_is_valid_external(graph, classes):
    assert is_valid(graph, classes, ref("search_hotels"), _param(graph, "search_hotels", "city"), set())


def test_is_valid_produced_by_visited(graph, classes):
    p = _param(graph, "get_hotel_details", "hotel_id")
    assert is_valid(graph, classes, ref("get_hotel_details"), p, {ref("search_hotels")})


def test_is_valid_unproduced_internal(graph, classes):
    p = _param(graph, "cancel_booking", "booking_id")
    assert not is_valid(graph, classes, ref("cancel_booking"), p, set())


def test_is_valid_optional():
    t = ToolSpec("t", "", (ParamSpec("page_token", required=False),), ())
    g = DependencyGraph((ToolRef("e", "t"),), tools={ToolRef("e", "t"): t})
    c = classify_params(g.tools)
    assert is_valid(g, c, ToolRef("e", "t"), t.inputs[0], set())


def test_priors_of_cancel_booking(graph, classes):
    seen = Counter()
    for seed in range(200):
        cfg = SamplerConfig(n=3, override_p=0.0, seed=seed)
        visited = set()
        priors = sample_priors(graph, classes, visited, ref("cancel_booking"), 0, cfg, random.Random(seed))
        assert priors[-1] == ref("book_hotel")
        assert set(priors) == visited
        seen[tuple(r.tool for r in priors)] += 1
    assert set(seen) == {("search_hotels", "book_hotel"),
                         ("search_hotels", "get_hotel_details", "book_hotel")}


def test_priors_of_all_external_tool(graph, classes):
    cfg = SamplerConfig(n=1, override_p=0.0)
    assert sample_priors(graph, classes, set(), ref("get_weather"), 0, cfg, random.Random(0)) == []


def test_priors_at_depth_cap(graph, classes):
    cfg = SamplerConfig(n=1, d_max=3)
    assert sample_priors(graph, classes, set(), ref("cancel_booking"), 3, cfg, random.Random(0)) == []


def test_override_pulls_extra_priors(graph, classes):
    cfg = SamplerConfig(n=1, override_p=1.0)
    visited = {ref("search_hotels")}
    priors = sample_priors(graph, classes, visited, ref("get_hotel_details"), 0, cfg, random.Random(0))
    # hotel_id is already valid; with p = 1 it is resolved anyway but search_hotels is visited
    assert priors == []
    chain = topology_sample(graph, classes, SamplerConfig(n=2, override_p=1.0, seed=3), ref("book_hotel"))
    vias = {via for t in chain.trace for _, via in t.resolutions}
    assert "override" in vias


def test_fixture_chain_is_feasible(graph, classes):
    oracle = enumerate_feasible_chains(graph, classes, 6)
    for seed in range(50):
        cfg = SamplerConfig(n=3, seed=seed)
        chain = topology_sample(graph, classes, cfg, ref("cancel_booking"))
        assert 3 <= len(chain) <= 6
        assert chain.chain[-1] == ref("cancel_booking")
        if all(via != "override" for t in chain.trace for _, via in t.resolutions):
            assert chain.chain in oracle


def test_single_all_external_tool(graph, classes):
    chain = topology_sample(graph, classes, SamplerConfig(n=1), ref("get_weather"))
    assert chain.tools == ["get_weather"]


def test_two_isolated_external_tools():
    a = ToolSpec("a", "", (ParamSpec("city"),), ())
    b = ToolSpec("b", "", (ParamSpec("date"),), ())
    tools = {ToolRef("e", "a"): a, ToolRef("e", "b"): b}
    g = semantic_match(tools, 0.6)
    c = classify_params(tools)
    orders = set()
    for seed in range(20):
        chain = topology_sample(g, c, SamplerConfig(n=2, seed=seed))
        assert sorted(chain.tools) == ["a", "b"]
        assert chain.restarts == 1
        orders.add(tuple(chain.tools))
    assert orders == {("a", "b"), ("b", "a")}


def test_small_graph_is_exhausted(graph, classes):
    chain = topology_sample(graph, classes, SamplerConfig(n=20, seed=1))
    assert len(chain) == 6 and chain.exhausted


def test_empty_graph_rejected():
    with pytest.raises(ValueError):
        topology_sample(DependencyGraph(), ParamClass(), SamplerConfig(n=1))


def test_config_validation():
    for bad in (dict(n=0), dict(d_max=-1), dict(override_p=1.5), dict(branch_max=0)):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)


def test_oracle_examples(graph, classes):
    two = enumerate_feasible_chains(graph, classes, 2)
    assert (ref("search_hotels"), ref("book_hotel")) in two
    assert (ref("book_hotel"), ref("cancel_booking")) not in two
    single = ToolSpec("w", "", (ParamSpec("city"),), ())
    g1 = DependencyGraph((ToolRef("e", "w"),), tools={ToolRef("e", "w"): single})
    assert enumerate_feasible_chains(g1, classify_params(g1.tools), 3) == {(ToolRef("e", "w"),)}
    assert enumerate_feasible_chains(DependencyGraph(), ParamClass(), 3) == set()


def test_oracle_refuses_large_graphs():
    g = random_graph(random.Random(0), 9)
    with pytest.raises(TooLargeError):
        enumerate_feasible_chains(g, classify_params(g.tools), 3)


def test_chain_file_round_trip_and_determinism(graph, classes):
    cfg = SamplerConfig(n=4, seed=11)
    a = save_chain(topology_sample(graph, classes, cfg), cfg, "g.json")
    b = save_chain(topology_sample(graph, classes, cfg), cfg, "g.json")
    assert a == b
    chain, raw = load_chain(a)
    assert raw["config"]["seed"] == 11
    assert save_chain(chain, cfg, "g.json") == a


def test_zero_override_never_traces_override(graph, classes):
    for seed in range(100):
        cfg = SamplerConfig(n=4, override_p=0.0, seed=seed)
        doc = json.loads(save_chain(topology_sample(graph, classes, cfg), cfg))
        assert all(r["via"] != "override" for t in doc["trace"] for r in t["resolutions"])


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 14), st.integers(1, 8), st.integers(1, 3))
def test_length_closure_depth(seed, size, n, branch):
    rng = random.Random(seed)
    g = random_graph(rng, size)
    c = classify_params(g.tools)
    cfg = SamplerConfig(n=n, override_p=0.0, branch_max=branch, seed=seed)
    chain = topology_sample(g, c, cfg)
    assert check_closure(g, c, chain.chain)
    assert len(set(chain.chain)) == len(chain.chain)
    if chain.exhausted:
        assert len(chain) <= len(g.nodes)
    else:
        assert n <= len(chain) <= n + cfg.d_max
    assert max((t.depth for t in chain.trace), default=0) <= cfg.d_max
