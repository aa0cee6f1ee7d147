import json
import random
from pathlib import Path

import pytest

from envsynth.core import EnvironmentSpec, ParamSpec, ToolSpec, load_environment, load_json
from envsynth.runtime import Runtime
from envsynth.toolgraph import DependencyGraph, Edge, ToolRef, semantic_match, tools_by_ref

DATA = Path(__file__).resolve().parents[1] / "src" / "envsynth" / "data"


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture
def travel():
    return load_environment(DATA / "envs" / "travel.json")


@pytest.fixture
def scenario():
    return load_json(DATA / "scenarios" / "travel_basic.json")


@pytest.fixture
def runtime(travel):
    return Runtime([travel])


def ref(tool, env="travel"):
    return ToolRef(env, tool)


# ---------------------------------------------------------------------------
# randomized tool sets for sampler properties

ID_NAMES = ["order_id", "user_id", "item_ids", "cart_token", "ticket_key", "room_id"]
EXTERNAL_NAMES = ["city", "date", "query", "amount"]


def random_env(rng: random.Random, n_tools: int, name: str = "rand") -> EnvironmentSpec:
    tools = []
    for i in range(n_tools):
        outs = rng.sample(ID_NAMES, rng.randint(0, 2))
        ins = [ParamSpec(p, "", "string", True) for p in rng.sample(ID_NAMES, rng.randint(0, 2))]
        if rng.random() < 0.5:
            ins.append(ParamSpec(rng.choice(EXTERNAL_NAMES), "", "string", True))
        if rng.random() < 0.2 and ins:
            p = ins[0]
            ins[0] = ParamSpec(p.name, p.description, p.value_kind, False)
        seen, uniq = set(), []
        for p in ins:
            if p.name not in seen:
                seen.add(p.name)
                uniq.append(p)
        tools.append(ToolSpec(f"t{i:02d}", "", tuple(uniq),
                              tuple(ParamSpec(o, "", "string", True) for o in outs)))
    return EnvironmentSpec(name, tools=tuple(tools), executor_mode="external")


def random_graph(rng: random.Random, n_tools: int, density: float = 0.2) -> DependencyGraph:
    """Semantic edges from the names, topped up with random refined edges to ~density."""
    env = random_env(rng, n_tools)
    tools = tools_by_ref([env])
    g = semantic_match(tools, 0.6)
    edges = list(g.edges)
    have = g.edge_set()
    pairs = [(a, b) for a in g.nodes for b in g.nodes if a != b and (a, b) not in have]
    target = int(round(density * n_tools * (n_tools - 1)))
    extra = max(0, target - len(edges))
    for a, b in rng.sample(pairs, min(extra, len(pairs))):
        edges.append(Edge(a, b, "refined"))
    return DependencyGraph(g.nodes, tuple(edges), g.threshold, g.provider, tools)


def dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


# ---------------------------------------------------------------------------
# acceptance scoreboard

def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            name = nodeid.split("::")[-1][len("test_criterion_"):]
            if rep.when == "call" or outcome != "passed":
                rows[name] = "PASS" if outcome == "passed" and rows.get(name) != "FAIL" else "FAIL"
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(rows):
        num, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {int(num):2d} {label.replace('_', ' '):<32} {rows[name]}")
