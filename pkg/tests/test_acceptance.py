"""Acceptance checks, one test per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary (see
conftest.py) so a plain ``pytest`` run shows the scoreboard.
"""

import copy
import json
import random
import time

import pytest

from conftest import DATA, random_graph
from envsynth.cli import main
from envsynth.core import ToolCall, TrajectoryRecord, canonicalize_state, load_environment, load_json
from envsynth.errors import BusinessError, ReplayError
from envsynth.reward import RewardConfig, combine, replay_trajectory, state_reward, traj_reward
from envsynth.runtime import Runtime
from envsynth.sampler import (SamplerConfig, check_closure, classify_params, enumerate_feasible_chains,
                              topology_sample)
from envsynth.toolgraph import build_graph
from envsynth.trajkit import filter_redundant
from envsynth.verifier import load_suite, validate_scenario, verify_environment

TRAVEL = DATA / "envs" / "travel.json"


@pytest.fixture(scope="module")
def closure_draws():
    """1,000 draws over 50 random graphs; shared by the closure and depth criteria."""
    rng = random.Random(2024)
    draws = []
    t0 = time.perf_counter()
    for g_i in range(50):
        g = random_graph(rng, rng.randint(2, 20), density=0.2)
        classes = classify_params(g.tools)
        for d in range(20):
            cfg = SamplerConfig(n=rng.randint(1, 10), override_p=0.0, branch_max=rng.randint(1, 3),
                                seed=g_i * 1000 + d)
            draws.append((g, classes, topology_sample(g, classes, cfg)))
    return draws, time.perf_counter() - t0


def test_criterion_01_dependency_closure(closure_draws):
    draws, elapsed = closure_draws
    assert len(draws) == 1000
    failures = sum(not check_closure(g, c, chain.chain) for g, c, chain in draws)
    assert failures == 0
    assert elapsed < 10.0


def test_criterion_02_oracle_containment():
    rng = random.Random(77)
    violations = 0
    for g_i in range(20):
        g = random_graph(rng, rng.randint(3, 6), density=0.2)
        classes = classify_params(g.tools)
        oracle = enumerate_feasible_chains(g, classes, len(g.nodes))
        for d in range(500):
            cfg = SamplerConfig(n=rng.randint(1, 6), override_p=0.0, branch_max=rng.randint(1, 3),
                                seed=g_i * 10000 + d)
            chain = topology_sample(g, classes, cfg).chain
            # a graph with no startable tool has no feasible chain at all; the
            # sampler must then return nothing, and otherwise a member
            if (chain in oracle) if oracle else (chain == ()):
                continue
            violations += 1
    assert violations == 0


def test_criterion_03_depth_bound(closure_draws):
    draws, _ = closure_draws
    deepest = max(t.depth for _, _, chain in draws for t in chain.trace)
    assert deepest <= 3


def test_criterion_04_determinism(tmp_path):
    env_dir = DATA / "envs"
    g1, g2 = tmp_path / "g1.json", tmp_path / "g2.json"
    assert main(["build-graph", "--env-dir", str(env_dir), "--provider", "lexical", "--out", str(g1)]) == 0
    assert main(["build-graph", "--env-dir", str(env_dir), "--provider", "lexical", "--out", str(g2)]) == 0
    assert g1.read_bytes() == g2.read_bytes()
    for seed in (0, 1, 99):
        outs = []
        for k in range(2):
            out = tmp_path / f"c{seed}_{k}.json"
            assert main(["sample", "--graph", str(g1), "--env-dir", str(env_dir), "--n", "4",
                         "--seed", str(seed), "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


def test_criterion_05_fixture_graph_exactness():
    golden = json.loads((DATA.parents[2] / "tests" / "golden" / "travel_edges.json").read_text())
    g = build_graph([load_environment(TRAVEL)], threshold=0.6)
    for kind in ("semantic", "refined"):
        got = sorted([s.tool, d.tool] for s, d in g.edge_set(kind))
        assert got == golden[kind]
    assert (len(golden["semantic"]), len(golden["refined"])) == (4, 5)


def test_criterion_06_reward_algebra():
    rng = random.Random(6)
    for _ in range(200):
        r_traj, r_state, p = rng.random(), rng.choice([0, 1]), rng.random()
        alpha, gamma = rng.random(), rng.uniform(0, 3)
        br = combine(r_traj, r_state, p, RewardConfig(alpha=alpha, gamma=gamma))
        assert br.r == alpha * r_traj + (1 - alpha) * r_state - gamma * p
        assert -gamma <= br.r <= 1
    # masking invariance on trajectories and on states
    scenario = load_json(DATA / "scenarios" / "travel_basic.json")
    tools = ["search_hotels", "get_weather", "book_hotel", "get_hotel_details"]
    for _ in range(100):
        gold = [ToolCall(rng.choice(tools), {"a": rng.randint(0, 2), "b": rng.randint(0, 2)},
                         masked_args=("b",)) for _ in range(rng.randint(0, 6))]
        pred = [ToolCall(rng.choice(tools), {"a": rng.randint(0, 2), "b": rng.randint(0, 2)})
                for _ in range(rng.randint(0, 6))]
        perturbed = [ToolCall(c.tool, {"a": c.arguments["a"], "b": rng.randint(3, 99)}) for c in pred]
        assert traj_reward(perturbed, gold) == traj_reward(pred, gold)
        cfg = RewardConfig(masked_state_paths=("current_time", "notes"))
        other = copy.deepcopy(scenario)
        other["current_time"] = f"20{rng.randint(10, 99)}-01-01T00:00:00"
        other["notes"] = [{"note_id": f"N{rng.randint(1, 9)}", "text": "x"}][: rng.randint(0, 1)]
        assert state_reward(other, scenario, cfg) == state_reward(scenario, scenario, cfg) == 1


SESSION_OPS = [("search_hotels", {"city": "Paris"}), ("search_hotels", {"city": "Rome"}),
               ("get_hotel_details", {"hotel_id": "H1"}), ("get_weather", {"city": "Rome"}),
               ("book_hotel", {"hotel_id": "H1", "guest_name": "Ann"}),
               ("book_hotel", {"hotel_id": "H2", "guest_name": "Bo"}),
               ("book_hotel", {"hotel_id": "H9", "guest_name": "Cy"}),
               ("cancel_booking", {"booking_id": "B9"}), ("cancel_booking", {"booking_id": "B1"}),
               ("cancel_booking", {"booking_id": "B2"}), ("delete_all_notes", {})]


def _apply(rt, cid, op):
    try:
        return rt.call_tool(cid, *op)
    except BusinessError as exc:
        return ("error", exc.code)


def test_criterion_07_session_isolation():
    env = load_environment(TRAVEL)
    scenario = load_json(DATA / "scenarios" / "travel_basic.json")
    rng = random.Random(7)
    for _ in range(100):
        plans = {c: [rng.choice(SESSION_OPS) for _ in range(10)] for c in ("a", "b")}
        order = ["a"] * 10 + ["b"] * 10
        rng.shuffle(order)
        shared = Runtime([env])
        for c in plans:
            shared.create_session(c, "travel")
            shared.load_scenario(c, scenario)
        pos = {"a": 0, "b": 0}
        got = {"a": [], "b": []}
        for c in order:
            got[c].append(_apply(shared, c, plans[c][pos[c]]))
            pos[c] += 1
        for c, ops in plans.items():
            solo = Runtime([env])
            solo.create_session("solo", "travel")
            solo.load_scenario("solo", scenario)
            want = [_apply(solo, "solo", op) for op in ops]
            assert got[c] == want
            assert canonicalize_state(shared.save_scenario(c)) == canonicalize_state(solo.save_scenario("solo"))


def test_criterion_08_verifier_detection():
    suite = load_suite(DATA / "suites" / "travel_suite.json")
    expected = {"travel_bug_interface": {"C1"}, "travel_bug_nopersist": {"C4"}, "travel_bug_shape": {"C3"}}
    layer_of = {"travel_bug_nopersist": 3, "travel_bug_shape": 2}
    for name, failing in expected.items():
        env = load_environment(DATA / "bugs" / f"{name}.json")
        report = verify_environment(env, suite, Runtime([env]))
        assert {k for k, v in report.criteria.items() if not v["passed"]} == failing
        if name in layer_of:
            layers = {e["layer"] for s in report.scenarios for e in s.errors if not e["expected_error"]}
            assert layers == {layer_of[name]}
    assert main(["validate", "--env", str(TRAVEL), "--suite", str(DATA / "suites" / "travel_suite.json")]) == 0


class LaxRuntime(Runtime):
    """A faulty host that stores whatever it is given without checking it."""

    def load_scenario(self, client_id, scenario):
        session = self._session(client_id)
        with session.lock:
            session.state = copy.deepcopy(scenario)
            session.loaded = True
            session.counters = {}
            session.call_log = []


def test_criterion_09_expected_behavior_semantics():
    env = load_environment(TRAVEL)
    suite = load_suite(DATA / "suites" / "travel_boundary.json")
    assert [s.expected_behavior for s in suite].count("validation_error") == 2
    assert [s.complexity_level for s in suite] == ["boundary"] * 4
    strict = [validate_scenario(env, s, Runtime([env])) for s in suite]
    assert all(r.passed for r in strict)
    assert all(r.errors[0]["expected_error"] for r, s in zip(strict, suite)
               if s.expected_behavior == "validation_error")
    lax = [validate_scenario(env, s, LaxRuntime([env])) for s in suite if s.expected_behavior == "validation_error"]
    assert [r.passed for r in lax] == [False, False]


READS = [("get_weather", {"city": "Paris"}), ("get_weather", {"city": "Rome"}),
         ("search_hotels", {"city": "Paris"}), ("search_hotels", {"city": "Rome"}),
         ("get_hotel_details", {"hotel_id": "H1"}), ("get_hotel_details", {"hotel_id": "H3"})]
WRITES = [("book_hotel", {"hotel_id": "H1", "guest_name": "Ann"}),
          ("book_hotel", {"hotel_id": "H3", "guest_name": "Li"}),
          ("cancel_booking", {"booking_id": "B9"}), ("delete_all_notes", {})]


def test_criterion_10_filter_soundness():
    env = load_environment(TRAVEL)
    scenario = load_json(DATA / "scenarios" / "travel_basic.json")
    rt = Runtime([env])
    rng = random.Random(10)
    done = 0
    while done < 50:
        ops = [rng.choice(READS + WRITES) for _ in range(rng.randint(1, 5))]
        base = TrajectoryRecord.from_calls("travel", [ToolCall(t, a) for t, a in ops])
        try:
            replay_trajectory(base, scenario, rt)
        except ReplayError:
            continue
        calls = list(base.tool_calls())
        read = ToolCall(*rng.choice(READS))
        at = rng.randint(0, len(calls))
        calls[at:at] = [read, read]
        traj = TrajectoryRecord.from_calls("travel", calls)
        out = filter_redundant(traj, scenario, rt)
        assert len(out.tool_calls()) <= len(traj.tool_calls()) - 1
        assert canonicalize_state(replay_trajectory(out, scenario, rt)) == \
            canonicalize_state(replay_trajectory(traj, scenario, rt))
        done += 1
