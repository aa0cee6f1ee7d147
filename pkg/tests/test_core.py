import copy
import json
import random
import re

import pytest
from hypothesis import given, settings, strategies as st

from envsynth.core import (ISO_8601, MISSING, canonicalize_state, get_path, parse_environment,
                           parse_trajectory, serialize_environment, serialize_trajectory, validate_state)
from envsynth.errors import ParseError, PathError, SpecError


def test_travel_fixture_has_six_tools(travel):
    assert len(travel.tools) == 6
    assert travel.tool_names == ["search_hotels", "get_hotel_details", "book_hotel",
                                 "cancel_booking", "get_weather", "delete_all_notes"]


def test_duplicate_tool_name_reports_path(data_dir):
    raw = json.loads((data_dir / "envs" / "travel.json").read_text())
    raw["tools"][1]["name"] = raw["tools"][0]["name"]
    with pytest.raises(SpecError) as err:
        parse_environment(json.dumps(raw))
    assert err.value.path == "tools[1].name"


def test_empty_tool_list_is_valid():
    spec = parse_environment(json.dumps({"name": "blank", "tools": []}))
    assert spec.tools == ()


def test_malformed_text_is_parse_error():
    with pytest.raises(ParseError):
        parse_environment("{not json")


def test_default_must_conform():
    raw = {"name": "e", "executor_mode": "external", "tools": [
        {"name": "t", "inputs": [{"name": "limit", "value_kind": "integer", "default": "ten"}], "outputs": []}]}
    with pytest.raises(SpecError):
        parse_environment(json.dumps(raw))


def test_pattern_only_on_strings():
    raw = {"name": "e", "executor_mode": "external", "tools": [
        {"name": "t", "inputs": [{"name": "n", "value_kind": "integer", "pattern": "[0-9]+"}], "outputs": []}]}
    with pytest.raises(SpecError):
        parse_environment(json.dumps(raw))


def test_builtin_assistant_tool_needs_effect():
    raw = {"name": "e", "tools": [{"name": "t", "inputs": [], "outputs": []}]}
    with pytest.raises(SpecError):
        parse_environment(json.dumps(raw))


def test_round_trip(travel):
    assert parse_environment(serialize_environment(travel)) == travel


def test_valid_clock_has_no_violations(travel, scenario):
    assert scenario["current_time"] == "2024-05-01T09:00:00"
    assert validate_state(scenario, travel.schema).violations == ()


def test_bad_clock_is_single_pattern_violation(travel, scenario):
    scenario["current_time"] = "9am"
    report = validate_state(scenario, travel.schema)
    assert [(v.path, v.rule) for v in report.violations] == [("current_time", "pattern")]


def test_duplicate_hotel_key(travel, scenario):
    scenario["hotels"].append(dict(scenario["hotels"][0], name="Copy"))
    report = validate_state(scenario, travel.schema)
    assert report.rules() == ["duplicate-key"]


def test_unknown_field_is_violation(travel, scenario):
    scenario["hotels"][0]["stars"] = 4
    scenario["mood"] = "calm"
    assert sorted(validate_state(scenario, travel.schema).rules()) == ["unknown-field", "unknown-field"]


def test_bounds_violation(travel, scenario):
    scenario["hotels"][1]["price_per_night"] = -1
    report = validate_state(scenario, travel.schema)
    assert [(v.path, v.rule) for v in report.violations] == [("hotels[1].price_per_night", "bounds")]


# ---------------------------------------------------------------------------
# naive reference checker for the travel schema, written out field by field

TRAVEL_FIELDS = {
    "hotels": ("hotel_id", {"hotel_id": ("str", r"H[0-9]+"), "name": ("str", None), "city": ("str", None),
                            "price_per_night": ("num", None)}),
    "bookings": ("booking_id", {"booking_id": ("str", r"B[0-9]+"), "hotel_id": ("str", None),
                                "guest_name": ("str", r"[A-Za-z][A-Za-z .'-]*")}),
    "forecasts": ("city", {"city": ("str", None), "forecast": ("str", None)}),
    "notes": ("note_id", {"note_id": ("str", None), "text": ("str", None)}),
}


def naive_violations(state):
    found = []
    for k in state:
        if k not in TRAVEL_FIELDS and k != "current_time":
            found.append((k, "unknown-field"))
    t = state.get("current_time")
    if t is None:
        found.append(("current_time", "missing"))
    elif not isinstance(t, str):
        found.append(("current_time", "kind"))
    elif not re.fullmatch(ISO_8601, t):
        found.append(("current_time", "pattern"))
    for coll, (key, fields) in TRAVEL_FIELDS.items():
        if coll not in state:
            found.append((coll, "missing"))
            continue
        keys = []
        for i, rec in enumerate(state[coll]):
            for f in rec:
                if f not in fields:
                    found.append((f"{coll}[{i}].{f}", "unknown-field"))
            for f, (kind, pat) in fields.items():
                path = f"{coll}[{i}].{f}"
                if f not in rec:
                    found.append((path, "missing"))
                    continue
                v = rec[f]
                if kind == "str":
                    if not isinstance(v, str):
                        found.append((path, "kind"))
                    elif pat and not re.fullmatch(pat, v):
                        found.append((path, "pattern"))
                else:
                    if isinstance(v, bool) or not isinstance(v, (int, float)):
                        found.append((path, "kind"))
                    elif v < 0:
                        found.append((path, "bounds"))
            if key in rec:
                if rec[key] in keys:
                    found.append((f"{coll}[{i}].{key}", "duplicate-key"))
                keys.append(rec[key])
    return sorted(found)


def _mutate(state, rng):
    s = copy.deepcopy(state)
    for _ in range(rng.randint(0, 4)):
        choice = rng.randrange(7)
        coll = rng.choice(sorted(TRAVEL_FIELDS))
        recs = s.get(coll)
        if choice == 0:
            s["current_time"] = rng.choice(["9am", 5, "2024-01-01T00:00:00Z", "2024-13-01"])
        elif choice == 1 and recs:
            rec = rng.choice(recs)
            rec.pop(rng.choice(sorted(rec)), None)
        elif choice == 2 and recs:
            rng.choice(recs)["extra"] = 1
        elif choice == 3 and recs:
            recs.append(copy.deepcopy(recs[0]))
        elif choice == 4 and s.get("hotels"):
            rng.choice(s["hotels"])["price_per_night"] = rng.choice([-3, "cheap", True, 0, 10**6])
        elif choice == 5 and s.get("bookings"):
            rng.choice(s["bookings"])["booking_id"] = rng.choice(["X1", "B", "B12"])
        elif choice == 6:
            s.pop(coll, None)
    return s


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_validator_agrees_with_naive_checker(seed):
    from envsynth.core import load_environment, load_json
    from conftest import DATA
    env = load_environment(DATA / "envs" / "travel.json")
    base = load_json(DATA / "scenarios" / "travel_basic.json")
    state = _mutate(base, random.Random(seed))
    got = sorted((v.path, v.rule) for v in validate_state(state, env.schema).violations)
    assert got == naive_violations(state)


# ---------------------------------------------------------------------------
# canonical form


def test_key_order_does_not_matter(travel, scenario):
    shuffled = {k: scenario[k] for k in reversed(list(scenario))}
    shuffled["hotels"] = [dict(reversed(list(h.items()))) for h in reversed(scenario["hotels"])]
    assert canonicalize_state(shuffled, schema=travel.schema) == canonicalize_state(scenario, schema=travel.schema)


def test_excluded_path_is_ignored(travel, scenario):
    other = copy.deepcopy(scenario)
    other["current_time"] = "2030-01-01T00:00:00"
    assert canonicalize_state(other, ["current_time"]) == canonicalize_state(scenario, ["current_time"])


def test_scalar_difference_changes_bytes(scenario):
    other = copy.deepcopy(scenario)
    other["hotels"][0]["price_per_night"] = 121.0
    assert canonicalize_state(other) != canonicalize_state(scenario)


def test_malformed_excluded_path():
    with pytest.raises(PathError):
        canonicalize_state({}, ["a..b"])


def test_floats_use_shortest_round_trip():
    assert canonicalize_state({"x": 0.1 + 0.2, "y": 1e21}) == b'{"x":0.30000000000000004,"y":1e+21}'


def test_record_addressed_by_key(travel, scenario):
    assert get_path(scenario, "hotels.H2.price_per_night", travel.schema) == 95.5
    assert get_path(scenario, "bookings.B1", travel.schema) is MISSING
    assert canonicalize_state(scenario, ["hotels.H1"], travel.schema) == \
        canonicalize_state({**scenario, "hotels": scenario["hotels"][1:]}, (), travel.schema)


json_leaf = st.one_of(st.integers(-5, 5), st.text(max_size=3), st.booleans(),
                      st.floats(allow_nan=False, allow_infinity=False))
records = st.lists(st.dictionaries(st.sampled_from("abc"), json_leaf, min_size=1), max_size=4)
states = st.dictionaries(st.sampled_from(["p", "q", "r"]), st.one_of(json_leaf, records), max_size=3)


@settings(max_examples=200, deadline=None)
@given(states, st.randoms(use_true_random=False))
def test_permutation_invariance(state, rnd):
    perm = {}
    for k in rnd.sample(list(state), len(state)):
        v = state[k]
        if isinstance(v, list):
            v = [dict(rnd.sample(list(r.items()), len(r))) for r in rnd.sample(v, len(v))]
        perm[k] = v
    assert canonicalize_state(perm) == canonicalize_state(state)


@settings(max_examples=200, deadline=None)
@given(states, states)
def test_equal_bytes_iff_equal_after_normalization(a, b):
    def norm(s):
        return json.dumps({k: sorted(json.dumps(r, sort_keys=True) for r in v) if isinstance(v, list) else v
                           for k, v in s.items()}, sort_keys=True)
    assert (canonicalize_state(a) == canonicalize_state(b)) == (norm(a) == norm(b))


# ---------------------------------------------------------------------------
# trajectories


def test_trajectory_round_trip(data_dir, travel):
    text = (data_dir / "trajectories" / "travel_gold.json").read_text()
    traj = parse_trajectory(text, travel)
    assert [c.tool for c in traj.tool_calls()] == ["search_hotels", "book_hotel"]
    assert parse_trajectory(serialize_trajectory(traj), travel) == traj


def test_masked_args_must_exist():
    doc = {"environment": "travel", "turns": [{"steps": [
        {"kind": "tool_call", "tool": "get_weather", "arguments": {"city": "Rome"}, "masked_args": ["limit"]}]}]}
    with pytest.raises(SpecError):
        parse_trajectory(json.dumps(doc))


def test_trajectory_unknown_tool(travel):
    doc = {"environment": "travel", "turns": [{"steps": [{"kind": "tool_call", "tool": "fly", "arguments": {}}]}]}
    with pytest.raises(SpecError):
        parse_trajectory(json.dumps(doc), travel)
