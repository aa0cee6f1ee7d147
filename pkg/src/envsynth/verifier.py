"""Layered environment validation.

Layer 1 loads the scenario (blocking), layer 2 exercises tools, layer 3 saves
the state and checks it against the original plus each case's declared
changes.  ``verify_environment`` rolls the per-scenario reports up into four
criteria: interface consistency (C1), every tool executes (C2), results match
expectations (C3), and state transitions are correct (C4).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from .core import (MISSING, EnvironmentSpec, ToolSpec, get_path, load_json, normalize_state, parse_path,
                   validate_state)
from .errors import EnvSynthError, ParseError, SpecError
from .runtime import Runtime, result_conforms
from .server import LocalClient, RemoteCallError

COMPLEXITY_LEVELS = ("simple", "medium", "complex", "boundary")
EXPECTED_BEHAVIORS = ("pass", "validation_error")
ROOT_CAUSES = ("schema", "state", "logic", "interface", "scenario")
# codes meaning the call never reached the tool body
PLUMBING_CODES = {1001, 1008, -32700, -32600, -32601, -32603}


class EmptySuite(EnvSynthError):
    pass


@dataclass(frozen=True)
class ToolCase:
    tool: str
    arguments: Dict[str, Any] = field(default_factory=dict)
    expect: str = "ok"
    expect_code: Optional[int] = None
    expect_result: Any = MISSING
    expect_state: Dict[str, Any] = field(default_factory=dict)
    changed_paths: Tuple[str, ...] = ()

    def declared_changes(self) -> List[str]:
        return list(self.changed_paths) + list(self.expect_state)


@dataclass(frozen=True)
class TestScenario:
    __test__ = False  # not a pytest class

    scenario_id: str
    scenario_data: Any
    complexity_level: str = "simple"
    description: str = ""
    expected_behavior: str = "pass"
    tool_cases: Optional[Tuple[ToolCase, ...]] = None


def _case_from_dict(raw: Any, path: str) -> ToolCase:
    if not isinstance(raw, dict) or not isinstance(raw.get("tool"), str):
        raise SpecError(path, "tool case needs a tool name")
    expect = raw.get("expect", "ok")
    if expect not in ("ok", "error"):
        raise SpecError(f"{path}.expect", "must be ok or error")
    code = raw.get("expect_code")
    if code is not None and expect != "error":
        raise SpecError(f"{path}.expect_code", "only allowed when expect = error")
    state = raw.get("expect_state") or {}
    changed = tuple(raw.get("changed_paths") or ())
    for p in list(state) + list(changed):
        parse_path(p)
    return ToolCase(raw["tool"], dict(raw.get("arguments") or {}), expect, code,
                    raw.get("expect_result", MISSING), dict(state), changed)


def suite_from_dict(raw: Any) -> List[TestScenario]:
    if not isinstance(raw, dict) or not isinstance(raw.get("scenarios"), list):
        raise ParseError("suite file must be {scenarios: [...]}")
    out, seen = [], set()
    for i, s in enumerate(raw["scenarios"]):
        path = f"scenarios[{i}]"
        if not isinstance(s, dict) or not isinstance(s.get("scenario_id"), str):
            raise SpecError(path, "scenario needs a scenario_id")
        sid = s["scenario_id"]
        if sid in seen:
            raise SpecError(f"{path}.scenario_id", f"duplicate scenario id {sid!r}")
        seen.add(sid)
        level = s.get("complexity_level", "simple")
        if level not in COMPLEXITY_LEVELS:
            raise SpecError(f"{path}.complexity_level", f"must be one of {COMPLEXITY_LEVELS}")
        behavior = s.get("expected_behavior", "pass")
        if behavior not in EXPECTED_BEHAVIORS:
            raise SpecError(f"{path}.expected_behavior", f"must be one of {EXPECTED_BEHAVIORS}")
        cases = s.get("tool_cases")
        if cases is not None:
            cases = tuple(_case_from_dict(c, f"{path}.tool_cases[{j}]") for j, c in enumerate(cases))
        out.append(TestScenario(sid, s.get("scenario_data"), level, str(s.get("description", "")),
                                behavior, cases))
    return out


def load_suite(path) -> List[TestScenario]:
    return suite_from_dict(load_json(path))


# ---------------------------------------------------------------------------
# reports


@dataclass
class LayeredReport:
    scenario_id: str
    client_id: str
    expected_behavior: str
    passed: bool = False
    layer1: Dict[str, Any] = field(default_factory=dict)
    layer2: List[Dict[str, Any]] = field(default_factory=list)
    layer3: Optional[Dict[str, Any]] = None
    errors: List[Dict[str, Any]] = field(default_factory=list)

    def error(self, layer: int, error_type: str, location: str, details: str, expected_vs_actual: str,
              root_cause: str, expected_error: bool = False) -> None:
        assert root_cause in ROOT_CAUSES
        self.errors.append({"layer": layer, "error_type": error_type, "error_location": location,
                            "error_details": details, "expected_vs_actual": expected_vs_actual,
                            "root_cause_tag": root_cause, "expected_error": expected_error})

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "client_id": self.client_id,
            "expected_behavior": self.expected_behavior,
            "passed": self.passed,
            "load_scenario_result": self.layer1,
            "tool_execution_results": self.layer2,
            "save_scenario_result": self.layer3 if self.layer3 is not None else {"skipped": True},
            "errors": self.errors,
        }


@dataclass
class EnvReport:
    environment: str
    criteria: Dict[str, Dict[str, Any]]
    scenarios: List[LayeredReport]

    @property
    def verdict(self) -> bool:
        return all(c["passed"] for c in self.criteria.values())

    def to_dict(self) -> dict:
        return {"environment": self.environment, "verdict": "pass" if self.verdict else "fail",
                "criteria": self.criteria, "scenarios": [s.to_dict() for s in self.scenarios]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------------------
# layer helpers


def _client(target):
    return LocalClient(target) if isinstance(target, Runtime) else target


def smoke_arguments(tool: ToolSpec, env: EnvironmentSpec, state: Any) -> Dict[str, Any]:
    """Minimal arguments drawn from the scenario where the names line up."""
    args: Dict[str, Any] = {}
    state = state if isinstance(state, dict) else {}
    for p in tool.inputs:
        if p.optional:
            continue
        value = MISSING
        for coll in env.schema.collections:
            if coll.key == p.name and state.get(coll.name):
                keys = sorted((r.get(coll.key) for r in state[coll.name] if isinstance(r, dict)), key=str)
                value = keys[0]
                break
        if value is MISSING:
            for coll in env.schema.collections:
                recs = [r for r in state.get(coll.name) or [] if isinstance(r, dict) and p.name in r]
                if coll.field(p.name) is not None and recs:
                    value = recs[0][p.name]
                    break
        if value is MISSING and env.schema.scalar(p.name) is not None and p.name in state:
            value = state[p.name]
        if value is MISSING:
            value = _placeholder(p)
        args[p.name] = value
    return args


def _placeholder(p) -> Any:
    if p.value_kind in ("integer", "number"):
        lo = p.min if p.min is not None else 0
        return int(lo) if p.value_kind == "integer" else float(lo)
    return {"string": "Test", "boolean": False, "list": [], "record": {}}[p.value_kind]


def _code_cause(code: int) -> str:
    if code in (1001, 1002) or code in PLUMBING_CODES:
        return "interface"
    if code == 1004:
        return "schema"
    return "logic"


def _describe(value: Any) -> str:
    return "<absent>" if value is MISSING else json.dumps(value, sort_keys=True)


def _run_layer2(report: LayeredReport, env: EnvironmentSpec, client, cid: str,
                cases: Sequence[ToolCase]) -> None:
    for idx, case in enumerate(cases):
        entry: Dict[str, Any] = {"case": idx, "tool": case.tool, "arguments": case.arguments,
                                 "expect": case.expect}
        try:
            result = client.request("tools/call", {"name": case.tool, "arguments": case.arguments}, cid)
            outcome, code = "ok", None
            entry["result"] = result
        except RemoteCallError as exc:
            outcome, code, result = "error", exc.code, None
            entry["error"] = {"code": exc.code, "message": exc.message}
        entry["outcome"] = outcome
        entry["executed"] = code not in PLUMBING_CODES
        where = f"{case.tool} (case {idx})"
        ok = True
        if case.expect == "ok":
            if outcome == "error":
                ok = False
                report.error(2, "Tool execution error", where, entry["error"]["message"],
                             f"expected success, got error {code}", _code_cause(code))
            else:
                spec = env.tool(case.tool)
                problems = result_conforms(spec, result) if spec is not None else []
                if problems:
                    ok = False
                    report.error(2, "Schema mismatch", where, "; ".join(problems),
                                 "result conforming to declared outputs vs "
                                 + json.dumps(result, sort_keys=True), "logic")
                elif case.expect_result is not MISSING and result != case.expect_result:
                    ok = False
                    report.error(2, "Unexpected result", where, "result differs from expectation",
                                 f"{_describe(case.expect_result)} vs {_describe(result)}", "logic")
        else:
            if outcome == "ok":
                ok = False
                report.error(2, "Unexpected success", where, "tool succeeded when an error was expected",
                             f"error {case.expect_code} vs success" if case.expect_code else "error vs success",
                             "logic")
            elif case.expect_code is not None and code != case.expect_code:
                ok = False
                report.error(2, "Wrong error code", where, entry["error"]["message"],
                             f"{case.expect_code} vs {code}", _code_cause(code))
        entry["passed"] = ok
        report.layer2.append(entry)


def _run_layer3(report: LayeredReport, env: EnvironmentSpec, client, cid: str, original: Any,
                cases: Optional[Sequence[ToolCase]]) -> None:
    try:
        saved = client.request("save_scenario", {}, cid)
    except RemoteCallError as exc:
        report.layer3 = {"success": False, "consistency": False, "error": exc.message}
        report.error(3, "State inconsistency", "save_scenario", exc.message, "snapshot vs error", "state")
        return
    layer3: Dict[str, Any] = {"success": True, "consistency": True}
    schema_check = validate_state(saved, env.schema)
    if not schema_check.ok:
        layer3["consistency"] = False
        report.error(3, "Schema mismatch", "save_scenario",
                     "; ".join(f"{v.path} ({v.rule})" for v in schema_check.violations),
                     "saved state valid vs invalid", "schema")
    if cases is None:
        layer3["mode"] = "schema-only"
    else:
        layer3["mode"] = "declared-changes"
        ok_cases = [c for c in cases if c.expect == "ok"]
        changed = sorted({p for c in ok_cases for p in c.declared_changes()})
        before = normalize_state(original, changed, env.schema)
        after = normalize_state(saved, changed, env.schema)
        if before != after:
            layer3["consistency"] = False
            keys = sorted(k for k in set(before) | set(after) if before.get(k) != after.get(k))
            report.error(3, "State inconsistency", "save_scenario",
                         f"undeclared changes under {keys}", "unchanged vs changed", "state")
        for c in ok_cases:
            for path, want in c.expect_state.items():
                got = get_path(saved, path, env.schema)
                want = MISSING if want is None else want
                if got != want:
                    layer3["consistency"] = False
                    report.error(3, "State inconsistency", f"{c.tool} -> {path}",
                                 "saved state does not reflect the tool's effect",
                                 f"{_describe(want)} vs {_describe(got)}", "state")
    report.layer3 = layer3


def validate_scenario(env: EnvironmentSpec, scenario: TestScenario, target, run_id: str = "r1") -> LayeredReport:
    """Run the three layers for one scenario on a fresh session."""
    client = _client(target)
    cid = f"{env.name}-{run_id}_{scenario.scenario_id}"
    report = LayeredReport(scenario.scenario_id, cid, scenario.expected_behavior)
    try:
        client.request("session/create", {"env": env.name}, cid)
    except RemoteCallError as exc:
        report.layer1 = {"success": False, "error": exc.message}
        report.error(1, "CRITICAL", "session/create", exc.message, "session vs error", "interface")
        return report
    try:
        expect_reject = scenario.expected_behavior == "validation_error"
        try:
            client.request("load_scenario", {"scenario": scenario.scenario_data}, cid)
            loaded, load_err = True, None
        except RemoteCallError as exc:
            loaded, load_err = False, exc
        if not loaded:
            if expect_reject and load_err.code == 1004:
                report.layer1 = {"success": False, "error": load_err.message, "expected_error": True}
                report.error(1, "Expected validation error", "load_scenario", load_err.message,
                             "rejection vs rejection", "scenario", expected_error=True)
                report.passed = True
                return report
            report.layer1 = {"success": False, "error": load_err.message, "expected_error": False}
            report.error(1, "CRITICAL", "load_scenario", load_err.message,
                         f"{'validation error' if expect_reject else 'success'} vs error {load_err.code}",
                         "scenario" if load_err.code == 1004 else "interface")
            return report
        report.layer1 = {"success": True, "expected_error": False}
        if expect_reject:
            report.error(1, "Unexpected success", "load_scenario",
                         "Tool succeeded when validation error was expected",
                         "validation error vs success", "schema")
        if scenario.tool_cases is not None:
            cases = list(scenario.tool_cases)
        else:
            cases = [ToolCase(t.name, smoke_arguments(t, env, scenario.scenario_data))
                     for t in env.tools if t.side == "assistant"]
        _run_layer2(report, env, client, cid, cases)
        _run_layer3(report, env, client, cid, scenario.scenario_data, scenario.tool_cases)
        report.passed = (not expect_reject and all(e["passed"] for e in report.layer2)
                         and bool(report.layer3 and report.layer3["consistency"]))
        return report
    finally:
        try:
            client.request("session/destroy", {}, cid)
        except RemoteCallError:
            pass


def check_interface(env: EnvironmentSpec, served: Sequence[dict]) -> List[str]:
    """Differences between the metadata interface and the served tool list."""
    by_name = {t.get("name"): t for t in served}
    problems = []
    for decl in env.declared_interface():
        tool = by_name.get(decl.name)
        if tool is None:
            problems.append(f"{decl.name}: declared in metadata but not served")
            continue
        for side, names in (("inputs", decl.inputs), ("outputs", decl.outputs)):
            got = {p.get("name") for p in tool.get(side) or []}
            if got != set(names):
                problems.append(f"{decl.name}.{side}: metadata {sorted(names)} vs served {sorted(got)}")
    return problems


def verify_environment(env: EnvironmentSpec, suite: Iterable[TestScenario], target,
                       run_id: str = "r1") -> EnvReport:
    suite = sorted(suite, key=lambda s: s.scenario_id)
    if not suite:
        raise EmptySuite("suite has no scenarios")
    client = _client(target)
    try:
        served = client.request("tools/list", {"env": env.name})
    except RemoteCallError as exc:
        served, c1 = [], [f"tools/list failed: {exc.message}"]
    else:
        c1 = check_interface(env, served)
    reports = [validate_scenario(env, s, client, run_id) for s in suite]

    executed = {e["tool"] for r in reports for e in r.layer2 if e["executed"]}
    assistant = sorted(t["name"] for t in served if t.get("side", "assistant") == "assistant")
    never = [t for t in assistant if t not in executed]

    c3 = [f"{r.scenario_id}: {e['error_type']} at {e['error_location']}"
          for r in reports for e in r.errors if e["layer"] in (1, 2) and not e["expected_error"]]
    c4 = [f"{r.scenario_id}: {e['error_type']} at {e['error_location']}"
          for r in reports for e in r.errors if e["layer"] == 3]

    criteria = {
        "C1": {"name": "interface consistency", "passed": not c1, "details": c1},
        "C2": {"name": "tools execute", "passed": not never,
               "details": [f"{t}: never executed" for t in never]},
        "C3": {"name": "results match expectations", "passed": not c3, "details": c3},
        "C4": {"name": "state transitions", "passed": not c4, "details": c4},
    }
    return EnvReport(env.name, criteria, reports)
