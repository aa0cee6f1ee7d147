"""Session-isolated executors for environments.

Each session owns a private copy of the scenario state, addressed by
``client_id``.  Builtin environments run their tools' declarative
``EffectSpec`` against that copy; external environments forward calls to an
executor adapter and apply the state delta it returns.
"""

from __future__ import annotations

import copy
import json
import logging
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Tuple

from .core import (EffectSpec, EnvironmentSpec, ScenarioSchema, ToolSpec, Violation, kind_of,
                   source_kind, validate_state)
from .errors import (BusinessError, DuplicateSession, ExecutorError, InvalidArgs, NoSession,
                     NotLoaded, RuntimeToolError, SchemaViolation, UnknownEnvironment, UnknownTool)

log = logging.getLogger(__name__)

# (tool, arguments, state) -> (result, state delta); delta maps top-level state keys to new values
Executor = Callable[[ToolSpec, Mapping[str, Any], Mapping[str, Any]], Tuple[Any, Mapping[str, Any]]]


@dataclass
class Session:
    client_id: str
    env: EnvironmentSpec
    state: Optional[Dict[str, Any]] = None
    loaded: bool = False
    call_log: List[Tuple[str, Dict[str, Any], str]] = field(default_factory=list)
    counters: Dict[str, int] = field(default_factory=dict)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)


def _copy(value: Any) -> Any:
    return copy.deepcopy(value)


def check_args(tool: ToolSpec, args: Any) -> None:
    """Presence and kind checks on call arguments; raises InvalidArgs."""
    if not isinstance(args, dict):
        raise InvalidArgs("arguments must be an object")
    problems: List[Violation] = []
    declared = {p.name for p in tool.inputs}
    for name in args:
        if name not in declared:
            problems.append(Violation(name, "unknown-field", f"{tool.name} takes no argument {name!r}"))
    for param in tool.inputs:
        value = args.get(param.name)
        if value is None:
            if param.required:
                problems.append(Violation(param.name, "missing", "required argument absent"))
            continue
        problems.extend(param.check(value, param.name))
    if problems:
        raise InvalidArgs(f"invalid arguments for {tool.name}: "
                          + "; ".join(f"{v.path} ({v.rule})" for v in problems),
                          data=[v.to_dict() for v in problems])


def _arg(tool: ToolSpec, args: Mapping[str, Any], name: str) -> Any:
    if args.get(name) is not None:
        return args[name]
    param = tool.input(name)
    if param is not None and param.has_default:
        return param.default
    return None


def _compare(left: Any, cmp: str, right: Any) -> bool:
    try:
        if cmp == "eq":
            return left == right
        if cmp == "ne":
            return left != right
        if cmp == "lt":
            return left < right
        if cmp == "le":
            return left <= right
        if cmp == "gt":
            return left > right
        if cmp == "ge":
            return left >= right
        if cmp == "contains":
            return right in left
        if cmp == "in":
            return left in right
    except TypeError:
        return False
    raise ValueError(cmp)


class _EffectRun:
    """One execution of an effect against a (private, mutable) state copy."""

    def __init__(self, tool: ToolSpec, schema: ScenarioSchema, state: Dict[str, Any],
                 args: Mapping[str, Any], counters: Dict[str, int]):
        self.tool = tool
        self.effect: EffectSpec = tool.effect  # type: ignore[assignment]
        self.schema = schema
        self.state = state
        self.args = args
        self.counters = counters

    def _value(self, src: Any, coll_name: Optional[str] = None) -> Tuple[bool, Any]:
        kind, operand = source_kind(src)
        if kind == "literal":
            return True, operand
        if kind == "arg":
            value = _arg(self.tool, self.args, operand)
            return value is not None, value
        if kind == "state":
            return True, self.state.get(operand)
        if kind == "counter":
            key = self.schema.key_field(coll_name) if coll_name else None
            taken = {r.get(key) for r in self.state.get(coll_name, [])} if key else set()
            n = self.counters.get(operand, 0)
            while True:
                n += 1
                candidate = f"{operand}{n}"
                if candidate not in taken:
                    break
            self.counters[operand] = n
            return True, candidate
        raise ValueError(f"{kind} is not a value source")

    def _project(self, records: List[dict], single: bool, key: Optional[str]) -> Dict[str, Any]:
        out = {}
        for name, src in self.effect.returns.items():
            kind, operand = source_kind(src)
            if kind in ("literal", "arg", "state"):
                out[name] = self._value(src)[1]
            elif kind == "key":
                keys = [r.get(key) for r in records]
                out[name] = keys[0] if single else keys
            elif kind == "field":
                vals = [r.get(operand) for r in records]
                out[name] = vals[0] if single else vals
            elif kind in ("record", "records"):
                out[name] = _copy(records[0]) if (single and kind == "record") else _copy(records)
            elif kind == "count":
                out[name] = len(records)
            else:
                raise ValueError(kind)
        return out

    def _find(self, records: List[dict], key: str, key_value: Any) -> Optional[int]:
        for i, rec in enumerate(records):
            if rec.get(key) == key_value:
                return i
        return None

    def run(self) -> Dict[str, Any]:
        eff = self.effect
        for cname, argname in eff.requires:
            ckey = self.schema.key_field(cname)
            value = _arg(self.tool, self.args, argname)
            if self._find(self.state.get(cname, []), ckey, value) is None:
                raise BusinessError(f"{cname} has no record {value!r}")
        if eff.op == "compute":
            for target, src in eff.set_fields.items():
                present, value = self._value(src)
                if present:
                    self.state[target] = value
            return self._project([], True, None)

        coll = self.schema.collection(eff.collection)  # validated at parse time
        records = self.state.setdefault(coll.name, [])
        key = coll.key
        ordered = sorted(records, key=lambda r: json.dumps(r.get(key), sort_keys=True))

        if eff.op in ("list", "filter") or (eff.op == "delete" and eff.key_from is None):
            matched = [r for r in ordered if self._matches(r)]
            if eff.op == "delete":
                gone = {id(r) for r in matched}
                self.state[coll.name] = [r for r in records if id(r) not in gone]
            return self._project(matched, False, key)

        if eff.op == "create":
            rec: Dict[str, Any] = {}
            for fspec in coll.fields:
                if fspec.has_default and fspec.default is not None:
                    rec[fspec.name] = _copy(fspec.default)
            for target, src in eff.set_fields.items():
                present, value = self._value(src, coll.name)
                if present:
                    rec[target] = value
            if self._find(records, key, rec.get(key)) is not None:
                raise BusinessError(f"{coll.name} already has a record {rec.get(key)!r}")
            records.append(rec)
            return self._project([rec], True, key)

        key_value = _arg(self.tool, self.args, eff.key_from)
        idx = self._find(records, key, key_value)
        if idx is None:
            raise BusinessError(f"{coll.name} has no record {key_value!r}")
        rec = records[idx]
        if eff.op == "update":
            for target, src in eff.set_fields.items():
                present, value = self._value(src, coll.name)
                if present:
                    rec[target] = value
        elif eff.op == "delete":
            del records[idx]
        return self._project([rec], True, key)

    def _matches(self, rec: Mapping[str, Any]) -> bool:
        for fname, cmp, argname in self.effect.where:
            value = _arg(self.tool, self.args, argname)
            if value is None:
                continue
            if not _compare(rec.get(fname), cmp, value):
                return False
        return True


def apply_effect(tool: ToolSpec, schema: ScenarioSchema, state: Dict[str, Any],
                 args: Mapping[str, Any], counters: Dict[str, int]) -> Dict[str, Any]:
    """Run ``tool``'s effect in place on ``state``; callers pass a disposable copy."""
    return _EffectRun(tool, schema, state, args, counters).run()


class SubprocessExecutor:
    """Executor adapter speaking line-delimited JSON with a child process.

    Request: ``{"tool", "arguments", "state"}``.  Response: ``{"result", "state_delta"}``
    or ``{"error": {"code", "message"}}``.
    """

    def __init__(self, command: List[str]):
        self.command = command
        self._proc: Optional[subprocess.Popen] = None
        self._lock = threading.Lock()

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                              text=True, encoding="utf-8")
            except OSError as exc:
                raise ExecutorError(f"cannot start executor: {exc}") from None
        return self._proc

    def __call__(self, tool, args, state):
        with self._lock:
            proc = self._ensure()
            line = json.dumps({"tool": tool.name, "arguments": dict(args), "state": state})
            try:
                proc.stdin.write(line + "\n")
                proc.stdin.flush()
                reply = proc.stdout.readline()
            except (OSError, ValueError) as exc:
                raise ExecutorError(f"executor pipe failed: {exc}") from None
        if not reply:
            raise ExecutorError("executor closed its output")
        try:
            msg = json.loads(reply)
        except json.JSONDecodeError:
            raise ExecutorError(f"executor sent malformed line {reply!r}") from None
        if "error" in msg:
            err = msg["error"] or {}
            code = err.get("code", BusinessError.code)
            cls = {c.code: c for c in (UnknownTool, InvalidArgs, BusinessError)}.get(code, BusinessError)
            raise cls(str(err.get("message", "executor error")))
        return msg.get("result"), msg.get("state_delta") or {}

    def close(self) -> None:
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None


class Runtime:
    """Registry of sessions over a fixed set of environments.

    The registry lock serializes create/destroy; each session has its own lock,
    so calls on distinct sessions can run in parallel.
    """

    def __init__(self, environments: Iterable[EnvironmentSpec],
                 executors: Optional[Mapping[str, Executor]] = None):
        self.environments: Dict[str, EnvironmentSpec] = {e.name: e for e in environments}
        self.executors = dict(executors or {})
        self._sessions: Dict[str, Session] = {}
        self._registry = threading.Lock()

    def environment(self, name: str) -> EnvironmentSpec:
        try:
            return self.environments[name]
        except KeyError:
            raise UnknownEnvironment(f"unknown environment {name!r}") from None

    def _session(self, client_id: str) -> Session:
        with self._registry:
            session = self._sessions.get(client_id)
        if session is None:
            raise NoSession(f"no session {client_id!r}")
        return session

    def has_session(self, client_id: str) -> bool:
        with self._registry:
            return client_id in self._sessions

    def create_session(self, client_id: str, env_name: str) -> Session:
        if not isinstance(client_id, str) or not client_id:
            raise InvalidArgs("client_id must be a non-empty string")
        env = self.environment(env_name)
        with self._registry:
            if client_id in self._sessions:
                raise DuplicateSession(f"session {client_id!r} already exists")
            session = Session(client_id, env)
            self._sessions[client_id] = session
        return session

    def destroy_session(self, client_id: str) -> None:
        with self._registry:
            if self._sessions.pop(client_id, None) is None:
                raise NoSession(f"no session {client_id!r}")

    def load_scenario(self, client_id: str, scenario: Any) -> None:
        session = self._session(client_id)
        report = validate_state(scenario, session.env.schema)
        if not report.ok:
            raise SchemaViolation("scenario violates schema: "
                                  + "; ".join(f"{v.path} ({v.rule})" for v in report.violations),
                                  data=[v.to_dict() for v in report.violations])
        with session.lock:
            session.state = _copy(scenario)
            session.loaded = True
            session.counters = {}
            session.call_log = []

    def save_scenario(self, client_id: str) -> Dict[str, Any]:
        session = self._session(client_id)
        with session.lock:
            if not session.loaded:
                raise NotLoaded(f"session {client_id!r} has no scenario loaded")
            return _copy(session.state)

    def list_tools(self, env_name: str) -> List[dict]:
        return [t.to_dict() for t in self.environment(env_name).tools]

    def call_tool(self, client_id: str, name: str, args: Optional[Mapping[str, Any]] = None) -> Any:
        session = self._session(client_id)
        args = {} if args is None else args
        with session.lock:
            if not session.loaded:
                raise NotLoaded(f"session {client_id!r} has no scenario loaded")
            tool = session.env.tool(name)
            try:
                if tool is None:
                    raise UnknownTool(f"{session.env.name} has no tool {name!r}")
                check_args(tool, args)
                result = self._execute(session, tool, args)
            except RuntimeToolError as exc:
                session.call_log.append((name, _copy(dict(args)) if isinstance(args, dict) else {},
                                         str(exc.code)))
                raise
            session.call_log.append((name, _copy(dict(args)), "ok"))
            return result

    def _execute(self, session: Session, tool: ToolSpec, args: Mapping[str, Any]) -> Any:
        env = session.env
        work = _copy(session.state)
        counters = dict(session.counters)
        if env.executor_mode == "external":
            executor = self.executors.get(env.name)
            if executor is None:
                raise ExecutorError(f"no executor bound for {env.name!r}")
            result, delta = executor(tool, _copy(dict(args)), _copy(work))
            if not isinstance(delta, dict):
                raise ExecutorError("state delta must be an object")
            work.update(_copy(delta))
        elif tool.effect is None:
            result = {}
        else:
            result = apply_effect(tool, env.schema, work, args, counters)
        report = validate_state(work, env.schema)
        if not report.ok:
            raise BusinessError(f"{tool.name} would leave the scenario invalid",
                                data=[v.to_dict() for v in report.violations])
        session.state = work
        session.counters = counters
        return result


def result_conforms(tool: ToolSpec, result: Any) -> List[str]:
    """Shape problems of a tool result against its declared outputs (empty when fine)."""
    problems = []
    if not isinstance(result, dict):
        return [f"result is {kind_of(result)}, expected record"]
    declared = {p.name: p for p in tool.outputs}
    for name in result:
        if name not in declared:
            problems.append(f"undeclared output {name!r}")
    for name, param in declared.items():
        value = result.get(name)
        if value is None:
            if param.required:
                problems.append(f"missing output {name!r}")
            continue
        for v in param.check(value, name):
            problems.append(f"output {name!r}: {v.message}")
    return problems
