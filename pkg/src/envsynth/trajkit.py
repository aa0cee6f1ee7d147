"""Trajectory plumbing around query generation: turn plans, candidate
selection, redundancy filtering and argument masking.

Nothing here writes natural language; query text comes from a pluggable
provider whose default is a fixed template.
"""

from __future__ import annotations

import json
import os
import random
import urllib.error
from dataclasses import dataclass, replace
from typing import Any, Callable, List, Optional, Protocol, Sequence, Tuple

from .core import EnvironmentSpec, Message, ToolCall, TrajectoryRecord, Turn, canonicalize_state
from .errors import EnvSynthError, ParseError, RemoteError, ReplayError
from .reward import RewardConfig, composite_reward, flatten, replay_trajectory
from .runtime import Runtime
from .sampler import ToolChain
from .toolgraph import ToolRef, _post_json

MAX_TURN_SIZE = 5
PRESENTATION_ARGS = frozenset({"limit", "max_results", "page_size"})
MASKER_URL_ENV = "ENVSYNTH_MASKER_URL"


class EmptyCandidates(EnvSynthError):
    pass


@dataclass(frozen=True)
class TurnPlan:
    partitions: Tuple[Tuple[ToolRef, ...], ...]

    def __post_init__(self):
        for i, part in enumerate(self.partitions):
            if not 1 <= len(part) <= MAX_TURN_SIZE:
                raise ValueError(f"turn {i} has {len(part)} tools; sizes must lie in 1..{MAX_TURN_SIZE}")

    @property
    def sizes(self) -> List[int]:
        return [len(p) for p in self.partitions]

    def flat(self) -> List[ToolRef]:
        return [r for p in self.partitions for r in p]


def partition_turns(chain, rng: random.Random) -> TurnPlan:
    """Cut the chain left to right into turns of 1..5 tools each."""
    refs = list(chain.chain if isinstance(chain, ToolChain) else chain)
    if not refs:
        raise ValueError("cannot partition an empty chain")
    parts, i = [], 0
    while i < len(refs):
        size = rng.randint(1, min(MAX_TURN_SIZE, len(refs) - i))
        parts.append(tuple(refs[i:i + size]))
        i += size
    return TurnPlan(tuple(parts))


def save_plan(plan: TurnPlan, chain_ref: str = "") -> str:
    doc = {"chain_ref": chain_ref, "partitions": [[r.to_dict() for r in p] for p in plan.partitions]}
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def load_plan(text: str) -> TurnPlan:
    try:
        raw = json.loads(text)
        parts = tuple(tuple(ToolRef(r["env"], r["tool"]) for r in p) for p in raw["partitions"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed plan file: {exc}") from None
    try:
        return TurnPlan(parts)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


class QueryProvider(Protocol):
    def query(self, env: str, tools: Sequence[str]) -> str: ...


class TemplateQueryProvider:
    """Deterministic placeholder queries; they only name the intended tools."""

    def query(self, env: str, tools: Sequence[str]) -> str:
        return f"[{env}] request needing: " + ", ".join(tools)


def plan_queries(plan: TurnPlan, provider: Optional[QueryProvider] = None) -> List[str]:
    provider = provider or TemplateQueryProvider()
    return [provider.query(p[0].env, [r.tool for r in p]) for p in plan.partitions]


# ---------------------------------------------------------------------------
# candidate selection


@dataclass(frozen=True)
class CandidateSet:
    candidates: Tuple[Tuple[TrajectoryRecord, Any], ...]
    target: Tuple[TrajectoryRecord, Any]

    def __post_init__(self):
        env = self.target[0].environment
        for i, (traj, _) in enumerate(self.candidates):
            if traj.environment != env:
                raise ValueError(f"candidate {i} targets {traj.environment!r}, not {env!r}")


def select_best(cands: CandidateSet, cfg: RewardConfig = RewardConfig(), schema=None) -> int:
    """Index of the highest-reward candidate; ties go to fewer calls, then lower index."""
    if not cands.candidates:
        raise EmptyCandidates("no candidates to choose from")
    gold, gold_final = cands.target
    scored = []
    for i, (traj, final) in enumerate(cands.candidates):
        r = composite_reward(traj, gold, final, gold_final, cfg, schema).r
        scored.append((-r, len(flatten(traj)), i))
    return min(scored)[2]


# ---------------------------------------------------------------------------
# filtering and pruning


def _call_positions(traj: TrajectoryRecord) -> List[Tuple[int, int]]:
    return [(ti, si) for ti, turn in enumerate(traj.turns)
            for si, step in enumerate(turn.steps) if isinstance(step, ToolCall)]


def _without(traj: TrajectoryRecord, ti: int, si: int) -> TrajectoryRecord:
    turns = list(traj.turns)
    steps = turns[ti].steps
    turns[ti] = replace(turns[ti], steps=steps[:si] + steps[si + 1:])
    return replace(traj, turns=tuple(turns))


def filter_redundant(traj: TrajectoryRecord, scenario: Any, runtime: Runtime) -> TrajectoryRecord:
    """Drop tool calls whose removal leaves the replayed final state unchanged."""
    schema = runtime.environment(traj.environment).schema
    reference = canonicalize_state(replay_trajectory(traj, scenario, runtime), (), schema)
    current = traj
    positions = _call_positions(traj)
    idx = 0
    while idx < len(positions):
        ti, si = positions[idx]
        trial = _without(current, ti, si)
        try:
            final = replay_trajectory(trial, scenario, runtime)
        except ReplayError:
            idx += 1
            continue
        if canonicalize_state(final, (), schema) == reference:
            current = trial
            # later calls in the same turn move one step left
            positions = [(t, s - 1 if t == ti and s > si else s) for (t, s) in positions]
            del positions[idx]
        else:
            idx += 1
    return current


def prune_assistant_messages(traj: TrajectoryRecord) -> TrajectoryRecord:
    """Drop assistant messages that are directly followed by another assistant step."""
    turns = []
    for turn in traj.turns:
        steps = list(turn.steps)
        out = []
        for i, step in enumerate(steps):
            nxt = steps[i + 1] if i + 1 < len(steps) else None
            if (isinstance(step, Message) and step.role == "assistant" and nxt is not None
                    and (isinstance(nxt, ToolCall) or nxt.role == "assistant")):
                continue
            out.append(step)
        turns.append(replace(turn, steps=tuple(out)))
    return replace(traj, turns=tuple(turns))


# ---------------------------------------------------------------------------
# masking


def _remote_masker(endpoint: Optional[str]) -> Callable[[dict], dict]:
    endpoint = endpoint or os.environ.get(MASKER_URL_ENV)

    def call(payload: dict) -> dict:
        if not endpoint:
            raise RemoteError(f"no masker endpoint configured (set {MASKER_URL_ENV})")
        try:
            return _post_json(endpoint, payload, 30.0)
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise RemoteError(f"masker endpoint failed: {exc}") from None

    return call


def heuristic_mask(call: ToolCall, env: EnvironmentSpec) -> List[str]:
    tool = env.tool(call.tool)
    masked = []
    for name, value in call.arguments.items():
        param = tool.input(name) if tool is not None else None
        if name in PRESENTATION_ARGS:
            masked.append(name)
        elif param is not None and param.has_default and not param.required and value == param.default:
            masked.append(name)
    return masked


def mask_arguments(traj: TrajectoryRecord, env: EnvironmentSpec, rules: str = "heuristic",
                   masker: Optional[Callable[[dict], dict]] = None,
                   endpoint: Optional[str] = None) -> TrajectoryRecord:
    """Mark arguments that cannot affect correctness; existing masks are kept."""
    if rules not in ("heuristic", "remote"):
        raise ValueError(f"unknown masking rules {rules!r}")
    call = masker or (_remote_masker(endpoint) if rules == "remote" else None)

    def mask_step(step):
        if not isinstance(step, ToolCall):
            return step
        if rules == "heuristic":
            new = heuristic_mask(step, env)
        else:
            new = []
            for name, value in step.arguments.items():
                try:
                    reply = call({"environment": env.name, "tool": step.tool, "argument": name, "value": value})
                except RemoteError:
                    raise
                except Exception as exc:
                    raise RemoteError(f"masker failed: {exc}") from None
                if not isinstance(reply, dict) or not isinstance(reply.get("mask"), bool):
                    raise RemoteError(f"masker returned {reply!r} for {step.tool}.{name}")
                if reply["mask"]:
                    new.append(name)
        masked = tuple(n for n in step.arguments if n in set(step.masked_args) | set(new))
        return replace(step, masked_args=masked)

    turns = tuple(replace(t, steps=tuple(mask_step(s) for s in t.steps)) for t in traj.turns)
    return replace(traj, turns=turns)
