"""Composite reward for predicted tool-call trajectories.

    R = alpha * R_traj + (1 - alpha) * R_state - gamma * P_length

R_traj is the longest common subsequence of calls divided by the gold length,
R_state is 1 when the final states are canonically equal, and P_length is the
relative over-length of the prediction clamped to [0, 1].
"""

from __future__ import annotations

import math
import uuid
from dataclasses import dataclass, field
from typing import Any, Iterable, List, Optional, Sequence, Tuple

from .core import ScenarioSchema, ToolCall, TrajectoryRecord, normalize_state, parse_path, validate_state
from .errors import ReplayError, RuntimeToolError, SchemaViolation, UnknownTool
from .runtime import Runtime

DEFINITIONS = {"traj": "lcs/gold", "state": "binary-canonical", "length": "relative-clamped"}


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.5
    gamma: float = 0.1
    float_tolerance: float = 1e-9
    masked_state_paths: Tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.float_tolerance < 0:
            raise ValueError("float_tolerance must be non-negative")
        for p in self.masked_state_paths:
            parse_path(p)


@dataclass(frozen=True)
class RewardBreakdown:
    r_traj: float
    r_state: float
    p_length: float
    r: float
    alpha: float
    gamma: float

    def report(self) -> dict:
        return {"r_traj": self.r_traj, "r_state": self.r_state, "p_length": self.p_length, "r": self.r,
                "alpha": self.alpha, "gamma": self.gamma, "definitions": dict(DEFINITIONS)}


def flatten(traj: Any) -> List[ToolCall]:
    if isinstance(traj, TrajectoryRecord):
        return traj.tool_calls()
    return [c for c in traj if isinstance(c, ToolCall)]


def calls_match(pred: ToolCall, gold: ToolCall) -> bool:
    """Same tool and equal values on every unmasked gold argument."""
    if pred.tool != gold.tool:
        return False
    for name, value in gold.arguments.items():
        if name in gold.masked_args:
            continue
        if name not in pred.arguments or pred.arguments[name] != value:
            return False
    return True


def _units(gold: Sequence[ToolCall]) -> List[List[ToolCall]]:
    """Single calls, plus maximal runs of consecutive calls sharing a block id."""
    units: List[List[ToolCall]] = []
    for call in gold:
        if call.block is not None and units and units[-1][0].block == call.block:
            units[-1].append(call)
        else:
            units.append([call])
    return units


def _bipartite(pred: Sequence[ToolCall], gold: Sequence[ToolCall]) -> int:
    """Maximum matching size by augmenting paths."""
    owner: List[Optional[int]] = [None] * len(gold)

    def augment(i: int, seen: List[bool]) -> bool:
        for j, g in enumerate(gold):
            if not seen[j] and calls_match(pred[i], g):
                seen[j] = True
                if owner[j] is None or augment(owner[j], seen):
                    owner[j] = i
                    return True
        return False

    return sum(augment(i, [False] * len(gold)) for i in range(len(pred)))


def _check_names(calls: Iterable[ToolCall], tool_names) -> None:
    if tool_names is None:
        return
    for c in calls:
        if c.tool not in tool_names:
            raise UnknownTool(f"unknown tool {c.tool!r}")


def traj_reward(pred: Any, gold: Any, tool_names: Optional[Iterable[str]] = None) -> float:
    pred, gold = flatten(pred), flatten(gold)
    if tool_names is not None:
        tool_names = set(tool_names)
        _check_names(pred, tool_names)
        _check_names(gold, tool_names)
    if not gold:
        return 1.0 if not pred else 0.0
    units = _units(gold)
    n = len(pred)
    # dp[i][j]: best match count using pred[:i] against the first j gold units
    dp = [[0] * (len(units) + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        for j, unit in enumerate(units, start=1):
            best = max(dp[i - 1][j], dp[i][j - 1])
            if len(unit) == 1:
                if calls_match(pred[i - 1], unit[0]):
                    best = max(best, dp[i - 1][j - 1] + 1)
            else:
                for start in range(i - 1, -1, -1):
                    best = max(best, dp[start][j - 1] + _bipartite(pred[start:i], unit))
            dp[i][j] = best
    return dp[n][len(units)] / len(gold)


def _close(a: Any, b: Any, tol: float) -> bool:
    if isinstance(a, bool) or isinstance(b, bool):
        return a is b or (type(a) is type(b) and a == b)
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return a == b or math.isclose(a, b, rel_tol=tol, abs_tol=0.0)
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k], tol) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_close(x, y, tol) for x, y in zip(a, b))
    return type(a) is type(b) and a == b


def state_reward(pred_final: Any, gold_final: Any, cfg: RewardConfig = RewardConfig(),
                 schema: Optional[ScenarioSchema] = None) -> int:
    if schema is not None:
        for label, state in (("predicted", pred_final), ("gold", gold_final)):
            report = validate_state(state, schema)
            if not report.ok:
                raise SchemaViolation(f"{label} final state violates schema",
                                      data=[v.to_dict() for v in report.violations])
    a = normalize_state(pred_final, cfg.masked_state_paths, schema)
    b = normalize_state(gold_final, cfg.masked_state_paths, schema)
    return 1 if _close(a, b, cfg.float_tolerance) else 0


def length_penalty(pred: Any, gold: Any) -> float:
    n_pred, n_gold = len(flatten(pred)), len(flatten(gold))
    return min(1.0, max(0.0, (n_pred - n_gold) / max(1, n_gold)))


def combine(r_traj: float, r_state: float, p_length: float, cfg: RewardConfig) -> RewardBreakdown:
    r = cfg.alpha * r_traj + (1 - cfg.alpha) * r_state - cfg.gamma * p_length
    return RewardBreakdown(r_traj, r_state, p_length, r, cfg.alpha, cfg.gamma)


def composite_reward(pred: Any, gold: Any, pred_final: Any, gold_final: Any,
                     cfg: RewardConfig = RewardConfig(), schema: Optional[ScenarioSchema] = None,
                     tool_names: Optional[Iterable[str]] = None) -> RewardBreakdown:
    return combine(traj_reward(pred, gold, tool_names), state_reward(pred_final, gold_final, cfg, schema),
                   length_penalty(pred, gold), cfg)


def replay_trajectory(traj: TrajectoryRecord, scenario: Any, runtime: Runtime) -> Any:
    """Execute every tool call in order on a throwaway session and return the saved state."""
    cid = f"replay-{uuid.uuid4().hex}"
    runtime.create_session(cid, traj.environment)
    try:
        runtime.load_scenario(cid, scenario)
        for index, call in enumerate(traj.tool_calls()):
            try:
                runtime.call_tool(cid, call.tool, dict(call.arguments))
            except RuntimeToolError as exc:
                raise ReplayError(index, call.tool, exc) from exc
        return runtime.save_scenario(cid)
    finally:
        runtime.destroy_session(cid)
