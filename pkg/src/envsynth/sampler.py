"""Topology-aware sampling of dependency-feasible tool chains.

A chain is *closed* when every required internal input of each tool is
produced by some tool earlier in the chain.  ``topology_sample`` grows chains
breadth-first along outgoing edges and, before placing a tool, recursively
pulls in producer tools for its unresolved inputs (``sample_priors``).
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import random
import urllib.error
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Set, Tuple

from .core import ParamSpec, ToolSpec
from .errors import ExhaustedError, ParseError, RemoteError, TooLargeError
from .toolgraph import DependencyGraph, ToolRef, _post_json, name_similarity

log = logging.getLogger(__name__)

INTERNAL_SUFFIXES = ("_id", "_ids", "_token", "_key", "_handle")
CLASSIFIER_URL_ENV = "ENVSYNTH_CLASSIFIER_URL"
ORACLE_MAX_NODES = 8


@dataclass(frozen=True)
class SamplerConfig:
    n: int = 5
    d_max: int = 3
    override_p: float = 0.1
    branch_max: int = 1
    seed: int = 0
    max_restarts: int = 16

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.d_max < 0:
            raise ValueError("d_max must be >= 0")
        if not 0.0 <= self.override_p <= 1.0:
            raise ValueError("override_p must lie in [0, 1]")
        if self.branch_max < 1:
            raise ValueError("branch_max must be >= 1")
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be >= 0")

    def to_dict(self) -> dict:
        return {"n": self.n, "d_max": self.d_max, "override_p": self.override_p,
                "branch_max": self.branch_max, "seed": self.seed}


class ParamClass(dict):
    """Maps ``(ToolRef, input name)`` to ``"external"`` or ``"internal"``."""

    def of(self, ref: ToolRef, name: str) -> str:
        return self[(ref, name)]

    def to_list(self) -> List[dict]:
        return [{"env": r.env, "tool": r.tool, "param": p, "class": c}
                for (r, p), c in sorted(self.items())]


def heuristic_class(param: ParamSpec) -> str:
    name = param.name.lower()
    desc = param.description.lower()
    if name == "id" or name.endswith(INTERNAL_SUFFIXES):
        return "internal"
    if "identifier" in desc or "returned by" in desc:
        return "internal"
    return "external"


def _remote_classifier(endpoint: Optional[str]) -> Callable[[dict], dict]:
    endpoint = endpoint or os.environ.get(CLASSIFIER_URL_ENV)

    def call(payload: dict) -> dict:
        if not endpoint:
            raise RemoteError(f"no classifier endpoint configured (set {CLASSIFIER_URL_ENV})")
        try:
            return _post_json(endpoint, payload, 30.0)
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise RemoteError(f"classifier endpoint failed: {exc}") from None

    return call


def classify_params(tools: Mapping[ToolRef, ToolSpec], mode: str = "heuristic",
                    classifier: Optional[Callable[[dict], dict]] = None,
                    endpoint: Optional[str] = None) -> ParamClass:
    """Label every input parameter of every tool as external or internal.

    ``hints`` honours ``classification_hint`` and falls back to the heuristic;
    ``remote`` posts ``{tool, description, param}`` per parameter and expects
    ``{"class": "external" | "internal"}`` back.
    """
    if mode not in ("heuristic", "hints", "remote"):
        raise ValueError(f"unknown classification mode {mode!r}")
    call = classifier or (_remote_classifier(endpoint) if mode == "remote" else None)
    classes = ParamClass()
    for ref in sorted(tools):
        spec = tools[ref]
        for p in spec.inputs:
            if mode == "hints" and p.classification_hint is not None:
                cls = p.classification_hint
            elif mode == "remote":
                try:
                    reply = call({"tool": spec.name, "description": spec.description, "param": p.to_dict()})
                except RemoteError:
                    raise
                except Exception as exc:
                    raise RemoteError(f"classifier failed: {exc}") from None
                cls = reply.get("class") if isinstance(reply, dict) else None
                if cls not in ("external", "internal"):
                    raise RemoteError(f"classifier returned {reply!r} for {ref}.{p.name}")
            else:
                cls = heuristic_class(p)
            classes[(ref, p.name)] = cls
    return classes


# ---------------------------------------------------------------------------
# dependency checks


def produces(graph: DependencyGraph, u: ToolRef, param: ParamSpec) -> Optional[str]:
    """Name of an output of ``u`` that can feed ``param``, if any."""
    for out in graph.tool(u).outputs:
        if out.name == param.name or name_similarity(out.name, param.name) >= graph.threshold:
            return out.name
    return None


def needs_producer(classes: ParamClass, ref: ToolRef, param: ParamSpec) -> bool:
    return not param.optional and classes.of(ref, param.name) == "internal"


def is_valid(graph: DependencyGraph, classes: ParamClass, v: ToolRef, param: ParamSpec,
             visited: Iterable[ToolRef]) -> bool:
    """Optional, or external, or already produced by a visited tool."""
    if param.optional:
        return True
    if classes.of(v, param.name) == "external":
        return True
    return any(produces(graph, u, param) for u in sorted(visited))


def check_closure(graph: DependencyGraph, classes: ParamClass, chain: Iterable[ToolRef]) -> bool:
    placed: List[ToolRef] = []
    for ref in chain:
        for p in graph.tool(ref).inputs:
            if needs_producer(classes, ref, p) and not any(produces(graph, u, p) for u in placed):
                return False
        placed.append(ref)
    return True


# ---------------------------------------------------------------------------
# sampling


@dataclass
class _Bookkeeping:
    overrides: Set[Tuple[ToolRef, str]] = field(default_factory=set)
    picks: Dict[Tuple[ToolRef, str], ToolRef] = field(default_factory=dict)
    depth: Dict[ToolRef, int] = field(default_factory=dict)


def sample_priors(graph: DependencyGraph, classes: ParamClass, visited: Set[ToolRef], v: ToolRef,
                  depth: int, cfg: SamplerConfig, rng: random.Random,
                  _book: Optional[_Bookkeeping] = None) -> List[ToolRef]:
    """Recursively sample producer tools for ``v``'s unresolved inputs.

    ``visited`` is updated in place.  The returned list is dependency-ordered:
    each prior follows its own priors.
    """
    book = _book if _book is not None else _Bookkeeping()
    out: List[ToolRef] = []
    if depth >= cfg.d_max:
        return out
    for p in graph.tool(v).inputs:
        if is_valid(graph, classes, v, p, visited):
            if rng.random() >= cfg.override_p:
                continue
            book.overrides.add((v, p.name))
        cands = [u for u in graph.predecessors(v) if produces(graph, u, p)]
        if not cands:
            continue
        u = cands[rng.randrange(len(cands))]
        book.picks[(v, p.name)] = u
        if u not in visited and depth < cfg.d_max:
            sub = sample_priors(graph, classes, visited, u, depth + 1, cfg, rng, book)
            visited.add(u)
            book.depth[u] = depth + 1
            out.extend(sub)
            out.append(u)
    return out


@dataclass(frozen=True)
class TraceEntry:
    ref: ToolRef
    depth: int
    resolutions: Tuple[Tuple[str, str], ...]

    def to_dict(self) -> dict:
        return {"env": self.ref.env, "tool": self.ref.tool, "depth": self.depth,
                "resolutions": [{"param": p, "via": via} for p, via in self.resolutions]}


@dataclass(frozen=True)
class ToolChain:
    chain: Tuple[ToolRef, ...]
    trace: Tuple[TraceEntry, ...]
    exhausted: bool = False
    restarts: int = 0

    def __len__(self) -> int:
        return len(self.chain)

    @property
    def tools(self) -> List[str]:
        return [r.tool for r in self.chain]


def _via_prior(u: ToolRef, x: ToolRef) -> str:
    return f"prior:{u.tool}" if u.env == x.env else f"prior:{u}"


def _resolve(graph: DependencyGraph, classes: ParamClass, book: _Bookkeeping,
             placed: List[ToolRef], block: List[ToolRef]) -> Optional[List[TraceEntry]]:
    """Trace entries for ``block`` appended after ``placed``; None if any input is unresolved."""
    entries = []
    before = list(placed)
    for x in block:
        res = []
        for p in graph.tool(x).inputs:
            if (x, p.name) in book.overrides:
                res.append((p.name, "override"))
            elif p.optional:
                res.append((p.name, "optional"))
            elif classes.of(x, p.name) == "external":
                res.append((p.name, "external"))
            else:
                picked = book.picks.get((x, p.name))
                if picked in before and produces(graph, picked, p):
                    res.append((p.name, _via_prior(picked, x)))
                    continue
                producer = next((u for u in sorted(before) if produces(graph, u, p)), None)
                if producer is None:
                    log.warning("no producer for %s.%s; dropping %s from this expansion", x, p.name, block[-1])
                    return None
                res.append((p.name, _via_prior(producer, x)))
        entries.append(TraceEntry(x, book.depth.get(x, 0), tuple(res)))
        before.append(x)
    return entries


def topology_sample(graph: DependencyGraph, classes: ParamClass, cfg: SamplerConfig,
                    start: Optional[ToolRef] = None, rng: Optional[random.Random] = None) -> ToolChain:
    """Breadth-first chain growth with backward dependency resolution.

    A dequeued tool whose inputs cannot all be resolved (no producer, depth cap
    reached, or the expansion would overshoot ``n + d_max``) is skipped until
    the chain grows again.  When the queue drains early the walk restarts from
    a random unvisited tool.
    """
    if not graph.nodes:
        raise ValueError("cannot sample from an empty graph")
    rng = rng if rng is not None else random.Random(cfg.seed)
    nodes = list(graph.nodes)
    if start is None:
        start = nodes[rng.randrange(len(nodes))]
    elif start not in set(nodes):
        raise ValueError(f"start {start} is not a graph node")

    cap = cfg.n + cfg.d_max
    visited: Set[ToolRef] = set()
    chain: List[ToolRef] = []
    trace: List[TraceEntry] = []
    blocked: Set[ToolRef] = set()
    queue = deque([start])
    restarts = fruitless = 0
    exhausted = False

    while len(visited) < cfg.n:
        if not queue:
            candidates = [x for x in nodes if x not in visited and x not in blocked]
            if not candidates:
                exhausted = True
                break
            if fruitless >= cfg.max_restarts:
                raise ExhaustedError(f"{fruitless} restarts without progress at length {len(chain)}")
            fruitless += 1
            restarts += 1
            queue.append(candidates[rng.randrange(len(candidates))])
            continue
        v = queue.popleft()
        if v in visited or v in blocked:
            continue
        work = set(visited)
        book = _Bookkeeping()
        block = sample_priors(graph, classes, work, v, 0, cfg, rng, book) + [v]
        entries = None
        if len(visited) + len(block) <= cap:
            entries = _resolve(graph, classes, book, chain, block)
        if entries is None:
            blocked.add(v)
            continue
        visited.update(block)
        chain.extend(block)
        trace.extend(entries)
        blocked.clear()
        fruitless = 0
        nbrs = [u for u in graph.successors(v) if u not in visited]
        if nbrs:
            k = min(rng.randint(1, cfg.branch_max), len(nbrs))
            queue.extend(rng.sample(nbrs, k))

    if exhausted and len(chain) < cfg.n:
        log.warning("graph exhausted at %d of %d requested tools", len(chain), cfg.n)
    return ToolChain(tuple(chain), tuple(trace), exhausted, restarts)


def enumerate_feasible_chains(graph: DependencyGraph, classes: ParamClass,
                              max_len: int) -> Set[Tuple[ToolRef, ...]]:
    """Every closed chain of distinct tools with length 1..max_len (brute force)."""
    if len(graph.nodes) > ORACLE_MAX_NODES:
        raise TooLargeError(f"{len(graph.nodes)} nodes exceeds the oracle limit of {ORACLE_MAX_NODES}")
    nodes = list(graph.nodes)
    found: Set[Tuple[ToolRef, ...]] = set()
    for length in range(1, min(max_len, len(nodes)) + 1):
        for perm in itertools.permutations(nodes, length):
            ok = True
            for i, ref in enumerate(perm):
                for p in graph.tool(ref).inputs:
                    if not needs_producer(classes, ref, p):
                        continue
                    if not any(produces(graph, u, p) for u in perm[:i]):
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                found.add(perm)
    return found


# ---------------------------------------------------------------------------
# chain files


def save_chain(chain: ToolChain, cfg: SamplerConfig, graph_ref: str = "") -> str:
    doc = {
        "graph_ref": graph_ref,
        "config": cfg.to_dict(),
        "chain": [r.to_dict() for r in chain.chain],
        "trace": [t.to_dict() for t in chain.trace],
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def load_chain(text: str) -> Tuple[ToolChain, dict]:
    try:
        raw = json.loads(text)
        refs = tuple(ToolRef(c["env"], c["tool"]) for c in raw["chain"])
        trace = tuple(
            TraceEntry(ToolRef(t["env"], t["tool"]), int(t.get("depth", 0)),
                       tuple((r["param"], r["via"]) for r in t.get("resolutions", [])))
            for t in raw.get("trace", [])
        )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed chain file: {exc}") from None
    return ToolChain(refs, trace), raw
