"""Directed tool dependency graphs built from parameter similarity.

Construction is two-step: ``semantic_match`` links ``u -> v`` whenever some
output of ``u`` is similar enough to some input of ``v``; ``refine_graph``
then adds logical edges the parameter names cannot express (and, with a
remote refiner, prunes spurious ones).
"""

from __future__ import annotations

import json
import math
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

from .core import EnvironmentSpec, ParamSpec, ToolSpec
from .errors import ParseError, ProviderError, RefinerError

DEFAULT_THRESHOLD = 0.6
PROVIDER_URL_ENV = "ENVSYNTH_PROVIDER_URL"
REFINER_URL_ENV = "ENVSYNTH_REFINER_URL"


class ToolRef(NamedTuple):
    env: str
    tool: str

    def to_dict(self) -> dict:
        return {"env": self.env, "tool": self.tool}

    def __str__(self) -> str:
        return f"{self.env}/{self.tool}"


@dataclass(frozen=True)
class Edge:
    src: ToolRef
    dst: ToolRef
    provenance: str  # "semantic" | "refined"
    witnesses: Tuple[Tuple[str, str, float], ...] = ()

    def to_dict(self) -> dict:
        return {"from": self.src.to_dict(), "to": self.dst.to_dict(), "provenance": self.provenance,
                "witnesses": [[o, i, s] for o, i, s in self.witnesses]}


@dataclass(frozen=True)
class DependencyGraph:
    nodes: Tuple[ToolRef, ...] = ()
    edges: Tuple[Edge, ...] = ()
    threshold: float = DEFAULT_THRESHOLD
    provider: str = "lexical"
    # tool specs are attached for sampling; they are not part of the graph file
    tools: Mapping[ToolRef, ToolSpec] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes)))
        object.__setattr__(self, "edges", tuple(sorted(self.edges, key=lambda e: (e.src, e.dst))))
        succ: Dict[ToolRef, List[ToolRef]] = {n: [] for n in self.nodes}
        pred: Dict[ToolRef, List[ToolRef]] = {n: [] for n in self.nodes}
        for e in self.edges:
            succ[e.src].append(e.dst)
            pred[e.dst].append(e.src)
        object.__setattr__(self, "_succ", succ)
        object.__setattr__(self, "_pred", pred)

    def successors(self, node: ToolRef) -> List[ToolRef]:
        return self._succ[node]  # type: ignore[attr-defined]

    def predecessors(self, node: ToolRef) -> List[ToolRef]:
        return self._pred[node]  # type: ignore[attr-defined]

    def has_edge(self, src: ToolRef, dst: ToolRef) -> bool:
        return dst in self._succ.get(src, ())  # type: ignore[attr-defined]

    def edge_set(self, provenance: Optional[str] = None) -> set:
        return {(e.src, e.dst) for e in self.edges if provenance is None or e.provenance == provenance}

    def tool(self, ref: ToolRef) -> ToolSpec:
        try:
            return self.tools[ref]
        except KeyError:
            raise KeyError(f"no tool spec attached for {ref}") from None

    def with_tools(self, tools: Mapping[ToolRef, ToolSpec]) -> "DependencyGraph":
        missing = [n for n in self.nodes if n not in tools]
        if missing:
            raise ParseError(f"graph nodes without tool specs: {[str(m) for m in missing]}")
        return DependencyGraph(self.nodes, self.edges, self.threshold, self.provider, dict(tools))


def tools_by_ref(envs: Iterable[EnvironmentSpec]) -> Dict[ToolRef, ToolSpec]:
    return {ToolRef(e.name, t.name): t for e in envs for t in e.tools}


# ---------------------------------------------------------------------------
# similarity

# an acronym with a plural "s" (IDs) stays one token; HTTPServer -> HTTP, Server
_WORD = re.compile(r"[A-Z]+s(?![a-z])|[A-Z]?[a-z0-9]+|[A-Z]+(?![a-z])")


def name_tokens(name: str) -> frozenset:
    tokens = set()
    for chunk in re.split(r"[_\W]+", name):
        for tok in _WORD.findall(chunk):
            tok = tok.lower()
            if len(tok) > 1 and tok.endswith("s"):
                tok = tok[:-1]
            if tok:
                tokens.add(tok)
    return frozenset(tokens)


def lexical_similarity(a: ParamSpec, b: ParamSpec) -> float:
    """Jaccard overlap of normalized name tokens."""
    return name_similarity(a.name, b.name)


def name_similarity(a: str, b: str) -> float:
    ta, tb = name_tokens(a), name_tokens(b)
    if not ta and not tb:
        return 1.0 if a == b else 0.0
    return len(ta & tb) / len(ta | tb)


class LexicalProvider:
    kind = "lexical"

    def prepare(self, params: Sequence[ParamSpec]) -> None:
        pass

    def similarity(self, a: ParamSpec, b: ParamSpec) -> float:
        return lexical_similarity(a, b)


def _post_json(url: str, payload: dict, timeout: float) -> Any:
    req = urllib.request.Request(url, data=json.dumps(payload).encode("utf-8"),
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode("utf-8"))


class RemoteProvider:
    """Embedding endpoint: ``{"texts": [...]} -> {"vectors": [[...], ...]}``.

    Scores are cosine similarities clipped to [0, 1].  ``embed`` can be swapped
    for any callable with the same request/response shape.
    """

    kind = "remote"

    def __init__(self, endpoint: Optional[str] = None, timeout: float = 30.0,
                 embed: Optional[Callable[[dict], dict]] = None):
        self.endpoint = endpoint or os.environ.get(PROVIDER_URL_ENV)
        self.timeout = timeout
        self._embed = embed
        self._vectors: Dict[str, List[float]] = {}

    @staticmethod
    def text(p: ParamSpec) -> str:
        return f"{p.name}: {p.description}" if p.description else p.name

    def _call(self, payload: dict) -> dict:
        if self._embed is not None:
            return self._embed(payload)
        if not self.endpoint:
            raise ProviderError(f"no embedding endpoint configured (set {PROVIDER_URL_ENV})")
        try:
            return _post_json(self.endpoint, payload, self.timeout)
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ProviderError(f"embedding endpoint failed: {exc}") from None

    def prepare(self, params: Sequence[ParamSpec]) -> None:
        texts = sorted({self.text(p) for p in params})
        if not texts:
            return
        try:
            reply = self._call({"texts": texts})
            vectors = reply["vectors"]
            if len(vectors) != len(texts):
                raise ValueError("vector count mismatch")
        except ProviderError:
            raise
        except Exception as exc:
            raise ProviderError(f"bad embedding response: {exc}") from None
        self._vectors = {t: [float(x) for x in v] for t, v in zip(texts, vectors)}

    def similarity(self, a: ParamSpec, b: ParamSpec) -> float:
        try:
            va, vb = self._vectors[self.text(a)], self._vectors[self.text(b)]
        except KeyError:
            raise ProviderError("similarity requested for an unprepared parameter") from None
        na = math.sqrt(sum(x * x for x in va))
        nb = math.sqrt(sum(x * x for x in vb))
        if na == 0 or nb == 0:
            return 0.0
        cos = sum(x * y for x, y in zip(va, vb)) / (na * nb)
        return min(1.0, max(0.0, cos))


# ---------------------------------------------------------------------------
# construction


def semantic_match(tools: Mapping[ToolRef, ToolSpec], threshold: float = DEFAULT_THRESHOLD,
                   provider=None) -> DependencyGraph:
    """Step 1: an edge u -> v for every output/input pair scoring at least ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    provider = provider or LexicalProvider()
    refs = sorted(tools)
    provider.prepare([p for r in refs for p in (*tools[r].inputs, *tools[r].outputs)])
    edges = []
    for src in refs:
        outs = tools[src].outputs
        if not outs:
            continue
        for dst in refs:
            if dst == src or not tools[dst].inputs:
                continue
            witnesses = []
            for po in outs:
                for pi in tools[dst].inputs:
                    score = provider.similarity(po, pi)
                    if score >= threshold:
                        witnesses.append((po.name, pi.name, score))
            if witnesses:
                edges.append(Edge(src, dst, "semantic", tuple(witnesses)))
    return DependencyGraph(tuple(refs), tuple(edges), threshold, provider.kind, dict(tools))


def build_graph(envs: Iterable[EnvironmentSpec], threshold: float = DEFAULT_THRESHOLD,
                provider=None, refine: Optional[str] = "rules", refiner=None) -> DependencyGraph:
    graph = semantic_match(tools_by_ref(envs), threshold, provider)
    if refine:
        graph, _ = refine_graph(graph, refine, refiner)
    return graph


def _post_refiner(endpoint: Optional[str], timeout: float = 60.0) -> Callable[[dict], dict]:
    endpoint = endpoint or os.environ.get(REFINER_URL_ENV)

    def call(payload: dict) -> dict:
        if not endpoint:
            raise RefinerError(f"no refiner endpoint configured (set {REFINER_URL_ENV})")
        try:
            return _post_json(endpoint, payload, timeout)
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise RefinerError(f"refiner endpoint failed: {exc}") from None

    return call


def refine_graph(graph: DependencyGraph, mode: str = "rules",
                 refiner: Optional[Callable[[dict], dict]] = None,
                 endpoint: Optional[str] = None) -> Tuple[DependencyGraph, List[str]]:
    """Step 2, per environment.  Returns the refined graph and a list of rejected proposals."""
    if mode not in ("rules", "remote"):
        raise ValueError(f"unknown refine mode {mode!r}")
    edges: Dict[Tuple[ToolRef, ToolRef], Edge] = {(e.src, e.dst): e for e in graph.edges}
    rejected: List[str] = []
    by_env: Dict[str, List[ToolRef]] = {}
    for n in graph.nodes:
        by_env.setdefault(n.env, []).append(n)

    if mode == "rules":
        for env_nodes in by_env.values():
            for v in env_nodes:
                spec = graph.tool(v)
                if spec.inputs or spec.outputs:
                    continue
                for u in env_nodes:
                    if u != v and (u, v) not in edges:
                        edges[(u, v)] = Edge(u, v, "refined")
    else:
        call = refiner or _post_refiner(endpoint)
        for env_name, env_nodes in sorted(by_env.items()):
            names = {n.tool: n for n in env_nodes}
            payload = {
                "environment": env_name,
                "tools": [graph.tool(n).to_dict() for n in env_nodes],
                "adjacency": {n.tool: [d.tool for (s, d) in sorted(edges) if s == n] for n in env_nodes},
            }
            try:
                reply = call(payload)
            except RefinerError:
                raise
            except Exception as exc:
                raise RefinerError(f"refiner failed: {exc}") from None
            if not isinstance(reply, dict):
                raise RefinerError("refiner reply must be an object")
            for action in ("remove", "add"):
                for pair in reply.get(action) or []:
                    problem = _check_pair(pair, names)
                    if problem is None and action == "remove" and (names[pair[0]], names[pair[1]]) not in edges:
                        problem = "edge does not exist"
                    if problem is not None:
                        rejected.append(f"{action} {pair!r}: {problem}")
                        continue
                    key = (names[pair[0]], names[pair[1]])
                    if action == "remove":
                        del edges[key]
                    elif key not in edges:
                        edges[key] = Edge(key[0], key[1], "refined")
    refined = DependencyGraph(graph.nodes, tuple(edges.values()), graph.threshold, graph.provider, graph.tools)
    return refined, rejected


def _check_pair(pair: Any, names: Mapping[str, ToolRef]) -> Optional[str]:
    if not (isinstance(pair, (list, tuple)) and len(pair) == 2 and all(isinstance(x, str) for x in pair)):
        return "must be [from, to]"
    if pair[0] not in names or pair[1] not in names:
        return "unknown tool"
    if pair[0] == pair[1]:
        return "self-loop"
    return None


# ---------------------------------------------------------------------------
# persistence


def graph_to_dict(graph: DependencyGraph) -> dict:
    return {
        "nodes": [n.to_dict() for n in graph.nodes],
        "edges": [e.to_dict() for e in graph.edges],
        "threshold": graph.threshold,
        "provider": graph.provider,
    }


def save_graph(graph: DependencyGraph) -> str:
    return json.dumps(graph_to_dict(graph), indent=2, ensure_ascii=False) + "\n"


def _ref(raw: Any, where: str) -> ToolRef:
    if not (isinstance(raw, dict) and isinstance(raw.get("env"), str) and isinstance(raw.get("tool"), str)):
        raise ParseError(f"{where}: expected {{env, tool}}")
    return ToolRef(raw["env"], raw["tool"])


def load_graph(text: str, tools: Optional[Mapping[ToolRef, ToolSpec]] = None) -> DependencyGraph:
    try:
        raw = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"malformed graph file: {exc}") from None
    if not isinstance(raw, dict):
        raise ParseError("graph file must be an object")
    nodes = [_ref(n, f"nodes[{i}]") for i, n in enumerate(raw.get("nodes") or [])]
    node_set = set(nodes)
    if len(node_set) != len(nodes):
        raise ParseError("duplicate nodes")
    edges = []
    seen = set()
    for i, e in enumerate(raw.get("edges") or []):
        if not isinstance(e, dict):
            raise ParseError(f"edges[{i}] must be an object")
        src, dst = _ref(e.get("from"), f"edges[{i}].from"), _ref(e.get("to"), f"edges[{i}].to")
        if src not in node_set or dst not in node_set:
            raise ParseError(f"edges[{i}] references an unknown node")
        if src == dst:
            raise ParseError(f"edges[{i}] is a self-loop")
        if (src, dst) in seen:
            raise ParseError(f"edges[{i}] duplicates an edge")
        seen.add((src, dst))
        prov = e.get("provenance")
        if prov not in ("semantic", "refined"):
            raise ParseError(f"edges[{i}].provenance must be semantic or refined")
        try:
            wit = tuple((str(w[0]), str(w[1]), float(w[2])) for w in e.get("witnesses") or [])
        except (TypeError, IndexError, ValueError):
            raise ParseError(f"edges[{i}].witnesses malformed") from None
        edges.append(Edge(src, dst, prov, wit))
    threshold = raw.get("threshold", DEFAULT_THRESHOLD)
    if not isinstance(threshold, (int, float)) or isinstance(threshold, bool):
        raise ParseError("threshold must be numeric")
    graph = DependencyGraph(tuple(nodes), tuple(edges), float(threshold), str(raw.get("provider", "lexical")))
    if tools is not None:
        graph = graph.with_tools({n: tools[n] for n in nodes if n in tools})
    return graph
