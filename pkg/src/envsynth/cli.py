"""Command-line entry point.

Exit codes: 0 ok, 1 verdict fail, 2 input error, 3 environment/provider
error, 4 replay error, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import signal
import sys
from pathlib import Path
from typing import List, Optional

from . import core, reward, sampler, server, toolgraph, trajkit, verifier
from .errors import (EnvSynthError, ParseError, PathError, ProviderError, RefinerError, RemoteError,
                     ReplayError, RuntimeToolError, SpecError, UnknownEnvironment)
from .runtime import Runtime

log = logging.getLogger("envsynth")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_ENV, EXIT_REPLAY, EXIT_USAGE = 0, 1, 2, 3, 4, 64


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Terminate(Exception):
    pass


def _unit(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return value


def _nonneg(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} must be at least 1")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return value


def _write(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror or exc}") from None


def _load_envs(env_dir: str) -> List[core.EnvironmentSpec]:
    envs = core.load_environment_dir(env_dir)
    if not envs:
        raise ParseError(f"no environment files in {env_dir}")
    return envs


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_graph(args) -> int:
    envs = _load_envs(args.env_dir)
    provider = toolgraph.RemoteProvider(args.provider_url) if args.provider == "remote" else None
    graph = toolgraph.semantic_match(toolgraph.tools_by_ref(envs), args.threshold, provider)
    rejected: List[str] = []
    if args.refine != "none":
        graph, rejected = toolgraph.refine_graph(graph, args.refine, endpoint=args.refiner_url)
    for r in rejected:
        print(f"warning: refiner proposal rejected: {r}", file=sys.stderr)
    _write(toolgraph.save_graph(graph), args.out)
    if args.figure:
        from .plotting import plot_graph
        plot_graph(graph, args.figure)
    print(f"nodes={len(graph.nodes)} semantic={len(graph.edge_set('semantic'))} "
          f"refined={len(graph.edge_set('refined'))}", file=sys.stderr)
    return EXIT_OK


def _parse_ref(text: str, graph: toolgraph.DependencyGraph) -> toolgraph.ToolRef:
    if "/" in text:
        env, tool = text.split("/", 1)
        ref = toolgraph.ToolRef(env, tool)
        if ref in set(graph.nodes):
            return ref
    else:
        hits = [r for r in graph.nodes if r.tool == text]
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            raise ParseError(f"tool {text!r} is ambiguous; use env/tool")
    raise ParseError(f"start tool {text!r} is not in the graph")


def cmd_sample(args) -> int:
    envs = _load_envs(args.env_dir)
    tools = toolgraph.tools_by_ref(envs)
    graph = toolgraph.load_graph(_read(args.graph))
    graph = graph.with_tools(tools)
    cfg = sampler.SamplerConfig(n=args.n, d_max=args.d_max, override_p=args.override_p,
                                branch_max=args.branch_max, seed=args.seed, max_restarts=args.max_restarts)
    classes = sampler.classify_params(tools, args.classify, endpoint=args.classifier_url)
    start = _parse_ref(args.start, graph) if args.start else None
    chain = sampler.topology_sample(graph, classes, cfg, start, random.Random(args.seed))
    _write(sampler.save_chain(chain, cfg, Path(args.graph).name), args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    runtime = Runtime(_load_envs(args.env_dir))

    def on_term(signum, frame):
        raise _Terminate()

    signal.signal(signal.SIGTERM, on_term)
    try:
        if args.transport == "stdio":
            server.serve_stdio(runtime, sys.stdin, sys.stdout)
        else:
            srv = server.serve_tcp(runtime, args.host, args.port)
            print(f"listening on {srv.server_address[0]}:{srv.port}", file=sys.stderr, flush=True)
            try:
                srv.serve_forever()
            finally:
                srv.server_close()
    except (_Terminate, KeyboardInterrupt):
        pass
    return EXIT_OK


def cmd_validate(args) -> int:
    env = core.load_environment(args.env)
    suite = verifier.load_suite(args.suite)
    report = verifier.verify_environment(env, suite, Runtime([env]), args.run_id)
    text = report.dumps()
    _write(text, args.report)
    if args.figure:
        from .plotting import plot_validation
        plot_validation(report.to_dict(), args.figure)
    for key, crit in sorted(report.criteria.items()):
        print(f"{key}\t{'pass' if crit['passed'] else 'FAIL'}\t{crit['name']}", file=sys.stderr)
    return EXIT_OK if report.verdict else EXIT_FAIL


def cmd_score(args) -> int:
    env = core.load_environment(args.env)
    # tool names are checked during replay so failures carry a step index
    pred = core.parse_trajectory(_read(args.pred))
    gold = core.parse_trajectory(_read(args.gold))
    for label, traj in (("pred", pred), ("gold", gold)):
        if traj.environment != env.name:
            raise SpecError(label, f"trajectory targets {traj.environment!r}, not {env.name!r}")
    scenario = json.loads(_read(args.scenario))
    cfg = reward.RewardConfig(args.alpha, args.gamma, args.float_tolerance, tuple(args.mask_state_path))
    runtime = Runtime([env])
    check = core.validate_state(scenario, env.schema)
    if not check.ok:
        raise SpecError("scenario", "; ".join(f"{v.path} ({v.rule})" for v in check.violations))
    gold_final = reward.replay_trajectory(gold, scenario, runtime)
    pred_final = reward.replay_trajectory(pred, scenario, runtime)
    breakdown = reward.composite_reward(pred, gold, pred_final, gold_final, cfg, env.schema, env.tool_names)
    _write(json.dumps(breakdown.report(), sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_plan(args) -> int:
    chain, _ = sampler.load_chain(_read(args.chain))
    if not chain.chain:
        raise ParseError("chain is empty")
    plan = trajkit.partition_turns(chain, random.Random(args.seed))
    _write(trajkit.save_plan(plan, Path(args.chain).name), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> UsageParser:
    p = UsageParser(prog="envsynth", description="Tool graphs, chain sampling, environment hosting, "
                                                 "verification and trajectory scoring.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("build-graph", help="build the tool dependency graph")
    g.add_argument("--env-dir", required=True)
    g.add_argument("--threshold", type=_unit, default=toolgraph.DEFAULT_THRESHOLD)
    g.add_argument("--provider", choices=("lexical", "remote"), default="lexical")
    g.add_argument("--provider-url")
    g.add_argument("--refine", choices=("rules", "remote", "none"), default="rules")
    g.add_argument("--refiner-url")
    g.add_argument("--out")
    g.add_argument("--figure", help="also render the graph to this image file")
    g.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("sample", help="sample a dependency-closed tool chain")
    s.add_argument("--graph", required=True)
    s.add_argument("--env-dir", required=True, help="environments the graph was built from")
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--d-max", type=_nonneg_int, default=3)
    s.add_argument("--override-p", type=_unit, default=0.1)
    s.add_argument("--branch-max", type=_positive_int, default=1)
    s.add_argument("--max-restarts", type=_nonneg_int, default=16)
    s.add_argument("--start", help="tool name or env/tool")
    s.add_argument("--classify", choices=("heuristic", "hints", "remote"), default="heuristic")
    s.add_argument("--classifier-url")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    v = sub.add_parser("serve", help="host environments over the wire protocol")
    v.add_argument("--env-dir", required=True)
    v.add_argument("--transport", choices=("stdio", "tcp"), default="stdio")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=0)
    v.set_defaults(func=cmd_serve)

    c = sub.add_parser("validate", help="run the layered verifier")
    c.add_argument("--env", required=True)
    c.add_argument("--suite", required=True)
    c.add_argument("--report")
    c.add_argument("--run-id", default="r1")
    c.add_argument("--figure", help="also render a scenario-by-layer matrix")
    c.set_defaults(func=cmd_validate)

    r = sub.add_parser("score", help="score a predicted trajectory against gold")
    r.add_argument("--pred", required=True)
    r.add_argument("--gold", required=True)
    r.add_argument("--env", required=True)
    r.add_argument("--scenario", required=True)
    r.add_argument("--alpha", type=_unit, default=0.5)
    r.add_argument("--gamma", type=_nonneg, default=0.1)
    r.add_argument("--float-tolerance", type=_nonneg, default=1e-9)
    r.add_argument("--mask-state-path", action="append", default=[])
    r.add_argument("--out")
    r.set_defaults(func=cmd_score)

    n = sub.add_parser("plan", help="partition a chain into turns")
    n.add_argument("--chain", required=True)
    n.add_argument("--seed", type=int, required=True)
    n.add_argument("--out")
    n.set_defaults(func=cmd_plan)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ReplayError as exc:
        print(f"error: replay failed at step {exc.step_index} ({exc.tool}): {exc.cause}", file=sys.stderr)
        return EXIT_REPLAY
    except (ProviderError, RefinerError, RemoteError, UnknownEnvironment, server.BindError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except (ParseError, SpecError, PathError, verifier.EmptySuite, RuntimeToolError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EnvSynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
