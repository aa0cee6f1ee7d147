"""Optional figures for the CLI: the dependency graph and a validation matrix.

Both functions render with the Agg backend straight to a file, so they work
headless.  Nothing else in the package imports matplotlib.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

EDGE_COLORS = {"semantic": "tab:blue", "refined": "tab:orange"}


def plot_graph(graph, path, title: str = "") -> Path:
    """Circular layout; edges coloured by provenance."""
    nodes = list(graph.nodes)
    n = max(len(nodes), 1)
    pos = {r: (math.cos(2 * math.pi * i / n), math.sin(2 * math.pi * i / n)) for i, r in enumerate(nodes)}
    fig, ax = plt.subplots(figsize=(6, 6))
    for e in graph.edges:
        (x0, y0), (x1, y1) = pos[e.src], pos[e.dst]
        ax.annotate("", xy=(x1, y1), xytext=(x0, y0),
                    arrowprops=dict(arrowstyle="-|>", color=EDGE_COLORS.get(e.provenance, "grey"),
                                    shrinkA=12, shrinkB=12, lw=1.2, connectionstyle="arc3,rad=0.08"))
    for r, (x, y) in pos.items():
        ax.plot(x, y, "o", ms=10, color="white", mec="black")
        ax.text(x * 1.15, y * 1.15, r.tool, ha="center", va="center", fontsize=8)
    for prov, color in EDGE_COLORS.items():
        ax.plot([], [], color=color, label=prov)
    ax.legend(loc="lower right", fontsize=8, frameon=False)
    ax.set_xlim(-1.6, 1.6)
    ax.set_ylim(-1.6, 1.6)
    ax.set_aspect("equal")
    ax.axis("off")
    if title:
        ax.set_title(title)
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


# cell codes: 0 skipped, 1 pass, 2 fail, 3 expected rejection
_CELL_COLORS = ListedColormap(["#dddddd", "#4daf4a", "#e41a1c", "#377eb8"])


def _cells(scenario: dict) -> list:
    l1 = scenario["load_scenario_result"]
    if l1.get("expected_error"):
        first = 3
    else:
        first = 1 if l1.get("success") else 2
    l2 = scenario["tool_execution_results"]
    second = 0 if not l2 else (1 if all(e["passed"] for e in l2) else 2)
    l3 = scenario["save_scenario_result"]
    third = 0 if l3.get("skipped") else (1 if l3.get("consistency") else 2)
    return [first, second, third]


def plot_validation(report: dict, path) -> Path:
    """Scenario-by-layer matrix from an environment report dict."""
    scenarios = report["scenarios"]
    grid = [_cells(s) for s in scenarios] or [[0, 0, 0]]
    fig, ax = plt.subplots(figsize=(4, 0.45 * len(grid) + 1.2))
    ax.imshow(grid, cmap=_CELL_COLORS, vmin=0, vmax=3, aspect="auto")
    ax.set_xticks(range(3))
    ax.set_xticklabels(["load", "tools", "save"])
    ax.set_yticks(range(len(scenarios)))
    ax.set_yticklabels([s["scenario_id"] for s in scenarios])
    crit = " ".join(f"{k}:{'ok' if v['passed'] else 'FAIL'}" for k, v in sorted(report["criteria"].items()))
    ax.set_title(f"{report['environment']}  {crit}", fontsize=8)
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path
