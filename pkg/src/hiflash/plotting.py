"""Figures for the report command, written next to each recipe's CSV."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _paired(ax, rows, a, b, labels, ylabel):
    pts = [(r["seed"], r[a], r[b]) for r in rows if _num(r.get("seed")) and _num(r.get(a)) and _num(r.get(b))]
    if not pts:
        return
    seeds = [p[0] for p in pts]
    width = 0.4
    ax.bar([s - width / 2 for s in seeds], [p[1] for p in pts], width, label=labels[0])
    ax.bar([s + width / 2 for s in seeds], [p[2] for p in pts], width, label=labels[1])
    ax.set_xlabel("seed")
    ax.set_ylabel(ylabel)
    ax.legend()


def _lambda(ax, rows):
    seeds = sorted({r["seed"] for r in rows})
    for s in seeds:
        pts = [(r["lam"], r["total_js"]) for r in rows if r["seed"] == s]
        # symlog so the lambda = 0 point stays on the axis
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"seed {s}")
    ax.set_xscale("symlog", linthresh=0.1)
    ax.set_xlabel("lambda")
    ax.set_ylabel("total JS divergence")
    ax.legend(fontsize="small", ncol=2)


def _hist(ax, values, xlabel):
    ax.hist(values, bins=30)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")


def _bounds(ax, rows):
    pts = [(int(r["check"][6:-1]), r["value"]) for r in rows if r["check"].startswith("U(tau=")]
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o")
    ax.set_xlabel("staleness tau")
    ax.set_ylabel("bound U")


def _ddqn(ax, rows):
    names = [r["policy"] for r in rows]
    ax.bar(range(len(rows)), [r["cost"] for r in rows])
    ax.set_xticks(range(len(rows)), names, rotation=45, ha="right")
    ax.set_ylabel("cumulative cost")


def _association(ax, rows):
    pts = [r for r in rows if r["instance"] != "symmetric"]
    ax.scatter([r["oracle"] for r in pts], [r["greedy"] for r in pts], s=10)
    hi = max(max(r["greedy"] for r in pts), max(r["oracle"] for r in pts))
    ax.plot([0, hi], [0, hi], color="grey", linewidth=1)
    ax.set_xlabel("brute-force objective")
    ax.set_ylabel("greedy objective")


def _figure(name, rows):
    fig, ax = plt.subplots(figsize=(6, 4))
    if name == "degenerate-gd":
        ax.plot([r["step"] for r in rows], [r["max_abs_diff"] for r in rows])
        ax.set_xlabel("cloud update")
        ax.set_ylabel("max |w_fl - w_gd|")
    elif name == "gradient-suite":
        for model in ("regularized-logistic", "two-layer-mlp", "q-network"):
            vals = [r["rel_err"] for r in rows if r["model"] == model]
            ax.plot(range(len(vals)), vals, ".", label=model)
        ax.set_yscale("symlog", linthresh=1e-12)
        ax.set_xlabel("probe")
        ax.set_ylabel("relative error")
        ax.legend()
    elif name == "staleness-threshold":
        _paired(ax, rows, "epochs_fixed", "epochs_unbounded", ("tau <= 2", "no control"), "client epochs to target")
    elif name == "association-edge-iid":
        _paired(ax, rows, "updates_edge_iid", "updates_edge_noniid", ("Edge-IID", "Edge-NonIID"),
                "cloud updates to target")
    elif name == "comm-efficiency":
        _paired(ax, rows, "comms_hifl", "comms_fedavg", ("HiFL", "FedAvg"), "cloud communications to target")
    elif name == "lambda-monotonicity":
        _lambda(ax, rows)
    elif name == "js-properties":
        _hist(ax, [r["js_pq"] for r in rows], "JS divergence (bits)")
    elif name == "association-oracle":
        _association(ax, rows)
    elif name == "ddqn-toy":
        _ddqn(ax, rows)
    elif name == "bound-calculators":
        _bounds(ax, rows)
    elif name == "determinism":
        ax.bar(range(len(rows)), [r["bytes"] for r in rows],
               color=["tab:green" if r["identical"] else "tab:red" for r in rows])
        ax.set_xlabel("run")
        ax.set_ylabel("event log bytes")
    else:
        plt.close(fig)
        return None
    ax.set_title(name)
    fig.tight_layout()
    return fig


def render(name, rows, out_dir):
    """Write ``<name>.png`` for a recipe's evidence rows; returns the path or None."""
    if not rows:
        return None
    fig = _figure(name, rows)
    if fig is None:
        return None
    path = os.path.join(out_dir, f"{name}.png")
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_summary(results, out_dir):
    """Pass/fail overview across all recipes."""
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r.name for r in results]
    ax.barh(range(len(results)), [1] * len(results),
            color=["tab:green" if r.passed else "tab:red" for r in results])
    ax.set_yticks(range(len(results)), names)
    ax.set_xticks([])
    ax.invert_yaxis()
    ax.set_title("acceptance recipes (green = pass)")
    fig.tight_layout()
    path = os.path.join(out_dir, "recipes.png")
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
