"""PNG figures written next to the tabular outputs.

Kept apart from the numeric modules so nothing outside the CLI report path
imports matplotlib.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from mdcs.metrics import GROUPS  # noqa: E402

# Software=None drops the version stamp so identical data gives identical bytes.
_PNG_META = {"Software": None}
_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return str(path)


def report_figure(report: dict, path) -> str:
    """Grouped bars: accuracy per shot group for each expert and the ensemble, plus sigma."""
    rows = report["rows"]
    groups = [g for g in GROUPS if any(g in r for r in rows)]
    with plt.rc_context(_STYLE):
        ncols = 2 if "variance" in report else 1
        fig, axes = plt.subplots(1, ncols, figsize=(5.5 * ncols, 3.4), squeeze=False)
        ax = axes[0, 0]
        width = 0.8 / len(rows)
        x = np.arange(len(groups))
        for i, row in enumerate(rows):
            vals = [100.0 * row.get(g, np.nan) for g in groups]
            hatch = "//" if row["model"].endswith("(sigma)") else None
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width, label=row["model"], hatch=hatch)
        ax.set_xticks(x, groups)
        ax.set_ylabel("accuracy / sigma (%)")
        ax.legend(fontsize=7, ncol=min(len(rows), 4), loc="lower center", bbox_to_anchor=(0.5, 1.0))
        if ncols == 2:
            _variance_axes(axes[0, 1], report["variance"])
        return _save(fig, path)


def _variance_axes(ax, block: dict) -> None:
    names = list(block["columns"])
    groups = [g for g in GROUPS if any(g in block["columns"][n] for n in names)]
    width = 0.8 / len(names)
    x = np.arange(len(groups))
    for i, name in enumerate(names):
        vals = [block["columns"][name].get(g, np.nan) for g in groups]
        ax.bar(x + (i - (len(names) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x, groups)
    ax.set_ylabel(f"model variance (m={block['m']})")
    ax.legend(fontsize=7)


def sweep_figure(rows: list, key: str, path) -> str:
    """Per-group accuracy against the swept setting, one line per group."""
    labels = [" ".join(format(v, "g") for v in r[key]) if isinstance(r[key], list) else format(r[key], "g")
              for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        for g in (*GROUPS, "sigma"):
            if all(g in r for r in rows):
                style = "--" if g == "sigma" else "-"
                ax.plot(x, [100.0 * r[g] for r in rows], style, marker="o", label=g)
        ax.set_xticks(x, labels, rotation=30 if max(map(len, labels)) > 6 else 0)
        ax.set_xlabel(key)
        ax.set_ylabel("accuracy (%)")
        ax.legend(fontsize=7)
        return _save(fig, path)


def training_figure(history: list, path) -> str:
    """Total loss and per-expert DL/CS terms against epoch."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        if history:
            epochs = [r["epoch"] for r in history]
            ax.plot(epochs, [r["total"] for r in history], color="black", label="total")
            experts = sorted(int(k[3:]) for k in history[0] if k.startswith("dl_"))
            for mu in experts:
                line, = ax.plot(epochs, [r[f"dl_{mu}"] for r in history], label=f"DL E{mu + 1}")
                ax.plot(epochs, [r[f"cs_{mu}"] for r in history], ":", color=line.get_color(),
                        label=f"CS E{mu + 1}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)


def variance_figure(block: dict, path) -> str:
    """Bars of model variance per shot group for each method column."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        _variance_axes(ax, block)
        return _save(fig, path)
