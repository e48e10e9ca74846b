"""Table-style experiment reports rendered as text, CSV or JSON."""

from __future__ import annotations

import csv
import io
import json

from mdcs import metrics
from mdcs.dataops import ShotSplit
from mdcs.metrics import GROUPS

FORMATS = ("text", "csv", "json")
EXTENSIONS = {"text": "txt", "csv": "csv", "json": "json"}

# run parameters are our own small-scale choices, not the large-backbone settings
CONFIG_HEADING = "Resolved config (desk-scale defaults unless set in the config file):"


def build_report(dump: metrics.PredictionDump, split: ShotSplit, config_echo: str, lambdas=None) -> dict:
    """Per-expert rows, the ensemble row and the diversity-factor row.

    This is the only path from a prediction dump to a report, whether the
    dump comes straight from evaluation or is read back from disk.
    """
    rows = []
    for mu in range(dump.num_experts):
        acc = metrics.shot_accuracy(dump, split, metrics.expert_predictions(dump, mu))
        lam = None if lambdas is None else float(lambdas[mu])
        rows.append({"model": f"E{mu + 1}", "lambda": lam, **acc})
    rows.append({"model": "Ensemble", "lambda": None,
                 **metrics.shot_accuracy(dump, split, metrics.ensemble_predictions(dump))})
    rows.append({"model": "Ensemble (sigma)", "lambda": None, **metrics.shot_diversity(dump, split)})
    return {
        "title": "Recognition accuracy and diversity factor",
        "rows": rows,
        "shot_split": [s.value for s in split.assignment],
        "n_test": len(dump),
        "config": config_echo,
    }


def _num(value) -> str:
    # repr is the shortest string that reads back to the same float
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


def _pct(value) -> str:
    return "-" if value is None else f"{100.0 * value:.2f}"


def _text_table(header, rows) -> list:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return [fmt(header), "-" * len(fmt(header)), *[fmt(r) for r in rows]]


def _variance_rows(block: dict) -> list:
    return [[name, *[block["columns"][name].get(g) for g in GROUPS]] for name in block["columns"]]


def render(report: dict, fmt: str) -> str:
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "lambda", *GROUPS])
        for row in report["rows"]:
            writer.writerow([row["model"], _num(row["lambda"]), *[_num(row.get(g)) for g in GROUPS]])
        if "variance" in report:
            for name, *vals in _variance_rows(report["variance"]):
                writer.writerow([f"Var {name}", "", *[_num(v) for v in vals]])
        return buf.getvalue()
    lines = [report["title"] + " (%)", ""]
    table = [
        [row["model"], "" if row["lambda"] is None else f"{row['lambda']:g}", *[_pct(row.get(g)) for g in GROUPS]]
        for row in report["rows"]
    ]
    lines += _text_table(["Model", "lambda", *GROUPS], table)
    if "variance" in report:
        lines += ["", f"Model variance over m={report['variance']['m']} models"]
        vt = [[name, *[("-" if v is None else f"{v:.4f}") for v in vals]]
              for name, *vals in _variance_rows(report["variance"])]
        lines += _text_table(["Method", *GROUPS], vt)
    lines += ["", "Shot split: " + " ".join(report["shot_split"]), "", CONFIG_HEADING, report["config"].rstrip()]
    return "\n".join(lines) + "\n"


def render_table(rows: list, columns: list, fmt: str) -> str:
    """Render a sweep table (list of dicts) in one of the output formats."""
    if fmt == "json":
        return json.dumps(rows, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c), csv_mode=True) for c in columns])
        return buf.getvalue()
    body = [[_cell(row.get(c), csv_mode=False) for c in columns] for row in rows]
    return "\n".join(_text_table(columns, body)) + "\n"


def _cell(value, csv_mode: bool) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return " ".join(format(v, "g") for v in value)
    if isinstance(value, float):
        return repr(float(value)) if csv_mode else f"{value:.4f}"
    return str(value)


def render_variance(block: dict, fmt: str) -> str:
    """Render a variance-protocol result (one row per method column)."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    if fmt == "json":
        return json.dumps(block, indent=2, sort_keys=True) + "\n"
    rows = _variance_rows(block)
    acc = block.get("accuracy", {})
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", *GROUPS, "mean_accuracy"])
        for name, *vals in rows:
            writer.writerow([name, *[_num(v) for v in vals], _num(acc.get(name))])
        return buf.getvalue()
    table = [[name, *[("-" if v is None else f"{v:.6f}") for v in vals], _pct(acc.get(name))]
             for name, *vals in rows]
    lines = [f"Model variance over m={block['m']} models", ""]
    lines += _text_table(["Method", *GROUPS, "Acc (%)"], table)
    lines += ["", "Shot split: " + " ".join(block["shot_split"]), "", CONFIG_HEADING, block["config"].rstrip()]
    return "\n".join(lines) + "\n"
