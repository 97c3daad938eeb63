"""Comparison tables, text rendering, long-format CSV, and figures."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .counterfactual import ComparisonTable, MechanismOutcome, SweepTable, aggregate, compare_levels

# (file stem, base mechanism, alternative mechanism); the voucher is the no-auction benchmark
COMPARISONS = (
    ("no_auction_vs_auction", "voucher", "auction"),
    ("no_auction_vs_predetermined", "voucher", "predetermined"),
    ("auction_vs_predetermined", "auction", "predetermined"),
)


def _num(x: float) -> str:
    return repr(float(x))


def dumps_records(records: Sequence[Mapping], columns: Sequence[str], format: str) -> str:
    if format == "json":
        return json.dumps([{c: r[c] for c in columns} for r in records], indent=1) + "\n"
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in records:
            w.writerow([_num(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
        return buf.getvalue()
    if format == "text":
        return render_text(records, columns)
    raise ValueError(f"unknown format {format!r}")


def render_text(records: Sequence[Mapping], columns: Sequence[str], title: str = "") -> str:
    """Fixed-width table; money in dollars to 2 decimals, percentages to 1."""
    def cell(col, v):
        if isinstance(v, str):
            return v
        if col.startswith("pct"):
            return "nan" if not np.isfinite(v) else f"{100 * v:.1f}%"
        return f"{v:,.2f}"

    rows = [[cell(c, r[c]) for c in columns] for r in records]
    widths = [max(len(c), *(len(row[k]) for row in rows)) for k, c in enumerate(columns)]
    lines = [title] if title else []
    lines.append("  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(columns, widths))))
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) if k == 0 else v.rjust(w) for k, (v, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def comparison_tables(outcomes: Mapping[str, Sequence[MechanismOutcome]],
                      firms: Sequence[str]) -> dict[str, ComparisonTable]:
    levels = {k: aggregate(v, firms) for k, v in outcomes.items()}
    return {stem: compare_levels(base, levels[base], alt, levels[alt], firms)
            for stem, base, alt in COMPARISONS}


def sweep_columns(sweep: SweepTable) -> list[str]:
    cols = ["metric"] + [f"scale_{s:g}" for s in sweep.scales]
    for s in sweep.scales:
        if s != sweep.base_scale:
            cols += [f"diff_{s:g}", f"pct_diff_{s:g}"]
    return cols


def long_records(outcomes: Mapping[str, Sequence[MechanismOutcome]], sweep: SweepTable | None,
                 firms: Sequence[str]) -> list[dict]:
    out = []
    for kind, outs in outcomes.items():
        for metric, value in aggregate(outs, firms).items():
            out.append({"mechanism": kind, "metric": metric, "value": value})
    if sweep is not None:
        for s in sweep.scales:
            for metric in sweep.rows:
                out.append({"mechanism": f"auction_scale_{s:g}", "metric": metric, "value": sweep.levels[s][metric]})
    return out


def _figure_mechanisms(outcomes, firms, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = ["GEXP", "CS_WIC", "CS_nonWIC", "pi_all", "TS"]
    kinds = list(outcomes)
    levels = {k: aggregate(outcomes[k], firms) for k in kinds}
    x = np.arange(len(metrics))
    width = 0.8 / max(len(kinds), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, k in enumerate(kinds):
        ax.bar(x + i * width, [levels[k][m] / 1e6 for m in metrics], width, label=k)
    ax.set_xticks(x + width * (len(kinds) - 1) / 2, metrics)
    ax.set_ylabel("$ million per market")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _figure_sweep(sweep: SweepTable, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for metric in ("GEXP", "CS_WIC", "CS_nonWIC"):
        ax.plot(sweep.scales, [sweep.levels[s][metric] / 1e6 for s in sweep.scales], marker="o", label=metric)
    ax.set_xlabel("WIC population scale")
    ax.set_ylabel("$ million per market")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_report(outcomes: Mapping[str, Sequence[MechanismOutcome]], sweep: SweepTable | None,
                 firms: Sequence[str], out_dir, format: str = "csv", figures: bool = True) -> dict[str, Path]:
    """Write the comparison tables, sweep table, long CSV, text report and figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = {"csv": "csv", "json": "json", "text": "txt"}[format]
    written: dict[str, Path] = {}
    text_parts = []
    for stem, table in comparison_tables(outcomes, firms).items():
        path = out_dir / f"table_{stem}.{ext}"
        path.write_text(dumps_records(table.records(), table.columns, format))
        written[stem] = path
        text_parts.append(render_text(table.records(), table.columns, title=f"{table.alt} vs {table.base}"))
    if sweep is not None:
        cols = sweep_columns(sweep)
        path = out_dir / f"table_program_size.{ext}"
        recs = sweep.records()
        path.write_text(dumps_records(recs, cols, format))
        written["program_size"] = path
        text_parts.append(render_text(recs, cols, title="WIC program size (auction)"))
    long = long_records(outcomes, sweep, firms)
    path = out_dir / "long.csv"
    path.write_text(dumps_records(long, ["mechanism", "metric", "value"], "csv"))
    written["long"] = path
    path = out_dir / "report.txt"
    path.write_text("\n".join(text_parts))
    written["text"] = path
    if figures:
        fig_dir = out_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        _figure_mechanisms(outcomes, firms, fig_dir / "mechanisms.png")
        written["fig_mechanisms"] = fig_dir / "mechanisms.png"
        if sweep is not None:
            _figure_sweep(sweep, fig_dir / "program_size.png")
            written["fig_program_size"] = fig_dir / "program_size.png"
    return written


def sweep_to_json(sweep: SweepTable) -> str:
    return json.dumps({"scales": list(sweep.scales), "rows": list(sweep.rows), "base_scale": sweep.base_scale,
                       "firms": list(sweep.firms),
                       "levels": [{"scale": s, "values": sweep.levels[s]} for s in sweep.scales]}, indent=1) + "\n"


def sweep_from_json(text: str) -> SweepTable:
    d = json.loads(text)
    levels = {float(e["scale"]): {k: float(v) for k, v in e["values"].items()} for e in d["levels"]}
    return SweepTable(tuple(float(s) for s in d["scales"]), tuple(d["rows"]), levels,
                      float(d["base_scale"]), tuple(d["firms"]))
