"""Reading and writing evaluation, statistics and leaderboard reports.

Evaluation reports are JSON Lines: one ``{"record": "case", ...}`` object per
(case, structure) followed by a single ``{"record": "summary", ...}``.  A
tab-separated copy of the per-case rows is written alongside.  Floats are
written with ``repr`` so reruns give identical bytes; NaN becomes ``null``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable

from petseg.metrics import CaseScore, EvalReport, LeaderboardRow, report_from_scores
from petseg.stats import StatReport, format_p, render_matrix

CASE_FIELDS = ("case_id", "structure", "dsc", "truth_voxels", "pred_voxels", "intersection")


def _num(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return repr(x) if isinstance(x, float) else str(x)


def write_eval_report(report: EvalReport, out_dir, name: str = "model") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl = out_dir / f"{name}.eval.jsonl"
    tsv = out_dir / f"{name}.eval.tsv"
    lines = []
    for c in report.per_case:
        rec = {"record": "case"}
        rec.update({f: _num(getattr(c, f)) for f in CASE_FIELDS})
        lines.append(json.dumps(rec, sort_keys=False))
    summary = {
        "record": "summary",
        "model": name,
        "n_cases": report.n_cases,
        "empty_empty": report.empty_empty,
        "dsc_agg": {k: _num(v) for k, v in report.dsc_agg_per_structure.items()},
        "mean_dsc_agg": _num(report.mean_dsc_agg),
        "mean_dsc": {k: _num(v) for k, v in report.mean_dsc_per_structure.items()},
    }
    lines.append(json.dumps(summary))
    jsonl.write_text("\n".join(lines) + "\n")
    rows = ["\t".join(CASE_FIELDS)]
    rows += ["\t".join(_fmt(getattr(c, f)) for f in CASE_FIELDS) for c in report.per_case]
    tsv.write_text("\n".join(rows) + "\n")
    return jsonl, tsv


def read_eval_report(path) -> tuple[str, EvalReport]:
    """Load a JSONL evaluation report; returns ``(model name, report)``."""
    path = Path(path)
    scores, summary = [], None
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["record"] == "case":
            d = rec["dsc"]
            scores.append(
                CaseScore(rec["case_id"], rec["structure"], math.nan if d is None else float(d),
                          int(rec["truth_voxels"]), int(rec["pred_voxels"]), int(rec["intersection"]))
            )
        elif rec["record"] == "summary":
            summary = rec
    if summary is None:
        raise ValueError(f"{path}: no summary record")
    name = summary.get("model") or path.name.split(".")[0]
    return name, report_from_scores(scores, summary.get("empty_empty", "one"))


def format_eval_summary(report: EvalReport, name: str = "model") -> str:
    lines = [f"model: {name}   cases: {report.n_cases}   empty-empty: {report.empty_empty}",
             f"{'structure':<10}{'DSC_agg':>10}{'mean DSC':>10}"]
    for s, v in report.dsc_agg_per_structure.items():
        lines.append(f"{s:<10}{v:>10.5f}{report.mean_dsc_per_structure.get(s, math.nan):>10.5f}")
    lines.append(f"{'mean':<10}{report.mean_dsc_agg:>10.5f}")
    return "\n".join(lines)


def read_aggregate_table(path) -> list[tuple[str, dict[str, float]]]:
    """Read a leaderboard input table: a ``name`` column plus one column per structure."""
    with open(path, newline="") as fh:
        reader = csv.DictReader((l for l in fh if not l.startswith("#")), delimiter="\t")
        if reader.fieldnames is None or reader.fieldnames[0] != "name":
            raise ValueError(f"{path}: first column must be 'name'")
        structures = [f for f in reader.fieldnames[1:] if f != "mean"]
        return [(row["name"], {s: float(row[s]) for s in structures}) for row in reader]


def write_leaderboard(rows: Iterable[LeaderboardRow], path=None) -> str:
    rows = list(rows)
    structures = list(rows[0].aggregates) if rows else []
    lines = ["\t".join(["rank", "name", *structures, "mean"])]
    for r in rows:
        lines.append("\t".join([str(r.rank), r.name, *(f"{r.aggregates[s]:.5f}" for s in structures), r.mean_display]))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def write_stat_report(report: StatReport, out_dir, name: str = "stats") -> tuple[Path, Path]:
    """Write the display matrix (``~0`` for p < 1e-5) and raw JSONL records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / f"{name}.matrix.txt"
    jsonl = out_dir / f"{name}.jsonl"
    cfg = report.config
    header = (f"# {report.kind} Wilcoxon signed-rank, two-sided; alpha={cfg.alpha}; "
              f"n_bootstrap={cfg.n_bootstrap}; seed={cfg.seed}; p < 1e-05 shown as ~0\n")
    txt.write_text(header + render_matrix(report) + "\n")
    lines = [json.dumps({"record": "config", "kind": report.kind, "alpha": cfg.alpha,
                         "n_bootstrap": cfg.n_bootstrap, "seed": cfg.seed, "mode": cfg.mode,
                         "zero_diff_policy": cfg.zero_diff_policy, "models": report.models})]
    for r in report.pairs:
        lines.append(json.dumps({
            "record": "pair", "model_a": r.model_a, "model_b": r.model_b, "p_value": _num(r.p_value),
            "statistic": _num(r.statistic), "n_effective": r.n_effective, "method": r.method,
            "display": format_p(r.p_value),
            "significant": None if math.isnan(r.p_value) else bool(r.p_value < cfg.alpha),
        }))
    jsonl.write_text("\n".join(lines) + "\n")
    return txt, jsonl
