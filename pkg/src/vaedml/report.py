"""Estimate-row CSV schema and Markdown table rendering."""

from __future__ import annotations

import math

import pandas as pd

from .errors import DomainError, SchemaError

ESTIMATE_COLUMNS = ["label", "theta", "se", "stars", "ci_low", "ci_high", "n", "folds"]

# optional metadata columns rendered as extra YES/NO or numeric rows
OPTIONAL_ROWS = [
    ("controls_linear", "Linear controls"),
    ("controls_quadratic", "Quadratic controls"),
    ("fe_industry", "Industry fixed effects"),
    ("fe_year", "Year fixed effects"),
    ("fe_firm", "Firm fixed effects"),
    ("constant", "Constant"),
    ("r2", "R-squared"),
]

TEMPLATES = {
    "main": "Effect estimates",
    "robustness": "Robustness checks",
    "heterogeneity": "Subgroup estimates",
    "temporal": "Current, lagged, and cumulative effects",
    "mediation": "Mediator regressions",
}

NOTES = "Notes: * p<0.1, ** p<0.05, *** p<0.01; robust standard errors in parentheses."


def stars(p_value: float) -> str:
    if p_value < 0.01:
        return "***"
    if p_value < 0.05:
        return "**"
    if p_value < 0.1:
        return "*"
    return ""


def format_cell(theta: float, se: float) -> str:
    z = theta / se if se > 0 else math.inf * (1 if theta else 0)
    p = math.erfc(abs(z) / math.sqrt(2.0)) if math.isfinite(z) else 0.0
    return f"{theta:.4f}{stars(p)}({se:.4f})"


def estimates_to_frame(rows: list[dict]) -> pd.DataFrame:
    frame = pd.DataFrame(rows)
    missing = [c for c in ESTIMATE_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"estimate rows are missing column(s) {missing}")
    ordered = ESTIMATE_COLUMNS + [c for c in frame.columns if c not in ESTIMATE_COLUMNS]
    return frame[ordered]


def render_report(estimates: pd.DataFrame, template: str = "main") -> str:
    """Markdown table: one column per estimate, coefficient***(se) cells."""
    if template not in TEMPLATES:
        raise DomainError(f"unknown template {template!r}; pick from {sorted(TEMPLATES)}")
    if len(estimates) == 0:
        raise DomainError("no estimates to render")
    missing = [c for c in ("label", "theta", "se", "n") if c not in estimates.columns]
    if missing:
        raise SchemaError(f"estimate table is missing column(s) {missing}")

    labels = [str(v) for v in estimates["label"]]
    lines = [f"## {TEMPLATES[template]}", ""]
    lines.append("| Variable | " + " | ".join(labels) + " |")
    lines.append("|---" * (len(labels) + 1) + "|")
    cells = [format_cell(t, s) for t, s in zip(estimates["theta"], estimates["se"])]
    lines.append("| Treatment | " + " | ".join(cells) + " |")
    for col, title in OPTIONAL_ROWS:
        if col not in estimates.columns:
            continue
        vals = []
        for v in estimates[col]:
            if isinstance(v, str):
                vals.append(v)
            elif isinstance(v, (bool,)):
                vals.append("YES" if v else "NO")
            else:
                vals.append(f"{v:.4f}")
        lines.append(f"| {title} | " + " | ".join(vals) + " |")
    lines.append("| Observations | " + " | ".join(str(int(v)) for v in estimates["n"]) + " |")
    lines.append("")
    lines.append(NOTES)
    lines.append("")
    return "\n".join(lines)
