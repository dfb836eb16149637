"""Deterministic CSV/JSON emission of metric tables and statistics.

All numbers are written with repr (shortest round-trip) so identical
inputs produce byte-identical files; nothing here timestamps its output.
"""

from __future__ import annotations

import json

import numpy as np

from . import metrics
from . import stats

ZONE_LABELS = ("0%", "0-33%", "33-66%", "66-100%")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows) -> None:
    """rows: iterable of dicts keyed by the column names."""
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c)) for c in columns) + "\n")


def write_slices_csv(path, rows) -> None:
    write_csv(path, ("volume_id", "slice_idx", "zone", "dsc2d"), rows)


def write_volumes_csv(path, rows) -> None:
    write_csv(path, ("volume_id", "fold", "status", "dsc3d", "v_gt_mm3",
                     "v_pred_mm3", "delta_v_pct"), rows)


def write_zones_csv(path, table: metrics.ZoneTable) -> None:
    rows = []
    for label, b in zip(ZONE_LABELS, table.bins):
        rows.append({"zone": label, "mean_dsc2d": b.mean_dsc,
                     "sd_dsc2d": b.sd_dsc, "slices": b.count})
    write_csv(path, ("zone", "mean_dsc2d", "sd_dsc2d", "slices"), rows)


def write_xy_csv(path, x_name, y_name, xs, ys) -> None:
    write_csv(path, (x_name, y_name),
              [{x_name: float(x), y_name: float(y)} for x, y in zip(xs, ys)])


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _clean_nan(x: float) -> float | None:
    return None if not np.isfinite(x) else float(x)


def agreement_summary(v_gt, v_pred, dsc3d, zone_groups: dict) -> dict:
    """AgreementStats fields with per-section not-computable reporting.

    zone_groups maps a zone label to that zone's list of 2D Dice scores;
    ANOVA and post-hoc tests compare the zones holding >= 2 slices.
    """
    out = {}
    try:
        r, p, ci = stats.pearson(v_gt, v_pred)
        out["pearson"] = {"r": r, "p": p, "ci_low": ci[0], "ci_high": ci[1]}
    except (ValueError, stats.DegenerateVarianceError) as exc:
        out["pearson"] = {"error": str(exc)}
    try:
        bias, lo, hi = stats.bland_altman(v_gt, v_pred)
        out["bland_altman"] = {"bias": bias, "lower": lo, "upper": hi}
    except ValueError as exc:
        out["bland_altman"] = {"error": str(exc)}
    try:
        box = stats.boxplot_stats(dsc3d)
        out["dsc3d_boxplot"] = {
            "q1": box.q1, "median": box.median, "q3": box.q3, "iqr": box.iqr,
            "low_fence": box.low_fence, "high_fence": box.high_fence,
            "outliers": box.outliers,
        }
    except ValueError as exc:
        out["dsc3d_boxplot"] = {"error": str(exc)}
    usable = {label: vals for label, vals in zone_groups.items() if len(vals) >= 2}
    if len(usable) >= 2:
        labels = sorted(usable)
        groups = [usable[lab] for lab in labels]
        try:
            f, (d1, d2), p = stats.one_way_anova(groups)
            matrix = stats.posthoc_pairwise(groups)
            out["zone_anova"] = {"groups": labels, "f": f,
                                 "df_between": d1, "df_within": d2, "p": p}
            out["zone_posthoc"] = {
                "groups": labels,
                "p_matrix": [[_clean_nan(v) for v in row] for row in matrix],
            }
        except stats.DegenerateVarianceError as exc:
            out["zone_anova"] = {"error": str(exc)}
            out["zone_posthoc"] = {"error": str(exc)}
    else:
        reason = "fewer than 2 zones hold 2+ slices"
        out["zone_anova"] = {"error": reason}
        out["zone_posthoc"] = {"error": reason}
    return out
