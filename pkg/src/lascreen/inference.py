"""Empirical-Bayes value-added residuals, comparative intervals and screening.

For LA block k the predictions are ``u_hat = omega Z_k' V_k^-1 (y_k - X_k beta)``,
computed jointly for the LA effect and every school in the block, so each
level conditions on the other.  The comparative covariance is
``omega - omega Z' V^-1 Z omega`` per unit; optionally the extra term from
estimating beta, ``omega Z' V^-1 X (X' V^-1 X)^-1 X' V^-1 Z omega``, is added.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .estimator import BlockSystem, FitResult, absolute_pieces
from .model import LEVELS, DesignMatrices

FLAGS = ("high", "low", "none")


@dataclass(frozen=True, eq=False)
class ResidualSet:
    """Per-unit EB estimates at one level.

    ``u_hat`` is (units, q), ``comp_var`` is (units, q, q).  ``la_ids`` gives
    each unit's LA (equal to ``unit_ids`` at LA level).
    """

    level: str
    terms: tuple
    unit_ids: np.ndarray
    la_ids: np.ndarray
    u_hat: np.ndarray
    comp_var: np.ndarray
    n_pupils: np.ndarray
    omega: np.ndarray
    adjusted_for_beta: bool = False

    def __len__(self):
        return len(self.unit_ids)

    def se(self) -> np.ndarray:
        d = np.diagonal(self.comp_var, axis1=1, axis2=2)
        return np.sqrt(np.clip(d, 0.0, None))

    def to_frame(self) -> pd.DataFrame:
        out = pd.DataFrame({"unit_id": self.unit_ids, "la_id": self.la_ids, "n_pupils": self.n_pupils})
        se = self.se()
        for a, t in enumerate(self.terms):
            out[f"u_{t}"] = self.u_hat[:, a]
            out[f"se_{t}"] = se[:, a]
        return out


def eb_residuals(design: DesignMatrices, fit: FitResult, level: str,
                 adjust_for_beta: bool = False) -> ResidualSet:
    """EB predictions and comparative covariances for ``level`` in {"la", "school"}."""
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    terms = tuple(fit.la_terms if level == "la" else fit.school_terms)
    cols = design.z_la_cols if level == "la" else design.z_school_cols
    if tuple(design.term_names[c] for c in cols) != terms or design.p != fit.beta.size:
        raise ValueError("design and fit dimensions do not match")
    if not terms:
        raise ValueError(f"the model has no random coefficients at level {level!r}")
    omega = np.asarray(fit.omega_la if level == "la" else fit.omega_school, dtype=float)
    pieces = absolute_pieces(BlockSystem(design), fit.params, eb=True)
    if level == "la":
        u = np.array(pieces.u_la)
        A = np.array(pieces.A_la)
        ZVX = np.array(pieces.ZVX_la)
        ids = np.asarray(design.la_ids, dtype=object)
        la_of = ids
        n_units = np.bincount(design.la_index, minlength=design.n_las)
    else:
        u = np.concatenate(pieces.u_school)
        A = np.concatenate(pieces.A_school)
        ZVX = np.concatenate(pieces.ZVX_school)
        ids = np.asarray(design.school_ids, dtype=object)
        la_of = np.asarray(design.la_ids, dtype=object)[design.school_la]
        n_units = np.bincount(design.school_index, minlength=design.n_schools)
    comp = omega[None] - omega[None] @ A @ omega[None]
    if adjust_for_beta:
        B = omega[None] @ ZVX  # (units, q, p)
        cov_beta = linalg.pinvh(pieces.XVX)
        comp = comp + B @ cov_beta[None] @ np.swapaxes(B, 1, 2)
    comp = 0.5 * (comp + np.swapaxes(comp, 1, 2))
    return ResidualSet(level, terms, ids, la_of, u, comp, n_units, omega, adjust_for_beta)


def critical_value(confidence: float, n_tests: int = 1) -> float:
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie strictly between 0 and 1")
    alpha = (1.0 - confidence) / max(int(n_tests), 1)
    return float(stats.norm.isf(alpha / 2.0))


@dataclass(frozen=True, eq=False)
class ScreeningReport:
    """Intervals and flags, one row per (unit, term) in ``table``."""

    level: str
    confidence: float
    bonferroni: bool
    z: float
    terms: tuple
    table: pd.DataFrame

    def counts(self) -> dict:
        return {t: screen_counts(self, t) for t in self.terms}

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "confidence": self.confidence,
            "bonferroni": self.bonferroni,
            "critical_value": self.z,
            "counts": {t: {"high": h, "low": lo} for t, (h, lo) in self.counts().items()},
            "units": self.table.to_dict(orient="records"),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def intervals(residuals: ResidualSet, confidence: float = 0.95,
              bonferroni: bool = False) -> ScreeningReport:
    """Marginal intervals ``u_hat +/- z * sqrt(comp_var)`` and high/low flags.

    With ``bonferroni`` the tail probability is divided by the number of units.
    A unit with zero comparative variance gets a degenerate interval.
    """
    z = critical_value(confidence, len(residuals) if bonferroni else 1)
    se = residuals.se()
    frames = []
    for a, t in enumerate(residuals.terms):
        est = residuals.u_hat[:, a]
        lo, hi = est - z * se[:, a], est + z * se[:, a]
        flag = np.where(lo > 0, "high", np.where(hi < 0, "low", "none"))
        frames.append(pd.DataFrame({
            "unit_id": residuals.unit_ids, "la_id": residuals.la_ids, "term": t,
            "estimate": est, "se": se[:, a], "lo": lo, "hi": hi, "flag": flag,
            "n_pupils": residuals.n_pupils,
        }))
    table = pd.concat(frames, ignore_index=True)
    return ScreeningReport(residuals.level, float(confidence), bool(bonferroni), z,
                           residuals.terms, table)


def screen_counts(report: ScreeningReport, term: str = "intercept") -> tuple[int, int]:
    """``(n_high, n_low)`` for one coefficient."""
    if term not in report.terms:
        raise KeyError(f"term {term!r} not in report")
    f = report.table.loc[report.table["term"] == term, "flag"]
    return int((f == "high").sum()), int((f == "low").sum())


def caterpillar_data(report: ScreeningReport, term: str = "intercept") -> pd.DataFrame:
    """Units ranked by estimate (ties by id): rank, id, estimate, lo, hi, flag."""
    if term not in report.terms:
        raise KeyError(f"term {term!r} not in report")
    t = report.table.loc[report.table["term"] == term]
    t = t.assign(_id=t["unit_id"].astype(str)).sort_values(["estimate", "_id"], kind="mergesort")
    return pd.DataFrame({
        "rank": np.arange(1, len(t) + 1),
        "id": t["unit_id"].to_numpy(),
        "estimate": t["estimate"].to_numpy(),
        "lo": t["lo"].to_numpy(),
        "hi": t["hi"].to_numpy(),
        "flag": t["flag"].to_numpy(),
    })


def interval_width_ratio(report_sample: ScreeningReport, report_full: ScreeningReport,
                         term: str = "intercept") -> float:
    """Mean interval width in the sample report over that in the full report."""
    if (report_sample.level != report_full.level
            or report_sample.confidence != report_full.confidence
            or report_sample.bonferroni != report_full.bonferroni):
        raise ValueError("reports differ in level or confidence")
    a = report_sample.table.loc[report_sample.table["term"] == term]
    b = report_full.table.loc[report_full.table["term"] == term]
    if len(a) == 0 or set(a["unit_id"]) != set(b["unit_id"]):
        raise ValueError("mismatched units")
    wa = (a["hi"] - a["lo"]).mean()
    wb = (b["hi"] - b["lo"]).mean()
    if not wb > 0:
        raise ValueError("reference intervals have zero width")
    return float(wa / wb)
