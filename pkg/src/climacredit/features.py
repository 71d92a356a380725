"""Structured-feature preparation: imputation, weight-of-evidence binning,
information-value screening and variance-inflation pruning.

Every fitted object is learned from training rows only and can be applied
to held-out rows without looking at their labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

MISSING = "MISSING"
SMOOTHING = 0.5
IV_LOW, IV_HIGH = 0.01, 0.50
VIF_LIMIT = 10.0


class FeatureError(ValueError):
    pass


class SingleClass(FeatureError):
    pass


@dataclass
class ImputeStats:
    means: dict[str, float]
    categorical: list[str]

    def to_dict(self) -> dict:
        return {"means": self.means, "categorical": self.categorical}

    @classmethod
    def from_dict(cls, doc: dict) -> "ImputeStats":
        return cls(dict(doc["means"]), list(doc["categorical"]))


def fit_impute(frame: pd.DataFrame, continuous, categorical) -> ImputeStats:
    means = {}
    for col in continuous:
        values = pd.to_numeric(frame[col], errors="coerce")
        m = values.mean()
        means[col] = 0.0 if pd.isna(m) else float(m)
    return ImputeStats(means, list(categorical))


def impute(frame: pd.DataFrame, stats: ImputeStats) -> pd.DataFrame:
    """Mean-fill continuous columns; missing categoricals become ``MISSING``."""
    out = frame.copy()
    for col, mean in stats.means.items():
        out[col] = pd.to_numeric(out[col], errors="coerce").fillna(mean).astype(np.float64)
    for col in stats.categorical:
        out[col] = out[col].astype(object).where(out[col].notna(), MISSING).astype(str)
    return out


@dataclass
class BinSpec:
    feature: str
    kind: str  # "continuous" | "categorical"
    cuts: list[float] = field(default_factory=list)
    categories: dict[str, int] = field(default_factory=dict)
    woe: list[float] = field(default_factory=list)
    good: list[float] = field(default_factory=list)
    bad: list[float] = field(default_factory=list)

    @property
    def n_bins(self) -> int:
        return len(self.woe)

    def assign(self, column) -> np.ndarray:
        if self.kind == "continuous":
            x = np.asarray(column, dtype=np.float64)
            if np.isnan(x).any():
                raise FeatureError(f"{self.feature}: NaN in continuous column; impute first")
            return np.searchsorted(np.asarray(self.cuts, dtype=np.float64), x, side="left")
        missing_bin = self.categories[MISSING]
        return np.array([self.categories.get(str(v), missing_bin) for v in column], dtype=np.int64)

    def transform(self, column) -> np.ndarray:
        return np.asarray(self.woe, dtype=np.float64)[self.assign(column)]

    def proportions(self) -> tuple[np.ndarray, np.ndarray]:
        """Smoothed class shares per bin over the non-empty bins (empty bins get 0)."""
        g = np.asarray(self.good, dtype=np.float64)
        b = np.asarray(self.bad, dtype=np.float64)
        live = (g + b) > 0
        k = live.sum()
        pg = np.where(live, (g + SMOOTHING) / (g.sum() + SMOOTHING * k), 0.0)
        pb = np.where(live, (b + SMOOTHING) / (b.sum() + SMOOTHING * k), 0.0)
        return pg, pb

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "kind": self.kind,
            "cuts": list(self.cuts),
            "categories": dict(self.categories),
            "woe": list(self.woe),
            "good": list(self.good),
            "bad": list(self.bad),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BinSpec":
        return cls(**doc)


def woe_from_proportions(p_good, p_bad):
    return np.log(np.asarray(p_good, dtype=np.float64) / np.asarray(p_bad, dtype=np.float64))


def iv_from_proportions(p_good, p_bad) -> float:
    pg = np.asarray(p_good, dtype=np.float64)
    pb = np.asarray(p_bad, dtype=np.float64)
    return float(np.sum((pg - pb) * woe_from_proportions(pg, pb)))


def quantile_cuts(x: np.ndarray, n_bins: int) -> list[float]:
    """Inner cut points of an equal-frequency binning, taken as observed values."""
    qs = np.quantile(x, np.arange(1, n_bins) / n_bins, method="lower")
    cuts = np.unique(qs)
    return [float(c) for c in cuts if c < x.max()]


def fit_woe(column, labels, n_bins: int = 5, kind: str | None = None, feature: str = "") -> BinSpec:
    """Fit a weight-of-evidence binning. Label 1 marks a default ("bad")."""
    y = np.asarray(labels)
    if y.size == 0 or np.unique(y).size < 2:
        raise SingleClass(f"{feature}: labels must contain both classes")
    y = y.astype(np.int64)
    series = pd.Series(column)
    if kind is None:
        kind = "continuous" if pd.api.types.is_numeric_dtype(series) else "categorical"
    if kind == "continuous":
        x = series.to_numpy(dtype=np.float64)
        if np.isnan(x).any():
            raise FeatureError(f"{feature}: NaN in continuous column; impute first")
        spec = BinSpec(feature, kind, cuts=quantile_cuts(x, n_bins))
        bins = spec.assign(x)
        total = len(spec.cuts) + 1
    else:
        values = series.astype(object).where(series.notna(), MISSING).astype(str)
        levels = sorted(set(values) - {MISSING})
        cats = {c: i for i, c in enumerate(levels)}
        cats[MISSING] = len(levels)
        spec = BinSpec(feature, kind, categories=cats)
        bins = spec.assign(values)
        total = len(cats)
    good = np.bincount(bins[y == 0], minlength=total).astype(np.float64)
    bad = np.bincount(bins[y == 1], minlength=total).astype(np.float64)
    spec.good, spec.bad = good.tolist(), bad.tolist()
    pg, pb = spec.proportions()
    live = (good + bad) > 0
    spec.woe = np.where(live, np.log(np.where(live, pg, 1.0) / np.where(live, pb, 1.0)), 0.0).tolist()
    return spec


def information_value(spec: BinSpec) -> float:
    pg, pb = spec.proportions()
    return float(np.sum((pg - pb) * np.asarray(spec.woe)))


# -- collinearity --------------------------------------------------------------


def vif_values(matrix: np.ndarray) -> np.ndarray:
    """VIF of each column regressed (with intercept) on the remaining columns."""
    x = np.asarray(matrix, dtype=np.float64)
    n, p = x.shape
    out = np.empty(p)
    for j in range(p):
        target = x[:, j]
        sst = float(np.sum((target - target.mean()) ** 2))
        if sst <= 1e-12 * n:
            out[j] = math.inf
            continue
        design = np.column_stack([np.ones(n), np.delete(x, j, axis=1)])
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        ssr = float(np.sum((target - design @ coef) ** 2))
        r2 = 1.0 - ssr / sst
        out[j] = math.inf if 1.0 - r2 <= 1e-10 else 1.0 / (1.0 - r2)
    return out


def vif_filter(matrix, names, limit: float = VIF_LIMIT) -> pd.DataFrame:
    """Drop the largest-VIF column while any VIF exceeds ``limit``.

    Ties on the maximum go to the lexicographically smallest name. Returns
    ``feature,vif,status`` where vif is the value at removal (or final).
    """
    x = np.asarray(matrix, dtype=np.float64)
    names = list(names)
    if len(names) < 2:
        return pd.DataFrame({"feature": names, "vif": [1.0] * len(names), "status": ["KEPT"] * len(names)})
    alive = list(range(len(names)))
    record = {}
    while len(alive) >= 2:
        vifs = vif_values(x[:, alive])
        top = vifs.max()
        if not top > limit:
            for k, j in enumerate(alive):
                record[names[j]] = (float(vifs[k]), "KEPT")
            break
        candidates = [alive[k] for k in range(len(alive)) if vifs[k] == top]
        victim = min(candidates, key=lambda j: names[j])
        record[names[victim]] = (float(top), "VIF")
        alive.remove(victim)
    else:
        for j in alive:
            record[names[j]] = (1.0, "KEPT")
    return pd.DataFrame(
        {
            "feature": names,
            "vif": [record[n][0] for n in names],
            "status": [record[n][1] for n in names],
        }
    )


# -- end-to-end selection -----------------------------------------------------


@dataclass
class FeaturePlan:
    impute: ImputeStats
    bins: dict[str, BinSpec]
    report: pd.DataFrame
    selected: list[str]

    def transform(self, frame: pd.DataFrame) -> np.ndarray:
        filled = impute(frame, self.impute)
        if not self.selected:
            return np.zeros((len(frame), 0))
        return np.column_stack([self.bins[f].transform(filled[f].to_numpy()) for f in self.selected])

    def to_json(self) -> str:
        return json.dumps(
            {
                "impute": self.impute.to_dict(),
                "bins": {k: v.to_dict() for k, v in self.bins.items()},
                "selected": self.selected,
                "report": self.report.to_dict(orient="records"),
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "FeaturePlan":
        doc = json.loads(text)
        return cls(
            ImputeStats.from_dict(doc["impute"]),
            {k: BinSpec.from_dict(v) for k, v in doc["bins"].items()},
            pd.DataFrame(doc["report"], columns=["feature", "iv", "vif", "status"]),
            list(doc["selected"]),
        )


def select_features(
    frame: pd.DataFrame,
    labels,
    continuous,
    categorical,
    n_bins: int = 5,
    iv_bounds=(IV_LOW, IV_HIGH),
    vif_limit: float = VIF_LIMIT,
) -> FeaturePlan:
    """Fit imputation and WoE on ``frame`` (training rows) and screen by IV then VIF."""
    stats = fit_impute(frame, continuous, categorical)
    filled = impute(frame, stats)
    bins, ivs = {}, {}
    for col in list(continuous) + list(categorical):
        kind = "continuous" if col in continuous else "categorical"
        bins[col] = fit_woe(filled[col].to_numpy(), labels, n_bins, kind=kind, feature=col)
        ivs[col] = information_value(bins[col])
    lo, hi = iv_bounds
    status = {}
    passed = []
    for col, iv in ivs.items():
        if iv <= lo:
            status[col] = "IV_LOW"
        elif iv >= hi:
            status[col] = "IV_HIGH"
        else:
            passed.append(col)
    vif = {c: math.nan for c in ivs}
    if passed:
        matrix = np.column_stack([bins[c].transform(filled[c].to_numpy()) for c in passed])
        pruned = vif_filter(matrix, passed, vif_limit)
        for row in pruned.itertuples(index=False):
            vif[row.feature] = row.vif
            status[row.feature] = row.status
    report = pd.DataFrame(
        {
            "feature": list(ivs),
            "iv": [ivs[c] for c in ivs],
            "vif": [vif[c] for c in ivs],
            "status": [status[c] for c in ivs],
        }
    )
    selected = [c for c in ivs if status[c] == "KEPT"]
    return FeaturePlan(stats, bins, report, selected)
