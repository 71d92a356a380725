"""Kernel SHAP attributions, uncertain-case selection and climate-factor summaries."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import comb

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .metrics import bootstrap_summary, report_rows, spearman_matrix
from .panel import FACTORS, PANEL_MONTHS
from .trainer import Dataset, FusionModel, ModalityMask, SplitPlan, train

DEFAULT_BACKGROUND = 100
DEFAULT_BUDGET = 2048


class ExplainError(ValueError):
    pass


class BudgetTooSmall(ExplainError):
    pass


class EmptyWindow(ExplainError):
    pass


@dataclass
class ShapResult:
    base_value: float
    values: np.ndarray  # (M,)
    output: float
    exhaustive: bool
    n_coalitions: int

    @property
    def local_accuracy_gap(self) -> float:
        return abs(self.base_value + float(self.values.sum()) - self.output)


# -- coalition design ----------------------------------------------------------


def shapley_kernel_weight(m: int, size: int) -> float:
    return (m - 1) / (comb(m, size, exact=True) * size * (m - size))


def _all_coalitions(m: int):
    rows, weights = [], []
    for size in range(1, m):
        w = shapley_kernel_weight(m, size)
        for subset in itertools.combinations(range(m), size):
            z = np.zeros(m)
            z[list(subset)] = 1.0
            rows.append(z)
            weights.append(w)
    return np.array(rows), np.array(weights)


def _sampled_coalitions(m: int, budget: int, gen: np.random.Generator):
    """Enumerate whole subset sizes (and their complements) while the budget
    covers them, then sample the remaining sizes in complementary pairs."""
    n_sizes = int(math.ceil((m - 1) / 2.0))
    n_paired = int(math.floor((m - 1) / 2.0))
    size_weight = np.array([(m - 1.0) / (s * (m - s)) for s in range(1, n_sizes + 1)])
    size_weight[:n_paired] *= 2.0
    size_weight /= size_weight.sum()

    rows, weights = [], []
    remaining = budget
    left_weight = size_weight.copy()
    full_sizes = 0
    for k in range(n_sizes):
        s = k + 1
        paired = k < n_paired
        count = comb(m, s, exact=True) * (2 if paired else 1)
        share = left_weight[k:] / left_weight[k:].sum()
        if remaining * share[0] / count < 1.0 - 1e-12:
            break
        per_subset = size_weight[k] / count
        for subset in itertools.combinations(range(m), s):
            z = np.zeros(m)
            z[list(subset)] = 1.0
            rows.append(z)
            weights.append(per_subset)
            if paired:
                rows.append(1.0 - z)
                weights.append(per_subset)
        remaining -= count
        full_sizes += 1
    weight_left = size_weight[full_sizes:].sum()
    if full_sizes < n_sizes and remaining > 0:
        probs = size_weight[full_sizes:] / weight_left
        seen: dict[bytes, int] = {}
        sampled, counts = [], []
        draws = 0
        max_draws = remaining * 50
        while len(sampled) < remaining and draws < max_draws:
            draws += 1
            k = full_sizes + gen.choice(probs.size, p=probs)
            s = k + 1
            z = np.zeros(m)
            z[gen.choice(m, size=s, replace=False)] = 1.0
            pair = [z] + ([1.0 - z] if k < n_paired else [])
            for cand in pair:
                key = cand.astype(np.uint8).tobytes()
                if key in seen:
                    counts[seen[key]] += 1
                elif len(sampled) < remaining:
                    seen[key] = len(sampled)
                    sampled.append(cand)
                    counts.append(1)
        if sampled:
            counts = np.asarray(counts, dtype=np.float64)
            rows.extend(sampled)
            weights.extend((counts / counts.sum() * weight_left).tolist())
    return np.array(rows), np.array(weights)


def coalition_design(m: int, budget: int, gen: np.random.Generator | None = None):
    """Coalition masks and kernel weights; exhaustive when the budget allows."""
    if budget < 2 * m:
        raise BudgetTooSmall(f"budget {budget} < 2 x {m} features")
    if m <= 30 and (1 << m) - 2 <= budget:
        masks, weights = _all_coalitions(m)
        return masks, weights, True
    gen = gen if gen is not None else np.random.default_rng(0)
    masks, weights = _sampled_coalitions(m, budget, gen)
    return masks, weights, False


def solve_shap(masks: np.ndarray, weights: np.ndarray, values: np.ndarray, base: float, output: float) -> np.ndarray:
    """Weighted least squares under the efficiency constraint sum(phi) = output - base."""
    m = masks.shape[1]
    delta = output - base
    if m == 1:
        return np.array([delta])
    target = values - base - masks[:, -1] * delta
    design = masks[:, :-1] - masks[:, [-1]]
    sw = np.sqrt(weights)[:, None]
    head, *_ = np.linalg.lstsq(design * sw, target * sw[:, 0], rcond=None)
    return np.r_[head, delta - head.sum()]


def kernel_shap(
    predict,
    instance,
    background,
    budget: int = DEFAULT_BUDGET,
    active=None,
    gen: np.random.Generator | None = None,
) -> ShapResult:
    """Shapley values of ``predict`` at ``instance`` against a background sample.

    ``predict`` maps an (n, M) matrix to n outputs. Absent features take the
    background rows' values and the coalition value is the background mean.
    Features outside ``active`` are held at the instance value and get 0.
    """
    x = np.asarray(instance, dtype=np.float64).reshape(-1)
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim != 2 or bg.shape[1] != x.size:
        raise ExplainError("background must be (K, M) matching the instance")
    M = x.size
    active = np.arange(M) if active is None else np.asarray(sorted(active), dtype=np.int64)
    bg = bg.copy()
    inactive = np.setdiff1d(np.arange(M), active)
    bg[:, inactive] = x[inactive]
    base = float(np.mean(predict(bg)))
    output = float(np.asarray(predict(x[None, :])).reshape(-1)[0])
    phi = np.zeros(M)
    if active.size == 0:
        return ShapResult(base, phi, output, True, 0)
    masks, weights, exhaustive = coalition_design(active.size, budget, gen)
    K = bg.shape[0]
    rows = np.repeat(bg[None, :, :], masks.shape[0], axis=0)  # (C, K, M)
    on = masks.astype(bool)
    for j_local, j in enumerate(active):
        rows[on[:, j_local], :, j] = x[j]
    values = np.asarray(predict(rows.reshape(-1, M)), dtype=np.float64).reshape(masks.shape[0], K).mean(axis=1)
    phi[active] = solve_shap(masks, weights, values, base, output)
    return ShapResult(base, phi, output, exhaustive, int(masks.shape[0]))


# -- fusion-model adapter ----------------------------------------------------------


@dataclass
class FeatureLayout:
    names: list[str]
    factor: list[str | None]
    month_offset: list[int | None]
    structured: slice
    climate: slice
    text: int | None
    climate_dim: int = len(FACTORS)

    @classmethod
    def build(cls, structured_names, climate_factors=FACTORS, with_text: bool = True) -> "FeatureLayout":
        names = list(structured_names)
        factor: list = [None] * len(names)
        offset: list = [None] * len(names)
        start = len(names)
        for f in climate_factors:
            for k in range(-PANEL_MONTHS, 0):
                names.append(f"{f}[{k}]")
                factor.append(f)
                offset.append(k)
        stop = len(names)
        text = None
        if with_text:
            text = len(names)
            names.append("text")
            factor.append(None)
            offset.append(None)
        return cls(names, factor, offset, slice(0, start), slice(start, stop), text, len(tuple(climate_factors)))


class FusionExplainer:
    """Flattens a loan into [structured WoE, factor-major climate months, text row]."""

    def __init__(self, model: FusionModel, structured_names, data: Dataset, climate_factors=FACTORS):
        self.model = model
        self.layout = FeatureLayout.build(structured_names, climate_factors, with_text=True)
        self.data = data
        self._text_cache: dict[int, np.ndarray] = {}

    def flatten(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        n = idx.size
        parts = [
            self.data.structured[idx] if self.data.structured is not None else np.zeros((n, 0)),
        ]
        if self.data.climate is not None:
            parts.append(np.transpose(self.data.climate[idx], (0, 2, 1)).reshape(n, -1))
        else:
            parts.append(np.zeros((n, self.layout.climate.stop - self.layout.climate.start)))
        parts.append(idx.astype(np.float64)[:, None])
        return np.hstack(parts)

    def active_features(self) -> np.ndarray:
        m = self.model.config.mask
        keep = []
        if m.structured:
            keep.extend(range(self.layout.structured.start, self.layout.structured.stop))
        if m.climate:
            keep.extend(range(self.layout.climate.start, self.layout.climate.stop))
        if m.text:
            keep.append(self.layout.text)
        return np.array(keep, dtype=np.int64)

    def _text_latents(self, rows: np.ndarray) -> np.ndarray:
        missing = [int(r) for r in np.unique(rows) if int(r) not in self._text_cache]
        if missing:
            with ad.no_grad():
                lat = self.model.text_latent(self.data.text_ids[missing], self.data.text_mask[missing]).data
            for r, vec in zip(missing, lat):
                self._text_cache[r] = vec
        return np.stack([self._text_cache[int(r)] for r in rows])

    def predict(self, matrix: np.ndarray, chunk: int = 8192) -> np.ndarray:
        out = []
        L = self.layout
        for start in range(0, matrix.shape[0], chunk):
            X = matrix[start : start + chunk]
            n = X.shape[0]
            climate = np.transpose(X[:, L.climate].reshape(n, L.climate_dim, PANEL_MONTHS), (0, 2, 1))
            batch = Dataset(np.zeros(n), structured=X[:, L.structured], climate=climate)
            text = None
            if self.model.config.mask.text:
                text = Tensor(self._text_latents(X[:, L.text].astype(np.int64)))
            with ad.no_grad():
                out.append(ad.sigmoid(self.model.logits(batch, text_latent=text)).data)
        return np.concatenate(out)

    def explain(self, idx, background_idx, budget: int = DEFAULT_BUDGET, seed: int = 0) -> list[ShapResult]:
        bg = self.flatten(background_idx)
        active = self.active_features()
        results = []
        rng = Rng(seed)
        for i in np.atleast_1d(idx):
            x = self.flatten([i])[0]
            results.append(kernel_shap(self.predict, x, bg, budget, active, rng.stream(f"shap/{int(i)}")))
        return results

    def to_frame(self, idx, results: list[ShapResult]) -> pd.DataFrame:
        """Long SHAP table: loan_id,feature,factor,month_offset,feature_value,shap_value,base_value."""
        L = self.layout
        rows = []
        for i, res in zip(np.atleast_1d(idx), results):
            values = self.flatten([i])[0]
            loan = self.data.loan_ids[int(i)] if self.data.loan_ids is not None else int(i)
            for j, name in enumerate(L.names):
                rows.append(
                    {
                        "loan_id": loan,
                        "feature": name,
                        "factor": L.factor[j] if L.factor[j] is not None else "",
                        "month_offset": L.month_offset[j] if L.month_offset[j] is not None else "",
                        "feature_value": values[j] if j != L.text else "",
                        "shap_value": res.values[j],
                        "base_value": res.base_value,
                    }
                )
        return pd.DataFrame(rows)


def sample_background(n_train_rows, size: int = DEFAULT_BACKGROUND, seed: int = 0) -> np.ndarray:
    rows = np.asarray(n_train_rows)
    gen = Rng(seed).stream("background")
    take = min(size, rows.size)
    return np.sort(gen.choice(rows, size=take, replace=False))


# -- case selection and aggregation ----------------------------------------------------


@dataclass
class UncertainCaseSet:
    indices: np.ndarray
    improvement: np.ndarray
    window: tuple[float, float]
    percentiles: tuple[float, float]
    top_k: int | None
    degenerate: bool = False
    loan_ids: list = field(default_factory=list)


def select_uncertain_cases(structured_probs, combined_probs, labels, window=(30.0, 70.0), top_k=None, loan_ids=None):
    ps = np.asarray(structured_probs, dtype=np.float64)
    pc = np.asarray(combined_probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not (ps.shape == pc.shape == y.shape):
        raise ExplainError("probability and label vectors must align")
    lo, hi = np.percentile(ps, window)
    inside = (ps >= lo) & (ps <= hi)
    if not inside.any():
        raise EmptyWindow(f"no structured probability in [{lo}, {hi}]")
    gain = np.abs(ps - y) - np.abs(pc - y)
    eligible = np.flatnonzero(inside & (gain > 0))
    order = eligible[np.argsort(-gain[eligible], kind="mergesort")]
    if top_k is not None:
        order = order[:top_k]
    ids = [loan_ids[i] for i in order] if loan_ids is not None else []
    return UncertainCaseSet(order, gain[order], (float(lo), float(hi)), tuple(window), top_k, bool(lo == hi), ids)


def factor_attribution(results: list[ShapResult], layout: FeatureLayout, flattened=None):
    """Per-factor mean |SHAP| (and signed mean) plus per (factor, month) distributions."""
    values = np.array([r.values for r in results]) if results else np.zeros((0, len(layout.names)))
    summary, dist = [], []
    factors = [f for f in dict.fromkeys(layout.factor) if f is not None]
    for f in factors:
        cols = [j for j, g in enumerate(layout.factor) if g == f]
        block = values[:, cols]
        summary.append(
            {
                "factor": f,
                "mean_abs_shap": float(np.abs(block).mean()) if block.size else 0.0,
                "mean_shap": float(block.mean()) if block.size else 0.0,
            }
        )
        for j in cols:
            dist.append(
                {
                    "factor": f,
                    "month_offset": layout.month_offset[j],
                    "shap_values": values[:, j].tolist(),
                    "feature_values": [] if flattened is None else np.asarray(flattened)[:, j].tolist(),
                }
            )
    return pd.DataFrame(summary), pd.DataFrame(dist)


def per_factor_ablation(base_config, data: Dataset, split: SplitPlan, seeds=(0,), resamples: int = 1000, master_seed: int = 0):
    """S-only plus four S+single-factor models; bootstrap reports and rank agreement."""
    configs = {"S": (replace(base_config, mask=ModalityMask(True, False, False)), None)}
    for k, f in enumerate(FACTORS):
        configs[f"S+{f.upper()}"] = (replace(base_config, mask=ModalityMask(True, True, False)), k)
    test = data.subset(split.test)
    rows, first_seed_preds = [], {}
    for name, (cfg, k) in configs.items():
        runs = []
        for s in seeds:
            view = data if k is None else Dataset(
                data.labels, data.structured, data.climate[:, :, [k]], None, None, data.loan_ids, None
            )
            tm = train(replace(cfg, seed=s), view, split)
            test_view = view.subset(split.test)
            probs = tm.predict(test_view)
            runs.append((probs, test.labels))
            first_seed_preds.setdefault(name, probs)
        summary = bootstrap_summary(runs, resamples=resamples, master_seed=master_seed)
        rows.extend(report_rows(name, "S" if k is None else f"S+{FACTORS[k]}", summary))
    matrix, _ = spearman_matrix(first_seed_preds)
    return pd.DataFrame(rows), matrix
