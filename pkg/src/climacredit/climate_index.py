"""Monthly climate risk indices computed from daily station weather.

Four severities are produced per station-month: drought (DI), water-logging
by rain (WLR), high temperature (HT) and cryogenic freezing (CF). Drought is
driven by a standardized precipitation index (SPI) obtained from a gamma fit
of trailing precipitation totals.

All scalar-level functions are pure; :func:`compute_monthly_indices` is the
vectorized driver used by the pipeline.
"""

from __future__ import annotations

import calendar
import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import gammainc

logger = logging.getLogger(__name__)

SPI_CLAMP = 4.0
MIN_HISTORY = 30

# Rational approximation coefficients for the inverse normal CDF.
_C0, _C1, _C2 = 2.515517, 0.802853, 0.010328
_D1, _D2, _D3 = 1.432788, 0.189269, 0.001308

DROUGHT_REGION_WEIGHTS = (0.0, 0.6, 1.0)
FREEZE_REGION_WEIGHTS = (0.5, 1.0)


class ClimateIndexError(ValueError):
    """Base class for climate index input errors."""


class HistoryTooShort(ClimateIndexError):
    pass


class DegenerateSample(ClimateIndexError):
    pass


class LengthMismatch(ClimateIndexError):
    pass


class NegativePrecipitation(ClimateIndexError):
    pass


# ---------------------------------------------------------------------------
# SPI
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaFit:
    gamma_shape: float
    gamma_scale: float
    zero_fraction: float
    sample_size: int
    step_at: float | None = None

    @property
    def is_step(self) -> bool:
        return self.step_at is not None


def fit_gamma(history) -> GammaFit:
    """Fit a gamma law to the positive part of ``history`` (Thom's estimator).

    Raises HistoryTooShort below 30 values and DegenerateSample when the
    positive values carry no spread.
    """
    x = np.asarray(history, dtype=np.float64).reshape(-1)
    n = x.size
    if n < MIN_HISTORY:
        raise HistoryTooShort(f"need at least {MIN_HISTORY} values, got {n}")
    if not np.isfinite(x).all() or (x < 0).any():
        raise NegativePrecipitation("history must be finite and non-negative")
    positive = x[x > 0]
    zero_fraction = (n - positive.size) / n
    if positive.size == 0:
        raise DegenerateSample("no positive values")
    mean = positive.mean()
    spread = math.log(mean) - np.log(positive).mean()
    if spread <= 1e-12 * max(1.0, abs(math.log(mean))):
        raise DegenerateSample(f"all positive values equal {positive[0]!r}")
    shape = (1.0 + math.sqrt(1.0 + 4.0 * spread / 3.0)) / (4.0 * spread)
    return GammaFit(shape, mean / shape, zero_fraction, n)


def fit_gamma_or_step(history) -> GammaFit:
    """Like :func:`fit_gamma` but a degenerate sample yields a step CDF."""
    try:
        return fit_gamma(history)
    except DegenerateSample:
        x = np.asarray(history, dtype=np.float64).reshape(-1)
        positive = x[x > 0]
        zero_fraction = (x.size - positive.size) / x.size
        at = float(positive[0]) if positive.size else 0.0
        return GammaFit(math.nan, math.nan, zero_fraction, x.size, step_at=at)


def cumulative_probability(fit: GammaFit, x0):
    """Mixed CDF: point mass ``zero_fraction`` at zero plus the gamma part."""
    x0 = np.asarray(x0, dtype=np.float64)
    q = fit.zero_fraction
    if fit.is_step:
        if fit.step_at == 0.0:
            inner = np.ones_like(x0)
        else:
            inner = np.where(x0 < fit.step_at, 0.0, np.where(x0 == fit.step_at, 0.5, 1.0))
    else:
        inner = gammainc(fit.gamma_shape, np.maximum(x0, 0.0) / fit.gamma_scale)
    return np.where(x0 <= 0.0, q, q + (1.0 - q) * inner)


def spi_from_probability(prob):
    """Inverse standard normal by the rational approximation, clamped to [-4, 4]."""
    p = np.asarray(prob, dtype=np.float64)
    upper = p > 0.5
    tail = np.where(upper, 1.0 - p, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.sqrt(np.log(1.0 / (tail * tail)))
        body = t - ((_C2 * t + _C1) * t + _C0) / (((_D3 * t + _D2) * t + _D1) * t + 1.0)
    body = np.where(tail <= 0.0, np.inf, body)
    out = np.clip(np.where(upper, body, -body), -SPI_CLAMP, SPI_CLAMP)
    return float(out) if out.ndim == 0 else out


def compute_spi(fit: GammaFit, x0):
    x0_arr = np.asarray(x0, dtype=np.float64)
    if (x0_arr < 0).any():
        raise NegativePrecipitation("precipitation must be non-negative")
    return spi_from_probability(cumulative_probability(fit, x0_arr))


# ---------------------------------------------------------------------------
# Scalar monthly indices
# ---------------------------------------------------------------------------


def drought_month_weight(month: int) -> float:
    if 5 <= month <= 9:
        return 1.5
    if month in (3, 4, 10, 11):
        return 1.0
    return 0.5


def rain_month_weight(month: int) -> float:
    return 2.0 if month in (6, 7, 8) else 1.0


def freeze_month_weight(month: int) -> float:
    if month == 12:
        return 1.0
    if month in (1, 2):
        return 2.0
    return 0.5


def daily_drought(spi):
    """Piecewise-linear daily drought score (non-positive, continuous)."""
    s = np.asarray(spi, dtype=np.float64)
    out = np.select(
        [s >= -1.0, s >= -1.5, s >= -2.0],
        [np.zeros_like(s), s + 1.0, 2.0 * s + 2.5],
        default=3.0 * s + 4.5,
    )
    return float(out) if out.ndim == 0 else out


def running_streak(flags, resets=None) -> np.ndarray:
    """Length of the run of consecutive true flags ending at each position.

    ``resets`` marks positions where a new run must start (e.g. month starts).
    """
    f = np.asarray(flags, dtype=bool)
    idx = np.arange(f.size)
    anchor = np.where(f, -1, idx)
    if resets is not None:
        anchor = np.maximum(anchor, np.where(np.asarray(resets, dtype=bool), idx - 1, -1))
    last_break = np.maximum.accumulate(anchor) if f.size else anchor
    return np.where(f, idx - last_break, 0)


def _check_lengths(*arrays) -> None:
    if len({len(a) for a in arrays}) != 1:
        raise LengthMismatch(f"lengths differ: {[len(a) for a in arrays]}")


def monthly_drought(daily_spi, daily_temps, a_i: float, month: int) -> float:
    """Drought severity (>= 0) for one month of daily SPI and mean temperature."""
    _check_lengths(daily_spi, daily_temps)
    spi = np.asarray(daily_spi, dtype=np.float64)
    warm = np.asarray(daily_temps, dtype=np.float64) > 0.0
    raw = float(np.sum(daily_drought(spi)[warm])) * a_i * drought_month_weight(month)
    return -raw + 0.0


def daily_rain_score(precip, streak):
    p = np.asarray(precip, dtype=np.float64)
    n2 = np.asarray(streak, dtype=np.float64) ** 2
    return np.select([p < 50.0, p < 100.0, p < 200.0], [0.0 * n2, n2, 2.0 * n2], default=3.0 * n2)


def monthly_wlr(daily_precip, month: int) -> float:
    p = np.asarray(daily_precip, dtype=np.float64)
    if (p < 0).any():
        raise NegativePrecipitation("daily precipitation must be non-negative")
    if p.size == 0:
        return 0.0
    scores = daily_rain_score(p, running_streak(p >= 50.0))
    return float(scores.sum() / p.size * rain_month_weight(month))


def heat_level(values, thresholds):
    v = np.asarray(values, dtype=np.float64)
    lo, mid, hi = thresholds
    return np.select([v >= hi, v >= mid, v >= lo], [3.0, 2.0, 1.0], default=0.0)


DAY_HEAT_THRESHOLDS = (35.0, 37.0, 40.0)
NIGHT_HEAT_THRESHOLDS = (25.0, 28.0, 30.0)


def monthly_ht(daily_tmax, daily_tmin, month: int) -> float:
    _check_lengths(daily_tmax, daily_tmin)
    tmax = np.asarray(daily_tmax, dtype=np.float64)
    tmin = np.asarray(daily_tmin, dtype=np.float64)
    if tmax.size == 0:
        return 0.0
    day = heat_level(tmax, DAY_HEAT_THRESHOLDS) * np.sqrt(running_streak(tmax >= DAY_HEAT_THRESHOLDS[0]))
    night = heat_level(tmin, NIGHT_HEAT_THRESHOLDS) * np.sqrt(running_streak(tmin >= NIGHT_HEAT_THRESHOLDS[0]))
    return float((day.sum() + night.sum()) / tmax.size)


def cold_anomaly_class(z):
    """0..3 by how many standard deviations the pentad runs below normal."""
    z = np.asarray(z, dtype=np.float64)
    return np.select([z > -1.0, z > -2.0, z > -3.0], [0.0, 1.0, 2.0], default=3.0)


def monthly_cf(pentad_means, clim_mean, clim_std, snow_days, d_i: float, month: int) -> float:
    t = np.asarray(pentad_means, dtype=np.float64)
    mu = np.asarray(clim_mean, dtype=np.float64)
    sd = np.asarray(clim_std, dtype=np.float64)
    snow = np.asarray(snow_days, dtype=np.float64)
    if not (t.size == mu.size == sd.size == snow.size == 6):
        raise LengthMismatch("exactly 6 pentads are required")
    valid = sd > 0
    z = np.where(valid, (t - mu) / np.where(valid, sd, 1.0), 0.0)
    level = np.where(valid, cold_anomaly_class(z), 0.0)
    contributions = np.where(level > 0, level * np.abs(z), 0.0) * (1.0 + snow / 10.0) * d_i
    return float(contributions.sum() * freeze_month_weight(month))


def pentad_of_day(day_of_month):
    """1..6; the sixth pentad covers day 26 to the month end."""
    d = np.asarray(day_of_month)
    return np.minimum((d - 1) // 5 + 1, 6)


def rescale_index(values, reference=None, target=(0.0, 10.0)):
    """Affine min-max map of ``values`` into ``target`` fitted on ``reference``.

    Values outside the reference range clamp; a constant reference maps to 0.
    """
    v = np.asarray(values, dtype=np.float64)
    ref = v if reference is None else np.asarray(reference, dtype=np.float64)
    if ref.size == 0:
        raise ClimateIndexError("empty reference series")
    lo, hi = float(ref.min()), float(ref.max())
    t_lo, t_hi = target
    if hi <= lo:
        return np.full_like(v, t_lo)
    return np.clip(t_lo + (v - lo) * (t_hi - t_lo) / (hi - lo), t_lo, t_hi)


# ---------------------------------------------------------------------------
# Station-level driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PentadClimatology:
    mean: np.ndarray  # (12, 6)
    std: np.ndarray  # (12, 6)


def pentad_table(weather: pd.DataFrame) -> pd.DataFrame:
    """Per (year, month, pentad): mean temperature and snow-day count."""
    dates = pd.DatetimeIndex(weather["date"])
    keyed = pd.DataFrame(
        {
            "year": dates.year,
            "month": dates.month,
            "pentad": pentad_of_day(dates.day),
            "tavg": weather["tavg_c"].to_numpy(),
            "snow": weather["snow"].to_numpy().astype(np.int64),
        }
    )
    return keyed.groupby(["year", "month", "pentad"], sort=True).agg(t=("tavg", "mean"), snow=("snow", "sum")).reset_index()


def build_pentad_climatology(pentads: pd.DataFrame, years=(2001, 2020)) -> PentadClimatology:
    ref = pentads[(pentads["year"] >= years[0]) & (pentads["year"] <= years[1])]
    if ref.empty:
        raise HistoryTooShort(f"no climatology data in {years}")
    stats = ref.groupby(["month", "pentad"])["t"].agg(["mean", "std"])
    mean = np.full((12, 6), np.nan)
    std = np.zeros((12, 6))
    for (m, p), row in stats.iterrows():
        mean[m - 1, p - 1] = row["mean"]
        std[m - 1, p - 1] = 0.0 if np.isnan(row["std"]) else row["std"]
    return PentadClimatology(mean, std)


def daily_spi_series(
    dates: pd.DatetimeIndex,
    precip: np.ndarray,
    window: int = 30,
    years=(2001, 2020),
) -> np.ndarray:
    """Daily SPI of the trailing ``window``-day precipitation total.

    One gamma law per calendar month is fitted on the climatology years.
    Days without a full window get NaN.
    """
    totals = pd.Series(precip).rolling(window, min_periods=window).sum().to_numpy()
    totals = np.where(np.isnan(totals), np.nan, np.maximum(totals, 0.0))
    months = dates.month.to_numpy()
    in_ref = (dates.year >= years[0]) & (dates.year <= years[1])
    spi = np.full(totals.shape, np.nan)
    for m in range(1, 13):
        sel = months == m
        hist = totals[sel & in_ref & ~np.isnan(totals)]
        if hist.size < MIN_HISTORY:
            raise HistoryTooShort(f"month {m}: only {hist.size} climatology values")
        fit = fit_gamma_or_step(hist)
        target = sel & ~np.isnan(totals)
        spi[target] = compute_spi(fit, totals[target])
    return spi


def station_monthly_indices(
    weather: pd.DataFrame,
    drought_weight: float,
    freeze_weight: float,
    climatology_years=(2001, 2020),
    spi_window: int = 30,
) -> pd.DataFrame:
    """All four indices for every calendar month present in one station's record."""
    weather = weather.sort_values("date").reset_index(drop=True)
    dates = pd.DatetimeIndex(pd.to_datetime(weather["date"]))
    precip = weather["precip_mm"].to_numpy(dtype=np.float64)
    if (precip < 0).any():
        raise NegativePrecipitation("negative precipitation in weather record")
    tmax = weather["tmax_c"].to_numpy(dtype=np.float64)
    tmin = weather["tmin_c"].to_numpy(dtype=np.float64)
    tavg = weather["tavg_c"].to_numpy(dtype=np.float64)
    month_start = dates.day.to_numpy() == 1
    month_start[0] = True
    months = dates.month.to_numpy()
    ym = dates.year.to_numpy() * 100 + months
    days_in_month = np.array([calendar.monthrange(y, m)[1] for y, m in zip(dates.year, months)])

    spi = daily_spi_series(dates, precip, spi_window, climatology_years)
    dd = np.where(np.isnan(spi), 0.0, daily_drought(np.nan_to_num(spi)))
    drought_w = np.array([drought_month_weight(m) for m in range(1, 13)])[months - 1]
    dd_term = np.where(tavg > 0.0, dd, 0.0) * drought_weight * drought_w

    rain = daily_rain_score(precip, running_streak(precip >= 50.0, month_start))
    rain_w = np.where(np.isin(months, (6, 7, 8)), 2.0, 1.0)
    rain_term = rain * rain_w / days_in_month

    heat_term = (
        heat_level(tmax, DAY_HEAT_THRESHOLDS) * np.sqrt(running_streak(tmax >= DAY_HEAT_THRESHOLDS[0], month_start))
        + heat_level(tmin, NIGHT_HEAT_THRESHOLDS) * np.sqrt(running_streak(tmin >= NIGHT_HEAT_THRESHOLDS[0], month_start))
    ) / days_in_month

    frame = pd.DataFrame({"ym": ym, "dd": dd_term, "rain": rain_term, "heat": heat_term})
    monthly = frame.groupby("ym", sort=True).sum()
    monthly["di"] = -monthly["dd"] + 0.0

    pentads = pentad_table(weather.assign(date=dates))
    clim = build_pentad_climatology(pentads, climatology_years)
    mi, pi = pentads["month"].to_numpy() - 1, pentads["pentad"].to_numpy() - 1
    mu, sd = clim.mean[mi, pi], clim.std[mi, pi]
    valid = sd > 0
    z = np.where(valid, (pentads["t"].to_numpy() - mu) / np.where(valid, sd, 1.0), 0.0)
    level = np.where(valid, cold_anomaly_class(z), 0.0)
    freeze_w = np.array([freeze_month_weight(m) for m in range(1, 13)])[mi]
    pentads = pentads.assign(
        cf=level * np.abs(z) * (1.0 + pentads["snow"].to_numpy() / 10.0) * freeze_weight * freeze_w,
        ym=pentads["year"] * 100 + pentads["month"],
    )
    cf = pentads.groupby("ym")["cf"].sum()

    out = pd.DataFrame(
        {
            "year_month": [f"{k // 100:04d}-{k % 100:02d}" for k in monthly.index],
            "di": monthly["di"].to_numpy(),
            "wlr": monthly["rain"].to_numpy(),
            "ht": monthly["heat"].to_numpy(),
            "cf": cf.reindex(monthly.index).fillna(0.0).to_numpy(),
        }
    )
    return out


def compute_monthly_indices(
    weather: pd.DataFrame,
    stations: pd.DataFrame,
    climatology_years=(2001, 2020),
    spi_window: int = 30,
) -> pd.DataFrame:
    """Monthly index table ``station_id,year_month,di,wlr,ht,cf`` for all stations."""
    meta = stations.set_index("station_id")
    parts = []
    for sid, group in weather.groupby("station_id", sort=True):
        if sid not in meta.index:
            raise ClimateIndexError(f"station {sid!r} missing from station metadata")
        row = meta.loc[sid]
        table = station_monthly_indices(
            group,
            float(row["drought_region_weight"]),
            float(row["freeze_region_weight"]),
            climatology_years,
            spi_window,
        )
        table.insert(0, "station_id", sid)
        parts.append(table)
        logger.debug("indices computed for station %s (%d months)", sid, len(table))
    if not parts:
        return pd.DataFrame(columns=["station_id", "year_month", "di", "wlr", "ht", "cf"])
    return pd.concat(parts, ignore_index=True)
