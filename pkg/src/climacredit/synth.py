"""Seeded synthetic stations, weather, loans, texts and labels.

Default risk is planted through a logit over a latent borrower quality, the
loans' 12-month mean climate indices and a text sentiment score, so every
downstream stage has known ground truth.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.signal import lfilter
from scipy.special import expit

from .autodiff import Rng
from .climate_index import compute_monthly_indices
from .panel import FACTORS, build_panels, panels_to_array

logger = logging.getLogger(__name__)


class RateUnreachable(ValueError):
    pass


DEFAULT_BETAS = {"struct": 1.0, "wlr": 1.5, "drought": 0.3, "ht": 0.2, "cf": 0.2, "text": 1.0}
BETA_KEYS = tuple(DEFAULT_BETAS)


@dataclass
class GenSpec:
    n_loans: int = 4172
    default_rate: float = 0.015
    n_stations: int = 40
    climatology_years: tuple[int, int] = (2001, 2020)
    loan_window: tuple[str, str] = ("2022-01", "2023-12")
    betas: dict = field(default_factory=lambda: dict(DEFAULT_BETAS))
    text_rho: float = 0.3
    missing_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.betas) - set(BETA_KEYS)
        if unknown:
            raise ValueError(f"unknown effect coefficients {sorted(unknown)}")
        self.betas = {k: float(self.betas.get(k, 0.0)) for k in BETA_KEYS}
        if not all(math.isfinite(v) for v in self.betas.values()):
            raise ValueError("effect coefficients must be finite")
        self.climatology_years = tuple(self.climatology_years)
        self.loan_window = tuple(self.loan_window)

    @classmethod
    def full_scale(cls, seed: int = 0) -> "GenSpec":
        return cls(seed=seed)

    @classmethod
    def test(cls, seed: int = 0, **overrides) -> "GenSpec":
        return replace(cls(n_loans=4000, default_rate=0.05, seed=seed), **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["climatology_years"] = list(self.climatology_years)
        d["loan_window"] = list(self.loan_window)
        return d


# -- stations and weather ------------------------------------------------------


def gen_stations(spec: GenSpec) -> pd.DataFrame:
    gen = Rng(spec.seed).stream("stations")
    n = spec.n_stations
    lat = gen.uniform(22.0, 46.0, n)
    lon = gen.uniform(100.0, 125.0, n)
    drought = gen.choice([0.0, 0.6, 1.0], size=n, p=[0.1, 0.2, 0.7])
    freeze = np.where(lat < 33.0, 0.5, 1.0)
    return pd.DataFrame(
        {
            "station_id": [f"ST{i:03d}" for i in range(n)],
            "lat": np.round(lat, 4),
            "lon": np.round(lon, 4),
            "drought_region_weight": drought,
            "freeze_region_weight": freeze,
        }
    )


def _weather_end(spec: GenSpec) -> pd.Timestamp:
    return pd.Period(spec.loan_window[1], "M").to_timestamp(how="end").normalize()


def gen_station_weather(spec: GenSpec, stations: pd.DataFrame | None = None) -> pd.DataFrame:
    """Daily weather for every station from the first climatology year to the loan window end."""
    stations = gen_stations(spec) if stations is None else stations
    dates = pd.date_range(f"{spec.climatology_years[0]}-01-01", _weather_end(spec), freq="D")
    n_days = len(dates)
    doy = dates.dayofyear.to_numpy()
    years = dates.year.to_numpy()
    season = 0.5 - 0.5 * np.cos(2 * np.pi * (doy - 15) / 365.25)  # 0 mid-Jan, 1 mid-Jul
    frames = []
    for row in stations.itertuples(index=False):
        gen = Rng(spec.seed).stream(f"weather/{row.station_id}")
        lat = row.lat
        base = 20.0 - 0.6 * (lat - 20.0)
        amp = 8.0 + 0.5 * (lat - 20.0)
        noise = lfilter([1.0], [1.0, -0.7], gen.normal(0.0, 2.2, n_days))
        tavg = base + amp * (2.0 * season - 1.0) + noise
        spread = np.abs(8.0 + gen.normal(0.0, 1.5, n_days))
        tmax = tavg + spread / 2.0
        tmin = tavg - spread / 2.0

        wetness = np.clip(1.2 - (lat - 22.0) / 40.0, 0.5, 1.2)
        p_wet = np.clip((0.15 + 0.35 * season) * wetness, 0.02, 0.9)
        wet = gen.random(n_days) < p_wet
        mean_amount = (4.0 + 10.0 * season) * wetness
        amount = gen.gamma(0.7, mean_amount / 0.7)
        # Station storminess is persistent; each year perturbs it.
        station_storm = math.exp(gen.normal(0.0, 0.8))
        year_list = np.unique(years)
        year_storm = dict(zip(year_list, np.exp(gen.normal(0.0, 0.5, year_list.size))))
        storm = station_storm * np.array([year_storm[y] for y in years])
        heavy = gen.random(n_days) < 0.012 * season * storm
        heavy_amount = 50.0 + gen.exponential(45.0, n_days)
        precip = np.where(heavy, heavy_amount, np.where(wet, amount, 0.0))
        snow = (precip > 0.0) & (tavg < 0.0)
        frames.append(
            pd.DataFrame(
                {
                    "station_id": row.station_id,
                    "date": dates.strftime("%Y-%m-%d"),
                    "precip_mm": np.round(precip, 3),
                    "tmax_c": np.round(tmax, 3),
                    "tmin_c": np.round(tmin, 3),
                    "tavg_c": np.round(tavg, 3),
                    "snow": snow.astype(np.int64),
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


# -- structured schema ----------------------------------------------------------

# (name, loading on quality q). Zero loading = planted pure noise.
CONTINUOUS_FEATURES = {
    "age": 0.2,
    "annual_expense": 0.3,
    "annual_revenue": 0.0,
    "bedrooms": 0.2,
    "family_members": 0.0,
    "family_workforce": 0.3,
    "floors": 0.0,
    "house_area": 0.0,
    "loan_amount": -0.3,
    "loan_term": 0.0,
    "monthly_revenue": 0.6,
    "rate_of_income": -0.6,
    "rest_amount": 0.0,
    "rest_interest": 0.0,
}

CATEGORICAL_FEATURES = {
    "business_type": (["1", "2", "3"], 0.2),
    "credit_rating": (["1", "2", "3", "4", "5", "Other"], 0.8),
    "customer_type": (["New_cust", "Old_cust"], 0.0),
    "degree": (["0", "4", "5", "9"], 0.2),
    "education": (["10", "20", "30", "40", "50", "60", "70", "80", "90", "99"], 0.4),
    "ethnic_group": (list("ABCDEFGHIJ"), 0.0),
    "homeownership": (["1", "2", "3", "4", "5", "Other"], 0.4),
    "house_type": (["Flat", "House"], 0.15),
    "housekeeping": (["Bad", "Moderate", "Good"], 0.6),
    "job_position": (["1", "2", "3", "4", "5", "Other"], 0.2),
    "job_title": (["1", "2", "3", "4", "5", "Other"], 0.0),
    "license_type": (["A", "C", "E", "F", "H", "O", "P", "Q", "S", "Z", "Other"], 0.15),
    "marital_relationship": (["Bad", "Moderate", "Good", "Very good"], 0.6),
    "marital_status": (["10", "21", "22", "23", "30", "40", "90"], 0.15),
    "occupation": (["0", "1", "3", "4", "5", "8", "9", "X", "Y", "Z"], 0.2),
    "postcode": (["153200", "065300", "164100", "325700", "210000", "430000", "510000", "610000", "710000", "830000", "150000", "250000"], 0.0),
    "repay_type": (["A", "B", "C"], 0.2),
    "verified_id": (["1", "2", "3", "4", "5", "6", "Other"], 0.15),
}

SIGNAL_FEATURES = [k for k, v in CONTINUOUS_FEATURES.items() if v != 0.0] + [
    k for k, (_, v) in CATEGORICAL_FEATURES.items() if v != 0.0
]
NOISE_FEATURES = [k for k, v in CONTINUOUS_FEATURES.items() if v == 0.0] + [
    k for k, (_, v) in CATEGORICAL_FEATURES.items() if v == 0.0
]

_TERM_VALUES = np.arange(1, 10)
_TERM_PROBS = np.array([0.02, 0.03, 0.18, 0.6, 0.1, 0.04, 0.01, 0.01, 0.01])


def _continuous_column(name: str, latent: np.ndarray, gen, term: np.ndarray) -> np.ndarray:
    n = latent.size
    if name == "age":
        return np.clip(np.round(40.8 + 8.4 * latent), 20, 64)
    if name == "annual_expense":
        return np.clip(np.round(np.exp(9.5 + 0.6 * latent), 2), 5456.7, 330000.0)
    if name == "annual_revenue":
        return np.clip(np.round(np.exp(11.95 + 0.45 * latent), 2), 32400.0, 2364000.0)
    if name == "bedrooms":
        return np.clip(np.round(4.8 + 2.5 * latent), 1, 16)
    if name == "family_members":
        return np.clip(np.round(3.6 + 0.9 * latent), 1, 9)
    if name == "family_workforce":
        return np.clip(np.round(2.5 + 0.75 * latent), 1, 8)
    if name == "floors":
        return np.clip(np.round(1.7 + 0.8 * latent), 1, 5)
    if name == "house_area":
        return np.clip(np.round(np.exp(4.95 + 0.6 * latent), 2), 50.0, 1064.7)
    if name == "loan_amount":
        return np.clip(np.round(39368 + 15665 * latent, -2), 1000.0, 100000.0)
    if name == "loan_term":
        return term.astype(np.float64)
    if name == "monthly_revenue":
        return np.clip(np.round(np.exp(9.5 + 0.55 * latent), 2), 7135.0, 91999.92)
    if name == "rate_of_income":
        return np.clip(np.round(np.exp(2.3 + 0.7 * latent), 2), 2.0, 408.9)
    if name == "rest_amount":
        return np.where(gen.random(n) < 0.05, np.round(np.exp(8.0 + latent), 0), 0.0)
    if name == "rest_interest":
        return np.where(gen.random(n) < 0.05, np.round(np.exp(4.5 + latent), 2), 0.0)
    raise KeyError(name)


def gen_structured(q: np.ndarray, term: np.ndarray, spec: GenSpec) -> pd.DataFrame:
    gen = Rng(spec.seed).stream("structured")
    n = q.size
    cols = {}
    for name, load in CONTINUOUS_FEATURES.items():
        latent = load * q + math.sqrt(1.0 - load * load) * gen.standard_normal(n)
        cols[name] = _continuous_column(name, latent, gen, term)
    for name, (levels, load) in CATEGORICAL_FEATURES.items():
        latent = load * q + math.sqrt(1.0 - load * load) * gen.standard_normal(n)
        weights = gen.dirichlet(np.full(len(levels), 4.0))
        edges = np.quantile(latent, np.cumsum(weights)[:-1]) if load else None
        if load:
            codes = np.searchsorted(edges, latent)
        else:
            codes = gen.choice(len(levels), size=n, p=weights)
        cols[name] = np.asarray(levels, dtype=object)[codes]
    frame = pd.DataFrame(cols)
    for name in list(CONTINUOUS_FEATURES) + list(CATEGORICAL_FEATURES):
        if name == "loan_term":
            continue
        hole = gen.random(n) < spec.missing_rate
        if name in CONTINUOUS_FEATURES:
            frame.loc[hole, name] = np.nan
        else:
            frame[name] = frame[name].where(~hole, None)
    return frame


# -- text ----------------------------------------------------------------------

FILLER = (
    "visita officium negotium mercatus taberna ager pecunia domus familia opus "
    "cliens mensis annus socius merces horreum via forum ratio tabula "
    "fundus villa instrumentum frumentum vinum oleum navis portus copia usus"
).split()
POSITIVE = "solvit bene stabilis fidelis prosperum diligens crescit firmus honestus tempestive".split()
NEGATIVE = "morae debile dubium periculum incertum deficit tardus fragilis negligens damnum".split()

_TEMPLATES = [
    "in visita {s} negotium {s} taberna".split(),
    "cliens {s} ratio {s} copia".split(),
    "officium notat familia {s} opus {s}".split(),
    "mercatus {s} forum {s} merces".split(),
    "pecunia domus {s} annus {s} tabula".split(),
    "ager {s} villa {s} frumentum".split(),
]


def gen_text(score: float, gen: np.random.Generator) -> list[str]:
    """Officer-note tokens; each sentiment slot is positive w.p. clip(0.5 + 0.2*score, 0, 1)."""
    length = int(np.clip(round(gen.normal(107.0, 38.0)), 15, 326))
    p_pos = float(np.clip(0.5 + 0.2 * score, 0.0, 1.0))
    tokens: list[str] = []
    while len(tokens) < length:
        template = _TEMPLATES[gen.integers(len(_TEMPLATES))]
        for word in template:
            if word == "{s}":
                pool = POSITIVE if gen.random() < p_pos else NEGATIVE
                tokens.append(pool[gen.integers(len(pool))])
            elif gen.random() < 0.3:
                tokens.append(FILLER[gen.integers(len(FILLER))])
            else:
                tokens.append(word)
    return tokens[:length]


# -- loans and labels -----------------------------------------------------------


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def solve_intercept(eta: np.ndarray, target: float, tol: float = 1e-12) -> float:
    """Intercept making the mean planted probability equal ``target``."""
    if not 0.0 < target < 1.0:
        raise RateUnreachable(f"target rate {target} outside (0, 1)")
    lo, hi = -60.0, 60.0
    if not expit(lo + eta).mean() < target < expit(hi + eta).mean():
        raise RateUnreachable(f"target rate {target} not reachable")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if expit(mid + eta).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def draw_loan_shells(spec: GenSpec, stations: pd.DataFrame) -> pd.DataFrame:
    gen = Rng(spec.seed).stream("loans")
    n = spec.n_loans
    home = gen.integers(0, len(stations), n)
    lat = stations["lat"].to_numpy()[home] + gen.uniform(-0.3, 0.3, n)
    lon = stations["lon"].to_numpy()[home] + gen.uniform(-0.3, 0.3, n)
    months = pd.period_range(spec.loan_window[0], spec.loan_window[1], freq="M")
    start_month = months[gen.integers(0, len(months), n)]
    day = gen.integers(1, 29, n)
    start = [f"{p.year:04d}-{p.month:02d}-{d:02d}" for p, d in zip(start_month, day)]
    term = gen.choice(_TERM_VALUES, size=n, p=_TERM_PROBS / _TERM_PROBS.sum())
    return pd.DataFrame(
        {
            "loan_id": [f"L{i:05d}" for i in range(n)],
            "lat": np.round(lat, 4),
            "lon": np.round(lon, 4),
            "start_date": start,
            "term_months": term,
        }
    )


def planted_logit_terms(q, climate_means: np.ndarray, sentiment) -> np.ndarray:
    """Columns aligned with BETA_KEYS; signs make every positive beta raise risk."""
    z = np.column_stack([_zscore(climate_means[:, k]) for k in range(len(FACTORS))])
    # FACTORS order is di, wlr, ht, cf.
    return np.column_stack([-q, z[:, 1], z[:, 0], z[:, 2], z[:, 3], -sentiment])


def gen_loans_and_labels(spec: GenSpec, shells: pd.DataFrame, panel_array: np.ndarray):
    """Structured fields, texts and Bernoulli labels for loans with known panels."""
    gen = Rng(spec.seed).stream("labels")
    n = len(shells)
    q = gen.standard_normal(n)
    sentiment = spec.text_rho * q + math.sqrt(1.0 - spec.text_rho**2) * gen.standard_normal(n)
    terms = planted_logit_terms(q, panel_array.mean(axis=1), sentiment)
    beta = np.array([spec.betas[k] for k in BETA_KEYS])
    eta = terms @ beta
    alpha = solve_intercept(eta, spec.default_rate)
    prob = expit(alpha + eta)
    labels = (gen.random(n) < prob).astype(np.int64)
    text_gen = Rng(spec.seed).stream("text")
    texts = {lid: gen_text(s, text_gen) for lid, s in zip(shells["loan_id"], sentiment)}
    structured = gen_structured(q, shells["term_months"].to_numpy(), spec)
    loans = pd.concat([shells.reset_index(drop=True), pd.DataFrame({"label": labels}), structured], axis=1)
    truth = pd.DataFrame({"loan_id": shells["loan_id"].to_numpy(), "quality": q, "sentiment": sentiment, "probability": prob})
    return loans, texts, truth, alpha


@dataclass
class SyntheticWorld:
    spec: GenSpec
    stations: pd.DataFrame
    weather: pd.DataFrame
    indices: pd.DataFrame
    loans: pd.DataFrame
    texts: dict
    panels: pd.DataFrame
    truth: pd.DataFrame
    alpha: float


def generate(spec: GenSpec) -> SyntheticWorld:
    stations = gen_stations(spec)
    weather = gen_station_weather(spec, stations)
    indices = compute_monthly_indices(weather, stations, spec.climatology_years)
    shells = draw_loan_shells(spec, stations)
    panels, dropped = build_panels(shells, stations, indices)
    if dropped:
        logger.info("dropping %d loans without complete panels", len(dropped))
        shells = shells[~shells["loan_id"].isin(dropped)].reset_index(drop=True)
    array = panels_to_array(panels, shells["loan_id"].tolist())
    loans, texts, truth, alpha = gen_loans_and_labels(spec, shells, array)
    return SyntheticWorld(spec, stations, weather, indices, loans, texts, panels, truth, alpha)
