"""Nearest-station matching and 12-month pre-origination climate panels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

EARTH_RADIUS_KM = 6371.0
FACTORS = ("di", "wlr", "ht", "cf")
PANEL_MONTHS = 12


class PanelError(ValueError):
    pass


class EmptyStationSet(PanelError):
    pass


class MissingMonth(PanelError):
    def __init__(self, loan_id, months):
        self.loan_id = loan_id
        self.months = list(months)
        super().__init__(f"loan {loan_id}: missing climate months {', '.join(self.months)}")


@dataclass(frozen=True)
class ClimatePanel:
    loan_id: str
    values: np.ndarray  # (12, 4), oldest month first

    def __post_init__(self):
        if self.values.shape != (PANEL_MONTHS, len(FACTORS)):
            raise PanelError(f"panel shape {self.values.shape}")


def haversine_km(lat1, lon1, lat2, lon2):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def nearest_station(lat: float, lon: float, stations: pd.DataFrame) -> tuple[str, float]:
    """Closest station by great-circle distance; ties go to the smaller id."""
    if len(stations) == 0:
        raise EmptyStationSet("no stations to match against")
    ordered = stations.sort_values("station_id", kind="mergesort")
    dist = haversine_km(lat, lon, ordered["lat"].to_numpy(), ordered["lon"].to_numpy())
    best = int(np.argmin(dist))  # first minimum = smallest id
    return str(ordered["station_id"].iloc[best]), float(dist[best])


def assign_stations(loans: pd.DataFrame, stations: pd.DataFrame) -> pd.DataFrame:
    """Vectorized :func:`nearest_station` for every loan row."""
    if len(stations) == 0:
        raise EmptyStationSet("no stations to match against")
    ordered = stations.sort_values("station_id", kind="mergesort")
    dist = haversine_km(
        loans["lat"].to_numpy()[:, None],
        loans["lon"].to_numpy()[:, None],
        ordered["lat"].to_numpy()[None, :],
        ordered["lon"].to_numpy()[None, :],
    )
    best = np.argmin(dist, axis=1)
    return pd.DataFrame(
        {
            "loan_id": loans["loan_id"].to_numpy(),
            "station_id": ordered["station_id"].to_numpy()[best],
            "distance_km": dist[np.arange(len(loans)), best],
        }
    )


def panel_months(start_date) -> list[str]:
    """The 12 calendar months strictly before the start month, oldest first."""
    ts = pd.Timestamp(start_date)
    index = ts.year * 12 + (ts.month - 1)
    out = []
    for k in range(index - PANEL_MONTHS, index):
        out.append(f"{k // 12:04d}-{k % 12 + 1:02d}")
    return out


def _index_lookup(index_table: pd.DataFrame) -> dict:
    values = index_table[list(FACTORS)].to_numpy(dtype=np.float64)
    keys = zip(index_table["station_id"].astype(str), index_table["year_month"].astype(str))
    return {k: values[i] for i, k in enumerate(keys)}


def build_panel(loan_id, station_id: str, start_date, index_table) -> ClimatePanel:
    lookup = index_table if isinstance(index_table, dict) else _index_lookup(index_table)
    months = panel_months(start_date)
    missing = [m for m in months if (station_id, m) not in lookup]
    if missing:
        raise MissingMonth(loan_id, missing)
    return ClimatePanel(str(loan_id), np.stack([lookup[(station_id, m)] for m in months]))


def build_panels(loans: pd.DataFrame, stations: pd.DataFrame, index_table: pd.DataFrame):
    """Panels for all loans; loans lacking any month are dropped.

    Returns ``(panels, dropped)`` where ``panels`` is the long-format frame
    ``loan_id,month_offset,di,wlr,ht,cf`` and ``dropped`` lists skipped loan ids.
    """
    matches = assign_stations(loans, stations)
    lookup = _index_lookup(index_table)
    rows, dropped = [], []
    offsets = np.arange(-PANEL_MONTHS, 0)
    for loan_id, sid, start in zip(matches["loan_id"], matches["station_id"], loans["start_date"]):
        try:
            panel = build_panel(loan_id, str(sid), start, lookup)
        except MissingMonth:
            dropped.append(loan_id)
            continue
        block = pd.DataFrame(panel.values, columns=list(FACTORS))
        block.insert(0, "month_offset", offsets)
        block.insert(0, "loan_id", panel.loan_id)
        rows.append(block)
    columns = ["loan_id", "month_offset", *FACTORS]
    frame = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=columns)
    return frame[columns], dropped


def panels_to_array(panels: pd.DataFrame, loan_ids) -> np.ndarray:
    """(n_loans, 12, 4) array in the order of ``loan_ids``."""
    ordered = panels.sort_values(["loan_id", "month_offset"], kind="mergesort")
    grouped = {
        lid: block[list(FACTORS)].to_numpy(dtype=np.float64)
        for lid, block in ordered.groupby("loan_id", sort=False)
    }
    missing = [lid for lid in loan_ids if str(lid) not in grouped]
    if missing:
        raise PanelError(f"no panel for loans {missing[:5]}")
    return np.stack([grouped[str(lid)] for lid in loan_ids])


def great_circle_check(lat, lon) -> None:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0) or math.isnan(lat + lon):
        raise PanelError(f"invalid coordinates ({lat}, {lon})")
