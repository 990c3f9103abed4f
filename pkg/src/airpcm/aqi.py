"""Daily AQI under China's HJ 633-2012 (MEP-2012) breakpoints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Dict, Optional

CATEGORIES = [
    (50.0, "good"),
    (100.0, "moderate"),
    (150.0, "unhealthy-for-sensitive"),
    (200.0, "unhealthy"),
    (300.0, "very-unhealthy"),
    (float("inf"), "hazardous"),
]

# pollutant -> breakpoint table used for a daily record
DAILY_TABLES = {
    "pm25": "pm25_24h",
    "pm10": "pm10_24h",
    "so2": "so2_24h",
    "no2": "no2_24h",
    "co": "co_24h",
    "o3": "o3_8h",
}


@lru_cache(maxsize=1)
def breakpoints() -> Dict[str, list]:
    raw = resources.files("airpcm.constants").joinpath("mep2012_breakpoints.json").read_text(encoding="utf-8")
    doc = json.loads(raw)
    canon = json.dumps(doc["tables"], sort_keys=True, separators=(",", ":"))
    if hashlib.sha256(canon.encode()).hexdigest() != doc["sha256"]:
        raise RuntimeError("MEP-2012 breakpoint table fails its checksum")
    return doc["tables"]


def iaqi(concentration: float, table: str) -> float:
    """Piecewise-linear sub-index; values past the last breakpoint clamp to 500."""
    if concentration < 0:
        raise ValueError(f"negative concentration {concentration} for {table}")
    tabs = breakpoints()
    bp, idx = tabs[table], tabs["iaqi"]
    if concentration > bp[-1]:
        return 500.0
    for lo in range(len(bp) - 1):
        c_lo, c_hi = bp[lo], bp[lo + 1]
        if concentration <= c_hi:
            i_lo, i_hi = idx[lo], idx[lo + 1]
            return i_lo + (i_hi - i_lo) * (concentration - c_lo) / (c_hi - c_lo)
    return float(idx[len(bp) - 1])


def category(aqi_value: float) -> str:
    for upper, name in CATEGORIES:
        if aqi_value <= upper:
            return name
    return CATEGORIES[-1][1]


@dataclass
class AQIRecord:
    station_id: str
    date: str
    iaqi: Dict[str, float]
    aqi: float
    category: str
    primary_pollutant: Optional[str]


def compute_aqi_mep2012(daily: Dict[str, float], station_id: str = "", date: str = "",
                        o3_1h_max: Optional[float] = None) -> AQIRecord:
    """AQI from one station-day of concentrations.

    ``daily`` maps pollutant -> daily value: 24-h means for PM2.5, PM10, SO2,
    NO2 (ug/m3) and CO (mg/m3), daily max 8-h mean for O3.  An O3 8-h value
    above the table's top uses the 1-h maximum when one is given.
    The primary pollutant is reported only when AQI > 50.
    """
    subs = {}
    for pol, table in DAILY_TABLES.items():
        if pol not in daily or daily[pol] is None:
            continue
        value = float(daily[pol])
        if pol == "o3" and value > breakpoints()["o3_8h"][-1] and o3_1h_max is not None:
            subs[pol] = iaqi(float(o3_1h_max), "o3_1h")
        else:
            subs[pol] = iaqi(value, table)
    if not subs:
        raise ValueError("no pollutant concentrations supplied")
    aqi_value = max(subs.values())
    primary = max(subs, key=subs.get) if aqi_value > 50 else None
    return AQIRecord(station_id, date, subs, aqi_value, category(aqi_value), primary)
