"""Harvest traces: CSV ingestion, a synthetic generator and daily forecasts.

CSV schema
----------
Header ``timestamp,irradiance``; one row per hour. ``timestamp`` is an
ISO-8601 hour (``2010-01-01T00:00``), strictly increasing in steps of one
hour. ``irradiance`` is the panel output as a fraction of its rating,
a decimal in ``[0, 10]`` (values above 1 are allowed for scaled datasets).
The harvested energy of that hour is ``irradiance * panel_rating_w * 1 h``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional, Union

import numpy as np

HOURS_PER_DAY = 24
MAX_IRRADIANCE = 10.0


class TraceFormatError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class HarvestTrace:
    hourly_wh: np.ndarray
    origin: str = "SYNTHETIC"
    start: Optional[datetime] = None

    def __post_init__(self):
        arr = np.asarray(self.hourly_wh, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("hourly_wh must be one-dimensional")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError("harvest values must be finite and >= 0")
        arr.setflags(write=False)
        object.__setattr__(self, "hourly_wh", arr)

    def __len__(self) -> int:
        return len(self.hourly_wh)

    @property
    def n_days(self) -> int:
        return -(-len(self) // HOURS_PER_DAY)

    def daily_totals(self) -> np.ndarray:
        """Per-day sums; a trailing partial day is summed over the hours it has."""
        return np.array([
            math.fsum(self.hourly_wh[d * HOURS_PER_DAY:(d + 1) * HOURS_PER_DAY])
            for d in range(self.n_days)
        ])

    def slice_days(self, first_day: int, n_days: int) -> "HarvestTrace":
        a = first_day * HOURS_PER_DAY
        start = self.start + timedelta(hours=a) if self.start is not None else None
        return HarvestTrace(self.hourly_wh[a:a + n_days * HOURS_PER_DAY], self.origin, start)


@dataclass(frozen=True)
class ForecastTrace:
    daily_wh: np.ndarray
    noise_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_fraction < 0:
            raise ValueError("noise_fraction must be >= 0")
        object.__setattr__(self, "daily_wh", np.asarray(self.daily_wh, dtype=np.float64))


@dataclass(frozen=True)
class SynthProfile:
    """Shape of the synthetic generator.

    ``amplitude_wh`` is the clear-sky peak hour at the seasonal maximum.
    ``seasonal_modulation`` is the fractional drop at the seasonal minimum.
    ``cloud_noise`` is the log-std of the daily cloud factor; hours get an
    extra log-std of ``cloud_noise / 3``.
    """

    amplitude_wh: float = 6.0
    seasonal_modulation: float = 0.3
    cloud_noise: float = 0.4
    sunrise_hour: int = 6
    sunset_hour: int = 18
    peak_day: int = 172

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def load_csv(path: Union[str, Path], panel_rating_w: float = 6.0) -> HarvestTrace:
    path = Path(path)
    values = []
    start = prev = None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError("empty file", 1) from None
        if [h.strip() for h in header] != ["timestamp", "irradiance"]:
            raise TraceFormatError(f"expected header 'timestamp,irradiance', got {header!r}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise TraceFormatError(f"expected 2 fields, got {len(row)}", lineno)
            try:
                ts = datetime.fromisoformat(row[0].strip())
            except ValueError:
                raise TraceFormatError(f"bad timestamp {row[0]!r}", lineno) from None
            try:
                irr = float(row[1])
            except ValueError:
                raise TraceFormatError(f"bad irradiance {row[1]!r}", lineno) from None
            if not math.isfinite(irr) or irr < 0 or irr > MAX_IRRADIANCE:
                raise TraceFormatError(f"irradiance {irr} outside [0, {MAX_IRRADIANCE}]", lineno)
            if prev is not None and ts - prev != timedelta(hours=1):
                raise TraceFormatError(
                    f"timestamps must increase by exactly one hour ({prev} -> {ts})", lineno)
            if start is None:
                start = ts
            prev = ts
            values.append(irr * panel_rating_w)
    if not values:
        raise TraceFormatError("no data rows", 2)
    return HarvestTrace(np.array(values), origin="CSV", start=start)


def write_csv(trace: HarvestTrace, path: Union[str, Path], panel_rating_w: float = 6.0) -> None:
    start = trace.start or datetime(2000, 1, 1)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "irradiance"])
        for i, wh in enumerate(trace.hourly_wh):
            ts = start + timedelta(hours=i)
            w.writerow([ts.isoformat(timespec="minutes"), repr(float(wh / panel_rating_w))])


def diurnal_shape(profile: SynthProfile) -> np.ndarray:
    """Half-sine between sunrise and sunset, exactly 0 elsewhere."""
    h = np.arange(HOURS_PER_DAY)
    span = profile.sunset_hour - profile.sunrise_hour
    shape = np.sin(np.pi * (h - profile.sunrise_hour) / span)
    day = (h > profile.sunrise_hour) & (h < profile.sunset_hour)
    return np.where(day, shape, 0.0)


def synth_generate(days: int, seed: int, profile: Optional[SynthProfile] = None) -> HarvestTrace:
    """Synthetic hourly harvest for ``days`` days starting on January 1st.

    ``Eh[d, h] = min(A, A * season(d) * diurnal(h) * cloud(d, h))`` with
    ``season(d) = 1 - m * (1 - cos(2 pi (d - peak_day) / 365)) / 2`` and a
    mean-one lognormal ``cloud(d, h)`` built from a daily and an hourly
    normal draw of ``np.random.default_rng(seed)``.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    p = profile or SynthProfile()
    rng = np.random.default_rng(seed)
    d = np.arange(days)
    season = 1.0 - p.seasonal_modulation * (1.0 - np.cos(2 * np.pi * (d - p.peak_day) / 365.0)) / 2.0
    sigma = p.cloud_noise
    z_day = rng.standard_normal(days)
    z_hour = rng.standard_normal((days, HOURS_PER_DAY))
    if sigma > 0:
        s_h = sigma / 3.0
        cloud = np.exp(sigma * z_day[:, None] - sigma ** 2 / 2 + s_h * z_hour - s_h ** 2 / 2)
    else:
        cloud = np.ones((days, HOURS_PER_DAY))
    eh = p.amplitude_wh * season[:, None] * diurnal_shape(p)[None, :] * cloud
    eh = np.minimum(eh, p.amplitude_wh)
    return HarvestTrace(eh.ravel(), origin="SYNTHETIC", start=datetime(2001, 1, 1))


def make_forecast(trace: HarvestTrace, noise_fraction: float = 0.2, seed: int = 0) -> ForecastTrace:
    """Per-day harvest totals perturbed by ``1 + u``, ``u ~ U[-f, f]``.

    A trailing partial day is forecast from the hours it has.
    """
    if noise_fraction < 0:
        raise ValueError("noise_fraction must be >= 0")
    true = trace.daily_totals()
    if noise_fraction == 0:
        return ForecastTrace(true, 0.0, seed)
    u = np.random.default_rng(seed).uniform(-noise_fraction, noise_fraction, size=len(true))
    return ForecastTrace(np.maximum(true * (1.0 + u), 0.0), noise_fraction, seed)
