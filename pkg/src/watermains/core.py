"""Shared domain types for the water-main analytics pipeline.

Immutable value types plus a few pure functions. No I/O, no learning
logic; those live in the ingestion/forest/forecast modules.
"""

from __future__ import annotations

import calendar
import math
import warnings
from dataclasses import dataclass, field
from datetime import date
from functools import cached_property
from typing import TYPE_CHECKING, Iterator, Mapping

if TYPE_CHECKING:
    from .ingestion import MatchReport

DAYS_PER_YEAR = 365.25

MATERIALS = ("AC", "CICL", "DICL", "PVC", "PE", "MSCL", "Other")

BURST = "burst"
FITTING = "fitting"
FAILURE_TYPES = (BURST, FITTING)

EARTH_RADIUS_KM = 6371.0088


class ExposureError(ValueError):
    """Failure rate requested over a zero or negative exposure."""


def normalize_material(raw: str) -> str:
    """Map a raw material string onto the fixed taxonomy.

    Unknown strings map to ``Other`` with a warning; matching is
    case-insensitive on the trimmed value.
    """
    token = raw.strip().upper()
    for mat in MATERIALS:
        if token == mat.upper():
            return mat
    warnings.warn(f"unknown material {raw!r} mapped to Other", stacklevel=2)
    return "Other"


def normalize_failure_type(raw: str) -> str:
    token = raw.strip().lower()
    if token not in FAILURE_TYPES:
        raise ValueError(f"unknown failure type {raw!r}; expected one of {FAILURE_TYPES}")
    return token


def failure_rate(failure_count: float, total_length_km: float, years: float) -> float:
    """Failures per 100 km per year.

    ``failure_count / (total_length_km * years) * 100``; linear in the
    count, inverse in the exposure.
    """
    if failure_count < 0:
        raise ValueError(f"failure_count must be >= 0, got {failure_count}")
    if total_length_km <= 0 or years <= 0:
        raise ExposureError(
            f"exposure must be positive, got {total_length_km} km over {years} years"
        )
    return failure_count / (total_length_km * years) * 100.0


def risk_score(likelihood: float, consequence: float) -> float:
    """Risk as the product of likelihood and consequence severity."""
    if likelihood < 0 or consequence < 0:
        raise ValueError("likelihood and consequence must both be >= 0")
    return likelihood * consequence


def years_between(start: date, end: date) -> float:
    """Fractional years from start to end (days / 365.25)."""
    return (end - start).days / DAYS_PER_YEAR


def days_in_year(year: int) -> int:
    return 366 if calendar.isleap(year) else 365


def mid_year(year: int) -> date:
    """Middle of the calendar year, used when a factor slice needs one age."""
    return date(year, 7, 1)


def in_service_fraction(install_date: date, year: int) -> float:
    """Fraction of calendar ``year`` the asset was in service.

    1.0 for assets installed in earlier years, 0.0 for later years,
    day-accurate in the install year itself.
    """
    start = date(year, 1, 1)
    end = date(year, 12, 31)
    if install_date > end:
        return 0.0
    if install_date <= start:
        return 1.0
    return ((end - install_date).days + 1) / days_in_year(year)


def in_service_fraction_month(install_date: date, year: int, month: int) -> float:
    """Fraction of the given calendar month the asset was in service."""
    n_days = calendar.monthrange(year, month)[1]
    start = date(year, month, 1)
    end = date(year, month, n_days)
    if install_date > end:
        return 0.0
    if install_date <= start:
        return 1.0
    return ((end - install_date).days + 1) / n_days


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in kilometres."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(a))


@dataclass(frozen=True)
class EnvironmentRecord:
    """Soil and temperature attributes of one geographic grid cell.

    ``monthly_mean_temp_c`` maps (year, month) to the monthly mean
    temperature in degrees Celsius over the analysis years.
    """

    cell: str
    lat: float
    lon: float
    clay_pct: float
    bulk_density: float
    silt_pct: float
    sand_pct: float
    ph: float
    monthly_mean_temp_c: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.cell:
            raise ValueError("cell key must be non-empty")
        for name in ("clay_pct", "silt_pct", "sand_pct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be in [0, 100], got {v}")
        if not 0.0 <= self.ph <= 14.0:
            raise ValueError(f"pH must be in [0, 14], got {self.ph}")
        if self.bulk_density <= 0:
            raise ValueError(f"bulk density must be positive, got {self.bulk_density}")

    def mean_annual_temp(self, years: range | None = None) -> float | None:
        """Mean of the monthly series, optionally restricted to ``years``."""
        vals = [
            t
            for (y, _m), t in self.monthly_mean_temp_c.items()
            if years is None or y in years
        ]
        if not vals:
            return None
        return sum(vals) / len(vals)


@dataclass(frozen=True)
class PipeAsset:
    """One water main: identity, material, geometry, install date, place."""

    asset_id: str
    install_date: date
    material: str
    diameter_mm: float
    length_m: float
    suburb: str
    lat: float
    lon: float
    environment: EnvironmentRecord | None = None
    env_distance_km: float | None = None

    def __post_init__(self) -> None:
        if not self.asset_id:
            raise ValueError("asset_id must be non-empty")
        if self.length_m <= 0:
            raise ValueError(f"length must be positive, got {self.length_m}")
        if self.diameter_mm <= 0:
            raise ValueError(f"diameter must be positive, got {self.diameter_mm}")
        if self.material not in MATERIALS:
            raise ValueError(f"material {self.material!r} not in {MATERIALS}")
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"bad location ({self.lat}, {self.lon})")

    @property
    def length_km(self) -> float:
        return self.length_m / 1000.0

    def age_years(self, at: date) -> float:
        """Fractional age at a reference date; negative before install."""
        return years_between(self.install_date, at)

    def in_service_fraction(self, year: int) -> float:
        return in_service_fraction(self.install_date, year)


@dataclass(frozen=True)
class FailureRecord:
    """One work order: asset link, date, failure category."""

    work_order_id: str
    asset_id: str
    failure_date: date | None
    failure_type: str
    lat: float | None = None
    lon: float | None = None

    def __post_init__(self) -> None:
        if not self.work_order_id:
            raise ValueError("work_order_id must be non-empty")
        if self.failure_type not in FAILURE_TYPES:
            raise ValueError(
                f"failure_type {self.failure_type!r} not in {FAILURE_TYPES}"
            )


@dataclass(frozen=True)
class RatePoint:
    """(age, failure rate) observation pooled over a pipe category.

    ``support`` is the exposure in km-years behind the point.
    """

    age: float
    rate: float
    support: float

    def __post_init__(self) -> None:
        if self.age <= 0:
            raise ValueError(f"age must be positive, got {self.age}")
        if self.rate < 0:
            raise ValueError(f"rate must be >= 0, got {self.rate}")
        if self.support <= 0:
            raise ValueError(f"support must be positive, got {self.support}")


@dataclass(frozen=True)
class Finding:
    """One consistency-rule violation found during the data audit."""

    rule: str
    subject: str
    detail: str


@dataclass(frozen=True)
class QualityReport:
    """Per-field completeness and validity plus consistency findings.

    Completeness and validity are independent checks: completeness is the
    fraction of non-empty cells, validity the fraction of cells that are
    not invalid (empty cells do not count against validity).
    """

    completeness: Mapping[str, Mapping[str, float]]
    validity: Mapping[str, Mapping[str, float]]
    findings: tuple[Finding, ...] = ()
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for group in (self.completeness, self.validity):
            for table, fields_ in group.items():
                for name, frac in fields_.items():
                    if not 0.0 <= frac <= 1.0:
                        raise ValueError(
                            f"{table}.{name} fraction out of [0, 1]: {frac}"
                        )

    def to_json_dict(self) -> dict:
        return {
            "completeness": {t: dict(f) for t, f in self.completeness.items()},
            "validity": {t: dict(f) for t, f in self.validity.items()},
            "findings": [
                {"rule": f.rule, "subject": f.subject, "detail": f.detail}
                for f in self.findings
            ],
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class MatchedDataset:
    """Assets joined with their failures and environmental attributes."""

    assets: tuple[PipeAsset, ...]
    failures_by_asset: Mapping[str, tuple[FailureRecord, ...]]
    unmatched: tuple[FailureRecord, ...] = ()
    match_stats: "MatchReport | None" = None

    def __post_init__(self) -> None:
        known = {a.asset_id for a in self.assets}
        if len(known) != len(self.assets):
            raise ValueError("duplicate asset_id in dataset")
        for asset_id in self.failures_by_asset:
            if asset_id not in known:
                raise ValueError(f"failures reference unknown asset {asset_id!r}")

    @cached_property
    def asset_index(self) -> dict[str, PipeAsset]:
        return {a.asset_id: a for a in self.assets}

    @property
    def total_length_km(self) -> float:
        return sum(a.length_km for a in self.assets)

    def failures_for(
        self, asset_id: str, failure_type: str | None = None
    ) -> tuple[FailureRecord, ...]:
        recs = self.failures_by_asset.get(asset_id, ())
        if failure_type is None:
            return recs
        return tuple(r for r in recs if r.failure_type == failure_type)

    def iter_failures(
        self, failure_type: str | None = None
    ) -> Iterator[tuple[PipeAsset, FailureRecord]]:
        for asset_id, recs in self.failures_by_asset.items():
            asset = self.asset_index[asset_id]
            for rec in recs:
                if failure_type is None or rec.failure_type == failure_type:
                    yield asset, rec

    def failure_count(
        self,
        failure_type: str | None = None,
        years: range | None = None,
    ) -> int:
        n = 0
        for _asset, rec in self.iter_failures(failure_type):
            if years is not None:
                if rec.failure_date is None or rec.failure_date.year not in years:
                    continue
            n += 1
        return n

    def failure_counts_in_year(
        self, year: int, failure_type: str | None = None
    ) -> dict[str, int]:
        """Per-asset failure counts for one calendar year."""
        counts: dict[str, int] = {}
        for asset, rec in self.iter_failures(failure_type):
            if rec.failure_date is not None and rec.failure_date.year == year:
                counts[asset.asset_id] = counts.get(asset.asset_id, 0) + 1
        return counts
