"""Carbon accounting: operational, amortized embodied, and total emissions.

Operational carbon converts energy through the grid's carbon intensity;
embodied carbon amortizes a device's manufacturing footprint over its
service lifetime.  Everything here is a pure function over immutable
inputs, so the simulator can charge carbon per request without shared
state.
"""

from __future__ import annotations

import csv
import json
from bisect import bisect_right
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from .profiles import GpuSpec

JOULES_PER_KWH = 3.6e6

# Julian year; fixed so lifetime conversions are bit-stable everywhere.
SECONDS_PER_YEAR = 31_557_600.0

# Shared DRAM coefficient used when calibrating area coefficients against
# known device totals.  Per-GB embodied carbon for recent DRAM generations
# clusters in the tens of grams; the area terms absorb the residual.
DEFAULT_CARBON_PER_MEMORY = 65.0


class CarbonError(Exception):
    """Base class for carbon-model failures."""


class MissingEmbodiedCarbonError(CarbonError):
    """The GPU spec carries no embodied-carbon total.

    Callers can fill the gap with estimate_embodied_act and a calibrated
    ActParams before retrying.
    """

    def __init__(self, gpu_id: str):
        super().__init__(
            f"gpu {gpu_id!r} has no embodied_carbon; estimate one with "
            "estimate_embodied_act before amortizing"
        )


class UnknownTechNodeError(CarbonError):
    """ActParams has no area coefficient for the GPU's process node."""


class RegionError(CarbonError):
    """A region registry or CI series problem."""


class UnknownRegionError(RegionError):
    """The requested region code is not in the registry."""


@dataclass(frozen=True)
class RegionCI:
    """A grid region: average carbon intensity plus an optional series.

    Series samples are (epoch seconds, g/kWh) pairs with strictly
    increasing timestamps; between samples the intensity holds the value
    of the latest sample at or before the queried time.
    """

    region_code: str
    avg_ci: float
    series: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.avg_ci <= 0:
            raise RegionError(f"region {self.region_code!r}: avg_ci must be > 0")
        last = None
        for t, ci in self.series:
            if ci <= 0:
                raise RegionError(f"region {self.region_code!r}: series ci must be > 0")
            if last is not None and t <= last:
                raise RegionError(
                    f"region {self.region_code!r}: series timestamps must be strictly increasing"
                )
            last = t


@dataclass(frozen=True)
class CarbonBreakdown:
    """Operational plus embodied grams CO2eq; total is always their sum."""

    operational: float
    embodied: float
    total: float

    def __post_init__(self):
        if self.operational < 0 or self.embodied < 0:
            raise CarbonError("carbon components must be non-negative")
        if self.total != self.operational + self.embodied:
            raise CarbonError("total must equal operational + embodied exactly")

    @classmethod
    def of(cls, operational: float, embodied: float) -> "CarbonBreakdown":
        return cls(operational=operational, embodied=embodied,
                   total=operational + embodied)

    def __add__(self, other: "CarbonBreakdown") -> "CarbonBreakdown":
        return CarbonBreakdown.of(self.operational + other.operational,
                                  self.embodied + other.embodied)

    @property
    def embodied_share(self) -> float:
        """Embodied fraction of the total; 0 for an all-zero breakdown."""
        return self.embodied / self.total if self.total > 0 else 0.0


ZERO_BREAKDOWN = CarbonBreakdown(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ActParams:
    """Area-and-memory embodied-carbon coefficients.

    carbon_per_area maps a process node (nm) to grams per mm2 of die;
    carbon_per_memory is grams per GB of onboard memory.
    """

    carbon_per_area: dict[int, float] = field(default_factory=dict)
    carbon_per_memory: float = DEFAULT_CARBON_PER_MEMORY

    def __post_init__(self):
        if self.carbon_per_memory <= 0:
            raise CarbonError("carbon_per_memory must be > 0")
        for node, coeff in self.carbon_per_area.items():
            if coeff <= 0:
                raise CarbonError(f"carbon_per_area[{node}] must be > 0")


def operational_carbon(energy: float, ci: float) -> float:
    """Grams CO2eq for `energy` joules drawn at intensity `ci` g/kWh."""
    if energy < 0:
        raise CarbonError("energy must be non-negative")
    if ci <= 0:
        raise CarbonError("carbon intensity must be positive")
    return energy / JOULES_PER_KWH * ci


def lifetime_seconds(spec: GpuSpec) -> float:
    """The GPU's service lifetime expressed in seconds."""
    return spec.lifetime * SECONDS_PER_YEAR


def embodied_rate(spec: GpuSpec) -> float:
    """Grams CO2eq per second of existence, amortized over the lifetime."""
    if spec.embodied_carbon is None:
        raise MissingEmbodiedCarbonError(spec.id)
    return spec.embodied_carbon / lifetime_seconds(spec)


def amortized_embodied(spec: GpuSpec, duration: float) -> float:
    """Embodied grams attributed to `duration` seconds of the lifetime.

    Computed as total * (duration / lifetime) so that a full-lifetime
    duration returns the manufacturing total exactly, with no rounding
    residue from the rate-times-time form.
    """
    if duration < 0:
        raise CarbonError("duration must be non-negative")
    if spec.embodied_carbon is None:
        raise MissingEmbodiedCarbonError(spec.id)
    return spec.embodied_carbon * (duration / lifetime_seconds(spec))


def total_carbon(energy: float, duration: float, spec: GpuSpec, ci: float) -> CarbonBreakdown:
    """Operational plus embodied breakdown for one charged interval."""
    return CarbonBreakdown.of(operational_carbon(energy, ci),
                              amortized_embodied(spec, duration))


def embodied_fraction(power: float, spec: GpuSpec, ci: float) -> float:
    """Steady-state embodied share of total carbon at a fixed draw.

    Duration cancels: both embodied and operational grams grow linearly
    with time, so the share depends only on the embodied rate, the power
    draw, and the grid intensity.
    """
    if power <= 0:
        raise CarbonError("power must be positive")
    if ci <= 0:
        raise CarbonError("carbon intensity must be positive")
    rate = embodied_rate(spec)
    return rate / (rate + power * ci / JOULES_PER_KWH)


def power_for_embodied_fraction(fraction: float, spec: GpuSpec, ci: float) -> float:
    """Invert embodied_fraction: the draw that yields `fraction` at `ci`."""
    if not 0 < fraction < 1:
        raise CarbonError("fraction must lie strictly between 0 and 1")
    rate = embodied_rate(spec)
    return rate * (1.0 / fraction - 1.0) * JOULES_PER_KWH / ci


def estimate_embodied_act(spec, params: ActParams) -> float:
    """Area-plus-memory embodied estimate in grams CO2eq.

    Accepts any object with chip_area, tech_node, and memory_capacity
    attributes so hypothetical devices can be sized without a full spec.
    """
    node = spec.tech_node
    if node not in params.carbon_per_area:
        known = sorted(params.carbon_per_area)
        raise UnknownTechNodeError(
            f"no area coefficient for {node} nm (calibrated nodes: {known})"
        )
    return (spec.chip_area * params.carbon_per_area[node]
            + spec.memory_capacity * params.carbon_per_memory)


def calibrate_act_params(specs, carbon_per_memory: float = DEFAULT_CARBON_PER_MEMORY) -> ActParams:
    """Fit per-node area coefficients to known embodied totals.

    The memory coefficient is fixed (the system is underdetermined) and
    each node's area coefficient is the least-squares solution over the
    specs on that node; with one spec per node the fit is exact.
    """
    if carbon_per_memory <= 0:
        raise CarbonError("carbon_per_memory must be > 0")
    num: dict[int, float] = {}
    den: dict[int, float] = {}
    for spec in specs:
        if spec.embodied_carbon is None:
            raise MissingEmbodiedCarbonError(spec.id)
        residual = spec.embodied_carbon - spec.memory_capacity * carbon_per_memory
        if residual <= 0:
            raise CarbonError(
                f"gpu {spec.id!r}: memory term alone exceeds the embodied total; "
                "lower carbon_per_memory"
            )
        num[spec.tech_node] = num.get(spec.tech_node, 0.0) + spec.chip_area * residual
        den[spec.tech_node] = den.get(spec.tech_node, 0.0) + spec.chip_area ** 2
    if not num:
        raise CarbonError("no specs with embodied totals to calibrate against")
    area = {node: num[node] / den[node] for node in sorted(num)}
    return ActParams(carbon_per_area=area, carbon_per_memory=carbon_per_memory)


def ci_at(region: RegionCI, time: float) -> float:
    """Carbon intensity at `time` (epoch seconds).

    Step function over the series: the latest sample at or before `time`,
    the first sample for earlier times, and avg_ci when no series exists.
    """
    if not region.series:
        return region.avg_ci
    stamps = [t for t, _ in region.series]
    idx = bisect_right(stamps, time) - 1
    if idx < 0:
        idx = 0
    return region.series[idx][1]


def _parse_timestamp(raw: str) -> float:
    """Epoch seconds from an integer/float literal or ISO-8601 text."""
    text = raw.strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as e:
        raise RegionError(f"unparseable timestamp {raw!r}") from e
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def read_ci_series(path) -> tuple[tuple[float, float], ...]:
    """Read a CI time series from a `timestamp,ci_g_per_kwh` CSV."""
    samples = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise RegionError(f"{path}: empty CI series")
        for col in ("timestamp", "ci_g_per_kwh"):
            if col not in reader.fieldnames:
                raise RegionError(f"{path}: missing CSV column {col!r}")
        for row in reader:
            samples.append((_parse_timestamp(row["timestamp"]),
                            float(row["ci_g_per_kwh"])))
    if not samples:
        raise RegionError(f"{path}: CI series has no samples")
    return tuple(samples)


def load_regions(path) -> dict[str, RegionCI]:
    """Load a region registry: code -> {avg_ci, optional series path}.

    Series paths resolve relative to the registry file so a bundle can be
    relocated as one directory.
    """
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise RegionError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise RegionError(f"{path}: region registry must be a JSON object")
    regions = {}
    for code, entry in doc.items():
        if not isinstance(entry, dict) or "avg_ci" not in entry:
            raise RegionError(f"{path}: region {code!r} needs an avg_ci field")
        series = ()
        if entry.get("series_path"):
            series = read_ci_series(base / entry["series_path"])
        elif entry.get("series"):
            series = tuple((float(t), float(ci)) for t, ci in entry["series"])
        regions[code] = RegionCI(region_code=code, avg_ci=float(entry["avg_ci"]),
                                 series=series)
    return regions


def resolve_region(regions: dict[str, RegionCI], code: str) -> RegionCI:
    """Case-insensitive region lookup with a helpful error."""
    if code in regions:
        return regions[code]
    lowered = code.lower()
    if lowered in regions:
        return regions[lowered]
    raise UnknownRegionError(
        f"unknown region {code!r} (known: {sorted(regions)})"
    )


def load_bundled_regions() -> dict[str, RegionCI]:
    """The region registry shipped with the package."""
    text = resources.files("carbonserve.data").joinpath("regions.json").read_text(
        encoding="utf-8")
    doc = json.loads(text)
    return {code: RegionCI(region_code=code, avg_ci=float(entry["avg_ci"]),
                           series=tuple((float(t), float(ci))
                                        for t, ci in entry.get("series", [])))
            for code, entry in doc.items()}


def load_act_params(path) -> ActParams:
    """Read ActParams from a JSON file with string node keys."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return ActParams(
        carbon_per_area={int(k): float(v) for k, v in doc["carbon_per_area"].items()},
        carbon_per_memory=float(doc["carbon_per_memory"]),
    )


def load_bundled_act_params() -> ActParams:
    """Calibrated coefficients shipped with the package."""
    text = resources.files("carbonserve.data").joinpath("act_params.json").read_text(
        encoding="utf-8")
    doc = json.loads(text)
    return ActParams(
        carbon_per_area={int(k): float(v) for k, v in doc["carbon_per_area"].items()},
        carbon_per_memory=float(doc["carbon_per_memory"]),
    )
