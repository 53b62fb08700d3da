"""Parameter sweeps over batch size, region, and lifetime.

Every sweep point is assembled from the profile, carbon, and fleet
primitives with no arithmetic of its own, so any figure a sweep produces
can be reproduced by calling those operations directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .carbon import (
    RegionCI,
    ci_at,
    embodied_fraction,
    embodied_rate,
    operational_carbon,
)
from .fleet import BatchDescriptor, GpuInstance, charge_batch
from .profiles import GpuSpec, OomProfileError, ProfileSet


class AnalysisError(Exception):
    """Sweep construction failure."""


@dataclass(frozen=True)
class SweepPoint:
    """One axis value and its metric bundle (name -> quantity)."""

    value: float
    metrics: dict[str, float]


@dataclass(frozen=True)
class SweepResult:
    """A named axis, strictly increasing values, one bundle per value."""

    axis: str
    points: tuple[SweepPoint, ...]
    metadata: dict[str, str]

    def __post_init__(self):
        values = [p.value for p in self.points]
        if any(b <= a for a, b in zip(values, values[1:])):
            raise AnalysisError(f"{self.axis} axis values must be strictly increasing")

    def metric(self, name: str) -> list[tuple[float, float]]:
        """(axis value, quantity) pairs for one metric, skipping gaps."""
        return [(p.value, p.metrics[name]) for p in self.points if name in p.metrics]

    def to_csv(self) -> str:
        lines = ["axis,value,metric,quantity"]
        for p in self.points:
            for name in p.metrics:
                lines.append(f"{self.axis},{p.value!r},{name},{p.metrics[name]!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {"axis": self.axis, "metadata": self.metadata,
               "points": [{"value": p.value, "metrics": p.metrics}
                          for p in self.points]}
        return json.dumps(doc, indent=2)


def sweep_collection_to_csv(results: list[SweepResult]) -> str:
    """Long CSV for several sweeps, metric names prefixed by their label."""
    lines = ["axis,value,metric,quantity"]
    for result in results:
        label = result.metadata.get("label", "")
        prefix = f"{label}:" if label else ""
        for p in result.points:
            for name in p.metrics:
                lines.append(
                    f"{result.axis},{p.value!r},{prefix}{name},{p.metrics[name]!r}")
    return "\n".join(lines) + "\n"


def batch_sweep(profiles: ProfileSet, gpu: str, model: str, phase: str,
                region: RegionCI, batches: list[int]) -> SweepResult:
    """Per-token rates across batch sizes for one (gpu, model, phase).

    OOM batch sizes appear as gap points carrying only an `oom` marker;
    per-token carbon combines the operational cost of one token with the
    embodied rate spread over the aggregate token throughput.
    """
    spec = profiles.gpus.get(gpu)
    if spec is None:
        raise AnalysisError(f"unknown gpu id {gpu!r}")
    rate = embodied_rate(spec)
    ci = region.avg_ci
    points = []
    for batch in sorted(set(batches)):
        try:
            prof = profiles.lookup(gpu, model, batch, phase)
        except OomProfileError:
            points.append(SweepPoint(value=float(batch), metrics={"oom": 1.0}))
            continue
        per_token_op = operational_carbon(prof.per_token_energy, ci)
        per_token_em = rate / prof.throughput
        points.append(SweepPoint(value=float(batch), metrics={
            "throughput_tok_per_s": prof.throughput,
            "per_token_energy_j": prof.per_token_energy,
            "avg_power_w": prof.avg_power,
            "per_token_operational_g": per_token_op,
            "per_token_embodied_g": per_token_em,
            "per_token_carbon_g": per_token_op + per_token_em,
        }))
    return SweepResult(axis="batch_size", points=tuple(points),
                       metadata={"gpu": gpu, "model": model, "phase": phase,
                                 "region": region.region_code,
                                 "label": f"{gpu}@{region.region_code}"})


def per_prompt_breakdown(profiles: ProfileSet, gpu: str, model: str, batch: int,
                         region: RegionCI, prompt_tokens: int,
                         output_tokens: int) -> dict[str, float]:
    """Cost of one prompt served inside a full uniform batch.

    Prices a batch of `batch` identical requests with the shared
    charge_batch path and reads off a single member's share.
    """
    spec = profiles.gpus.get(gpu)
    if spec is None:
        raise AnalysisError(f"unknown gpu id {gpu!r}")
    instance = GpuInstance(instance_id=f"{gpu}@{region.region_code}", spec=spec,
                           region=region, model=profiles.models[model],
                           max_batch=batch)
    descriptor = BatchDescriptor((prompt_tokens,) * batch, (output_tokens,) * batch)
    charge = charge_batch(instance, descriptor, 0.0, profiles)
    carbon = charge.request_carbon(0)
    return {
        "latency_s": charge.prefill_time + charge.request_decode_times[0],
        "energy_j": charge.request_energy(0),
        "operational_g": carbon.operational,
        "embodied_g": carbon.embodied,
        "total_g": carbon.total,
    }


def region_compare(profiles: ProfileSet, gpus: list[str], model: str,
                   batches: list[int], regions: list[RegionCI],
                   prompt_tokens: int | None = None,
                   output_tokens: int = 150) -> list[SweepResult]:
    """Per-prompt carbon across (gpu, region) pairs over a batch axis.

    The canonical prompt defaults to the profile set's bundled prompt
    length and 150 output tokens; OOM batches again show up as gaps.
    """
    if prompt_tokens is None:
        prompt_tokens = int(profiles.defaults.get("prompt_tokens", 60))
    results = []
    for gpu in gpus:
        for region in regions:
            points = []
            for batch in sorted(set(batches)):
                try:
                    metrics = per_prompt_breakdown(profiles, gpu, model, batch,
                                                   region, prompt_tokens,
                                                   output_tokens)
                except OomProfileError:
                    metrics = {"oom": 1.0}
                points.append(SweepPoint(value=float(batch), metrics=metrics))
            results.append(SweepResult(
                axis="batch_size", points=tuple(points),
                metadata={"gpu": gpu, "model": model,
                          "region": region.region_code,
                          "prompt_tokens": str(prompt_tokens),
                          "output_tokens": str(output_tokens),
                          "label": f"{gpu}@{region.region_code}"}))
    return results


def lifetime_sweep(spec: GpuSpec, power: float, regions: list[RegionCI],
                   lifetimes: list[float]) -> SweepResult:
    """Embodied fraction versus service lifetime, one metric per region."""
    if any(lt <= 0 for lt in lifetimes):
        raise AnalysisError("lifetimes must be positive")
    points = []
    for lt in sorted(set(lifetimes)):
        overridden = replace(spec, lifetime=lt)
        metrics = {}
        for region in regions:
            metrics[f"embodied_fraction:{region.region_code}"] = embodied_fraction(
                power, overridden, ci_at(region, 0.0))
        points.append(SweepPoint(value=float(lt), metrics=metrics))
    return SweepResult(axis="lifetime_years", points=tuple(points),
                       metadata={"gpu": spec.id, "power_w": repr(power),
                                 "label": spec.id})


def find_crossover(profiles: ProfileSet, gpu_a: str, gpu_b: str, model: str,
                   phase: str, region: RegionCI) -> int | None:
    """Smallest measured batch where gpu_b beats gpu_a on per-token carbon.

    Only batch sizes measured non-OOM for both GPUs are considered, and
    no interpolation is used, so the answer stays within the evidence.
    Returns None when gpu_b never wins strictly.
    """
    for gpu in (gpu_a, gpu_b):
        if gpu not in profiles.gpus:
            raise AnalysisError(f"unknown gpu id {gpu!r}")
    common = (set(profiles.measured_batches(gpu_a, model, phase))
              & set(profiles.measured_batches(gpu_b, model, phase)))
    ci = region.avg_ci

    def per_token_total(gpu: str, batch: int) -> float | None:
        try:
            prof = profiles.lookup(gpu, model, batch, phase)
        except OomProfileError:
            return None
        return (operational_carbon(prof.per_token_energy, ci)
                + embodied_rate(profiles.gpus[gpu]) / prof.throughput)

    for batch in sorted(common):
        cost_a = per_token_total(gpu_a, batch)
        cost_b = per_token_total(gpu_b, batch)
        if cost_a is None or cost_b is None:
            continue
        if cost_b < cost_a:
            return batch
    return None
