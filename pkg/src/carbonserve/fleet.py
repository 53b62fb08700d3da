"""Fleet primitives shared by the scheduler and the simulator.

charge_batch is the single place that turns a batch of requests on an
instance into times, joules, and grams.  Both the planner's cost
estimates and the simulator's per-request accounting call it, so the two
can never drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

from .carbon import (
    CarbonBreakdown,
    RegionCI,
    amortized_embodied,
    ci_at,
    operational_carbon,
)
from .profiles import GpuSpec, ModelConfig, ProfileSet


class FleetError(Exception):
    """Fleet composition or batch construction problem."""


@dataclass(frozen=True)
class GpuInstance:
    """One schedulable GPU in a region, serving one model."""

    instance_id: str
    spec: GpuSpec
    region: RegionCI
    model: ModelConfig
    max_batch: int

    def __post_init__(self):
        if self.max_batch < 1:
            raise FleetError(f"instance {self.instance_id!r}: max_batch must be >= 1")


@dataclass(frozen=True)
class BatchDescriptor:
    """Token counts for the requests grouped into one batch."""

    prompt_tokens: tuple[int, ...]
    output_tokens: tuple[int, ...]

    def __post_init__(self):
        if not self.prompt_tokens:
            raise FleetError("a batch needs at least one request")
        if len(self.prompt_tokens) != len(self.output_tokens):
            raise FleetError("prompt and output token lists must align")
        if any(t < 1 for t in self.prompt_tokens + self.output_tokens):
            raise FleetError("token counts must be >= 1")

    @property
    def size(self) -> int:
        return len(self.prompt_tokens)

    @classmethod
    def single(cls, prompt_tokens: int, output_tokens: int) -> "BatchDescriptor":
        return cls((prompt_tokens,), (output_tokens,))


@dataclass(frozen=True)
class BatchCharge:
    """Everything an executed batch costs, batch-wide and per request.

    The batch runs padded to its slowest member: prefill processes
    size * max(prompt) token slots at the batch's aggregate prefill
    throughput, and each decode round advances all requests together, so
    a request's decode time is its own output length times size /
    throughput.  Per-request energy counts only the request's own
    tokens; per-request embodied carbon covers the request's occupancy
    (full prefill plus its own decode).
    """

    start_time: float
    batch_size: int
    prefill_time: float
    decode_time: float
    prefill_power: float
    decode_power: float
    request_decode_times: tuple[float, ...]
    request_prefill_energies: tuple[float, ...]
    request_decode_energies: tuple[float, ...]
    request_prefill_carbon: tuple[CarbonBreakdown, ...]
    request_decode_carbon: tuple[CarbonBreakdown, ...]

    @property
    def duration(self) -> float:
        """Batch occupancy: prefill plus the slowest decode."""
        return self.prefill_time + self.decode_time

    def request_energy(self, i: int) -> float:
        return self.request_prefill_energies[i] + self.request_decode_energies[i]

    def request_carbon(self, i: int) -> CarbonBreakdown:
        return self.request_prefill_carbon[i] + self.request_decode_carbon[i]

    @property
    def total_energy(self) -> float:
        return sum(self.request_prefill_energies) + sum(self.request_decode_energies)

    @property
    def total_carbon(self) -> CarbonBreakdown:
        total = CarbonBreakdown.of(0.0, 0.0)
        for i in range(self.batch_size):
            total = total + self.request_carbon(i)
        return total


def charge_batch(instance: GpuInstance, batch: BatchDescriptor, start_time: float,
                 profiles: ProfileSet, frozen_ci: float | None = None) -> BatchCharge:
    """Price a batch starting at `start_time` on `instance`.

    Operational carbon samples the region's intensity at each phase's
    midpoint (per request for decode, since requests finish at different
    times); passing frozen_ci pins the intensity instead, which is what
    the carbon-greedy policy does with the intensity at decision time.
    """
    size = batch.size
    gpu_id = instance.spec.id
    model_id = instance.model.id
    prefill = profiles.lookup(gpu_id, model_id, size, "prefill")
    decode = profiles.lookup(gpu_id, model_id, size, "decode")

    prefill_time = size * max(batch.prompt_tokens) / prefill.throughput
    decode_start = start_time + prefill_time
    prefill_ci = (frozen_ci if frozen_ci is not None
                  else ci_at(instance.region, start_time + prefill_time / 2.0))

    decode_times = []
    prefill_energies = []
    decode_energies = []
    prefill_carbon = []
    decode_carbon = []
    for i in range(size):
        dt = batch.output_tokens[i] * size / decode.throughput
        e_p = batch.prompt_tokens[i] * prefill.per_token_energy
        e_d = batch.output_tokens[i] * decode.per_token_energy
        decode_ci = (frozen_ci if frozen_ci is not None
                     else ci_at(instance.region, decode_start + dt / 2.0))
        decode_times.append(dt)
        prefill_energies.append(e_p)
        decode_energies.append(e_d)
        prefill_carbon.append(CarbonBreakdown.of(
            operational_carbon(e_p, prefill_ci),
            amortized_embodied(instance.spec, prefill_time)))
        decode_carbon.append(CarbonBreakdown.of(
            operational_carbon(e_d, decode_ci),
            amortized_embodied(instance.spec, dt)))

    return BatchCharge(
        start_time=start_time,
        batch_size=size,
        prefill_time=prefill_time,
        decode_time=max(decode_times),
        prefill_power=prefill.avg_power,
        decode_power=decode.avg_power,
        request_decode_times=tuple(decode_times),
        request_prefill_energies=tuple(prefill_energies),
        request_decode_energies=tuple(decode_energies),
        request_prefill_carbon=tuple(prefill_carbon),
        request_decode_carbon=tuple(decode_carbon),
    )


def service_time(instance: GpuInstance, batch: BatchDescriptor,
                 profiles: ProfileSet) -> float:
    """Occupancy (prefill plus slowest decode) without carbon pricing."""
    size = batch.size
    prefill = profiles.lookup(instance.spec.id, instance.model.id, size, "prefill")
    decode = profiles.lookup(instance.spec.id, instance.model.id, size, "decode")
    return (size * max(batch.prompt_tokens) / prefill.throughput
            + size * max(batch.output_tokens) / decode.throughput)


def validate_instance(instance: GpuInstance, profiles: ProfileSet) -> None:
    """Check every batch size up to max_batch resolves without OOM.

    Raises the underlying OOM or range error annotated with the instance
    id, so fleet problems surface before any event is simulated.
    """
    for batch in range(1, instance.max_batch + 1):
        for phase in ("prefill", "decode"):
            try:
                profiles.lookup(instance.spec.id, instance.model.id, batch, phase)
            except Exception as e:
                e.args = (f"instance {instance.instance_id!r}: {e}",)
                raise
