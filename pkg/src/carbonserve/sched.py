"""Placement policies that assign batches to fleet instances.

Each policy is a deterministic decision function over a snapshot of the
fleet: the candidate instances with their queue states.  Cost-driven
policies price the batch with the same charge_batch code path the
simulator uses, so planning estimates and simulated charges agree to
within float noise.  The carbon-directed policies steer work toward
low-intensity regions and, below a configurable intensity threshold,
toward older GPUs whose higher energy draw is outweighed by cheap grid
power and an already-sunk manufacturing footprint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .carbon import CarbonBreakdown, ci_at
from .fleet import BatchDescriptor, GpuInstance, charge_batch, service_time
from .profiles import ProfileSet

POLICY_KINDS = ("fixed", "round_robin", "latency_greedy", "energy_greedy",
                "carbon_greedy", "ci_threshold")

# Midpoint between a low-CI hydro grid and a mid-CI mixed grid; a tunable
# with no authoritative value.
DEFAULT_CI_THRESHOLD = 100.0


class SchedulingError(Exception):
    """Policy configuration or selection failure."""


class SloInfeasibleError(SchedulingError):
    """No candidate can meet the configured latency objective."""

    def __init__(self, latency_slo: float, best: float | None = None):
        self.latency_slo = latency_slo
        self.best = best
        detail = f"; best achievable {best:.4g} s" if best is not None else ""
        super().__init__(f"no candidate meets latency SLO {latency_slo} s{detail}")


@dataclass(frozen=True)
class QueueState:
    """What a policy may know about one instance's backlog.

    busy_until is when the running batch frees the GPU (at or before
    `now` when idle); queued holds (prompt_tokens, output_tokens) pairs
    for requests waiting to be batched, in arrival order.
    """

    busy_until: float = 0.0
    queued: tuple[tuple[int, int], ...] = ()


@dataclass
class SchedulingPolicy:
    """Policy kind plus its parameters.

    fixed routes everything to `target`; round_robin cycles; the greedy
    family minimizes estimated completion time, batch energy, or batch
    carbon; ci_threshold prefers the listed (typically older) instances
    whenever their grid intensity at decision time is at or below the
    threshold, falling back to carbon_greedy otherwise.  latency_slo,
    when set, excludes candidates whose estimated latency exceeds it
    before any ranking.
    """

    kind: str
    target: str | None = None
    ci_threshold: float = DEFAULT_CI_THRESHOLD
    preferred: tuple[str, ...] = ()
    latency_slo: float | None = None
    _rr_cursor: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise SchedulingError(f"unknown policy kind {self.kind!r} (one of {POLICY_KINDS})")
        if self.kind == "fixed" and not self.target:
            raise SchedulingError("fixed policy needs a target instance id")
        if self.kind == "ci_threshold":
            if self.ci_threshold <= 0:
                raise SchedulingError("ci_threshold must be > 0")
            if not self.preferred:
                raise SchedulingError("ci_threshold policy needs a non-empty preference list")
        if self.latency_slo is not None and self.latency_slo <= 0:
            raise SchedulingError("latency_slo must be > 0 when set")


def estimate_completion(instance: GpuInstance, queue: QueueState,
                        batch: BatchDescriptor, now: float,
                        profiles: ProfileSet) -> float:
    """When the new batch would finish if sent to this instance.

    Drains the running batch, then the queued requests in max_batch
    chunks, then serves the new batch; future arrivals and batch-wait
    timers are ignored (myopic estimate).
    """
    t = max(now, queue.busy_until)
    pending = list(queue.queued)
    while pending:
        chunk, pending = pending[:instance.max_batch], pending[instance.max_batch:]
        chunk_batch = BatchDescriptor(tuple(p for p, _ in chunk),
                                      tuple(o for _, o in chunk))
        t += service_time(instance, chunk_batch, profiles)
    return t + service_time(instance, batch, profiles)


def estimate_batch_cost(instance: GpuInstance, batch: BatchDescriptor, now: float,
                        profiles: ProfileSet) -> tuple[float, float, CarbonBreakdown]:
    """(latency s, energy J, carbon) for the batch served in isolation.

    Shares charge_batch with the simulator, so this equals exactly what
    simulate charges when the same batch runs alone starting at `now`.
    """
    charge = charge_batch(instance, batch, now, profiles)
    return charge.duration, charge.total_energy, charge.total_carbon


def _frozen_carbon_total(instance: GpuInstance, batch: BatchDescriptor, now: float,
                         profiles: ProfileSet) -> float:
    charge = charge_batch(instance, batch, now, profiles,
                          frozen_ci=ci_at(instance.region, now))
    return charge.total_carbon.total


def _frozen_energy(instance: GpuInstance, batch: BatchDescriptor,
                   profiles: ProfileSet) -> float:
    charge = charge_batch(instance, batch, 0.0, profiles, frozen_ci=1.0)
    return charge.total_energy


def choose(policy: SchedulingPolicy, candidates, batch: BatchDescriptor,
           now: float, profiles: ProfileSet) -> str:
    """Pick the instance id that should serve `batch`.

    candidates is a list of (GpuInstance, QueueState) pairs, pre-filtered
    for OOM feasibility.  Ties break toward the lowest instance id.
    Raises SloInfeasibleError when a latency SLO excludes everyone.
    """
    if not candidates:
        raise SchedulingError("no candidate instances")

    feasible = list(candidates)
    if policy.latency_slo is not None:
        latencies = {inst.instance_id: estimate_completion(inst, q, batch, now, profiles) - now
                     for inst, q in candidates}
        feasible = [(inst, q) for inst, q in candidates
                    if latencies[inst.instance_id] <= policy.latency_slo]
        if not feasible:
            raise SloInfeasibleError(policy.latency_slo, best=min(latencies.values()))

    if policy.kind == "fixed":
        for inst, _ in feasible:
            if inst.instance_id == policy.target:
                return inst.instance_id
        if any(inst.instance_id == policy.target for inst, _ in candidates):
            raise SloInfeasibleError(policy.latency_slo)
        raise SchedulingError(f"fixed target {policy.target!r} not among candidates")

    if policy.kind == "round_robin":
        ordered = sorted(feasible, key=lambda c: c[0].instance_id)
        pick = ordered[policy._rr_cursor % len(ordered)][0].instance_id
        policy._rr_cursor += 1
        return pick

    if policy.kind == "latency_greedy":
        return min(feasible,
                   key=lambda c: (estimate_completion(c[0], c[1], batch, now, profiles),
                                  c[0].instance_id))[0].instance_id

    if policy.kind == "energy_greedy":
        return min(feasible,
                   key=lambda c: (_frozen_energy(c[0], batch, profiles),
                                  c[0].instance_id))[0].instance_id

    if policy.kind == "carbon_greedy":
        return min(feasible,
                   key=lambda c: (_frozen_carbon_total(c[0], batch, now, profiles),
                                  c[0].instance_id))[0].instance_id

    # ci_threshold: first preferred instance whose grid is clean enough
    # right now; otherwise behave like carbon_greedy.
    by_id = {inst.instance_id: inst for inst, _ in feasible}
    for preferred_id in policy.preferred:
        inst = by_id.get(preferred_id)
        if inst is not None and ci_at(inst.region, now) <= policy.ci_threshold:
            return preferred_id
    return min(feasible,
               key=lambda c: (_frozen_carbon_total(c[0], batch, now, profiles),
                              c[0].instance_id))[0].instance_id


def policy_from_config(config: dict) -> SchedulingPolicy:
    """Build a SchedulingPolicy from a scenario's policy section."""
    if "kind" not in config:
        raise SchedulingError("policy config needs a 'kind' field")
    return SchedulingPolicy(
        kind=config["kind"],
        target=config.get("target"),
        ci_threshold=float(config.get("ci_threshold", DEFAULT_CI_THRESHOLD)),
        preferred=tuple(config.get("preferred", ())),
        latency_slo=(float(config["latency_slo"])
                     if config.get("latency_slo") is not None else None),
    )
