"""Deterministic discrete-event simulation of LLM serving on a GPU fleet.

Requests are routed to an instance by the scheduling policy the moment
they arrive.  Each instance batches its own queue: a batch launches once
the queue reaches max_batch or batch_wait has elapsed since the first
queued arrival, runs prefill for the whole batch padded to its longest
prompt, then decodes round-by-round until every member has produced its
output tokens.  Timing, energy, and carbon all come from charge_batch,
the same pricing the planner uses.

There is no randomness inside the engine itself; all stochasticity lives
in workload generation, so identical inputs reproduce reports byte for
byte.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
import random
import statistics
from dataclasses import dataclass

from .carbon import CarbonBreakdown, ci_at, operational_carbon
from .fleet import BatchDescriptor, GpuInstance, charge_batch, validate_instance
from .profiles import ProfileSet
from .sched import QueueState, SchedulingPolicy, SloInfeasibleError, choose

WORKLOAD_MODES = ("trace", "poisson", "closed_loop")

REPORT_SCHEMA_VERSION = 1


class SimError(Exception):
    """Simulation setup or execution failure."""


@dataclass(frozen=True)
class Request:
    """One inference request: when it arrives and how many tokens."""

    id: int
    arrival_time: float
    prompt_tokens: int
    output_tokens: int = 150

    def __post_init__(self):
        if self.arrival_time < 0:
            raise SimError(f"request {self.id}: arrival_time must be >= 0")
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise SimError(f"request {self.id}: token counts must be >= 1")


@dataclass(frozen=True)
class WorkloadSpec:
    """How to produce a request stream.

    prompt_tokens and output_tokens are either a fixed integer or an
    empirical list sampled uniformly.  closed_loop keeps `concurrency`
    requests in flight: the generator emits the initial wave at t=0 and
    the simulator re-injects a fresh request whenever one completes,
    until `duration` elapses.
    """

    mode: str
    rate: float | None = None
    concurrency: int | None = None
    duration: float = 0.0
    prompt_tokens: int | tuple[int, ...] = 60
    output_tokens: int | tuple[int, ...] = 150
    seed: int = 0
    trace: tuple[Request, ...] | None = None

    def __post_init__(self):
        if self.mode not in WORKLOAD_MODES:
            raise SimError(f"unknown workload mode {self.mode!r} (one of {WORKLOAD_MODES})")
        if self.mode == "poisson" and (self.rate is None or self.rate <= 0):
            raise SimError("poisson workload needs rate > 0")
        if self.mode == "closed_loop" and (self.concurrency is None or self.concurrency < 1):
            raise SimError("closed_loop workload needs concurrency >= 1")
        if self.mode == "trace" and self.trace is None:
            raise SimError("trace workload needs a trace")
        for dist in (self.prompt_tokens, self.output_tokens):
            if isinstance(dist, tuple) and not dist:
                raise SimError("empirical token list must be non-empty")


def _sample_tokens(rng: random.Random, dist) -> int:
    if isinstance(dist, int):
        return dist
    return dist[rng.randrange(len(dist))]


def generate_workload(spec: WorkloadSpec) -> list[Request]:
    """Materialize the request list; identical seeds give identical lists."""
    if spec.mode == "trace":
        return list(spec.trace)
    rng = random.Random(spec.seed)
    requests: list[Request] = []
    if spec.mode == "poisson":
        t = 0.0
        while True:
            t += rng.expovariate(spec.rate)
            if t > spec.duration:
                break
            requests.append(Request(
                id=len(requests), arrival_time=t,
                prompt_tokens=_sample_tokens(rng, spec.prompt_tokens),
                output_tokens=_sample_tokens(rng, spec.output_tokens)))
        return requests
    # closed_loop initial wave; the simulator sustains the level afterwards
    if spec.duration <= 0:
        return []
    for i in range(spec.concurrency):
        requests.append(Request(
            id=i, arrival_time=0.0,
            prompt_tokens=_sample_tokens(rng, spec.prompt_tokens),
            output_tokens=_sample_tokens(rng, spec.output_tokens)))
    return requests


def read_trace(path) -> list[Request]:
    """Read requests from an `arrival_time,prompt_tokens,output_tokens` CSV."""
    requests = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise SimError(f"{path}: empty trace")
        for col in ("arrival_time", "prompt_tokens", "output_tokens"):
            if col not in reader.fieldnames:
                raise SimError(f"{path}: missing trace column {col!r}")
        for row in reader:
            requests.append(Request(
                id=len(requests),
                arrival_time=float(row["arrival_time"]),
                prompt_tokens=int(row["prompt_tokens"]),
                output_tokens=int(row["output_tokens"])))
    requests.sort(key=lambda r: (r.arrival_time, r.id))
    return requests


@dataclass(frozen=True)
class RequestOutcome:
    """Per-request accounting; latency always decomposes exactly."""

    request_id: int
    instance_id: str
    arrival_time: float
    batch_size: int
    prompt_tokens: int
    output_tokens: int
    queue_delay: float
    prefill_time: float
    decode_time: float
    end_to_end_latency: float
    prefill_energy: float
    decode_energy: float
    energy: float
    prefill_carbon: CarbonBreakdown
    decode_carbon: CarbonBreakdown
    carbon: CarbonBreakdown


@dataclass(frozen=True)
class SimReport:
    """Outcomes plus fleet-level aggregates for one simulation run.

    Totals are sums over outcomes; idle fields are tracked separately
    (nonzero only when the idle-power mode is enabled) so per-request
    accounting stays additive.  intervals maps instance id to the busy
    (start, end, phase, avg_power) spans it executed.
    """

    outcomes: tuple[RequestOutcome, ...]
    dropped: tuple[int, ...]
    mean_latency: float
    median_latency: float
    p99_latency: float
    total_energy: float
    total_carbon: CarbonBreakdown
    per_token_carbon: float
    throughput: float
    horizon: float
    utilization: dict[str, float]
    instance_busy: dict[str, float]
    instance_batches: dict[str, int]
    intervals: dict[str, tuple[tuple[float, float, str, float], ...]]
    idle_energy: float = 0.0
    idle_carbon: CarbonBreakdown = CarbonBreakdown(0.0, 0.0, 0.0)

    def to_json(self) -> str:
        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "aggregates": {
                "completed": len(self.outcomes),
                "dropped": len(self.dropped),
                "mean_latency_s": self.mean_latency,
                "median_latency_s": self.median_latency,
                "p99_latency_s": self.p99_latency,
                "total_energy_j": self.total_energy,
                "operational_g": self.total_carbon.operational,
                "embodied_g": self.total_carbon.embodied,
                "total_g": self.total_carbon.total,
                "per_token_carbon_g": self.per_token_carbon,
                "throughput_tok_per_s": self.throughput,
                "horizon_s": self.horizon,
                "idle_energy_j": self.idle_energy,
                "idle_operational_g": self.idle_carbon.operational,
            },
            "instances": [
                {"instance_id": iid,
                 "busy_s": self.instance_busy[iid],
                 "utilization": self.utilization[iid],
                 "batches": self.instance_batches[iid]}
                for iid in sorted(self.utilization)
            ],
            "dropped_request_ids": list(self.dropped),
            "outcomes": [_outcome_to_dict(o) for o in self.outcomes],
        }
        return json.dumps(doc, indent=2)

    def to_csv(self) -> str:
        lines = [",".join(_OUTCOME_COLUMNS)]
        for o in self.outcomes:
            d = _outcome_to_dict(o)
            lines.append(",".join(repr(d[c]) if isinstance(d[c], float) else str(d[c])
                                  for c in _OUTCOME_COLUMNS))
        return "\n".join(lines) + "\n"


_OUTCOME_COLUMNS = (
    "request_id", "instance_id", "arrival_time_s", "batch_size",
    "prompt_tokens", "output_tokens", "queue_delay_s", "prefill_time_s",
    "decode_time_s", "end_to_end_latency_s", "prefill_energy_j",
    "decode_energy_j", "energy_j", "prefill_operational_g",
    "prefill_embodied_g", "decode_operational_g", "decode_embodied_g",
    "operational_g", "embodied_g", "total_g",
)


def _outcome_to_dict(o: RequestOutcome) -> dict:
    return {
        "request_id": o.request_id,
        "instance_id": o.instance_id,
        "arrival_time_s": o.arrival_time,
        "batch_size": o.batch_size,
        "prompt_tokens": o.prompt_tokens,
        "output_tokens": o.output_tokens,
        "queue_delay_s": o.queue_delay,
        "prefill_time_s": o.prefill_time,
        "decode_time_s": o.decode_time,
        "end_to_end_latency_s": o.end_to_end_latency,
        "prefill_energy_j": o.prefill_energy,
        "decode_energy_j": o.decode_energy,
        "energy_j": o.energy,
        "prefill_operational_g": o.prefill_carbon.operational,
        "prefill_embodied_g": o.prefill_carbon.embodied,
        "decode_operational_g": o.decode_carbon.operational,
        "decode_embodied_g": o.decode_carbon.embodied,
        "operational_g": o.carbon.operational,
        "embodied_g": o.carbon.embodied,
        "total_g": o.carbon.total,
    }


class _InstanceState:
    __slots__ = ("queue", "busy_until", "running", "timer_at", "intervals", "batches")

    def __init__(self):
        self.queue: list[Request] = []
        self.busy_until = 0.0
        self.running = False
        self.timer_at: float | None = None
        self.intervals: list[tuple[float, float, str, float]] = []
        self.batches = 0


def simulate(fleet: list[GpuInstance], workload: list[Request],
             policy: SchedulingPolicy, profiles: ProfileSet, batch_wait: float,
             workload_spec: WorkloadSpec | None = None,
             idle_power_fraction: float = 0.0) -> SimReport:
    """Run the fleet over the workload and account every joule and gram.

    workload_spec only matters for closed_loop mode, where completions
    re-inject fresh requests (token lengths drawn from a dedicated RNG
    seeded with spec.seed + 1) until `duration` elapses.  SLO-infeasible
    requests are dropped and reported, not errors.
    """
    if not fleet:
        raise SimError("fleet must contain at least one instance")
    if batch_wait < 0:
        raise SimError("batch_wait must be >= 0")
    if not 0.0 <= idle_power_fraction <= 1.0:
        raise SimError("idle_power_fraction must lie in [0, 1]")
    ids = [inst.instance_id for inst in fleet]
    if len(set(ids)) != len(ids):
        raise SimError("duplicate instance ids in fleet")
    for inst in fleet:
        validate_instance(inst, profiles)

    instances = {inst.instance_id: inst for inst in fleet}
    state = {inst.instance_id: _InstanceState() for inst in fleet}
    outcomes: list[RequestOutcome] = []
    dropped: list[int] = []

    closed_loop = workload_spec is not None and workload_spec.mode == "closed_loop"
    inject_rng = random.Random(workload_spec.seed + 1) if closed_loop else None
    next_id = max((r.id for r in workload), default=-1) + 1

    # Event heap: (time, seq, kind, payload).  seq keeps same-time events
    # in insertion order so the run is reproducible.
    events: list[tuple[float, int, str, object]] = []
    seq = 0

    def push(time: float, kind: str, payload) -> None:
        nonlocal seq
        heapq.heappush(events, (time, seq, kind, payload))
        seq += 1

    for req in sorted(workload, key=lambda r: (r.arrival_time, r.id)):
        push(req.arrival_time, "arrival", req)

    def snapshot() -> list[tuple[GpuInstance, QueueState]]:
        return [(inst,
                 QueueState(busy_until=state[inst.instance_id].busy_until,
                            queued=tuple((r.prompt_tokens, r.output_tokens)
                                         for r in state[inst.instance_id].queue)))
                for inst in fleet]

    def start_batch(inst: GpuInstance, now: float) -> None:
        st = state[inst.instance_id]
        taken = st.queue[:inst.max_batch]
        del st.queue[:inst.max_batch]
        batch = BatchDescriptor(tuple(r.prompt_tokens for r in taken),
                                tuple(r.output_tokens for r in taken))
        charge = charge_batch(inst, batch, now, profiles)
        for i, req in enumerate(taken):
            queue_delay = now - req.arrival_time
            outcomes.append(RequestOutcome(
                request_id=req.id,
                instance_id=inst.instance_id,
                arrival_time=req.arrival_time,
                batch_size=batch.size,
                prompt_tokens=req.prompt_tokens,
                output_tokens=req.output_tokens,
                queue_delay=queue_delay,
                prefill_time=charge.prefill_time,
                decode_time=charge.request_decode_times[i],
                end_to_end_latency=(queue_delay + charge.prefill_time
                                    + charge.request_decode_times[i]),
                prefill_energy=charge.request_prefill_energies[i],
                decode_energy=charge.request_decode_energies[i],
                energy=charge.request_energy(i),
                prefill_carbon=charge.request_prefill_carbon[i],
                decode_carbon=charge.request_decode_carbon[i],
                carbon=charge.request_carbon(i),
            ))
            if closed_loop:
                push(now + charge.prefill_time + charge.request_decode_times[i],
                     "request_done", None)
        decode_end = now + charge.duration
        prefill_end = now + charge.prefill_time
        st.intervals.append((now, prefill_end, "prefill", charge.prefill_power))
        st.intervals.append((prefill_end, decode_end, "decode", charge.decode_power))
        st.batches += 1
        st.busy_until = decode_end
        st.running = True
        st.timer_at = None
        push(decode_end, "batch_done", inst.instance_id)

    def consider_start(inst_id: str, now: float) -> None:
        inst = instances[inst_id]
        st = state[inst_id]
        if st.running or not st.queue:
            return
        deadline = st.queue[0].arrival_time + batch_wait
        if len(st.queue) >= inst.max_batch or now >= deadline:
            start_batch(inst, now)
        elif st.timer_at != deadline:
            st.timer_at = deadline
            push(deadline, "wait_over", inst_id)

    def admit(req: Request, now: float) -> None:
        batch = BatchDescriptor.single(req.prompt_tokens, req.output_tokens)
        try:
            chosen = choose(policy, snapshot(), batch, now, profiles)
        except SloInfeasibleError:
            dropped.append(req.id)
            return
        state[chosen].queue.append(req)
        consider_start(chosen, now)

    while events:
        now, _, kind, payload = heapq.heappop(events)
        if kind == "arrival":
            admit(payload, now)
        elif kind == "wait_over":
            consider_start(payload, now)
        elif kind == "batch_done":
            state[payload].running = False
            consider_start(payload, now)
        else:  # request_done: closed-loop re-injection point
            if closed_loop and now <= workload_spec.duration:
                req = Request(
                    id=next_id, arrival_time=now,
                    prompt_tokens=_sample_tokens(inject_rng, workload_spec.prompt_tokens),
                    output_tokens=_sample_tokens(inject_rng, workload_spec.output_tokens))
                next_id += 1
                push(now, "arrival", req)

    outcomes.sort(key=lambda o: o.request_id)
    dropped.sort()
    return _build_report(fleet, instances, state, outcomes, dropped, idle_power_fraction)


def _nearest_rank_p99(sorted_latencies: list[float]) -> float:
    idx = math.ceil(0.99 * len(sorted_latencies)) - 1
    return sorted_latencies[max(0, idx)]


def _build_report(fleet, instances, state, outcomes, dropped,
                  idle_power_fraction: float) -> SimReport:
    horizon = max((st.intervals[-1][1] for st in state.values() if st.intervals),
                  default=0.0)
    busy = {iid: math.fsum(end - start for start, end, _, _ in st.intervals)
            for iid, st in state.items()}
    utilization = {iid: (busy[iid] / horizon if horizon > 0 else 0.0)
                   for iid in busy}
    batches = {iid: st.batches for iid, st in state.items()}
    intervals = {iid: tuple(st.intervals) for iid, st in state.items()}

    latencies = sorted(o.end_to_end_latency for o in outcomes)
    total_energy = sum(o.energy for o in outcomes)
    total_carbon = CarbonBreakdown.of(0.0, 0.0)
    for o in outcomes:
        total_carbon = total_carbon + o.carbon
    total_tokens = sum(o.prompt_tokens + o.output_tokens for o in outcomes)

    idle_energy = 0.0
    idle_op = 0.0
    if idle_power_fraction > 0.0 and horizon > 0.0:
        for inst in fleet:
            power = idle_power_fraction * inst.spec.tdp
            cursor = 0.0
            gaps = []
            for start, end, _, _ in state[inst.instance_id].intervals:
                if start > cursor:
                    gaps.append((cursor, start))
                cursor = max(cursor, end)
            if cursor < horizon:
                gaps.append((cursor, horizon))
            for start, end in gaps:
                energy = power * (end - start)
                idle_energy += energy
                idle_op += operational_carbon(
                    energy, ci_at(inst.region, (start + end) / 2.0))

    return SimReport(
        outcomes=tuple(outcomes),
        dropped=tuple(dropped),
        mean_latency=statistics.fmean(latencies) if latencies else 0.0,
        median_latency=statistics.median(latencies) if latencies else 0.0,
        p99_latency=_nearest_rank_p99(latencies) if latencies else 0.0,
        total_energy=total_energy,
        total_carbon=total_carbon,
        per_token_carbon=(total_carbon.total / total_tokens if total_tokens else 0.0),
        throughput=(total_tokens / horizon if horizon > 0 else 0.0),
        horizon=horizon,
        utilization=utilization,
        instance_busy=busy,
        instance_batches=batches,
        intervals=intervals,
        idle_energy=idle_energy,
        idle_carbon=CarbonBreakdown.of(idle_op, 0.0),
    )


@dataclass(frozen=True)
class PerTokenReport:
    """Phase-restricted per-token rates for a finished report."""

    throughput: float
    energy_per_token: float
    carbon_per_token: float


def per_token_report(report: SimReport, phase: str) -> PerTokenReport:
    """Phase totals divided by phase token counts.

    Throughput is phase tokens over the wall time the fleet spent in
    that phase; energy and carbon are per token served.
    """
    if phase not in ("prefill", "decode"):
        raise ValueError("phase must be 'prefill' or 'decode'")
    if not report.outcomes:
        raise SimError("per-token report needs at least one outcome")
    if phase == "prefill":
        tokens = sum(o.prompt_tokens for o in report.outcomes)
        energy = sum(o.prefill_energy for o in report.outcomes)
        carbon = sum(o.prefill_carbon.total for o in report.outcomes)
    else:
        tokens = sum(o.output_tokens for o in report.outcomes)
        energy = sum(o.decode_energy for o in report.outcomes)
        carbon = sum(o.decode_carbon.total for o in report.outcomes)
    wall = math.fsum(end - start
                     for spans in report.intervals.values()
                     for start, end, p, _ in spans if p == phase)
    throughput = tokens / wall if wall > 0 else 0.0
    return PerTokenReport(throughput=throughput,
                          energy_per_token=energy / tokens,
                          carbon_per_token=carbon / tokens)
