"""Discrete-event engine: workload generation, batching, accounting, reports."""

import json
import math

import pytest

from carbonserve.carbon import RegionCI, embodied_rate, operational_carbon
from carbonserve.fleet import GpuInstance
from carbonserve.profiles import GpuSpec, ModelConfig, PhaseProfile, ProfileSet
from carbonserve.sched import SchedulingPolicy
from carbonserve.sim import (
    PerTokenReport,
    Request,
    SimError,
    WorkloadSpec,
    generate_workload,
    per_token_report,
    read_trace,
    simulate,
)

# A tiny fully hand-computable operating envelope.  At batch 1 prefill
# moves 1000 tok/s at 0.06 J/tok and decode 20 tok/s at 1.5 J/tok, so a
# 100-prompt/150-output request takes 0.1 + 7.5 = 7.6 s and 231 J.
SPEC = GpuSpec(id="g", architecture="synthetic", chip_area=545.0, tech_node=12,
               memory_capacity=16.0, tdp=70.0, release_year=2018,
               embodied_carbon=10300.0, lifetime=5.0)
MODEL = ModelConfig(id="m", param_count=1_000_000_000)
QC = RegionCI(region_code="qc", avg_ci=31.0)
TRICKLE = RegionCI(region_code="trickle", avg_ci=1e-12)

_POINTS = {
    ("prefill", 1): (1000.0, 0.06),
    ("prefill", 2): (1600.0, 0.05),
    ("decode", 1): (20.0, 1.5),
    ("decode", 2): (32.0, 1.2),
}


def make_profiles() -> ProfileSet:
    entries = [PhaseProfile(gpu_id="g", model_id="m", batch_size=b, phase=ph,
                            throughput=thr, per_token_energy=e, avg_power=thr * e)
               for (ph, b), (thr, e) in _POINTS.items()]
    return ProfileSet.from_parts([SPEC], [MODEL], entries, name="synthetic")


def make_instance(region=QC, max_batch=1, instance_id="g-0") -> GpuInstance:
    return GpuInstance(instance_id=instance_id, spec=SPEC, region=region,
                       model=MODEL, max_batch=max_batch)


FIXED = SchedulingPolicy(kind="fixed", target="g-0")


def run_one(requests, *, max_batch=1, batch_wait=0.0, region=QC, **kw):
    return simulate([make_instance(region=region, max_batch=max_batch)],
                    requests, FIXED, make_profiles(), batch_wait, **kw)


class TestSingleRequestOracle:
    def test_latency_energy_carbon(self):
        report = run_one([Request(id=0, arrival_time=0.0,
                                  prompt_tokens=100, output_tokens=150)])
        (o,) = report.outcomes
        assert o.queue_delay == 0.0
        assert o.prefill_time == pytest.approx(0.1, rel=1e-12)
        assert o.decode_time == pytest.approx(7.5, rel=1e-12)
        assert o.end_to_end_latency == pytest.approx(7.6, rel=1e-12)
        assert o.energy == pytest.approx(231.0, rel=1e-12)
        assert o.carbon.operational == pytest.approx(1.9892e-3, rel=1e-4)
        assert o.carbon.embodied == pytest.approx(4.9611e-4, rel=1e-4)
        assert report.total_carbon.total == pytest.approx(2.4853e-3, rel=1e-4)

    def test_aggregates_are_sums_over_outcomes(self):
        report = run_one([
            Request(id=0, arrival_time=0.0, prompt_tokens=100, output_tokens=150),
            Request(id=1, arrival_time=30.0, prompt_tokens=50, output_tokens=10),
        ])
        assert report.total_energy == sum(o.energy for o in report.outcomes)
        assert report.total_carbon.total \
            == pytest.approx(sum(o.carbon.total for o in report.outcomes), rel=1e-12)
        assert report.mean_latency == pytest.approx(
            sum(o.end_to_end_latency for o in report.outcomes) / 2, rel=1e-12)

    def test_latency_decomposition_exact(self):
        report = run_one([
            Request(id=0, arrival_time=0.0, prompt_tokens=100, output_tokens=150),
            Request(id=1, arrival_time=0.2, prompt_tokens=40, output_tokens=60),
        ])
        for o in report.outcomes:
            assert o.end_to_end_latency \
                == o.queue_delay + o.prefill_time + o.decode_time

    def test_second_request_queues_behind_first(self):
        report = run_one([
            Request(id=0, arrival_time=0.0, prompt_tokens=100, output_tokens=150),
            Request(id=1, arrival_time=1.0, prompt_tokens=100, output_tokens=150),
        ])
        first, second = report.outcomes
        assert first.queue_delay == 0.0
        # service of request 0 ends at 7.6; request 1 arrived at 1.0
        assert second.queue_delay == pytest.approx(6.6, rel=1e-12)

    def test_near_zero_ci_leaves_embodied_only(self):
        report = run_one([Request(id=0, arrival_time=0.0,
                                  prompt_tokens=100, output_tokens=150)],
                         region=TRICKLE)
        (o,) = report.outcomes
        assert o.carbon.operational < 1e-13
        assert o.carbon.embodied == pytest.approx(
            embodied_rate(SPEC) * 7.6, rel=1e-12)


class TestEmptyWorkload:
    def test_zero_report(self):
        report = run_one([])
        assert report.outcomes == ()
        assert report.dropped == ()
        assert report.total_energy == 0.0
        assert report.total_carbon.total == 0.0
        assert report.mean_latency == 0.0
        assert report.horizon == 0.0
        assert report.throughput == 0.0
        assert report.utilization == {"g-0": 0.0}


class TestBatching:
    def test_simultaneous_pair_forms_one_batch(self):
        report = run_one([
            Request(id=0, arrival_time=0.0, prompt_tokens=100, output_tokens=150),
            Request(id=1, arrival_time=0.0, prompt_tokens=100, output_tokens=150),
        ], max_batch=2, batch_wait=0.5)
        assert report.instance_batches == {"g-0": 1}
        for o in report.outcomes:
            assert o.batch_size == 2
            assert o.queue_delay == 0.0
            # batch-2 entries apply: 2*100/1600 prefill, 150*2/32 decode
            assert o.prefill_time == pytest.approx(0.125, rel=1e-12)
            assert o.decode_time == pytest.approx(9.375, rel=1e-12)
            assert o.energy == pytest.approx(100 * 0.05 + 150 * 1.2, rel=1e-12)

    def test_batch_wait_delays_single_request(self):
        report = run_one([Request(id=0, arrival_time=0.0,
                                  prompt_tokens=100, output_tokens=150)],
                         max_batch=2, batch_wait=0.5)
        (o,) = report.outcomes
        assert o.batch_size == 1
        assert o.queue_delay == pytest.approx(0.5, rel=1e-12)

    def test_full_queue_preempts_wait_timer(self):
        report = run_one([
            Request(id=0, arrival_time=0.0, prompt_tokens=100, output_tokens=150),
            Request(id=1, arrival_time=0.1, prompt_tokens=100, output_tokens=150),
        ], max_batch=2, batch_wait=5.0)
        assert report.instance_batches == {"g-0": 1}
        assert report.outcomes[0].queue_delay == pytest.approx(0.1, rel=1e-12)
        assert report.outcomes[1].queue_delay == 0.0

    def test_energy_conservation_uniform_batch(self):
        # identical members make padded-batch time equal per-member time,
        # so token-sum energy must match integrated power exactly
        report = run_one([
            Request(id=i, arrival_time=0.0, prompt_tokens=80, output_tokens=40)
            for i in range(2)
        ], max_batch=2, batch_wait=1.0)
        integrated = math.fsum((end - start) * power
                               for start, end, _, power
                               in report.intervals["g-0"])
        assert report.total_energy == pytest.approx(integrated, rel=1e-9)

    def test_utilization_bounds_and_busy_time(self):
        report = run_one([
            Request(id=0, arrival_time=0.0, prompt_tokens=100, output_tokens=150),
            Request(id=1, arrival_time=20.0, prompt_tokens=100, output_tokens=150),
        ])
        assert 0.0 < report.utilization["g-0"] <= 1.0
        assert report.instance_busy["g-0"] == pytest.approx(15.2, rel=1e-12)
        assert report.horizon == pytest.approx(27.6, rel=1e-12)


class TestWorkloadGeneration:
    def test_poisson_rate_matches(self):
        spec = WorkloadSpec(mode="poisson", rate=10.0, duration=100.0, seed=1)
        requests = generate_workload(spec)
        gaps = [b.arrival_time - a.arrival_time
                for a, b in zip(requests, requests[1:])]
        mean_gap = sum(gaps) / len(gaps)
        assert abs(mean_gap - 0.1) / 0.1 < 0.1
        assert all(r.arrival_time <= 100.0 for r in requests)
        assert [r.id for r in requests] == list(range(len(requests)))

    def test_poisson_seed_reproducible(self):
        spec = WorkloadSpec(mode="poisson", rate=5.0, duration=50.0, seed=42)
        assert generate_workload(spec) == generate_workload(spec)
        other = WorkloadSpec(mode="poisson", rate=5.0, duration=50.0, seed=43)
        assert generate_workload(other) != generate_workload(spec)

    def test_poisson_zero_duration_empty(self):
        spec = WorkloadSpec(mode="poisson", rate=10.0, duration=0.0)
        assert generate_workload(spec) == []

    def test_trace_mode_echoes(self):
        trace = (Request(id=0, arrival_time=0.5, prompt_tokens=10, output_tokens=20),)
        spec = WorkloadSpec(mode="trace", trace=trace)
        assert generate_workload(spec) == list(trace)

    def test_closed_loop_initial_wave(self):
        spec = WorkloadSpec(mode="closed_loop", concurrency=3, duration=10.0,
                            prompt_tokens=(50, 100), output_tokens=25, seed=9)
        wave = generate_workload(spec)
        assert len(wave) == 3
        assert all(r.arrival_time == 0.0 for r in wave)
        assert all(r.prompt_tokens in (50, 100) for r in wave)

    def test_spec_validation(self):
        with pytest.raises(SimError):
            WorkloadSpec(mode="poisson")
        with pytest.raises(SimError):
            WorkloadSpec(mode="closed_loop", duration=5.0)
        with pytest.raises(SimError):
            WorkloadSpec(mode="trace")
        with pytest.raises(SimError):
            WorkloadSpec(mode="lockstep")

    def test_request_validation(self):
        with pytest.raises(SimError):
            Request(id=0, arrival_time=-1.0, prompt_tokens=1, output_tokens=1)
        with pytest.raises(SimError):
            Request(id=0, arrival_time=0.0, prompt_tokens=0, output_tokens=1)


class TestClosedLoop:
    def test_reinjection_sustains_load(self):
        spec = WorkloadSpec(mode="closed_loop", concurrency=1, duration=40.0,
                            prompt_tokens=100, output_tokens=150, seed=0)
        report = run_one(generate_workload(spec), workload_spec=spec)
        # each 7.6 s completion within the window re-injects one request
        assert len(report.outcomes) > 1
        last_arrival = max(o.arrival_time for o in report.outcomes)
        assert 0.0 < last_arrival <= 40.0

    def test_stops_after_duration(self):
        spec = WorkloadSpec(mode="closed_loop", concurrency=1, duration=10.0,
                            prompt_tokens=100, output_tokens=150, seed=0)
        report = run_one(generate_workload(spec), workload_spec=spec)
        # completions: 7.6, 15.2, ... re-injection allowed only <= 10.0
        assert len(report.outcomes) == 2
        assert report.outcomes[1].arrival_time == pytest.approx(7.6, rel=1e-12)

    def test_reinjection_reproducible(self):
        spec = WorkloadSpec(mode="closed_loop", concurrency=2, duration=60.0,
                            prompt_tokens=(40, 80, 120), output_tokens=(50, 150),
                            seed=5)
        a = run_one(generate_workload(spec), max_batch=2,
                    batch_wait=0.1, workload_spec=spec)
        b = run_one(generate_workload(spec), max_batch=2,
                    batch_wait=0.1, workload_spec=spec)
        assert a.to_json() == b.to_json()


class TestTrace:
    def test_read_and_sort(self, tmp_path):
        path = tmp_path / "trace.csv"
        path.write_text("arrival_time,prompt_tokens,output_tokens\n"
                        "2.5,30,40\n"
                        "0.5,10,20\n")
        requests = read_trace(path)
        assert [r.arrival_time for r in requests] == [0.5, 2.5]
        assert requests[0].prompt_tokens == 10

    def test_missing_column(self, tmp_path):
        path = tmp_path / "trace.csv"
        path.write_text("arrival_time,prompt_tokens\n1.0,5\n")
        with pytest.raises(SimError, match="output_tokens"):
            read_trace(path)


class TestSloDrops:
    def test_infeasible_requests_dropped_not_raised(self):
        policy = SchedulingPolicy(kind="fixed", target="g-0", latency_slo=1.0)
        report = simulate([make_instance()],
                          [Request(id=7, arrival_time=0.0,
                                   prompt_tokens=100, output_tokens=150)],
                          policy, make_profiles(), 0.0)
        assert report.outcomes == ()
        assert report.dropped == (7,)

    def test_feasible_requests_kept(self):
        policy = SchedulingPolicy(kind="fixed", target="g-0", latency_slo=10.0)
        report = simulate([make_instance()],
                          [Request(id=0, arrival_time=0.0,
                                   prompt_tokens=100, output_tokens=150)],
                          policy, make_profiles(), 0.0)
        assert len(report.outcomes) == 1
        assert report.dropped == ()


class TestIdlePower:
    def test_gap_energy_charged_separately(self):
        requests = [
            Request(id=0, arrival_time=0.0, prompt_tokens=100, output_tokens=150),
            Request(id=1, arrival_time=20.0, prompt_tokens=100, output_tokens=150),
        ]
        plain = run_one(requests)
        heated = run_one(requests, idle_power_fraction=0.5)
        assert plain.idle_energy == 0.0
        # one gap 7.6..20.0 at 35 W
        assert heated.idle_energy == pytest.approx(0.5 * 70.0 * 12.4, rel=1e-9)
        assert heated.idle_carbon.operational == pytest.approx(
            operational_carbon(heated.idle_energy, 31.0), rel=1e-12)
        # request-level accounting is untouched by the idle mode
        assert heated.total_energy == plain.total_energy
        assert heated.total_carbon == plain.total_carbon

    def test_fraction_validated(self):
        with pytest.raises(SimError):
            run_one([], idle_power_fraction=1.5)


class TestReports:
    def test_json_deterministic_and_well_formed(self):
        requests = [Request(id=0, arrival_time=0.0,
                            prompt_tokens=100, output_tokens=150)]
        a, b = run_one(requests).to_json(), run_one(requests).to_json()
        assert a == b
        doc = json.loads(a)
        assert doc["schema_version"] == 1
        assert doc["aggregates"]["completed"] == 1
        assert doc["outcomes"][0]["energy_j"] == pytest.approx(231.0)
        assert doc["instances"][0]["instance_id"] == "g-0"

    def test_csv_has_one_row_per_outcome(self):
        report = run_one([
            Request(id=0, arrival_time=0.0, prompt_tokens=100, output_tokens=150),
            Request(id=1, arrival_time=30.0, prompt_tokens=100, output_tokens=150),
        ])
        lines = report.to_csv().strip().split("\n")
        assert len(lines) == 3
        assert lines[0].startswith("request_id,instance_id,arrival_time_s")

    def test_outcomes_sorted_by_request_id(self):
        spec = WorkloadSpec(mode="poisson", rate=2.0, duration=30.0, seed=3,
                            prompt_tokens=(20, 100), output_tokens=(10, 150))
        report = run_one(generate_workload(spec), max_batch=2, batch_wait=0.2)
        ids = [o.request_id for o in report.outcomes]
        assert ids == sorted(ids)


class TestPerTokenReport:
    def test_decode_rates(self):
        report = run_one([Request(id=0, arrival_time=0.0,
                                  prompt_tokens=100, output_tokens=150)])
        ptr = per_token_report(report, "decode")
        assert isinstance(ptr, PerTokenReport)
        assert ptr.energy_per_token == pytest.approx(1.5, rel=1e-12)
        assert ptr.throughput == pytest.approx(20.0, rel=1e-12)
        assert ptr.carbon_per_token == pytest.approx(
            (operational_carbon(225.0, 31.0) + embodied_rate(SPEC) * 7.5) / 150,
            rel=1e-12)

    def test_prefill_rates(self):
        report = run_one([Request(id=0, arrival_time=0.0,
                                  prompt_tokens=100, output_tokens=150)])
        ptr = per_token_report(report, "prefill")
        assert ptr.energy_per_token == pytest.approx(0.06, rel=1e-12)
        assert ptr.throughput == pytest.approx(1000.0, rel=1e-12)

    def test_empty_report_rejected(self):
        with pytest.raises(SimError):
            per_token_report(run_one([]), "decode")
        with pytest.raises(ValueError):
            per_token_report(run_one([]), "both")


class TestEngineValidation:
    def test_empty_fleet(self):
        with pytest.raises(SimError, match="fleet"):
            simulate([], [], FIXED, make_profiles(), 0.0)

    def test_negative_batch_wait(self):
        with pytest.raises(SimError, match="batch_wait"):
            run_one([], batch_wait=-1.0)

    def test_duplicate_instance_ids(self):
        fleet = [make_instance(), make_instance()]
        with pytest.raises(SimError, match="duplicate"):
            simulate(fleet, [], FIXED, make_profiles(), 0.0)

    def test_max_batch_beyond_profiles_rejected(self):
        fleet = [make_instance(max_batch=4)]
        with pytest.raises(Exception, match="g-0"):
            simulate(fleet, [], FIXED, make_profiles(), 0.0)
