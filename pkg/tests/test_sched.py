"""Placement policies: selection rules, SLO filtering, cost estimates."""

import pytest

from carbonserve.carbon import RegionCI
from carbonserve.fleet import BatchDescriptor, FleetError, GpuInstance, charge_batch
from carbonserve.profiles import GpuSpec, ModelConfig, PhaseProfile, ProfileSet
from carbonserve.sched import (
    QueueState,
    SchedulingError,
    SchedulingPolicy,
    SloInfeasibleError,
    choose,
    estimate_batch_cost,
    estimate_completion,
    policy_from_config,
)

QC = RegionCI(region_code="qc", avg_ci=31.0)
PACE = RegionCI(region_code="pace", avg_ci=647.0)

SPEC = GpuSpec(id="g", architecture="synthetic", chip_area=545.0, tech_node=12,
               memory_capacity=16.0, tdp=70.0, release_year=2018,
               embodied_carbon=10300.0, lifetime=5.0)
MODEL = ModelConfig(id="m", param_count=1_000_000_000)


def make_profiles() -> ProfileSet:
    points = {("prefill", 1): (1000.0, 0.06), ("prefill", 2): (1600.0, 0.05),
              ("decode", 1): (20.0, 1.5), ("decode", 2): (32.0, 1.2)}
    entries = [PhaseProfile(gpu_id="g", model_id="m", batch_size=b, phase=ph,
                            throughput=thr, per_token_energy=e, avg_power=thr * e)
               for (ph, b), (thr, e) in points.items()]
    return ProfileSet.from_parts([SPEC], [MODEL], entries, name="synthetic")


def make_instance(instance_id, region=QC, max_batch=2) -> GpuInstance:
    return GpuInstance(instance_id=instance_id, spec=SPEC, region=region,
                       model=MODEL, max_batch=max_batch)


PROFILES = make_profiles()
IDLE = QueueState()
ONE = BatchDescriptor.single(100, 150)


def pair(instance, queue=IDLE):
    return (instance, queue)


@pytest.fixture(scope="module")
def bundled_pair(bundled, regions):
    t4 = GpuInstance(instance_id="t4-0", spec=bundled.gpus["t4"],
                     region=regions["qc"], model=bundled.models["1b"], max_batch=16)
    ada = GpuInstance(instance_id="ada-0", spec=bundled.gpus["rtx6000ada"],
                      region=regions["qc"], model=bundled.models["1b"], max_batch=16)
    return t4, ada


class TestPolicyConfig:
    def test_unknown_kind(self):
        with pytest.raises(SchedulingError):
            SchedulingPolicy(kind="psychic")

    def test_fixed_needs_target(self):
        with pytest.raises(SchedulingError):
            SchedulingPolicy(kind="fixed")

    def test_ci_threshold_needs_preferred(self):
        with pytest.raises(SchedulingError):
            SchedulingPolicy(kind="ci_threshold")
        with pytest.raises(SchedulingError):
            SchedulingPolicy(kind="ci_threshold", preferred=("a",), ci_threshold=-5.0)

    def test_slo_must_be_positive(self):
        with pytest.raises(SchedulingError):
            SchedulingPolicy(kind="round_robin", latency_slo=0.0)

    def test_from_config(self):
        policy = policy_from_config({"kind": "ci_threshold", "preferred": ["a", "b"],
                                     "ci_threshold": 50, "latency_slo": 12})
        assert policy.kind == "ci_threshold"
        assert policy.preferred == ("a", "b")
        assert policy.ci_threshold == 50.0
        assert policy.latency_slo == 12.0
        with pytest.raises(SchedulingError, match="kind"):
            policy_from_config({"target": "a"})

    def test_from_config_defaults(self):
        policy = policy_from_config({"kind": "round_robin"})
        assert policy.latency_slo is None
        assert policy.ci_threshold == 100.0


class TestFixed:
    def test_routes_to_target(self):
        policy = SchedulingPolicy(kind="fixed", target="b")
        cands = [pair(make_instance("a")), pair(make_instance("b"))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "b"

    def test_unknown_target_rejected(self):
        policy = SchedulingPolicy(kind="fixed", target="zz")
        with pytest.raises(SchedulingError, match="zz"):
            choose(policy, [pair(make_instance("a"))], ONE, 0.0, PROFILES)

    def test_target_over_slo_is_infeasible(self):
        policy = SchedulingPolicy(kind="fixed", target="a", latency_slo=1.0)
        with pytest.raises(SloInfeasibleError):
            choose(policy, [pair(make_instance("a"))], ONE, 0.0, PROFILES)


class TestRoundRobin:
    def test_cycles_in_id_order(self):
        policy = SchedulingPolicy(kind="round_robin")
        cands = [pair(make_instance("b")), pair(make_instance("a")),
                 pair(make_instance("c"))]
        picks = [choose(policy, cands, ONE, 0.0, PROFILES) for _ in range(6)]
        assert picks == ["a", "b", "c", "a", "b", "c"]

    def test_cursor_skips_infeasible(self):
        # 7.6 s service; "slow" starts busy for 100 s and is filtered out
        policy = SchedulingPolicy(kind="round_robin", latency_slo=10.0)
        cands = [pair(make_instance("fast")),
                 pair(make_instance("slow"), QueueState(busy_until=100.0))]
        picks = {choose(policy, cands, ONE, 0.0, PROFILES) for _ in range(4)}
        assert picks == {"fast"}


class TestGreedyFamily:
    def test_latency_prefers_idle_over_backlogged(self):
        policy = SchedulingPolicy(kind="latency_greedy")
        cands = [pair(make_instance("busy"), QueueState(busy_until=50.0)),
                 pair(make_instance("idle"))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "idle"

    def test_latency_counts_queued_backlog(self):
        policy = SchedulingPolicy(kind="latency_greedy")
        backlog = QueueState(queued=((100, 150), (100, 150), (100, 150)))
        cands = [pair(make_instance("queued", max_batch=1), backlog),
                 pair(make_instance("empty", max_batch=1))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "empty"

    def test_energy_ignores_region(self):
        policy = SchedulingPolicy(kind="energy_greedy")
        cands = [pair(make_instance("dirty", region=PACE)),
                 pair(make_instance("clean", region=QC))]
        # identical hardware: pure tie, lowest id wins
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "clean"

    def test_carbon_prefers_clean_grid(self):
        policy = SchedulingPolicy(kind="carbon_greedy")
        cands = [pair(make_instance("dirty", region=PACE)),
                 pair(make_instance("clean", region=QC))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "clean"

    def test_carbon_uses_ci_at_decision_time(self):
        swinging = RegionCI(region_code="sw", avg_ci=400.0,
                            series=((0.0, 700.0), (100.0, 5.0)))
        steady = RegionCI(region_code="st", avg_ci=31.0)
        policy = SchedulingPolicy(kind="carbon_greedy")
        cands = [pair(make_instance("swing", region=swinging)),
                 pair(make_instance("steady", region=steady))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "steady"
        assert choose(policy, cands, ONE, 150.0, PROFILES) == "swing"

    def test_tie_breaks_to_lowest_id(self):
        policy = SchedulingPolicy(kind="carbon_greedy")
        cands = [pair(make_instance("z")), pair(make_instance("a"))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "a"


class TestBundledChoices:
    """Carbon-aware routing between the measured T4 and Ada on QC hydro."""

    def test_single_decode_heavy_request_goes_to_t4(self, bundled, bundled_pair):
        t4, ada = bundled_pair
        policy = SchedulingPolicy(kind="carbon_greedy")
        got = choose(policy, [pair(ada), pair(t4)],
                     BatchDescriptor.single(60, 150), 0.0, bundled)
        assert got == "t4-0"

    def test_large_batch_goes_to_ada(self, bundled, bundled_pair):
        t4, ada = bundled_pair
        policy = SchedulingPolicy(kind="carbon_greedy")
        big = BatchDescriptor((60,) * 16, (150,) * 16)
        got = choose(policy, [pair(ada), pair(t4)], big, 0.0, bundled)
        assert got == "ada-0"

    def test_latency_greedy_prefers_ada(self, bundled, bundled_pair):
        t4, ada = bundled_pair
        policy = SchedulingPolicy(kind="latency_greedy")
        got = choose(policy, [pair(ada), pair(t4)],
                     BatchDescriptor.single(60, 150), 0.0, bundled)
        assert got == "ada-0"

    def test_energy_greedy_prefers_t4_at_batch_one(self, bundled, bundled_pair):
        t4, ada = bundled_pair
        policy = SchedulingPolicy(kind="energy_greedy")
        got = choose(policy, [pair(ada), pair(t4)],
                     BatchDescriptor.single(60, 150), 0.0, bundled)
        assert got == "t4-0"


class TestCiThreshold:
    def test_preferred_taken_when_grid_clean(self):
        policy = SchedulingPolicy(kind="ci_threshold", preferred=("old",),
                                  ci_threshold=100.0)
        cands = [pair(make_instance("new", region=QC)),
                 pair(make_instance("old", region=QC))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "old"

    def test_falls_back_to_carbon_greedy_when_dirty(self):
        policy = SchedulingPolicy(kind="ci_threshold", preferred=("old",),
                                  ci_threshold=100.0)
        greedy = SchedulingPolicy(kind="carbon_greedy")
        cands = [pair(make_instance("new", region=QC)),
                 pair(make_instance("old", region=PACE))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) \
            == choose(greedy, cands, ONE, 0.0, PROFILES) == "new"

    def test_preference_order_respected(self):
        policy = SchedulingPolicy(kind="ci_threshold", preferred=("second", "first"),
                                  ci_threshold=100.0)
        cands = [pair(make_instance("first", region=QC)),
                 pair(make_instance("second", region=QC))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "second"

    def test_absent_preferred_skipped(self):
        policy = SchedulingPolicy(kind="ci_threshold", preferred=("ghost", "real"),
                                  ci_threshold=100.0)
        cands = [pair(make_instance("real", region=QC))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "real"


class TestSloFilter:
    def test_all_infeasible_raises_with_best(self):
        policy = SchedulingPolicy(kind="latency_greedy", latency_slo=1.0)
        cands = [pair(make_instance("a")), pair(make_instance("b"))]
        with pytest.raises(SloInfeasibleError) as exc:
            choose(policy, cands, ONE, 0.0, PROFILES)
        assert exc.value.latency_slo == 1.0
        assert exc.value.best == pytest.approx(7.6, rel=1e-12)

    def test_filter_applies_before_ranking(self):
        # the cheapest-carbon instance is excluded by the SLO, so the
        # policy must settle for the dirtier but available one
        policy = SchedulingPolicy(kind="carbon_greedy", latency_slo=10.0)
        cands = [pair(make_instance("clean", region=QC),
                      QueueState(busy_until=100.0)),
                 pair(make_instance("dirty", region=PACE))]
        assert choose(policy, cands, ONE, 0.0, PROFILES) == "dirty"

    def test_no_candidates(self):
        policy = SchedulingPolicy(kind="latency_greedy")
        with pytest.raises(SchedulingError):
            choose(policy, [], ONE, 0.0, PROFILES)


class TestEstimates:
    def test_completion_includes_busy_and_queue(self):
        inst = make_instance("a", max_batch=1)
        queue = QueueState(busy_until=10.0, queued=((100, 150),))
        # 10 (busy) + 7.6 (queued single) + 7.6 (new batch)
        assert estimate_completion(inst, queue, ONE, 0.0, PROFILES) \
            == pytest.approx(25.2, rel=1e-12)

    def test_completion_from_idle(self):
        inst = make_instance("a")
        assert estimate_completion(inst, IDLE, ONE, 5.0, PROFILES) \
            == pytest.approx(12.6, rel=1e-12)

    def test_batch_cost_matches_charge_batch(self):
        inst = make_instance("a")
        latency, energy, carbon = estimate_batch_cost(inst, ONE, 0.0, PROFILES)
        charge = charge_batch(inst, ONE, 0.0, PROFILES)
        assert latency == charge.duration
        assert energy == charge.total_energy
        assert carbon == charge.total_carbon
        assert latency == pytest.approx(7.6, rel=1e-12)
        assert energy == pytest.approx(231.0, rel=1e-12)

    def test_region_scales_operational_only(self):
        _, _, clean = estimate_batch_cost(make_instance("a", region=QC),
                                          ONE, 0.0, PROFILES)
        _, _, dirty = estimate_batch_cost(make_instance("b", region=PACE),
                                          ONE, 0.0, PROFILES)
        assert dirty.operational / clean.operational \
            == pytest.approx(647.0 / 31.0, rel=1e-12)
        assert dirty.embodied == clean.embodied


class TestDescriptors:
    def test_zero_member_batch_rejected(self):
        with pytest.raises(FleetError):
            BatchDescriptor((), ())

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(FleetError):
            BatchDescriptor((10, 20), (30,))

    def test_zero_tokens_rejected(self):
        with pytest.raises(FleetError):
            BatchDescriptor((0,), (10,))
