"""Carbon-aware LLM-serving simulator and planner.

Models prefill/decode inference on heterogeneous GPU fleets from
measured profiles and computes per-prompt and per-token operational,
embodied, and total carbon across grid regions, with scheduling policies
that steer work by grid carbon intensity.
"""

from .carbon import (
    ActParams,
    CarbonBreakdown,
    RegionCI,
    amortized_embodied,
    calibrate_act_params,
    ci_at,
    embodied_fraction,
    embodied_rate,
    estimate_embodied_act,
    load_bundled_act_params,
    load_bundled_regions,
    operational_carbon,
    total_carbon,
)
from .fleet import BatchDescriptor, GpuInstance, charge_batch
from .profiles import (
    GpuSpec,
    ModelConfig,
    PhaseProfile,
    ProfileSet,
    interpolate_batch,
    load_bundled_profiles,
    load_profile_set,
    memory_footprint,
)
from .sched import SchedulingPolicy, choose, estimate_batch_cost
from .sim import (
    Request,
    RequestOutcome,
    SimReport,
    WorkloadSpec,
    generate_workload,
    per_token_report,
    simulate,
)

__version__ = "0.1.0"

__all__ = [
    "ActParams", "BatchDescriptor", "CarbonBreakdown", "GpuInstance",
    "GpuSpec", "ModelConfig", "PhaseProfile", "ProfileSet", "RegionCI",
    "Request", "RequestOutcome", "SchedulingPolicy", "SimReport",
    "WorkloadSpec", "amortized_embodied", "calibrate_act_params",
    "charge_batch", "choose", "ci_at", "embodied_fraction", "embodied_rate",
    "estimate_batch_cost", "estimate_embodied_act", "generate_workload",
    "interpolate_batch", "load_bundled_act_params", "load_bundled_profiles",
    "load_bundled_regions", "load_profile_set", "memory_footprint",
    "operational_carbon", "per_token_report", "simulate", "total_carbon",
]
