"""Command-line entry point.

Subcommands: estimate, simulate, sweep {batch|lifetime|region|crossover},
calibrate-embodied, validate-profiles.  Exit codes: 0 success, 1 model
error (out of memory, out of measured range, infeasible calibration),
2 usage or configuration error.

Paths to the profile set and region registry come from --profiles and
--regions, falling back to the CARBONSERVE_PROFILES and
CARBONSERVE_REGIONS environment variables, then to a scenario's own
path fields, then to the bundled data.  Only paths may come from the
environment; every physics-affecting parameter must be in a file or
flag so runs are auditable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import analysis, carbon, fleet, profiles, sched, sim

PROFILES_ENV = "CARBONSERVE_PROFILES"
REGIONS_ENV = "CARBONSERVE_REGIONS"

EXIT_OK = 0
EXIT_MODEL = 1
EXIT_CONFIG = 2


class ScenarioError(Exception):
    """The scenario file is missing or malformed."""


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError("value must be >= 1")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number")
    if value <= 0:
        raise argparse.ArgumentTypeError("value must be > 0")
    return value


def _csv_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _parse_lifetimes(text: str) -> list[float]:
    """Either an inclusive integer range `4:8` or a comma list `4,5.5,8`."""
    if ":" in text:
        lo_text, hi_text = text.split(":", 1)
        lo, hi = int(lo_text), int(hi_text)
        if hi < lo:
            raise argparse.ArgumentTypeError("range must be low:high")
        return [float(v) for v in range(lo, hi + 1)]
    values = [float(v) for v in _csv_list(text)]
    if not values:
        raise argparse.ArgumentTypeError("no lifetimes given")
    return values


def _load_profiles(args) -> profiles.ProfileSet:
    path = args.profiles or os.environ.get(PROFILES_ENV)
    if path:
        return profiles.load_profile_set(path)
    return profiles.load_bundled_profiles()


def _load_regions(args) -> dict[str, carbon.RegionCI]:
    path = args.regions or os.environ.get(REGIONS_ENV)
    if path:
        return carbon.load_regions(path)
    return carbon.load_bundled_regions()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(args, text_lines: list[str], doc: dict) -> None:
    if args.json:
        print(json.dumps(doc, indent=2))
    else:
        for line in text_lines:
            print(line)


# ---------------------------------------------------------------- estimate

def cmd_estimate(args) -> int:
    prof_set = _load_profiles(args)
    regions = _load_regions(args)
    region = carbon.resolve_region(regions, args.region)
    prof = prof_set.lookup(args.gpu, args.model, args.batch, args.phase)
    spec = prof_set.gpus[args.gpu]

    # One prompt inside a full uniform batch: occupancy covers the whole
    # padded phase, energy covers only the prompt's own tokens.
    latency = args.batch * args.tokens / prof.throughput
    energy = args.tokens * prof.per_token_energy
    operational = carbon.operational_carbon(
        energy, carbon.ci_at(region, latency / 2.0))
    breakdown = carbon.CarbonBreakdown.of(
        operational, carbon.amortized_embodied(spec, latency))

    doc = {
        "gpu": args.gpu, "model": args.model, "batch_size": args.batch,
        "phase": args.phase, "region": region.region_code, "tokens": args.tokens,
        "latency_s": latency, "energy_j": energy,
        "operational_g": breakdown.operational,
        "embodied_g": breakdown.embodied,
        "total_g": breakdown.total,
    }
    _emit(args, [
        f"{args.gpu} / {args.model} / batch {args.batch} / {args.phase} "
        f"/ {region.region_code} / {args.tokens} tokens",
        f"latency_s      {latency!r}",
        f"energy_j       {energy!r}",
        f"operational_g  {breakdown.operational!r}",
        f"embodied_g     {breakdown.embodied!r}",
        f"total_g        {breakdown.total!r}",
    ], doc)
    return EXIT_OK


# ---------------------------------------------------------------- simulate

@dataclass(frozen=True)
class Scenario:
    """Everything one simulation run needs, resolved and validated."""

    fleet: list[fleet.GpuInstance]
    workload: list[sim.Request]
    workload_spec: sim.WorkloadSpec
    policy: sched.SchedulingPolicy
    batch_wait: float
    idle_power_fraction: float
    profile_set: profiles.ProfileSet


def _resolve_data_path(flag_value, env_name: str, doc_value, base: Path) -> Path | None:
    """Flag beats environment beats scenario field; scenario-relative
    paths resolve against the scenario file's directory."""
    path = flag_value or os.environ.get(env_name)
    if path:
        return Path(path)
    if doc_value:
        p = Path(doc_value)
        return p if p.is_absolute() else base / p
    return None


def _parse_tokens_field(value, name: str):
    if isinstance(value, int):
        return value
    if isinstance(value, list) and value:
        return tuple(int(v) for v in value)
    raise ScenarioError(f"workload.{name} must be an integer or a non-empty list")


def load_scenario(path, args) -> Scenario:
    base = Path(path).parent
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ScenarioError(f"cannot read scenario {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: invalid JSON: {e}") from e
    for section in ("fleet", "workload", "policy"):
        if section not in doc:
            raise ScenarioError(f"{path}: scenario missing section {section!r}")

    prof_path = _resolve_data_path(args.profiles, PROFILES_ENV,
                                   doc.get("profiles_path"), base)
    prof_set = (profiles.load_profile_set(prof_path) if prof_path
                else profiles.load_bundled_profiles())
    region_path = _resolve_data_path(args.regions, REGIONS_ENV,
                                     doc.get("regions_path"), base)
    regions = (carbon.load_regions(region_path) if region_path
               else carbon.load_bundled_regions())

    for gpu_id, years in doc.get("lifetime_overrides", {}).items():
        prof_set = prof_set.with_lifetime(gpu_id, float(years))

    instances = []
    for entry in doc["fleet"]:
        for key in ("instance_id", "gpu", "model", "region", "max_batch"):
            if key not in entry:
                raise ScenarioError(f"{path}: fleet entry missing {key!r}: {entry}")
        if entry["gpu"] not in prof_set.gpus:
            raise ScenarioError(f"{path}: unknown gpu {entry['gpu']!r}")
        if entry["model"] not in prof_set.models:
            raise ScenarioError(f"{path}: unknown model {entry['model']!r}")
        instances.append(fleet.GpuInstance(
            instance_id=entry["instance_id"],
            spec=prof_set.gpus[entry["gpu"]],
            region=carbon.resolve_region(regions, entry["region"]),
            model=prof_set.models[entry["model"]],
            max_batch=int(entry["max_batch"])))

    w = doc["workload"]
    if "mode" not in w:
        raise ScenarioError(f"{path}: workload missing 'mode'")
    seed = args.seed if args.seed is not None else int(w.get("seed", 0))
    trace = None
    if w["mode"] == "trace":
        if "trace_path" not in w:
            raise ScenarioError(f"{path}: trace workload needs 'trace_path'")
        trace_path = Path(w["trace_path"])
        trace = tuple(sim.read_trace(trace_path if trace_path.is_absolute()
                                     else base / trace_path))
    workload_spec = sim.WorkloadSpec(
        mode=w["mode"],
        rate=float(w["rate"]) if w.get("rate") is not None else None,
        concurrency=int(w["concurrency"]) if w.get("concurrency") is not None else None,
        duration=float(w.get("duration", 0.0)),
        prompt_tokens=_parse_tokens_field(w.get("prompt_tokens", 60), "prompt_tokens"),
        output_tokens=_parse_tokens_field(w.get("output_tokens", 150), "output_tokens"),
        seed=seed,
        trace=trace)

    return Scenario(
        fleet=instances,
        workload=sim.generate_workload(workload_spec),
        workload_spec=workload_spec,
        policy=sched.policy_from_config(doc["policy"]),
        batch_wait=float(doc.get("batch_wait", 0.0)),
        idle_power_fraction=float(doc.get("idle_power_fraction", 0.0)),
        profile_set=prof_set)


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario, args)
    report = sim.simulate(scenario.fleet, scenario.workload, scenario.policy,
                          scenario.profile_set, scenario.batch_wait,
                          workload_spec=scenario.workload_spec,
                          idle_power_fraction=scenario.idle_power_fraction)
    out = _out_dir(args)
    report_json = report.to_json()
    (out / "report.json").write_text(report_json, encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")

    aggregates = json.loads(report_json)["aggregates"]
    lines = [f"completed            {aggregates['completed']}",
             f"dropped              {aggregates['dropped']}",
             f"mean_latency_s       {report.mean_latency!r}",
             f"median_latency_s     {report.median_latency!r}",
             f"p99_latency_s        {report.p99_latency!r}",
             f"total_energy_j       {report.total_energy!r}",
             f"operational_g        {report.total_carbon.operational!r}",
             f"embodied_g           {report.total_carbon.embodied!r}",
             f"total_g              {report.total_carbon.total!r}",
             f"throughput_tok_per_s {report.throughput!r}"]
    for iid in sorted(report.utilization):
        lines.append(f"utilization[{iid}]  {report.utilization[iid]!r}")
    lines.append(f"wrote {out / 'report.json'} and {out / 'report.csv'}")
    _emit(args, lines, {"aggregates": aggregates,
                        "report_json": str(out / "report.json"),
                        "report_csv": str(out / "report.csv")})
    return EXIT_OK


# ------------------------------------------------------------------ sweeps

def _write_sweep(args, name: str, result: analysis.SweepResult) -> Path:
    out = _out_dir(args)
    (out / f"{name}.csv").write_text(result.to_csv(), encoding="utf-8")
    (out / f"{name}.json").write_text(result.to_json() + "\n", encoding="utf-8")
    return out


def cmd_sweep_batch(args) -> int:
    prof_set = _load_profiles(args)
    regions = _load_regions(args)
    region = carbon.resolve_region(regions, args.region)
    batches = ([int(b) for b in _csv_list(args.batches)] if args.batches
               else prof_set.measured_batches(args.gpu, args.model, args.phase))
    result = analysis.batch_sweep(prof_set, args.gpu, args.model, args.phase,
                                  region, batches)
    out = _write_sweep(args, "batch_sweep", result)
    lines = [f"batch sweep: {args.gpu} / {args.model} / {args.phase} @ {region.region_code}"]
    for point in result.points:
        if "oom" in point.metrics:
            lines.append(f"  batch {int(point.value):>3}  OOM")
        else:
            lines.append(f"  batch {int(point.value):>3}  "
                         f"throughput {point.metrics['throughput_tok_per_s']:.6g} tok/s  "
                         f"energy {point.metrics['per_token_energy_j']:.6g} J/tok  "
                         f"carbon {point.metrics['per_token_carbon_g']:.6g} g/tok")
    lines.append(f"wrote {out / 'batch_sweep.csv'}")
    _emit(args, lines, json.loads(result.to_json()))
    return EXIT_OK


def cmd_sweep_lifetime(args) -> int:
    prof_set = _load_profiles(args)
    regions = _load_regions(args)
    if args.gpu not in prof_set.gpus:
        raise profiles.UnknownIdError(f"unknown gpu id {args.gpu!r}")
    region_list = [carbon.resolve_region(regions, code)
                   for code in _csv_list(args.region_codes)]
    result = analysis.lifetime_sweep(prof_set.gpus[args.gpu], args.power,
                                     region_list, args.lifetimes)
    out = _write_sweep(args, "lifetime_sweep", result)
    lines = [f"lifetime sweep: {args.gpu} at {args.power} W"]
    for point in result.points:
        shares = "  ".join(f"{name.split(':', 1)[1]}={value:.4%}"
                           for name, value in point.metrics.items())
        lines.append(f"  {point.value:g} yr  {shares}")
    lines.append(f"wrote {out / 'lifetime_sweep.csv'}")
    _emit(args, lines, json.loads(result.to_json()))
    return EXIT_OK


def cmd_sweep_region(args) -> int:
    prof_set = _load_profiles(args)
    regions = _load_regions(args)
    gpu_list = _csv_list(args.gpus)
    region_list = [carbon.resolve_region(regions, code)
                   for code in _csv_list(args.region_codes)]
    batches = ([int(b) for b in _csv_list(args.batches)] if args.batches
               else sorted({b for gpu in gpu_list
                            for b in prof_set.measured_batches(gpu, args.model, "decode")}))
    results = analysis.region_compare(prof_set, gpu_list, args.model, batches,
                                      region_list,
                                      prompt_tokens=args.prompt_tokens,
                                      output_tokens=args.output_tokens)
    out = _out_dir(args)
    (out / "region_compare.csv").write_text(
        analysis.sweep_collection_to_csv(results), encoding="utf-8")
    doc = [json.loads(r.to_json()) for r in results]
    (out / "region_compare.json").write_text(
        json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    lines = [f"region compare: {args.model}"]
    for result in results:
        label = result.metadata["label"]
        for point in result.points:
            if "oom" in point.metrics:
                lines.append(f"  {label}  batch {int(point.value):>3}  OOM")
            else:
                lines.append(f"  {label}  batch {int(point.value):>3}  "
                             f"total {point.metrics['total_g']:.6g} g "
                             f"(op {point.metrics['operational_g']:.6g} "
                             f"+ em {point.metrics['embodied_g']:.6g})")
    lines.append(f"wrote {out / 'region_compare.csv'}")
    _emit(args, lines, doc)
    return EXIT_OK


def cmd_sweep_crossover(args) -> int:
    prof_set = _load_profiles(args)
    regions = _load_regions(args)
    region = carbon.resolve_region(regions, args.region)
    batch = analysis.find_crossover(prof_set, args.a, args.b, args.model,
                                    args.phase, region)
    out = _out_dir(args)
    doc = {"gpu_a": args.a, "gpu_b": args.b, "model": args.model,
           "phase": args.phase, "region": region.region_code,
           "crossover_batch": batch}
    (out / "crossover.json").write_text(json.dumps(doc, indent=2) + "\n",
                                        encoding="utf-8")
    text = (f"{args.b} first beats {args.a} at batch {batch}" if batch is not None
            else f"{args.b} never beats {args.a} on the measured grid")
    _emit(args, [text, f"wrote {out / 'crossover.json'}"], doc)
    return EXIT_OK


# ------------------------------------------------------------- calibration

def cmd_calibrate_embodied(args) -> int:
    prof_set = _load_profiles(args)
    if args.gpus:
        wanted = _csv_list(args.gpus)
        for gpu in wanted:
            if gpu not in prof_set.gpus:
                raise profiles.UnknownIdError(f"unknown gpu id {gpu!r}")
        specs = [prof_set.gpus[gpu] for gpu in wanted]
    else:
        specs = [spec for spec in prof_set.gpus.values()
                 if spec.embodied_carbon is not None]
    for override in args.target or []:
        gpu, _, grams = override.partition("=")
        if gpu not in prof_set.gpus:
            raise profiles.UnknownIdError(f"unknown gpu id {gpu!r}")
        specs = [s if s.id != gpu else
                 prof_set.with_embodied_carbon(gpu, float(grams)).gpus[gpu]
                 for s in specs]
    params = carbon.calibrate_act_params(specs, args.memory_coefficient)
    out = _out_dir(args)
    doc = {"carbon_per_area": {str(node): coeff
                               for node, coeff in sorted(params.carbon_per_area.items())},
           "carbon_per_memory": params.carbon_per_memory}
    (out / "act_params.json").write_text(json.dumps(doc, indent=2) + "\n",
                                         encoding="utf-8")
    lines = [f"carbon_per_memory  {params.carbon_per_memory!r} g/GB"]
    for node, coeff in sorted(params.carbon_per_area.items()):
        lines.append(f"carbon_per_area[{node} nm]  {coeff!r} g/mm2")
    for spec in specs:
        estimate = carbon.estimate_embodied_act(spec, params)
        lines.append(f"round-trip {spec.id}: {estimate!r} g "
                     f"(target {spec.embodied_carbon!r} g)")
    lines.append(f"wrote {out / 'act_params.json'}")
    _emit(args, lines, doc)
    return EXIT_OK


def cmd_validate_profiles(args) -> int:
    prof_set = _load_profiles(args)
    reloaded = profiles.load_profile_set_text(prof_set.to_json())
    round_trip = "ok" if reloaded == prof_set else "MISMATCH"
    oom = sum(1 for p in prof_set.profiles.values() if p.oom)
    lines = [f"gpus      {len(prof_set.gpus)}",
             f"models    {len(prof_set.models)}",
             f"profiles  {len(prof_set.profiles)} ({oom} OOM)",
             f"round-trip {round_trip}"]
    _emit(args, lines, {"gpus": len(prof_set.gpus), "models": len(prof_set.models),
                        "profiles": len(prof_set.profiles), "oom_entries": oom,
                        "round_trip": round_trip})
    return EXIT_OK if round_trip == "ok" else EXIT_CONFIG


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carbonserve",
        description="Carbon-aware LLM-serving simulator and planner.")
    parser.add_argument("--profiles", help="profile set JSON path (default: bundled)")
    parser.add_argument("--regions", help="region registry JSON path (default: bundled)")
    parser.add_argument("--out", default=".", help="output directory (default: .)")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the workload seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="closed-form single-phase cost estimate")
    p.add_argument("--gpu", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--batch", type=_positive_int, default=1)
    p.add_argument("--phase", choices=("prefill", "decode"), required=True)
    p.add_argument("--region", required=True)
    p.add_argument("--tokens", type=_positive_int, required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run a scenario file")
    p.add_argument("scenario", help="scenario JSON path")
    p.set_defaults(func=cmd_simulate)

    sweep = sub.add_parser("sweep", help="figure-style parameter sweeps")
    sweep_sub = sweep.add_subparsers(dest="sweep_kind", required=True)

    p = sweep_sub.add_parser("batch", help="per-token rates across batch sizes")
    p.add_argument("--gpu", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--phase", choices=("prefill", "decode"), required=True)
    p.add_argument("--region", default="qc")
    p.add_argument("--batches", help="comma list (default: all measured)")
    p.set_defaults(func=cmd_sweep_batch)

    p = sweep_sub.add_parser("lifetime", help="embodied fraction vs lifetime")
    p.add_argument("--gpu", required=True)
    p.add_argument("--power", type=_positive_float, required=True,
                   help="steady-state draw in watts")
    p.add_argument("--lifetimes", type=_parse_lifetimes, default=[4.0, 5.0, 6.0, 7.0, 8.0],
                   help="low:high integer range or comma list of years")
    # dest differs from the global --regions (a registry path) so the
    # two flags can coexist in one namespace
    p.add_argument("--regions", dest="region_codes", default="qc,ciso,pace",
                   help="comma list of region codes")
    p.set_defaults(func=cmd_sweep_lifetime)

    p = sweep_sub.add_parser("region", help="per-prompt carbon across regions")
    p.add_argument("--gpus", required=True, help="comma list of gpu ids")
    p.add_argument("--model", required=True)
    p.add_argument("--batches", help="comma list (default: all measured)")
    p.add_argument("--regions", dest="region_codes", default="qc,ciso,pace",
                   help="comma list of region codes")
    p.add_argument("--prompt-tokens", type=_positive_int, default=None)
    p.add_argument("--output-tokens", type=_positive_int, default=150)
    p.set_defaults(func=cmd_sweep_region)

    p = sweep_sub.add_parser("crossover",
                             help="smallest batch where --b beats --a on per-token carbon")
    p.add_argument("--a", required=True, help="baseline gpu id")
    p.add_argument("--b", required=True, help="challenger gpu id")
    p.add_argument("--model", required=True)
    p.add_argument("--phase", choices=("prefill", "decode"), required=True)
    p.add_argument("--region", default="qc")
    p.set_defaults(func=cmd_sweep_crossover)

    p = sub.add_parser("calibrate-embodied",
                       help="fit area coefficients to known embodied totals")
    p.add_argument("--memory-coefficient", type=_positive_float,
                   default=carbon.DEFAULT_CARBON_PER_MEMORY,
                   help="fixed g/GB memory coefficient")
    p.add_argument("--gpus", help="comma list of gpu ids (default: all with totals)")
    p.add_argument("--target", action="append", metavar="GPU=GRAMS",
                   help="override a gpu's target total; repeatable")
    p.set_defaults(func=cmd_calibrate_embodied)

    p = sub.add_parser("validate-profiles", help="load, check, and round-trip a profile set")
    p.set_defaults(func=cmd_validate_profiles)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (profiles.OomProfileError, profiles.BatchRangeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except (carbon.RegionError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (carbon.CarbonError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except (profiles.ProfileError, sched.SchedulingError, sim.SimError,
            fleet.FleetError, analysis.AnalysisError, ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
