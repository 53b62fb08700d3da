"""Hardware specs, model configs, and measured serving profiles.

A ProfileSet is the empirical backbone of every estimate the rest of the
package produces: simulators and planners only ever read throughput,
per-token energy, and power from here, interpolating between measured
batch sizes but never extrapolating beyond them.

Units are fixed across the package: chip area in mm2, memory in GB,
power in W, energy in J, throughput in tokens/s, embodied carbon in
grams CO2eq, lifetime in years.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

PHASES = ("prefill", "decode")

# |avg_power - per_token_energy * throughput| must stay within this
# relative tolerance for every non-OOM entry.
POWER_CONSISTENCY_RTOL = 0.01


class ProfileError(Exception):
    """Base class for profile loading and lookup failures."""


class ProfileParseError(ProfileError):
    """The profile file is not syntactically valid."""


class ProfileValidationError(ProfileError):
    """The profile file parsed but violates a data invariant."""


class UnknownIdError(ProfileError):
    """A gpu or model id is not declared in the profile set."""


class OomProfileError(ProfileError):
    """The requested configuration is marked out-of-memory."""

    def __init__(self, gpu_id: str, model_id: str, batch_size: int, phase: str):
        self.gpu_id = gpu_id
        self.model_id = model_id
        self.batch_size = batch_size
        self.phase = phase
        super().__init__(
            f"({gpu_id}, {model_id}, batch {batch_size}, {phase}) is out of memory"
        )


class BatchRangeError(ProfileError):
    """The requested batch size lies outside the measured range."""

    def __init__(self, gpu_id: str, model_id: str, phase: str, batch_size: int,
                 lo: int, hi: int):
        self.batch_size = batch_size
        self.lo = lo
        self.hi = hi
        super().__init__(
            f"batch {batch_size} outside measured range [{lo}, {hi}] for "
            f"({gpu_id}, {model_id}, {phase}); extrapolation is not supported"
        )


@dataclass(frozen=True)
class GpuSpec:
    """One GPU type: physical identity plus its manufacturing footprint.

    embodied_carbon (grams CO2eq) may be None for specs that have not
    been through the embodied-carbon estimator yet; carbon accounting
    refuses to guess a missing value.
    """

    id: str
    architecture: str
    chip_area: float
    tech_node: int
    memory_capacity: float
    tdp: float
    release_year: int
    embodied_carbon: float | None = None
    lifetime: float = 5.0

    def __post_init__(self):
        if self.chip_area <= 0:
            raise ProfileValidationError(f"gpu {self.id!r}: chip_area must be > 0")
        if self.memory_capacity <= 0:
            raise ProfileValidationError(f"gpu {self.id!r}: memory_capacity must be > 0")
        if self.tdp <= 0:
            raise ProfileValidationError(f"gpu {self.id!r}: tdp must be > 0")
        if self.lifetime <= 0:
            raise ProfileValidationError(f"gpu {self.id!r}: lifetime must be > 0")
        if self.embodied_carbon is not None and self.embodied_carbon <= 0:
            raise ProfileValidationError(
                f"gpu {self.id!r}: embodied_carbon must be > 0 when present"
            )


@dataclass(frozen=True)
class ModelConfig:
    """A served model, sized in billions of parameters."""

    id: str
    param_count: float
    bytes_per_param: int = 2

    def __post_init__(self):
        if self.param_count <= 0:
            raise ProfileValidationError(f"model {self.id!r}: param_count must be > 0")
        if self.bytes_per_param not in (1, 2, 4):
            raise ProfileValidationError(
                f"model {self.id!r}: bytes_per_param must be 1, 2, or 4"
            )


@dataclass(frozen=True)
class PhaseProfile:
    """One measured (gpu, model, batch, phase) operating point.

    Throughput is the aggregate token rate of the whole batch.  When oom
    is set the configuration does not fit in GPU memory and all rate
    fields are absent.
    """

    gpu_id: str
    model_id: str
    batch_size: int
    phase: str
    throughput: float | None = None
    per_token_energy: float | None = None
    avg_power: float | None = None
    oom: bool = False

    def __post_init__(self):
        key = f"({self.gpu_id}, {self.model_id}, batch {self.batch_size}, {self.phase})"
        if self.phase not in PHASES:
            raise ProfileValidationError(f"{key}: phase must be one of {PHASES}")
        if self.batch_size < 1:
            raise ProfileValidationError(f"{key}: batch_size must be >= 1")
        if self.oom:
            if any(v is not None for v in
                   (self.throughput, self.per_token_energy, self.avg_power)):
                raise ProfileValidationError(f"{key}: OOM entries must not carry rate fields")
            return
        for name in ("throughput", "per_token_energy", "avg_power"):
            v = getattr(self, name)
            if v is None or v <= 0:
                raise ProfileValidationError(f"{key}: {name} must be present and > 0")
        implied = self.per_token_energy * self.throughput
        if abs(self.avg_power - implied) > POWER_CONSISTENCY_RTOL * self.avg_power:
            raise ProfileValidationError(
                f"{key}: avg_power {self.avg_power} inconsistent with "
                f"per_token_energy * throughput = {implied:.6g} (tolerance 1%)"
            )


def interpolate_batch(lo: PhaseProfile, hi: PhaseProfile, batch_size: int) -> PhaseProfile:
    """Log-linearly interpolate between two measured batch sizes.

    Throughput and per-token energy are linear in log(batch) vs
    log(value); avg_power is recomputed as their product so the
    consistency invariant holds by construction.  Querying an endpoint
    batch returns that endpoint unchanged.
    """
    if (lo.gpu_id, lo.model_id, lo.phase) != (hi.gpu_id, hi.model_id, hi.phase):
        raise ValueError("interpolation endpoints must share (gpu, model, phase)")
    if lo.oom or hi.oom:
        raise OomProfileError(lo.gpu_id, lo.model_id, batch_size, lo.phase)
    if batch_size == lo.batch_size:
        return lo
    if batch_size == hi.batch_size:
        return hi
    if not lo.batch_size < batch_size < hi.batch_size:
        raise ValueError(
            f"batch {batch_size} not inside ({lo.batch_size}, {hi.batch_size})"
        )
    w = (math.log(batch_size) - math.log(lo.batch_size)) / (
        math.log(hi.batch_size) - math.log(lo.batch_size))

    def geo(a: float, b: float) -> float:
        return math.exp(math.log(a) * (1.0 - w) + math.log(b) * w)

    thr = geo(lo.throughput, hi.throughput)
    energy = geo(lo.per_token_energy, hi.per_token_energy)
    return PhaseProfile(
        gpu_id=lo.gpu_id,
        model_id=lo.model_id,
        batch_size=batch_size,
        phase=lo.phase,
        throughput=thr,
        per_token_energy=energy,
        avg_power=energy * thr,
    )


@dataclass(frozen=True)
class ProfileSet:
    """Validated, immutable collection of specs, models, and profiles."""

    gpus: dict[str, GpuSpec]
    models: dict[str, ModelConfig]
    profiles: dict[tuple[str, str, int, str], PhaseProfile]
    defaults: dict[str, int] = field(default_factory=dict)
    name: str = ""
    description: str = ""

    @classmethod
    def from_parts(cls, gpus, models, profiles, defaults=None, name="", description=""):
        gpu_map = {g.id: g for g in gpus}
        if len(gpu_map) != len(gpus):
            raise ProfileValidationError("duplicate gpu ids")
        model_map = {m.id: m for m in models}
        if len(model_map) != len(models):
            raise ProfileValidationError("duplicate model ids")
        prof_map: dict[tuple[str, str, int, str], PhaseProfile] = {}
        for p in profiles:
            if p.gpu_id not in gpu_map:
                raise ProfileValidationError(f"profile references undeclared gpu {p.gpu_id!r}")
            if p.model_id not in model_map:
                raise ProfileValidationError(f"profile references undeclared model {p.model_id!r}")
            key = (p.gpu_id, p.model_id, p.batch_size, p.phase)
            if key in prof_map:
                raise ProfileValidationError(f"duplicate profile entry for {key}")
            prof_map[key] = p
        return cls(gpus=gpu_map, models=model_map, profiles=prof_map,
                   defaults=dict(defaults or {}), name=name, description=description)

    def measured_batches(self, gpu_id: str, model_id: str, phase: str) -> list[int]:
        """Sorted batch sizes measured for the group, OOM entries included."""
        self._check_ids(gpu_id, model_id)
        return sorted(b for (g, m, b, ph) in self.profiles
                      if (g, m, ph) == (gpu_id, model_id, phase))

    def _check_ids(self, gpu_id: str, model_id: str):
        if gpu_id not in self.gpus:
            raise UnknownIdError(f"unknown gpu id {gpu_id!r}")
        if model_id not in self.models:
            raise UnknownIdError(f"unknown model id {model_id!r}")

    def lookup(self, gpu_id: str, model_id: str, batch_size: int, phase: str) -> PhaseProfile:
        """Resolve an operating point, interpolating between measured batches.

        Raises OomProfileError if the matched or a bracketing entry is
        flagged OOM, and BatchRangeError outside the measured range.
        Never invents a value beyond the measured evidence.
        """
        self._check_ids(gpu_id, model_id)
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        exact = self.profiles.get((gpu_id, model_id, batch_size, phase))
        if exact is not None:
            if exact.oom:
                raise OomProfileError(gpu_id, model_id, batch_size, phase)
            return exact
        batches = self.measured_batches(gpu_id, model_id, phase)
        if not batches:
            raise UnknownIdError(f"no profiles for ({gpu_id}, {model_id}, {phase})")
        if batch_size < batches[0] or batch_size > batches[-1]:
            raise BatchRangeError(gpu_id, model_id, phase, batch_size,
                                  batches[0], batches[-1])
        lo_b = max(b for b in batches if b < batch_size)
        hi_b = min(b for b in batches if b > batch_size)
        lo = self.profiles[(gpu_id, model_id, lo_b, phase)]
        hi = self.profiles[(gpu_id, model_id, hi_b, phase)]
        if lo.oom or hi.oom:
            raise OomProfileError(gpu_id, model_id, batch_size, phase)
        return interpolate_batch(lo, hi, batch_size)

    def max_usable_batch(self, gpu_id: str, model_id: str) -> int:
        """Largest batch measured non-OOM in both phases (0 if none)."""
        best = 0
        for phase in PHASES:
            usable = [b for b in self.measured_batches(gpu_id, model_id, phase)
                      if not self.profiles[(gpu_id, model_id, b, phase)].oom]
            if not usable:
                return 0
            top = max(usable)
            best = top if best == 0 else min(best, top)
        return best

    def with_lifetime(self, gpu_id: str, lifetime: float) -> "ProfileSet":
        """Copy of this set with one GPU's lifetime overridden."""
        if gpu_id not in self.gpus:
            raise UnknownIdError(f"unknown gpu id {gpu_id!r}")
        gpus = dict(self.gpus)
        gpus[gpu_id] = replace(gpus[gpu_id], lifetime=lifetime)
        return replace(self, gpus=gpus)

    def with_embodied_carbon(self, gpu_id: str, embodied_carbon: float) -> "ProfileSet":
        """Copy of this set with one GPU's embodied carbon overridden."""
        if gpu_id not in self.gpus:
            raise UnknownIdError(f"unknown gpu id {gpu_id!r}")
        gpus = dict(self.gpus)
        gpus[gpu_id] = replace(gpus[gpu_id], embodied_carbon=embodied_carbon)
        return replace(self, gpus=gpus)

    def to_json(self) -> str:
        """Serialize back to the profile file format (round-trip safe)."""
        gpus = []
        for g in self.gpus.values():
            d = {
                "id": g.id, "architecture": g.architecture,
                "chip_area": g.chip_area, "tech_node": g.tech_node,
                "memory_capacity": g.memory_capacity, "tdp": g.tdp,
                "release_year": g.release_year, "lifetime": g.lifetime,
            }
            if g.embodied_carbon is not None:
                d["embodied_carbon"] = g.embodied_carbon
            gpus.append(d)
        models = [{"id": m.id, "param_count": m.param_count,
                   "bytes_per_param": m.bytes_per_param} for m in self.models.values()]
        profiles = []
        for p in sorted(self.profiles.values(),
                        key=lambda p: (p.gpu_id, p.model_id, p.phase, p.batch_size)):
            d = {"gpu_id": p.gpu_id, "model_id": p.model_id,
                 "batch_size": p.batch_size, "phase": p.phase}
            if p.oom:
                d["oom"] = True
            else:
                d["throughput"] = p.throughput
                d["per_token_energy"] = p.per_token_energy
                d["avg_power"] = p.avg_power
            profiles.append(d)
        doc = {"name": self.name, "description": self.description,
               "defaults": self.defaults, "gpus": gpus, "models": models,
               "profiles": profiles}
        return json.dumps(doc, indent=2)


def _gpu_from_dict(d: dict) -> GpuSpec:
    try:
        return GpuSpec(
            id=d["id"], architecture=d.get("architecture", ""),
            chip_area=float(d["chip_area"]),
            tech_node=int(d["tech_node"]),
            memory_capacity=float(d["memory_capacity"]),
            tdp=float(d["tdp"]),
            release_year=int(d.get("release_year", 0)),
            embodied_carbon=(float(d["embodied_carbon"])
                             if d.get("embodied_carbon") is not None else None),
            lifetime=float(d.get("lifetime", 5.0)),
        )
    except KeyError as e:
        raise ProfileValidationError(f"gpu entry missing field {e.args[0]!r}: {d}") from e


def _model_from_dict(d: dict) -> ModelConfig:
    try:
        return ModelConfig(id=d["id"], param_count=float(d["param_count"]),
                           bytes_per_param=int(d.get("bytes_per_param", 2)))
    except KeyError as e:
        raise ProfileValidationError(f"model entry missing field {e.args[0]!r}: {d}") from e


def _profile_from_dict(d: dict) -> PhaseProfile:
    try:
        if d.get("oom", False):
            return PhaseProfile(gpu_id=d["gpu_id"], model_id=d["model_id"],
                                batch_size=int(d["batch_size"]), phase=d["phase"], oom=True)
        return PhaseProfile(
            gpu_id=d["gpu_id"], model_id=d["model_id"],
            batch_size=int(d["batch_size"]), phase=d["phase"],
            throughput=float(d["throughput"]),
            per_token_energy=float(d["per_token_energy"]),
            avg_power=float(d["avg_power"]),
        )
    except KeyError as e:
        raise ProfileValidationError(f"profile entry missing field {e.args[0]!r}: {d}") from e


def load_profile_set_text(text: str) -> ProfileSet:
    """Parse and validate a profile document from JSON text."""
    if not text.strip():
        raise ProfileParseError("profile document is empty")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProfileParseError(f"invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ProfileParseError("profile document must be a JSON object")
    for section in ("gpus", "models", "profiles"):
        if section not in doc or not isinstance(doc[section], list):
            raise ProfileParseError(f"profile document missing array {section!r}")
    gpus = [_gpu_from_dict(d) for d in doc["gpus"]]
    models = [_model_from_dict(d) for d in doc["models"]]
    profiles = [_profile_from_dict(d) for d in doc["profiles"]]
    defaults = {k: int(v) for k, v in doc.get("defaults", {}).items()}
    return ProfileSet.from_parts(gpus, models, profiles, defaults=defaults,
                                 name=doc.get("name", ""),
                                 description=doc.get("description", ""))


def load_profile_set(path) -> ProfileSet:
    """Load a profile set from a JSON file (schema in the README)."""
    with open(path, "r", encoding="utf-8") as f:
        return load_profile_set_text(f.read())


_CSV_RATE_COLUMNS = ("throughput", "per_token_energy", "avg_power")


def read_profiles_csv(path) -> list[PhaseProfile]:
    """Read PhaseProfile rows from a headered CSV file.

    Columns: gpu_id,model_id,batch_size,phase,throughput,per_token_energy,
    avg_power,oom.  OOM rows leave the rate columns empty and set oom to
    true/1.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ProfileParseError(f"{path}: empty CSV")
        required = ("gpu_id", "model_id", "batch_size", "phase")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ProfileParseError(f"{path}: missing CSV columns {missing}")
        for i, row in enumerate(reader, start=2):
            oom = str(row.get("oom", "")).strip().lower() in ("1", "true", "yes")
            d = {"gpu_id": row["gpu_id"], "model_id": row["model_id"],
                 "batch_size": row["batch_size"], "phase": row["phase"], "oom": oom}
            if not oom:
                for col in _CSV_RATE_COLUMNS:
                    if not str(row.get(col, "")).strip():
                        raise ProfileParseError(f"{path}:{i}: missing {col}")
                    d[col] = row[col]
            rows.append(_profile_from_dict(d))
    return rows


def memory_footprint(model: ModelConfig, batch_size: int, context_tokens: int,
                     kv_bytes_per_token: float) -> float:
    """Analytic memory estimate in GB: weights plus a linear KV-cache term.

    Weights take param_count * bytes_per_param GB; the KV cache grows as
    batch * context * kv_bytes_per_token, where the coefficient folds in
    every layer's key/value width.  Only an opt-in fallback for
    configurations with no measured entry; measured OOM flags always win.
    """
    if batch_size < 0 or context_tokens < 0 or kv_bytes_per_token < 0:
        raise ValueError("memory footprint arguments must be non-negative")
    weights_gb = model.param_count * model.bytes_per_param
    kv_gb = batch_size * context_tokens * kv_bytes_per_token / 1e9
    return weights_gb + kv_gb


def exceeds_memory(spec: GpuSpec, model: ModelConfig, batch_size: int,
                   context_tokens: int, kv_bytes_per_token: float) -> bool:
    """True when the analytic footprint is over the GPU's onboard capacity."""
    return memory_footprint(model, batch_size, context_tokens,
                            kv_bytes_per_token) > spec.memory_capacity


def load_bundled_profiles() -> ProfileSet:
    """The profile dataset shipped with the package."""
    text = resources.files("carbonserve.data").joinpath("bundled_profiles.json").read_text(
        encoding="utf-8")
    return load_profile_set_text(text)
