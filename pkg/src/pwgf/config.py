"""Declarative run configuration: strict parsing, canonical JSON, presets.

Unknown keys are rejected (fail-closed) and every constraint violation names
the offending dotted key.  ``parse -> serialize -> parse`` is the identity.

Presets bundle the experimental settings of the built-in scenarios at full
scale; ``<name>-ci`` variants cut the sample count by 10x (and the step
count where the scenario's time span allows) so the acceptance suite runs
on one CPU in minutes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .energy import (EnergyFunctional, InteractionEnergy, LinearPotentialEnergy,
                     PmeEnergy, RelativeEntropyEnergy, get_potential)
from .errors import ConfigurationError
from .flow import RESAMPLING_POLICIES, FlowOptions
from .maps import AffineMap, PlanarFlowStack, PushforwardMap, ResidualMLP
from .numerics import Component, ReferenceDensity, SamplerSpec
from .oracles import ZkbProfile, ZkbReference

ARCHITECTURES = ("affine", "planar-flow-stack", "residual-mlp")
ENERGY_KINDS = ("relative-entropy", "pme-internal", "interaction", "linear-potential")
REFERENCE_KINDS = ("gaussian", "gaussian-mixture", "uniform-box", "mixed", "zkb")


# ---------------------------------------------------------------------------
# Config dataclasses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MapConfig:
    architecture: str
    layers: int = 40                    # planar stack depth
    hidden: Tuple[int, ...] = (100, 100, 100)  # residual MLP widths
    seed: Optional[int] = None          # init stream; derived from global if None


@dataclass(frozen=True)
class ReferenceConfig:
    kind: str
    components: Tuple[dict, ...] = ()
    m: Optional[float] = None           # zkb kind only
    t0: Optional[float] = None
    seed: Optional[int] = None


@dataclass(frozen=True)
class EnergyConfig:
    kind: str
    potential: str = "quadratic"
    diffusion: float = 1.0
    m: float = 2.0
    kernel_a: float = 4.0
    kernel_b: float = 2.0


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "euler"
    h: float = 0.005
    steps: int = 100
    resampling: str = "frozen-per-step"
    deterministic: bool = True


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 3e-4
    max_iter: Optional[int] = None      # None: 2 * n_params at solve time


@dataclass(frozen=True)
class SamplingConfig:
    n_metric: int = 1000
    n_energy: Optional[int] = None      # None: share the metric batch
    snapshot_n: int = 5000


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    dim: int
    map: MapConfig
    reference: ReferenceConfig
    energy: EnergyConfig
    integrator: IntegratorConfig = IntegratorConfig()
    solver: SolverConfig = SolverConfig()
    sampling: SamplingConfig = SamplingConfig()
    snapshot_times: Tuple[float, ...] = ()
    output_dir: str = "out"
    seed: int = 0


# ---------------------------------------------------------------------------
# Strict dict -> dataclass parsing
# ---------------------------------------------------------------------------

class _Section:
    """Pops typed values out of a dict, tracking the dotted path for errors."""

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path or 'config'}: expected an object")
        self.data = dict(data)
        self.path = path

    def _key(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def take(self, name, kind, default=..., allow_none=False):
        if name not in self.data:
            if default is ...:
                raise ConfigurationError(f"missing required key '{self._key(name)}'")
            return default
        val = self.data.pop(name)
        if val is None and allow_none:
            return None
        if kind is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if kind is int and isinstance(val, bool):
            raise ConfigurationError(f"'{self._key(name)}' must be an integer")
        if not isinstance(val, kind):
            raise ConfigurationError(
                f"'{self._key(name)}' has wrong type: expected {kind.__name__}, "
                f"got {type(val).__name__}")
        return val

    def finish(self):
        if self.data:
            extra = sorted(self.data)
            raise ConfigurationError(
                f"unknown key '{self._key(extra[0])}'"
                + (f" (and {len(extra) - 1} more)" if len(extra) > 1 else ""))


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigurationError(msg)


def _number_tuple(val, path) -> Tuple[float, ...]:
    if not isinstance(val, (list, tuple)) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in val):
        raise ConfigurationError(f"'{path}' must be a list of numbers")
    return tuple(float(x) for x in val)


def _int_tuple(val, path) -> Tuple[int, ...]:
    if not isinstance(val, (list, tuple)) or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in val):
        raise ConfigurationError(f"'{path}' must be a list of integers")
    return tuple(int(x) for x in val)


def config_from_dict(data: dict) -> RunConfig:
    top = _Section(data, "")
    scenario = top.take("scenario", str)
    dim = top.take("dim", int)
    _require(dim >= 1, "dim must be >= 1")

    ms = _Section(top.take("map", dict), "map")
    arch = ms.take("architecture", str)
    _require(arch in ARCHITECTURES,
             f"map.architecture must be one of {ARCHITECTURES}, got {arch!r}")
    layers = ms.take("layers", int, default=40)
    _require(layers >= 1, "map.layers must be >= 1")
    hidden_raw = ms.take("hidden", (list, tuple), default=(100, 100, 100))
    hidden = _int_tuple(hidden_raw, "map.hidden")
    _require(all(h >= 1 for h in hidden), "map.hidden widths must be >= 1")
    map_seed = ms.take("seed", int, default=None, allow_none=True)
    ms.finish()
    map_cfg = MapConfig(arch, layers, hidden, map_seed)

    rs = _Section(top.take("reference", dict), "reference")
    rkind = rs.take("kind", str)
    _require(rkind in REFERENCE_KINDS,
             f"reference.kind must be one of {REFERENCE_KINDS}, got {rkind!r}")
    comps_raw = rs.take("components", (list, tuple), default=())
    comps = []
    for i, c in enumerate(comps_raw):
        cs = _Section(c, f"reference.components[{i}]")
        ckind = cs.take("kind", str)
        comp = {"kind": ckind, "weight": cs.take("weight", float)}
        if ckind == "gaussian":
            comp["mean"] = list(_number_tuple(cs.take("mean", (list, tuple)),
                                              f"reference.components[{i}].mean"))
            comp["std"] = list(_number_tuple(cs.take("std", (list, tuple)),
                                             f"reference.components[{i}].std"))
        elif ckind == "uniform":
            comp["low"] = list(_number_tuple(cs.take("low", (list, tuple)),
                                             f"reference.components[{i}].low"))
            comp["high"] = list(_number_tuple(cs.take("high", (list, tuple)),
                                              f"reference.components[{i}].high"))
        else:
            raise ConfigurationError(
                f"reference.components[{i}].kind must be 'gaussian' or 'uniform'")
        cs.finish()
        comps.append(comp)
    zkb_m = rs.take("m", float, default=None, allow_none=True)
    zkb_t0 = rs.take("t0", float, default=None, allow_none=True)
    ref_seed = rs.take("seed", int, default=None, allow_none=True)
    rs.finish()
    if rkind == "zkb":
        _require(zkb_m is not None and zkb_t0 is not None,
                 "reference.m and reference.t0 are required for kind 'zkb'")
        _require(zkb_t0 > 0, "reference.t0 must be > 0")
        _require(not comps, "reference.components must be empty for kind 'zkb'")
    else:
        _require(bool(comps), "reference.components must be nonempty")
    ref_cfg = ReferenceConfig(rkind, tuple(comps), zkb_m, zkb_t0, ref_seed)

    es = _Section(top.take("energy", dict), "energy")
    ekind = es.take("kind", str)
    _require(ekind in ENERGY_KINDS,
             f"energy.kind must be one of {ENERGY_KINDS}, got {ekind!r}")
    energy_cfg = EnergyConfig(
        kind=ekind,
        potential=es.take("potential", str, default="quadratic"),
        diffusion=es.take("diffusion", float, default=1.0),
        m=es.take("m", float, default=2.0),
        kernel_a=es.take("kernel_a", float, default=4.0),
        kernel_b=es.take("kernel_b", float, default=2.0))
    es.finish()
    _require(energy_cfg.diffusion > 0, "energy.diffusion must be > 0")
    _require(energy_cfg.m > 1, "energy.m must exceed 1")
    _require(energy_cfg.kernel_a > energy_cfg.kernel_b > 0,
             "energy kernel exponents must satisfy a > b > 0")
    get_potential(energy_cfg.potential)  # validates the name

    its = _Section(top.take("integrator", dict, default={}), "integrator")
    integ_cfg = IntegratorConfig(
        method=its.take("method", str, default="euler"),
        h=its.take("h", float, default=0.005),
        steps=its.take("steps", int, default=100),
        resampling=its.take("resampling", str, default="frozen-per-step"),
        deterministic=its.take("deterministic", bool, default=True))
    its.finish()
    _require(integ_cfg.method in ("euler", "rk4"),
             "integrator.method must be 'euler' or 'rk4'")
    _require(integ_cfg.h > 0, "integrator.h must be > 0")
    _require(integ_cfg.steps >= 0, "integrator.steps must be >= 0")
    _require(integ_cfg.resampling in RESAMPLING_POLICIES,
             f"integrator.resampling must be one of {RESAMPLING_POLICIES}")

    ss = _Section(top.take("solver", dict, default={}), "solver")
    solver_cfg = SolverConfig(
        tol=ss.take("tol", float, default=3e-4),
        max_iter=ss.take("max_iter", int, default=None, allow_none=True))
    ss.finish()
    _require(solver_cfg.tol > 0, "solver.tol must be > 0")
    _require(solver_cfg.max_iter is None or solver_cfg.max_iter >= 1,
             "solver.max_iter must be >= 1")

    ps = _Section(top.take("sampling", dict, default={}), "sampling")
    sampling_cfg = SamplingConfig(
        n_metric=ps.take("n_metric", int, default=1000),
        n_energy=ps.take("n_energy", int, default=None, allow_none=True),
        snapshot_n=ps.take("snapshot_n", int, default=5000))
    ps.finish()
    _require(sampling_cfg.n_metric >= 1, "sampling.n_metric must be >= 1")
    _require(sampling_cfg.n_energy is None or sampling_cfg.n_energy >= 1,
             "sampling.n_energy must be >= 1")
    _require(sampling_cfg.snapshot_n >= 1, "sampling.snapshot_n must be >= 1")

    snap_raw = top.take("snapshot_times", (list, tuple), default=())
    snapshot_times = _number_tuple(snap_raw, "snapshot_times")
    output_dir = top.take("output_dir", str, default="out")
    seed = top.take("seed", int, default=0)
    top.finish()

    return RunConfig(scenario=scenario, dim=dim, map=map_cfg, reference=ref_cfg,
                     energy=energy_cfg, integrator=integ_cfg, solver=solver_cfg,
                     sampling=sampling_cfg, snapshot_times=snapshot_times,
                     output_dir=output_dir, seed=seed)


def config_to_dict(cfg: RunConfig) -> dict:
    ref: dict = {"kind": cfg.reference.kind}
    if cfg.reference.kind == "zkb":
        ref["m"] = cfg.reference.m
        ref["t0"] = cfg.reference.t0
    else:
        ref["components"] = [dict(c) for c in cfg.reference.components]
    if cfg.reference.seed is not None:
        ref["seed"] = cfg.reference.seed
    mp: dict = {"architecture": cfg.map.architecture}
    if cfg.map.architecture == "planar-flow-stack":
        mp["layers"] = cfg.map.layers
    if cfg.map.architecture == "residual-mlp":
        mp["hidden"] = list(cfg.map.hidden)
    if cfg.map.seed is not None:
        mp["seed"] = cfg.map.seed
    en: dict = {"kind": cfg.energy.kind}
    if cfg.energy.kind in ("relative-entropy", "linear-potential"):
        en["potential"] = cfg.energy.potential
    if cfg.energy.kind == "relative-entropy":
        en["diffusion"] = cfg.energy.diffusion
    if cfg.energy.kind == "pme-internal":
        en["m"] = cfg.energy.m
    if cfg.energy.kind == "interaction":
        en["kernel_a"] = cfg.energy.kernel_a
        en["kernel_b"] = cfg.energy.kernel_b
    out = {
        "scenario": cfg.scenario,
        "dim": cfg.dim,
        "map": mp,
        "reference": ref,
        "energy": en,
        "integrator": {
            "method": cfg.integrator.method,
            "h": cfg.integrator.h,
            "steps": cfg.integrator.steps,
            "resampling": cfg.integrator.resampling,
            "deterministic": cfg.integrator.deterministic,
        },
        "solver": {"tol": cfg.solver.tol, "max_iter": cfg.solver.max_iter},
        "sampling": {
            "n_metric": cfg.sampling.n_metric,
            "n_energy": cfg.sampling.n_energy,
            "snapshot_n": cfg.sampling.snapshot_n,
        },
        "snapshot_times": list(cfg.snapshot_times),
        "output_dir": cfg.output_dir,
        "seed": cfg.seed,
    }
    return out


def serialize_config(cfg: RunConfig) -> str:
    """Canonical on-disk encoding: sorted keys, two-space indent, newline-terminated."""
    return json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n"


def parse_config(text_or_path) -> RunConfig:
    """Parse a JSON config from a path or inline text."""
    text = text_or_path
    if "\n" not in str(text_or_path) and not str(text_or_path).lstrip().startswith("{"):
        with open(text_or_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    if not str(text).strip():
        raise ConfigurationError("config text is empty")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(data)


def apply_overrides(data: dict, assignments: Sequence[str]) -> dict:
    """Apply ``--set dotted.key=value`` overrides to a raw config dict.

    Values parse as JSON (so numbers, booleans and lists work); anything that
    fails to parse is taken as a bare string.
    """
    out = json.loads(json.dumps(data))  # deep copy
    for item in assignments:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = value
    return out


# ---------------------------------------------------------------------------
# Builders: config -> runtime objects
# ---------------------------------------------------------------------------

def build_map(cfg: RunConfig) -> PushforwardMap:
    seed = cfg.map.seed if cfg.map.seed is not None else cfg.seed + 1
    arch = cfg.map.architecture
    if arch == "affine":
        return AffineMap.identity(cfg.dim)
    if arch == "planar-flow-stack":
        return PlanarFlowStack.identity(cfg.dim, cfg.map.layers, seed=seed)
    return ResidualMLP.identity(cfg.dim, cfg.map.hidden, seed=seed)


def build_reference(cfg: RunConfig) -> ReferenceDensity:
    seed = cfg.reference.seed if cfg.reference.seed is not None else cfg.seed + 2
    if cfg.reference.kind == "zkb":
        profile = ZkbProfile(cfg.dim, cfg.reference.m)
        return ZkbReference(profile, cfg.reference.t0, seed=seed)
    comps = tuple(
        Component(weight=c["weight"], kind=c["kind"],
                  mean=tuple(c["mean"]) if "mean" in c else None,
                  std=tuple(c["std"]) if "std" in c else None,
                  low=tuple(c["low"]) if "low" in c else None,
                  high=tuple(c["high"]) if "high" in c else None)
        for c in cfg.reference.components)
    return SamplerSpec(kind=cfg.reference.kind, dim=cfg.dim,
                       components=comps, seed=seed).build()


def build_energy(cfg: RunConfig) -> EnergyFunctional:
    e = cfg.energy
    if e.kind == "relative-entropy":
        return RelativeEntropyEnergy(get_potential(e.potential), e.diffusion)
    if e.kind == "pme-internal":
        return PmeEnergy(e.m)
    if e.kind == "interaction":
        return InteractionEnergy(e.kernel_a, e.kernel_b)
    return LinearPotentialEnergy(get_potential(e.potential))


def build_flow_options(cfg: RunConfig) -> FlowOptions:
    return FlowOptions(
        h=cfg.integrator.h, steps=cfg.integrator.steps,
        method=cfg.integrator.method, resampling=cfg.integrator.resampling,
        n_metric=cfg.sampling.n_metric, n_energy=cfg.sampling.n_energy,
        solver_tol=cfg.solver.tol, solver_max_iter=cfg.solver.max_iter,
        seed=cfg.seed, snapshot_times=cfg.snapshot_times,
        snapshot_n=cfg.sampling.snapshot_n,
        deterministic=cfg.integrator.deterministic)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_SQRT_06 = math.sqrt(0.6)


def _gaussian_ref(mean, std) -> dict:
    return {"kind": "gaussian",
            "components": [{"kind": "gaussian", "weight": 1.0,
                            "mean": list(mean), "std": list(std)}]}


def _preset_dicts() -> dict:
    d = {}

    d["fpe-ou"] = {
        "scenario": "fpe-ou", "dim": 2,
        "map": {"architecture": "affine"},
        "reference": _gaussian_ref([1.0, 1.0], [1.0, 1.0]),
        "energy": {"kind": "relative-entropy", "potential": "quadratic",
                   "diffusion": 1.0},
        "integrator": {"method": "euler", "h": 0.005, "steps": 200},
        "sampling": {"n_metric": 4000, "snapshot_n": 5000},
        "snapshot_times": [0.0, 1.0],
        "seed": 1234,
    }

    d["fpe-styblinski"] = {
        "scenario": "fpe-styblinski", "dim": 2,
        "map": {"architecture": "planar-flow-stack", "layers": 40},
        "reference": _gaussian_ref([0.0, 0.0], [1.0, 1.0]),
        "energy": {"kind": "relative-entropy", "potential": "styblinski-tang",
                   "diffusion": 1.0},
        "integrator": {"method": "euler", "h": 0.005, "steps": 300},
        "sampling": {"n_metric": 4000, "snapshot_n": 2000},
        "snapshot_times": [0.0, 0.3, 0.6, 0.9, 1.2, 1.5],
        "seed": 1234,
    }

    # porous-medium runs start at t0 with the exact profile as reference;
    # snapshot times are run-clock (physical time = t0 + t)
    d["pme-zkb-d2"] = {
        "scenario": "pme-zkb-d2", "dim": 2,
        "map": {"architecture": "residual-mlp", "hidden": [100, 100, 100]},
        "reference": {"kind": "zkb", "m": 2.4, "t0": 0.1},
        "energy": {"kind": "pme-internal", "m": 2.4},
        "integrator": {"method": "euler", "h": 1e-4, "steps": 5000},
        "sampling": {"n_metric": 30000, "snapshot_n": 5000},
        "snapshot_times": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        "seed": 1234,
    }

    d["pme-zkb-d5"] = {
        "scenario": "pme-zkb-d5", "dim": 5,
        "map": {"architecture": "residual-mlp", "hidden": [100, 100, 100]},
        "reference": {"kind": "zkb", "m": 3.0, "t0": 1.0},
        "energy": {"kind": "pme-internal", "m": 3},
        "integrator": {"method": "euler", "h": 1e-4, "steps": 5000},
        "sampling": {"n_metric": 30000, "snapshot_n": 5000},
        "snapshot_times": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        "seed": 1234,
    }

    d["pme-zkb-d15"] = {
        "scenario": "pme-zkb-d15", "dim": 15,
        "map": {"architecture": "residual-mlp", "hidden": [100, 100, 100]},
        "reference": {"kind": "zkb", "m": 2.0, "t0": 1.0},
        "energy": {"kind": "pme-internal", "m": 2},
        "integrator": {"method": "euler", "h": 1e-4, "steps": 5000},
        "sampling": {"n_metric": 30000, "snapshot_n": 5000},
        "snapshot_times": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        "seed": 1234,
    }

    d["pme-gaussian-mixture"] = {
        "scenario": "pme-gaussian-mixture", "dim": 10,
        "map": {"architecture": "residual-mlp", "hidden": [100, 100, 100]},
        "reference": {"kind": "gaussian-mixture", "components": [
            {"kind": "gaussian", "weight": 0.2,
             "mean": [0.0] * 10, "std": [0.1] * 10},
            {"kind": "gaussian", "weight": 0.8,
             "mean": [2.0] * 10, "std": [0.2] * 10},
        ]},
        "energy": {"kind": "pme-internal", "m": 3},
        "integrator": {"method": "euler", "h": 1e-3, "steps": 4000},
        "sampling": {"n_metric": 15000, "snapshot_n": 5000},
        "snapshot_times": [0.0, 2.0, 4.0],
        "seed": 1234,
    }

    d["pme-mixed"] = {
        "scenario": "pme-mixed", "dim": 5,
        "map": {"architecture": "residual-mlp", "hidden": [100, 100, 100]},
        "reference": {"kind": "mixed", "components": [
            {"kind": "gaussian", "weight": 0.2,
             "mean": [2.0] * 5, "std": [0.1] * 5},
            {"kind": "uniform", "weight": 0.8,
             "low": [-1.0] * 5, "high": [1.0] * 5},
        ]},
        "energy": {"kind": "pme-internal", "m": 3},
        "integrator": {"method": "euler", "h": 1e-3, "steps": 4000},
        "sampling": {"n_metric": 20000, "snapshot_n": 5000},
        "snapshot_times": [0.0, 2.0, 4.0],
        "seed": 1234,
    }

    d["aggregation"] = {
        "scenario": "aggregation", "dim": 2,
        "map": {"architecture": "residual-mlp", "hidden": [50, 50]},
        "reference": _gaussian_ref([1.25, 1.25], [_SQRT_06, _SQRT_06]),
        "energy": {"kind": "interaction", "kernel_a": 4.0, "kernel_b": 2.0},
        "integrator": {"method": "euler", "h": 0.01, "steps": 1500},
        "sampling": {"n_metric": 10000, "snapshot_n": 5000},
        "snapshot_times": [0.0, 3.0, 6.0, 9.0, 12.0, 15.0],
        "seed": 1234,
    }

    # ci variants: sample count / 10; step count reduced only where the
    # scenario's physical time span survives (pme rescales h instead,
    # aggregation must still reach t = 15)
    def ci(name, **changes):
        base = json.loads(json.dumps(d[name]))
        base["scenario"] = name + "-ci"
        base["sampling"]["n_metric"] = max(base["sampling"]["n_metric"] // 10, 100)
        base["sampling"]["snapshot_n"] = min(base["sampling"]["snapshot_n"], 2000)
        for key, val in changes.items():
            node = base
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = val
        d[name + "-ci"] = base

    ci("fpe-ou", **{"integrator.steps": 20})
    ci("fpe-styblinski", **{"integrator.steps": 30})
    ci("pme-zkb-d2", **{"integrator.h": 1e-3, "integrator.steps": 500})
    ci("pme-zkb-d5", **{"integrator.h": 1e-3, "integrator.steps": 500})
    ci("pme-zkb-d15", **{"integrator.h": 1e-3, "integrator.steps": 500})
    ci("pme-gaussian-mixture", **{"integrator.steps": 400})
    ci("pme-mixed", **{"integrator.steps": 400})
    ci("aggregation")
    return d


PRESETS = _preset_dicts()


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return json.loads(json.dumps(PRESETS[name]))


def preset_config(name: str) -> RunConfig:
    return config_from_dict(preset_dict(name))
