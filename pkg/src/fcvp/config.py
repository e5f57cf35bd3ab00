"""INI experiment configuration: parsing, validation, and the fully-resolved dump."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .clothsim import PRESETS, ClothParams, SleeveTopology
from .env import EpisodeConfig
from .geometry import ArmPoseSpec, PoseRegion
from .policy import CemConfig

METHODS = ("fcvp", "vision_only", "vision_random", "force_only", "multimodal", "force_residual")


class ConfigError(ValueError):
    pass


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.replace(",", " ").split()]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.replace(",", " ").split()]


def _words(s: str) -> list[str]:
    return s.replace(",", " ").split()


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class Garment:
    name: str
    topology: SleeveTopology


@dataclass
class EnvSettings:
    translation_scale: float = 0.015
    rotation_scale: float = 0.05
    n_garment_points: int = 32
    n_arm_points: int = 24
    start_depth: float = 0.02
    lateral_noise: float = 0.01


@dataclass
class NetSettings:
    encoder_sizes: tuple = (16, 16)
    head_sizes: tuple = (16,)


@dataclass
class ForceModelSettings:
    encoder_sizes: tuple = (16, 32)
    head_sizes: tuple = (32,)
    epochs: int = 300
    lr: float = 5e-4
    batch_size: int = 64
    patience: int = 25  # 0 disables early stopping
    trajectories: int = 80
    collect_history: int = 7  # history stored in the dataset; models re-window it


@dataclass
class FinetuneSettings:
    w: float = 0.01
    population: int = 16
    elite_frac: float = 0.25
    iterations: int = 4
    eval_episodes: int = 2
    init_param_std: float = 0.05

    def cem(self) -> CemConfig:
        return CemConfig(self.population, self.elite_frac, self.iterations, self.eval_episodes,
                         self.init_param_std)


@dataclass
class ExperimentConfig:
    pose_regions: list[PoseRegion]
    garments: list[Garment]
    sim_a: ClothParams = field(default_factory=lambda: PRESETS["sim_a"])
    sim_b: ClothParams = field(default_factory=lambda: PRESETS["sim_b"])
    methods: list[str] = field(default_factory=lambda: ["fcvp", "vision_only", "force_only"])
    seeds: list[int] = field(default_factory=lambda: [0, 1])
    tau: float = 80.0  # constraint threshold used by the controllers
    eval_tau: float = 80.0  # threshold used by the violation metric
    p: float = 0.1
    N: int = 5
    K: int = 64
    T: int = 60
    skip_steps: int = 25
    ablation_Ns: list[int] = field(default_factory=lambda: [3, 5, 7])
    cone_half_angle: float = float(np.pi / 4)
    resample_budget: int = 0
    base_seed: int = 0
    sigma: float = 0.3
    env: EnvSettings = field(default_factory=EnvSettings)
    policy_net: NetSettings = field(default_factory=NetSettings)
    cem: CemConfig = field(default_factory=lambda: CemConfig(16, 0.25, 8, 2, 0.1))
    force_model: ForceModelSettings = field(default_factory=ForceModelSettings)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)

    def validate(self) -> ExperimentConfig:
        if not self.pose_regions:
            raise ConfigError("at least one [region:...] section is required")
        if not self.garments:
            raise ConfigError("at least one [garment:...] section is required")
        if not self.methods:
            raise ConfigError("no methods configured")
        if not self.seeds:
            raise ConfigError("no seeds configured")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if len(set(r.name for r in self.pose_regions)) != len(self.pose_regions):
            raise ConfigError("duplicate region names")
        if len(set(g.name for g in self.garments)) != len(self.garments):
            raise ConfigError("duplicate garment names")
        if not (self.tau > 0 and self.eval_tau > 0):
            raise ConfigError("tau must be positive")
        if not 0 <= self.p <= 1:
            raise ConfigError("p must lie in [0, 1]")
        if self.K < 1 or self.N < 1 or any(n < 1 for n in self.ablation_Ns):
            raise ConfigError("K and N must be >= 1")
        if self.T <= self.skip_steps:
            raise ConfigError(f"T={self.T} must exceed skip_steps={self.skip_steps}")
        if max([self.N, *self.ablation_Ns]) > self.force_model.collect_history:
            raise ConfigError("collect_history must cover N and every ablation N")
        return self

    def episode(self, region_index: int, garment_index: int, params: ClothParams,
                rng: np.random.Generator) -> EpisodeConfig:
        region = self.pose_regions[region_index]
        garment = self.garments[garment_index]
        spec: ArmPoseSpec = region.sample(rng)
        e = self.env
        return EpisodeConfig(spec, params, garment.topology, self.T, self.eval_tau,
                             int(rng.integers(2**31)), e.translation_scale, e.rotation_scale,
                             e.n_garment_points, e.n_arm_points, e.start_depth,
                             e.lateral_noise, region.name, garment.name)

    def cells(self):
        for ri in range(len(self.pose_regions)):
            for gi in range(len(self.garments)):
                yield ri, gi

    # --- INI ----------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {
            "methods": _fmt(self.methods), "seeds": _fmt(self.seeds), "tau": _fmt(self.tau),
            "eval_tau": _fmt(self.eval_tau), "p": _fmt(self.p), "N": _fmt(self.N),
            "K": _fmt(self.K), "T": _fmt(self.T), "skip_steps": _fmt(self.skip_steps),
            "ablation_Ns": _fmt(self.ablation_Ns), "cone_half_angle": _fmt(self.cone_half_angle),
            "resample_budget": _fmt(self.resample_budget), "base_seed": _fmt(self.base_seed),
        }
        for name, params in (("sim_a", self.sim_a), ("sim_b", self.sim_b)):
            cp[name] = {k: _fmt(v) for k, v in params.to_dict().items()}
        cp["env"] = {f.name: _fmt(getattr(self.env, f.name)) for f in fields(self.env)}
        cp["policy"] = {"encoder_sizes": _fmt(self.policy_net.encoder_sizes),
                        "head_sizes": _fmt(self.policy_net.head_sizes),
                        "sigma": _fmt(self.sigma),
                        **{k: _fmt(v) for k, v in self.cem.to_dict().items()}}
        cp["force_model"] = {f.name: _fmt(getattr(self.force_model, f.name))
                             for f in fields(self.force_model)}
        cp["finetune"] = {f.name: _fmt(getattr(self.finetune, f.name))
                          for f in fields(self.finetune)}
        for r in self.pose_regions:
            cp[f"region:{r.name}"] = {f.name: _fmt(getattr(r, f.name))
                                      for f in fields(ArmPoseSpec)}
        for g in self.garments:
            cp[f"garment:{g.name}"] = {f.name: _fmt(getattr(g.topology, f.name))
                                       for f in fields(SleeveTopology)}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / "resolved_config.ini"
        path.write_text(self.to_ini())
        return path


_EXPERIMENT_KEYS = {"methods", "seeds", "tau", "eval_tau", "p", "n", "k", "t", "skip_steps",
                    "ablation_ns", "cone_half_angle", "resample_budget", "base_seed"}


def _check_keys(section, allowed, name):
    extra = set(section.keys()) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(extra)}")


def _sim_params(cp, name) -> ClothParams:
    if not cp.has_section(name):
        return PRESETS[name]
    sec = cp[name]
    preset = sec.get("preset", name)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} in [{name}]")
    _check_keys(sec, {"preset", *(f.name for f in fields(ClothParams))}, name)
    base = PRESETS[preset].to_dict()
    base.update({k: v for k, v in sec.items() if k != "preset"})
    return ClothParams.from_dict(base)


def _region(name, sec) -> PoseRegion:
    keys = [f.name for f in fields(ArmPoseSpec)]
    _check_keys(sec, keys, f"region:{name}")
    kw = {}
    for k in keys:
        if k not in sec:
            raise ConfigError(f"[region:{name}] is missing {k}")
        vals = _floats(sec[k])
        if len(vals) == 1:
            vals = vals * 2
        if len(vals) != 2:
            raise ConfigError(f"[region:{name}] {k} needs 'low high'")
        kw[k] = tuple(vals)
    return PoseRegion(name, **kw)


def _garment(name, sec) -> Garment:
    keys = {f.name: f.type for f in fields(SleeveTopology)}
    _check_keys(sec, keys, f"garment:{name}")
    kw = {k: (int(v) if k in ("rings", "circumference") else float(v)) for k, v in sec.items()}
    return Garment(name, SleeveTopology(**kw))


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
        return _build(cp)
    except ConfigError:
        raise
    except (configparser.Error, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def _build(cp: configparser.ConfigParser) -> ExperimentConfig:
    known = {"experiment", "sim_a", "sim_b", "env", "policy", "force_model", "finetune"}
    for sec in cp.sections():
        if sec not in known and not sec.startswith(("region:", "garment:")):
            raise ConfigError(f"unknown section [{sec}]")
    regions = [_region(s.split(":", 1)[1], cp[s]) for s in cp.sections() if s.startswith("region:")]
    garments = [_garment(s.split(":", 1)[1], cp[s]) for s in cp.sections()
                if s.startswith("garment:")]
    cfg = ExperimentConfig(regions, garments)
    if cp.has_section("experiment"):
        ex = cp["experiment"]
        _check_keys(ex, _EXPERIMENT_KEYS, "experiment")
        if "methods" in ex:
            cfg.methods = _words(ex["methods"])
        if "seeds" in ex:
            cfg.seeds = _ints(ex["seeds"])
        if "ablation_ns" in ex:
            cfg.ablation_Ns = _ints(ex["ablation_ns"])
        for key, attr, conv in (("tau", "tau", float), ("eval_tau", "eval_tau", float),
                                ("p", "p", float), ("n", "N", int), ("k", "K", int),
                                ("t", "T", int), ("skip_steps", "skip_steps", int),
                                ("cone_half_angle", "cone_half_angle", float),
                                ("resample_budget", "resample_budget", int),
                                ("base_seed", "base_seed", int)):
            if key in ex:
                setattr(cfg, attr, conv(ex[key]))
        if "tau" in ex and "eval_tau" not in ex:
            cfg.eval_tau = cfg.tau
    cfg.sim_a = _sim_params(cp, "sim_a")
    cfg.sim_b = _sim_params(cp, "sim_b")
    if cp.has_section("env"):
        sec = cp["env"]
        _check_keys(sec, [f.name for f in fields(EnvSettings)], "env")
        for f in fields(EnvSettings):
            if f.name in sec:
                setattr(cfg.env, f.name, (int if f.type in ("int", int) else float)(sec[f.name]))
    if cp.has_section("policy"):
        sec = cp["policy"]
        cem_keys = list(CemConfig().to_dict())
        _check_keys(sec, ["encoder_sizes", "head_sizes", "sigma", *cem_keys], "policy")
        if "encoder_sizes" in sec:
            cfg.policy_net.encoder_sizes = tuple(_ints(sec["encoder_sizes"]))
        if "head_sizes" in sec:
            cfg.policy_net.head_sizes = tuple(_ints(sec["head_sizes"]))
        if "sigma" in sec:
            cfg.sigma = float(sec["sigma"])
        kw = cfg.cem.to_dict()
        for k in cem_keys:
            if k in sec:
                if isinstance(kw[k], bool):
                    kw[k] = sec.getboolean(k)
                elif isinstance(kw[k], int):
                    kw[k] = int(float(sec[k]))
                else:
                    kw[k] = float(sec[k])
        cfg.cem = CemConfig(**kw)
    if cp.has_section("force_model"):
        sec = cp["force_model"]
        _check_keys(sec, [f.name for f in fields(ForceModelSettings)], "force_model")
        fm = cfg.force_model
        for f in fields(ForceModelSettings):
            if f.name not in sec:
                continue
            if f.name in ("encoder_sizes", "head_sizes"):
                setattr(fm, f.name, tuple(_ints(sec[f.name])))
            elif f.name == "lr":
                fm.lr = float(sec[f.name])
            else:
                setattr(fm, f.name, int(sec[f.name]))
    if cp.has_section("finetune"):
        sec = cp["finetune"]
        _check_keys(sec, [f.name for f in fields(FinetuneSettings)], "finetune")
        ft = cfg.finetune
        for f in fields(FinetuneSettings):
            if f.name in sec:
                cur = getattr(ft, f.name)
                setattr(ft, f.name, int(sec[f.name]) if isinstance(cur, int) else float(sec[f.name]))
    return cfg.validate()
