"""Experiment pipelines: policy training, data collection, evaluation grid, ablation, report."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import controllers as ctl
from .config import ExperimentConfig
from .env import Trajectory, arm_dressed_ratio, average_force_violation, run_episode
from .force_model import ForceModel, collect_dataset, mixture_sample, train_force_model
from .policy import GaussianPolicy, ScriptedPolicy, train_policy_cem
from .records import deserialize_trajectory, serialize_trajectory

log = logging.getLogger(__name__)

RESULT_FIELDS = ("method", "N", "pose_region", "garment_id", "seed", "dressed_ratio",
                 "avg_violation", "episode_fault")


class PipelineError(RuntimeError):
    pass


class EpisodeFactory:
    """Cycles through (region, garment) cells, drawing a fresh arm pose each call."""

    def __init__(self, config: ExperimentConfig, params):
        self.config, self.params = config, params
        self.cells = list(config.cells())
        self.count = 0

    def __call__(self, rng: np.random.Generator):
        ri, gi = self.cells[self.count % len(self.cells)]
        self.count += 1
        return self.config.episode(ri, gi, self.params, rng)


# --- training ---------------------------------------------------------

def train_vision_policy(config: ExperimentConfig, seed: int):
    rng = np.random.default_rng([seed, 0])
    net = config.policy_net
    policy = GaussianPolicy.create(rng, net.encoder_sizes, net.head_sizes, config.sigma)
    return train_policy_cem(EpisodeFactory(config, config.sim_a), config.cem, [seed, 1],
                            policy, history_len=config.N)


def finetune_policy(config: ExperimentConfig, base: GaussianPolicy, method: str, seed: int):
    """Build the multimodal or residual variant from ``base`` and tune it in sim B."""
    rng = np.random.default_rng([seed, 2])
    if method == "multimodal":
        policy = ctl.MultimodalPolicy.from_vision(base, config.N, rng)
    elif method == "force_residual":
        policy = ctl.ResidualPolicy.create(base, config.N, rng)
    else:
        raise PipelineError(f"{method!r} is not a fine-tuned method")
    ft = config.finetune
    return ctl.train_multimodal_finetune(policy, EpisodeFactory(config, config.sim_b),
                                         config.tau, ft.w, ft.cem(), [seed, 3], config.N)


def collect(config: ExperimentConfig, policy, seed: int):
    """Mixture-sampled sim B rollouts; ``policy=None`` uses the scripted straight-line policy."""
    if policy is None:
        def policy_for(env):
            return ScriptedPolicy.for_arm(env.arm, sigma=config.sigma)
    else:
        def policy_for(env):
            return policy
    fm = config.force_model
    return collect_dataset(EpisodeFactory(config, config.sim_b), policy_for, fm.trajectories,
                           config.p, fm.collect_history, [seed, 4])


def fit_force_model(config: ExperimentConfig, samples, N: int, seed: int):
    fm = config.force_model
    return train_force_model(samples, N, fm.epochs, fm.lr, seed, fm.patience or None,
                             fm.batch_size, fm.encoder_sizes, fm.head_sizes)


# --- evaluation -------------------------------------------------------

def make_controller(method: str, config: ExperimentConfig, models: dict, N: int,
                    rng: np.random.Generator):
    """``act(obs, env, history) -> (action, diagnostics)`` for one evaluated method."""

    def need(name):
        if name not in models:
            raise PipelineError(f"method {method!r} needs a {name!r} checkpoint")
        return models[name]

    if method == "fcvp":
        policy, fm = need("policy"), need("force_model")
        fc = ctl.FcvpConfig(config.K, config.tau, config.p, N, config.resample_budget)
        return lambda o, env, h: ctl.fcvp_select(policy, fm, o, h, fc, rng)
    if method == "vision_only":
        policy = need("policy")
        return lambda o, env, h: (ctl.vision_only_select(policy, o), {})
    if method == "vision_random":
        policy = need("policy")

        def act(o, env, h):
            a, src = mixture_sample(policy, o, config.p, rng)
            return a, {"source": src}
        return act
    if method == "force_only":
        fm = need("force_model")
        return lambda o, env, h: ctl.force_only_select(fm, o, h, env.arm, env.garment_stage(),
                                                       config.K, rng, config.cone_half_angle)
    if method in ("multimodal", "force_residual"):
        policy = need(method)
        return lambda o, env, h: (policy.mean(o, h), {})
    raise PipelineError(f"unknown method {method!r}")


@dataclass
class ResultRow:
    method: str
    N: int
    pose_region: str
    garment_id: str
    seed: int
    dressed_ratio: float
    avg_violation: float
    episode_fault: bool

    def __post_init__(self):
        if not 0.0 <= self.dressed_ratio <= 1.0:
            raise ValueError("dressed_ratio outside [0, 1]")
        if not self.avg_violation >= 0.0:
            raise ValueError("avg_violation must be non-negative")

    def as_csv(self) -> dict:
        d = asdict(self)
        d["dressed_ratio"] = repr(self.dressed_ratio)
        d["avg_violation"] = repr(self.avg_violation)
        d["episode_fault"] = int(self.episode_fault)
        return d

    @classmethod
    def from_csv(cls, d: dict) -> ResultRow:
        return cls(d["method"], int(d["N"]), d["pose_region"], d["garment_id"], int(d["seed"]),
                   float(d["dressed_ratio"]), float(d["avg_violation"]),
                   bool(int(d["episode_fault"])))


def trajectory_metrics(traj: Trajectory, tau: float, skip: int) -> tuple[float, float]:
    """(dressed ratio, average violation). A faulted episode shorter than ``skip``
    is scored over every step it completed."""
    ratio = arm_dressed_ratio(traj)
    f = traj.forces
    if len(f) == 0:
        return ratio, 0.0
    if len(f) <= skip:
        return ratio, float(np.mean(np.maximum(0.0, f - tau)))
    return ratio, average_force_violation(f, tau, skip)


def trajectory_name(method: str, N: int, region: str, garment: str, seed: int) -> str:
    return f"{method}-N{N}-{region}-{garment}-s{seed}.jsonl"


def run_cell(config: ExperimentConfig, method: str, ri: int, gi: int, seed: int, models: dict,
             N: int | None = None) -> Trajectory:
    N = config.N if N is None else N
    # the episode draw ignores the method so every controller faces the same arm
    episode = config.episode(ri, gi, config.sim_b, np.random.default_rng([seed, ri, gi]))
    rng = np.random.default_rng([seed, ri, gi, 5])
    act = make_controller(method, config, models, N, rng)
    traj = run_episode(episode, act, N)
    traj.meta.update({"method": method, "N": N, "eval_tau": config.eval_tau,
                      "skip_steps": config.skip_steps})
    return traj


def run_eval(config: ExperimentConfig, methods, models: dict, out_dir=None,
             N: int | None = None) -> list[ResultRow]:
    """Every (method, region, garment, seed) cell once, in a fixed order."""
    N = config.N if N is None else N
    traj_dir = None
    if out_dir is not None:
        traj_dir = Path(out_dir) / "trajectories"
        traj_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for method in methods:
        for ri, gi in config.cells():
            for seed in config.seeds:
                traj = run_cell(config, method, ri, gi, seed, models, N)
                region = config.pose_regions[ri].name
                garment = config.garments[gi].name
                ratio, viol = trajectory_metrics(traj, config.eval_tau, config.skip_steps)
                row = ResultRow(method, N, region, garment, seed, ratio, viol, traj.fault)
                if traj.fault:
                    log.warning("episode fault in %s/%s/%s seed %d", method, region, garment, seed)
                log.info("%s N=%d %s %s seed %d: ratio %.3f violation %.2f", method, N, region,
                         garment, seed, ratio, viol)
                rows.append(row)
                if traj_dir is not None:
                    serialize_trajectory(traj, traj_dir / trajectory_name(method, N, region,
                                                                          garment, seed))
    return rows


def write_results(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r.as_csv())


def read_results(path) -> list[ResultRow]:
    path = Path(path)
    if not path.is_file():
        raise PipelineError(f"results file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = set(RESULT_FIELDS) - set(reader.fieldnames)
        if missing:
            raise PipelineError(f"{path}: missing column(s) {sorted(missing)}")
        try:
            return [ResultRow.from_csv(d) for d in reader]
        except (ValueError, TypeError) as exc:
            raise PipelineError(f"{path}:{reader.line_num}: bad row ({exc})") from None


# --- ablation ---------------------------------------------------------

def ablate_history(config: ExperimentConfig, samples, policy, seed: int, Ns=None, out_dir=None):
    """One force model per N on the same (re-windowed) data, FCVP evaluated per N.

    Returns (rows, aggregates, training reports keyed by N).
    """
    Ns = list(config.ablation_Ns if Ns is None else Ns)
    rows, reports = [], {}
    for N in Ns:
        model, rep = fit_force_model(config, samples, N, seed)
        reports[N] = rep
        rows += run_eval(config, ["fcvp"], {"policy": policy, "force_model": model}, out_dir, N)
    return rows, summarize(rows), reports


# --- reporting --------------------------------------------------------

@dataclass
class Summary:
    method: str
    N: int
    n: int
    faults: int
    dressed_ratio_mean: float
    dressed_ratio_std_trials: float
    dressed_ratio_std_regions: float
    avg_violation_mean: float
    avg_violation_std_trials: float
    avg_violation_std_regions: float


def summarize(rows) -> list[Summary]:
    """Mean with two spreads per (method, N): std over all trials and std over
    per-region means (population std in both cases)."""
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.N), []).append(r)
    out = []
    for (method, N), rs in groups.items():
        ratio = np.array([r.dressed_ratio for r in rs])
        viol = np.array([r.avg_violation for r in rs])
        regions = sorted(set(r.pose_region for r in rs))
        reg_ratio = [np.mean([r.dressed_ratio for r in rs if r.pose_region == g]) for g in regions]
        reg_viol = [np.mean([r.avg_violation for r in rs if r.pose_region == g]) for g in regions]
        out.append(Summary(method, N, len(rs), sum(r.episode_fault for r in rs),
                           float(ratio.mean()), float(ratio.std()), float(np.std(reg_ratio)),
                           float(viol.mean()), float(viol.std()), float(np.std(reg_viol))))
    return out


def write_summary(summaries, path) -> None:
    names = list(Summary.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for s in summaries:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(s).items()})


def format_summary(summaries) -> str:
    lines = [f"{'method':<16}{'N':>3}{'n':>5}  {'dressed ratio':<28}{'avg violation':<30}faults",
             f"{'':<24}  {'mean  ±trials ±regions':<28}{'mean    ±trials ±regions':<30}"]
    for s in summaries:
        lines.append(f"{s.method:<16}{s.N:>3}{s.n:>5}  "
                     f"{s.dressed_ratio_mean:.3f} {s.dressed_ratio_std_trials:6.3f} "
                     f"{s.dressed_ratio_std_regions:8.3f}     "
                     f"{s.avg_violation_mean:7.2f} {s.avg_violation_std_trials:7.2f} "
                     f"{s.avg_violation_std_regions:8.2f}     {s.faults}")
    return "\n".join(lines)


def write_force_distribution(rows, traj_dir, path) -> int:
    """Post-skip per-step forces of every evaluated trajectory; returns the row count."""
    traj_dir = Path(traj_dir)
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "N", "pose_region", "garment_id", "seed", "t", "force"])
        for r in rows:
            p = traj_dir / trajectory_name(r.method, r.N, r.pose_region, r.garment_id, r.seed)
            if not p.is_file():
                raise PipelineError(f"trajectory log missing for {r.method}/{r.pose_region}/"
                                    f"{r.garment_id}/seed {r.seed}: {p}")
            traj = deserialize_trajectory(p)
            skip = int(traj.meta.get("skip_steps", 0))
            for s in traj.steps[skip:]:
                w.writerow([r.method, r.N, r.pose_region, r.garment_id, r.seed, s.t,
                            repr(s.force_magnitude)])
                n += 1
    return n


def report(results_path, out_dir) -> list[Summary]:
    rows = read_results(results_path)
    if not rows:
        raise PipelineError(f"{results_path}: no rows to report")
    summaries = summarize(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_summary(summaries, out_dir / "summary.csv")
    write_force_distribution(rows, Path(results_path).parent / "trajectories",
                             out_dir / "forces.csv")
    return summaries
