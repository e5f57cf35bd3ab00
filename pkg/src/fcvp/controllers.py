"""Force-constrained action selection and the baseline controllers it is compared against."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .env import ACTION_DIM, ForceHistory, Observation
from .force_model import POLICY, UNIFORM, ForceModel, mixture_sample, mixture_sample_batch
from .neural import MlpModel, build_model
from .policy import MEAN_BOUND, POINT_DIM, CemConfig, GaussianPolicy, cem_optimize, \
    episode_return, gaussian_log_prob

log = logging.getLogger(__name__)

# Force Only cost weights
W_FORCE, W_PROGRESS, W_EFFORT = 0.001, 1.0, 0.1


@dataclass
class FcvpConfig:
    K: int = 64
    tau: float = 40.0
    p: float = 0.1
    N: int = 5
    resample_budget: int = 0  # extra candidate batches tried while nothing is feasible

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.N < 1 or self.resample_budget < 0:
            raise ValueError("N must be >= 1 and resample_budget >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CandidateSet:
    actions: np.ndarray  # (K, 6)
    sources: np.ndarray  # (K,) of "policy" / "uniform"
    log_probs: np.ndarray  # (K,)
    predicted_forces: np.ndarray  # (K,)

    def __post_init__(self):
        k = len(self.actions)
        if k < 1:
            raise ValueError("candidate set is empty")
        if not len(self.sources) == len(self.log_probs) == len(self.predicted_forces) == k:
            raise ValueError("candidate fields must have equal length")

    def __len__(self) -> int:
        return len(self.actions)

    def concat(self, other: CandidateSet) -> CandidateSet:
        return CandidateSet(*(np.concatenate([a, b]) for a, b in
                              zip((self.actions, self.sources, self.log_probs, self.predicted_forces),
                                  (other.actions, other.sources, other.log_probs,
                                   other.predicted_forces))))


def select_constrained(log_probs, predicted_forces, tau: float) -> tuple[int, bool]:
    """Index maximising log density among f_hat <= tau, else the index of the lowest f_hat.

    Ties go to the lowest index. Returns (index, feasible).
    """
    lp = np.asarray(log_probs, dtype=float)
    f = np.asarray(predicted_forces, dtype=float)
    ok = f <= tau
    if ok.any():
        masked = np.where(ok, lp, -np.inf)
        return int(np.argmax(masked)), True
    return int(np.argmin(f)), False


def propose_candidates(policy, force_model: ForceModel, obs, history, config: FcvpConfig,
                       rng: np.random.Generator) -> CandidateSet:
    acts, src = mixture_sample_batch(policy, obs, config.p, config.K, rng, history)
    # density under the policy alone, for uniform draws as well
    lp = gaussian_log_prob(policy.mean(obs, history), policy.sigma, acts)
    f = force_model.predict_batch(obs, history, acts)
    return CandidateSet(acts, src, lp, f)


def fcvp_select(policy, force_model: ForceModel, obs: Observation, history: ForceHistory,
                config: FcvpConfig, seed):
    """Random-shooting solution of: max log pi(a|o) subject to d(o, F, a) <= tau."""
    if len(history.window) != force_model.N:
        raise ValueError(f"force model expects {force_model.N} history steps, got "
                         f"{len(history.window)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cands = propose_candidates(policy, force_model, obs, history, config, rng)
    idx, feasible = select_constrained(cands.log_probs, cands.predicted_forces, config.tau)
    rounds = 0
    while not feasible and rounds < config.resample_budget:
        cands = cands.concat(propose_candidates(policy, force_model, obs, history, config, rng))
        idx, feasible = select_constrained(cands.log_probs, cands.predicted_forces, config.tau)
        rounds += 1
    diag = {"feasible": int(np.sum(cands.predicted_forces <= config.tau)),
            "source": str(cands.sources[idx]),
            "predicted_force": float(cands.predicted_forces[idx]),
            "fallback": not feasible, "candidates": len(cands)}
    return cands.actions[idx].copy(), diag


def vision_only_select(policy, obs: Observation, history=None) -> np.ndarray:
    return policy.mean(obs, history)


def vision_random_select(policy, obs: Observation, p: float, seed, history=None):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return mixture_sample(policy, obs, p, rng, history)


# --- Force Only -------------------------------------------------------

def progress_direction(arm, garment_stage: str) -> np.ndarray:
    if garment_stage == "forearm":
        d = arm.elbow - arm.fingertip
    elif garment_stage == "upperarm":
        d = arm.shoulder - arm.elbow
    else:
        raise ValueError(f"unknown garment stage {garment_stage!r}")
    return d / np.linalg.norm(d)


def force_only_cost(predicted_force, direction, actions) -> np.ndarray:
    """J = w1 |f_hat| - w2 d . a_trans + w3 ||a||^2, vectorised over rows of ``actions``."""
    a = np.atleast_2d(np.asarray(actions, dtype=float))
    f = np.abs(np.asarray(predicted_force, dtype=float))
    return W_FORCE * f - W_PROGRESS * (a[:, :3] @ np.asarray(direction)) + W_EFFORT * np.sum(a * a, axis=1)


def cone_sample(direction, k: int, half_angle: float, rng: np.random.Generator) -> np.ndarray:
    """``k`` actions whose translation lies within ``half_angle`` of ``direction``.

    Directions are uniform over the spherical cap, speeds uniform in (0, 1],
    and rotations uniform in [-1, 1]^3.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    up = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = up - (up @ d) * d
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    cos_t = rng.uniform(np.cos(half_angle), 1.0, k)
    sin_t = np.sqrt(1.0 - cos_t**2)
    phi = rng.uniform(0.0, 2 * np.pi, k)
    u = cos_t[:, None] * d + sin_t[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
    # scale so the largest component stays inside the unit box
    speed = (1.0 - rng.random(k)) / np.max(np.abs(u), axis=1)
    trans = speed[:, None] * u
    rot = rng.uniform(-1.0, 1.0, (k, 3))
    return np.concatenate([trans, rot], axis=1)


def force_only_select(force_model: ForceModel, obs, history, arm, garment_stage: str, K: int,
                      seed, half_angle: float = np.pi / 4):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = progress_direction(arm, garment_stage)
    acts = cone_sample(d, K, half_angle, rng)
    f = force_model.predict_batch(obs, history, acts)
    cost = force_only_cost(f, d, acts)
    i = int(np.argmin(cost))
    return acts[i].copy(), {"predicted_force": float(f[i]), "cost": float(cost[i]),
                            "stage": garment_stage}


# --- fine-tuned policies ---------------------------------------------

def penalized_reward(r: float, f: float, tau: float, w: float) -> float:
    if w < 0:
        raise ValueError("w must be non-negative")
    return r - w * max(0.0, f - tau)


class MultimodalPolicy(GaussianPolicy):
    """Gaussian policy whose head also sees the (scaled) force history."""

    def __init__(self, network: MlpModel, sigma=0.3, N: int = 5, force_scale: float = 100.0):
        super().__init__(network, sigma)
        if network.extra_dim != 3 * N:
            raise ValueError("multimodal head must take 3N force extras")
        self.N = N
        self.force_scale = force_scale

    @classmethod
    def from_vision(cls, base: GaussianPolicy, N: int, rng, force_scale: float = 100.0):
        """Copy the vision policy and widen its first head layer with zero force weights."""
        net = base.network.copy()
        first = net.head_layers[0]
        first.weights = np.concatenate([first.weights, np.zeros((first.n_out, 3 * N))], axis=1)
        net.extra_dim = 3 * N
        return cls(net, base.sigma, N, force_scale)

    def features(self, obs, history=None) -> np.ndarray:
        if history is None:
            return np.zeros(3 * self.N)
        return history.flat()[:3 * self.N] / self.force_scale

    def save(self, path) -> None:
        self.network.save(path, {"kind": "MultimodalPolicy", "sigma": self.sigma.tolist(),
                                 "N": self.N, "force_scale": self.force_scale})

    @classmethod
    def load(cls, path) -> MultimodalPolicy:
        net = MlpModel.load(path)
        m = net.meta
        return cls(net, m["sigma"], m["N"], m["force_scale"])


class ResidualPolicy:
    """Frozen vision policy plus a residual head on (force history, base action)."""

    def __init__(self, base: GaussianPolicy, residual: MlpModel, N: int = 5,
                 force_scale: float = 100.0):
        if residual.extra_dim != 3 * N + ACTION_DIM:
            raise ValueError("residual head takes 3N + 6 extras")
        self.base, self.network = base, residual
        self.N, self.force_scale = N, force_scale
        self.sigma = base.sigma

    @classmethod
    def create(cls, base: GaussianPolicy, N: int, rng, encoder_sizes=(16,), head_sizes=(16,),
               force_scale: float = 100.0):
        net = build_model(rng, POINT_DIM, encoder_sizes, head_sizes, 3 * N + ACTION_DIM, ACTION_DIM)
        last = net.head_layers[-1]
        last.weights[:] = 0.0
        last.biases[:] = 0.0
        return cls(base, net, N, force_scale)

    def mean(self, obs, history=None) -> np.ndarray:
        base = self.base.mean(obs, history)
        h = np.zeros(3 * self.N) if history is None else history.flat()[:3 * self.N]
        extras = np.concatenate([h / self.force_scale, base])
        res = self.network.predict(obs.as_array(), extras)
        return np.clip(base + res, -MEAN_BOUND, MEAN_BOUND)

    def sample(self, obs, rng, history=None) -> np.ndarray:
        m = self.mean(obs, history)
        return np.clip(m + self.sigma * rng.standard_normal(ACTION_DIM), -1.0, 1.0)

    def log_prob(self, obs, action, history=None) -> float:
        return float(gaussian_log_prob(self.mean(obs, history), self.sigma, action)[0])

    def save(self, path) -> None:
        self.network.save(path, {"kind": "ResidualPolicy", "N": self.N,
                                 "force_scale": self.force_scale})

    @classmethod
    def load(cls, path, base: GaussianPolicy) -> ResidualPolicy:
        net = MlpModel.load(path)
        return cls(base, net, net.meta["N"], net.meta["force_scale"])


def train_multimodal_finetune(policy, env_factory, tau: float, w: float, config: CemConfig,
                              seed, history_len: int = 5):
    """CEM fine-tuning of ``policy.network`` on the force-penalised return.

    ``policy`` is a MultimodalPolicy or a ResidualPolicy (only the residual
    head is tuned; the base stays frozen).
    """
    rng = np.random.default_rng(seed)
    x0 = policy.network.get_flat()
    episodes: dict[int, list] = {}
    ep_rng = np.random.default_rng(rng.integers(2**63))

    def reward_fn(step) -> float:
        return penalized_reward(step.reward.total, step.force_magnitude, tau, w)

    def objective(x, it):
        if it not in episodes:
            episodes[it] = [env_factory(ep_rng) for _ in range(config.eval_episodes)]
        policy.network.set_flat(x)
        return float(np.mean([episode_return(c, policy, history_len, reward_fn)
                              for c in episodes[it]]))

    best, cem_log = cem_optimize(objective, x0, config, rng)
    policy.network.set_flat(best)
    return policy, cem_log


__all__ = ["FcvpConfig", "CandidateSet", "select_constrained", "propose_candidates",
           "fcvp_select", "vision_only_select", "vision_random_select", "force_only_cost",
           "force_only_select", "cone_sample", "progress_direction", "penalized_reward",
           "MultimodalPolicy", "ResidualPolicy", "train_multimodal_finetune", "POLICY",
           "UNIFORM"]
