"""Gaussian point-cloud policy, a scripted fallback, and cross-entropy-method training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import ACTION_DIM, EpisodeConfig, Observation, run_episode
from .neural import MlpModel, build_model

log = logging.getLogger(__name__)

POINT_DIM = 6
# keeps tanh outputs strictly inside the action box
MEAN_BOUND = 1.0 - 1e-6
LOG_2PI = np.log(2.0 * np.pi)


def gaussian_log_prob(mean, sigma, actions) -> np.ndarray:
    """Diagonal Gaussian log density of each row of ``actions`` about ``mean``."""
    actions = np.atleast_2d(actions)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (ACTION_DIM,))
    z = (actions - mean) / sigma
    return -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(sigma)) - 0.5 * ACTION_DIM * LOG_2PI


class GaussianPolicy:
    """pi(a|o) = N(mean(o), diag(sigma^2)) with a tanh-bounded mean network."""

    def __init__(self, network: MlpModel, sigma=0.3):
        self.network = network
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (ACTION_DIM,)).copy()
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")
        if network.output_dim != ACTION_DIM:
            raise ValueError("policy network must output 6 values")

    @classmethod
    def create(cls, rng, encoder_sizes=(32, 32), head_sizes=(32,), sigma=0.3):
        net = build_model(rng, POINT_DIM, encoder_sizes, head_sizes, 0, ACTION_DIM)
        return cls(net, sigma)

    def features(self, obs: Observation, history=None) -> np.ndarray:
        return np.zeros(0)

    def mean(self, obs: Observation, history=None) -> np.ndarray:
        raw = self.network.predict(obs.as_array(), self.features(obs, history))
        return MEAN_BOUND * np.tanh(raw)

    def sample(self, obs: Observation, rng: np.random.Generator, history=None) -> np.ndarray:
        m = self.mean(obs, history)
        return np.clip(m + self.sigma * rng.standard_normal(ACTION_DIM), -1.0, 1.0)

    def log_prob(self, obs: Observation, action, history=None) -> float:
        return float(gaussian_log_prob(self.mean(obs, history), self.sigma, action)[0])

    def save(self, path) -> None:
        self.network.save(path, {"kind": type(self).__name__, "sigma": self.sigma.tolist()})

    @classmethod
    def load(cls, path) -> GaussianPolicy:
        net = MlpModel.load(path)
        return cls(net, net.meta["sigma"])


class ScriptedPolicy:
    """Constant straight-line motion from fingertip toward shoulder."""

    def __init__(self, direction, speed: float = 0.5, sigma=0.3):
        d = np.asarray(direction, dtype=float).reshape(3)
        self.direction = d / np.linalg.norm(d)
        self.speed = speed
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (ACTION_DIM,)).copy()

    @classmethod
    def for_arm(cls, arm, speed: float = 0.5, sigma=0.3) -> ScriptedPolicy:
        return cls(arm.shoulder - arm.fingertip, speed, sigma)

    def mean(self, obs=None, history=None) -> np.ndarray:
        return np.concatenate([self.speed * self.direction, np.zeros(3)])

    def sample(self, obs, rng, history=None) -> np.ndarray:
        return np.clip(self.mean() + self.sigma * rng.standard_normal(ACTION_DIM), -1.0, 1.0)

    def log_prob(self, obs, action, history=None) -> float:
        return float(gaussian_log_prob(self.mean(), self.sigma, action)[0])


def sample_action(policy, obs, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return policy.sample(obs, rng)


@dataclass
class CemConfig:
    population: int = 16
    elite_frac: float = 0.25
    iterations: int = 10
    eval_episodes: int = 2
    init_param_std: float = 0.1
    min_std: float = 0.005
    keep_elites: bool = True

    def __post_init__(self):
        if not 0 < self.elite_frac < 1:
            raise ValueError("elite_frac must be in (0, 1)")
        if self.population < 4:
            raise ValueError("population must be >= 4")

    @property
    def n_elite(self) -> int:
        return max(2, int(round(self.population * self.elite_frac)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CemLog:
    elite_mean: list = field(default_factory=list)
    best: list = field(default_factory=list)
    mean_score: list = field(default_factory=list)


class AllRolloutsDiverged(RuntimeError):
    pass


def cem_optimize(objective, x0, config: CemConfig, rng: np.random.Generator):
    """Maximise ``objective(x, iteration)`` with a diagonal-Gaussian cross-entropy method.

    The distribution mean is also scored each iteration; the best-scoring
    mean is returned together with the log. With ``keep_elites`` the previous
    elites replace the last samples of each new population and are re-scored,
    so on a deterministic objective the elite mean never decreases.
    """
    mean = np.asarray(x0, dtype=float).copy()
    std = np.full_like(mean, config.init_param_std)
    out = CemLog()
    best_x, best_score = mean.copy(), -np.inf
    elites = None
    for it in range(config.iterations):
        pop = mean + std * rng.standard_normal((config.population, mean.size))
        if config.keep_elites and elites is not None:
            pop[-len(elites):] = elites
        scores = np.array([objective(x, it) for x in pop])
        if not np.any(np.isfinite(scores)):
            raise AllRolloutsDiverged(f"every candidate failed at iteration {it}")
        scores = np.where(np.isfinite(scores), scores, -np.inf)
        elite = np.argsort(-scores, kind="stable")[:config.n_elite]
        out.elite_mean.append(float(np.mean(scores[elite])))
        out.best.append(float(scores[elite[0]]))
        elites = pop[elite].copy()
        mean = elites.mean(axis=0)
        std = np.maximum(pop[elite].std(axis=0), config.min_std)
        score = objective(mean, it)
        out.mean_score.append(float(score))
        if score > best_score:
            best_x, best_score = mean.copy(), score
        log.info("cem iter %d: elite %.3f best %.3f mean %.3f", it, out.elite_mean[-1],
                 out.best[-1], score)
    return best_x, out


def episode_return(config: EpisodeConfig, policy, history_len: int = 5,
                   reward_fn=None) -> float:
    """Return of the policy's mean actions; ``reward_fn(step_record) -> float`` overrides."""
    traj = run_episode(config, lambda o, env, h: (policy.mean(o, h), None), history_len)
    if traj.fault and not traj.steps:
        return -np.inf
    if reward_fn is None:
        return float(sum(s.reward.total for s in traj.steps))
    return float(sum(reward_fn(s) for s in traj.steps))


def train_policy_cem(env_factory, config: CemConfig, seed, policy=None, reward_fn=None,
                     history_len: int = 5):
    """Optimise policy parameters by CEM on mean episodic return.

    ``env_factory(rng) -> EpisodeConfig`` draws training episodes; every
    candidate in an iteration sees the same episodes.
    """
    rng = np.random.default_rng(seed)
    if policy is None:
        policy = GaussianPolicy.create(rng)
    x0 = policy.network.get_flat()
    episodes: dict[int, list[EpisodeConfig]] = {}
    ep_rng = np.random.default_rng(rng.integers(2**63))

    def objective(x, it):
        if it not in episodes:
            episodes[it] = [env_factory(ep_rng) for _ in range(config.eval_episodes)]
        policy.network.set_flat(x)
        rets = [episode_return(c, policy, history_len, reward_fn) for c in episodes[it]]
        return float(np.mean(rets))

    best, cem_log = cem_optimize(objective, x0, config, rng)
    policy.network.set_flat(best)
    return policy, cem_log
