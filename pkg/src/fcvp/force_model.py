"""Learned next-step force predictor: data collection in the target simulator, training, prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .env import ACTION_DIM, ForceHistory, Observation, run_episode
from .neural import MlpModel, build_model, train_mse
from .policy import POINT_DIM

log = logging.getLogger(__name__)

UNIFORM, POLICY = "uniform", "policy"


def mixture_sample(policy, obs, p: float, rng: np.random.Generator, history=None):
    """Uniform action on [-1, 1]^6 with probability ``p``, else a policy sample.

    The policy sample is drawn first so that ``p = 0`` reproduces
    ``policy.sample`` for the same generator state. Returns (action, source).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    a = policy.sample(obs, rng, history)
    if rng.random() < p:
        return rng.uniform(-1.0, 1.0, ACTION_DIM), UNIFORM
    return a, POLICY


def mixture_sample_batch(policy, obs, p: float, k: int, rng: np.random.Generator, history=None):
    """``k`` mixture draws sharing one policy mean evaluation."""
    mean = policy.mean(obs, history)
    acts = np.clip(mean + policy.sigma * rng.standard_normal((k, ACTION_DIM)), -1.0, 1.0)
    uni = rng.random(k) < p
    acts[uni] = rng.uniform(-1.0, 1.0, (int(uni.sum()), ACTION_DIM))
    return acts, np.where(uni, UNIFORM, POLICY)


@dataclass
class TransitionSample:
    points: np.ndarray  # (P, 6) observation array
    history: np.ndarray  # (N, 3), newest first
    action: np.ndarray  # (6,)
    target: float  # next-step force magnitude
    trajectory: int = 0
    t: int = 0

    def __post_init__(self):
        if self.target < 0:
            raise ValueError("force target must be non-negative")

    def rewindow(self, n: int) -> TransitionSample:
        if n > len(self.history):
            raise ValueError(f"cannot widen a {len(self.history)}-step history to {n}")
        return TransitionSample(self.points, self.history[:n], self.action, self.target,
                                self.trajectory, self.t)


def collect_dataset(env_factory, policy_for, trajectories: int, p: float, N: int, seed,
                    history_len: int | None = None):
    """Roll out mixture-sampled actions in the target simulator.

    ``policy_for(env)`` returns the proposal policy for an episode (lets a
    scripted policy see the arm). One sample is emitted per step except the
    last: (o_t, F_t, a_t) -> |f_{t+1}|, where F_t holds the force measured on
    arrival at o_t (zero at reset). Diverged episodes are dropped.

    Returns (samples, trajectories) where the trajectories are the raw logs.
    """
    rng = np.random.default_rng(seed)
    ep_rng = np.random.default_rng(rng.integers(2**63))
    samples, logs = [], []
    for k in range(trajectories):
        cfg = env_factory(ep_rng)
        records = []

        def act(obs, env, history, _records=records):
            pol = policy_for(env)
            a, src = mixture_sample(pol, obs, p, rng, history)
            _records.append((obs.as_array(), history.window.copy(), np.clip(a, -1, 1)))
            return a, {"source": src}

        traj = run_episode(cfg, act, N if history_len is None else history_len)
        if traj.fault:
            log.warning("dropping diverged trajectory %d (seed %d)", k, cfg.seed)
            continue
        forces = traj.forces
        for t in range(len(records) - 1):
            pts, hist, a = records[t]
            samples.append(TransitionSample(pts, hist[:N], a, float(forces[t]), len(logs), t))
        logs.append(traj)
    return samples, logs


def stack(samples):
    pts = np.stack([s.points for s in samples])
    hist = np.stack([s.history.ravel() for s in samples])
    acts = np.stack([s.action for s in samples])
    y = np.array([s.target for s in samples])
    return pts, hist, acts, y


class ForceModel:
    """d(o, F, a) -> predicted next-step force magnitude (sim units).

    Extras (flattened history then action) and the target are z-scored
    internally; ``predict`` returns de-standardised forces.
    """

    def __init__(self, core: MlpModel, N: int, x_mean, x_std, y_mean: float, y_std: float):
        if core.extra_dim != 3 * N + ACTION_DIM:
            raise ValueError("model extras must be 3N + 6")
        self.core, self.N = core, N
        self.x_mean = np.asarray(x_mean, dtype=float)
        self.x_std = np.asarray(x_std, dtype=float)
        self.y_mean, self.y_std = float(y_mean), float(y_std)

    def _extras(self, history, actions) -> np.ndarray:
        actions = np.atleast_2d(actions)
        h = history.flat() if isinstance(history, ForceHistory) else np.asarray(history).ravel()
        if h.size != 3 * self.N:
            raise ValueError(f"history must hold {self.N} force vectors")
        x = np.concatenate([np.broadcast_to(h, (len(actions), h.size)), actions], axis=1)
        return (x - self.x_mean) / self.x_std

    def predict_batch(self, obs, history, actions) -> np.ndarray:
        """Forces for many actions from one observation (the encoder runs once)."""
        pts = obs.as_array() if isinstance(obs, Observation) else np.asarray(obs)
        out = self.core.predict(pts[None], self._extras(history, actions))[:, 0]
        return out * self.y_std + self.y_mean

    def predict(self, obs, history, action) -> float:
        return float(self.predict_batch(obs, history, np.asarray(action)[None])[0])

    def predict_samples(self, pts, hist, acts) -> np.ndarray:
        x = (np.concatenate([hist, acts], axis=1) - self.x_mean) / self.x_std
        return self.core.predict(pts, x)[:, 0] * self.y_std + self.y_mean

    def save(self, path) -> None:
        self.core.save(path, {"kind": "ForceModel", "N": self.N,
                              "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                              "y_mean": self.y_mean, "y_std": self.y_std,
                              "target": "contact force magnitude"})

    @classmethod
    def load(cls, path) -> ForceModel:
        core = MlpModel.load(path)
        m = core.meta
        if m.get("kind") != "ForceModel":
            raise ValueError(f"{path} is not a force model checkpoint")
        return cls(core, m["N"], m["x_mean"], m["x_std"], m["y_mean"], m["y_std"])


def predict_force(model: ForceModel, obs, history, action) -> float:
    return model.predict(obs, history, action)


@dataclass
class ForceTrainReport:
    heldout_mse: float
    persistence_mse: float
    n_train: int
    n_heldout: int
    epochs_run: int
    loss: list
    val_loss: list


def split_indices(n: int, seed, heldout_frac: float = 0.1):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_held = max(1, int(round(n * heldout_frac)))
    return order[n_held:], order[:n_held]


def train_force_model(samples, N: int, epochs: int = 300, lr: float = 5e-4, seed=0,
                      patience: int | None = 25, batch_size: int = 64,
                      encoder_sizes=(32, 64), head_sizes=(64, 64)):
    """Fit d(o, F, a) on a seeded 90/10 split; report held-out and persistence MSE."""
    if not samples:
        raise ValueError("empty dataset")
    samples = [s.rewindow(N) for s in samples]
    pts, hist, acts, y = stack(samples)
    train, held = split_indices(len(y), seed)
    x = np.concatenate([hist, acts], axis=1)
    x_mean = x[train].mean(axis=0)
    x_std = x[train].std(axis=0)
    x_std[x_std < 1e-8] = 1.0
    y_mean, y_std = float(y[train].mean()), float(y[train].std()) or 1.0
    xs = (x - x_mean) / x_std
    ys = (y - y_mean) / y_std
    rng = np.random.default_rng(seed)
    core = build_model(rng, POINT_DIM, encoder_sizes, head_sizes, 3 * N + ACTION_DIM, 1)
    # the last 20% of the training split drives early stopping
    n_val = max(1, len(train) // 5) if patience else 0
    fit, val = (train[:-n_val], train[-n_val:]) if n_val else (train, None)
    validation = (pts[val], xs[val], ys[val]) if val is not None else None
    hist_log = train_mse(core, (pts[fit], xs[fit], ys[fit]), epochs, lr, batch_size,
                         int(rng.integers(2**31)), validation=validation, patience=patience)
    model = ForceModel(core, N, x_mean, x_std, y_mean, y_std)
    pred = model.predict_samples(pts[held], hist[held], acts[held])
    heldout = float(np.mean((pred - y[held]) ** 2))
    last = np.linalg.norm(hist[held, :3], axis=1)
    persistence = float(np.mean((last - y[held]) ** 2))
    report = ForceTrainReport(heldout, persistence, len(train), len(held),
                              len(hist_log["loss"]), hist_log["loss"], hist_log["val_loss"])
    log.info("force model N=%d: held-out MSE %.2f vs persistence %.2f (%d epochs)",
             N, heldout, persistence, report.epochs_run)
    return model, report
