"""Dressing episode: observation construction, reward terms and evaluation metrics."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import clothsim
from .clothsim import ClothParams, ClothState, ForceRecord, GripperState, SleeveTopology
from .geometry import ArmModel, ArmPoseSpec, arm_from_pose, dressed_distance, orthonormal_frame

GARMENT, ARM, EEF = 0, 1, 2
ACTION_DIM = 6

# reward constants (sim units / meters)
F_MAX = 1000.0
PENETRATION_SLOPE = 0.001
D_MIN = 0.01
CONTACT_PENALTY = -0.01
D_GOOD, D_BAD = 0.03, 0.075
DEVIATION_BONUS, DEVIATION_PENALTY = 0.02, -0.05
PROGRESS_SCALE = 10.0


def one_hot(tag: int, n: int) -> np.ndarray:
    out = np.zeros((n, 3))
    out[:, tag] = 1.0
    return out


@dataclass
class Observation:
    garment_points: np.ndarray
    arm_points: np.ndarray
    eef_point: np.ndarray

    def as_array(self, centered: bool = True) -> np.ndarray:
        """(P, 6) array of xyz + one-hot source tag, garment first, eef last.

        With ``centered`` the coordinates are relative to the end-effector.
        """
        eef = self.eef_point.reshape(1, 3)
        pts = np.concatenate([self.garment_points, self.arm_points, eef])
        if centered:
            pts = pts - eef
        tags = np.concatenate([one_hot(GARMENT, len(self.garment_points)),
                               one_hot(ARM, len(self.arm_points)), one_hot(EEF, 1)])
        return np.concatenate([pts, tags], axis=1)

    def digest(self) -> str:
        return hashlib.sha256(self.as_array(centered=False).tobytes()).hexdigest()[:16]


@dataclass
class Action:
    delta_translation: np.ndarray
    delta_rotation: np.ndarray

    def __post_init__(self):
        self.delta_translation = np.asarray(self.delta_translation, dtype=float).reshape(3)
        self.delta_rotation = np.asarray(self.delta_rotation, dtype=float).reshape(3)
        v = self.vector
        if np.any(np.abs(v) > 1.0):
            raise ValueError("action components must lie in [-1, 1]")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.delta_translation, self.delta_rotation])

    @classmethod
    def from_vector(cls, a) -> Action:
        a = np.clip(np.asarray(a, dtype=float).reshape(ACTION_DIM), -1.0, 1.0)
        return cls(a[:3], a[3:])


@dataclass(frozen=True)
class RewardBreakdown:
    r_m: float
    r_p: float
    r_c: float
    r_d: float

    @property
    def total(self) -> float:
        return self.r_m + self.r_p + self.r_c + self.r_d

    def to_dict(self) -> dict:
        return {"r_m": self.r_m, "r_p": self.r_p, "r_c": self.r_c, "r_d": self.r_d,
                "total": self.total}


def compute_reward(f: float, d_e: float, d_g: float, progress_delta: float,
                   f_max: float = F_MAX) -> RewardBreakdown:
    if d_e < 0 or d_g < 0:
        raise ValueError("distances must be non-negative")
    r_m = PROGRESS_SCALE * progress_delta
    r_p = -PENETRATION_SLOPE * max(f - f_max, 0.0)
    r_c = CONTACT_PENALTY if d_e < D_MIN else 0.0
    if d_g < D_GOOD:
        r_d = DEVIATION_BONUS
    elif d_g > D_BAD:
        r_d = DEVIATION_PENALTY
    else:
        r_d = 0.0
    return RewardBreakdown(r_m, r_p, r_c, r_d)


@dataclass
class EpisodeConfig:
    arm_spec: ArmPoseSpec
    cloth_params: ClothParams = field(default_factory=ClothParams)
    topology: SleeveTopology = field(default_factory=SleeveTopology)
    horizon: int = 150
    force_threshold: float = 40.0
    seed: int = 0
    translation_scale: float = 0.015  # meters per unit action
    rotation_scale: float = 0.05  # radians per unit action
    n_garment_points: int = 32
    n_arm_points: int = 24
    start_depth: float = 0.02  # how far past the fingertip the ring centre starts
    lateral_noise: float = 0.01
    region: str = ""
    garment_id: str = ""

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.force_threshold > 0:
            raise ValueError("force threshold must be positive")


@dataclass
class StepRecord:
    t: int
    obs_digest: str
    action: np.ndarray
    force: np.ndarray
    force_magnitude: float
    reward: RewardBreakdown
    dressed_distance: float
    d_e: float
    d_g: float
    progress_delta: float
    diagnostics: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    arm_length: float
    forearm_length: float
    steps: list[StepRecord] = field(default_factory=list)
    initial_dressed: float = 0.0
    fault: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def forces(self) -> np.ndarray:
        return np.array([s.force_magnitude for s in self.steps])

    @property
    def final_dressed(self) -> float:
        return self.steps[-1].dressed_distance if self.steps else self.initial_dressed


def arm_dressed_ratio(trajectory: Trajectory) -> float:
    return float(np.clip(trajectory.final_dressed / trajectory.arm_length, 0.0, 1.0))


def average_force_violation(forces, tau: float, skip: int = 25) -> float:
    """Mean of max(0, f_t - tau) over the steps after the first ``skip``."""
    f = np.asarray(forces.forces if isinstance(forces, Trajectory) else forces, dtype=float)
    if len(f) <= skip:
        raise ValueError(f"trajectory of {len(f)} steps is not longer than skip={skip}")
    return float(np.mean(np.maximum(0.0, f[skip:] - tau)))


class DressingEnv:
    """One dressing episode against a static arm.

    The garment counts as dressed only while the arm passes through the
    leading ring; once the ring centre leaves the arm by more than the ring
    radius the sleeve has slipped off and the dressed distance stays frozen.
    """

    def __init__(self, config: EpisodeConfig):
        self.config = config
        self.arm: ArmModel | None = None
        self.cloth: ClothState | None = None
        self.t = 0
        self.done = True
        self.fault = False
        self.detached = False

    def reset(self) -> Observation:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.arm = arm_from_pose(cfg.arm_spec)
        axis = self.arm.elbow - self.arm.fingertip
        axis /= np.linalg.norm(axis)
        e1, e2 = orthonormal_frame(axis)
        jitter = rng.uniform(-cfg.lateral_noise, cfg.lateral_noise, 2)
        center = self.arm.fingertip + cfg.start_depth * axis + jitter[0] * e1 + jitter[1] * e2
        gripper = GripperState(center + cfg.topology.ring_radius * e1)
        self.cloth = clothsim.build_sleeve(cfg.topology, self.arm, gripper)
        self._arm_points = self.arm.surface_points(cfg.n_arm_points, rng)
        self._obs_seed = int(rng.integers(2**31))
        self.t = 0
        self.done = False
        self.fault = False
        self.detached = False
        self.dressed = 0.0
        self.dressed = self._measure_dressed()
        self.last_force = ForceRecord.zero()
        return self.observe()

    # --- measurements -------------------------------------------------
    def leading_centroid(self) -> np.ndarray:
        return self.cloth.positions[self.cloth.grasped_indices].mean(axis=0)

    def d_g(self) -> float:
        return float(self.arm.axis_distance(self.leading_centroid()))

    def d_e(self) -> float:
        return max(0.0, float(self.arm.signed_distance(self.cloth.gripper.position)))

    def _measure_dressed(self) -> float:
        if self.d_g() > self.config.topology.ring_radius:
            self.detached = True
        if self.detached:
            return self.dressed
        return dressed_distance(self.arm, self.leading_centroid())

    def garment_stage(self) -> str:
        return "forearm" if self.dressed <= self.arm.forearm_length else "upperarm"

    def observe(self) -> Observation:
        pts = clothsim.sample_garment_points(self.cloth, self.config.n_garment_points,
                                             (self._obs_seed, self.t))
        return Observation(pts, self._arm_points, self.cloth.gripper.position.copy())

    # --- dynamics -----------------------------------------------------
    def step(self, action) -> tuple[Observation, RewardBreakdown, ForceRecord, bool]:
        if self.done:
            raise RuntimeError("episode is finished; call reset()")
        a = action.vector if isinstance(action, Action) else np.asarray(action, dtype=float)
        a = np.clip(a.reshape(ACTION_DIM), -1.0, 1.0)
        cfg = self.config
        delta = np.concatenate([cfg.translation_scale * a[:3], cfg.rotation_scale * a[3:]])
        self.t += 1
        try:
            self.cloth, force = clothsim.step(self.cloth, cfg.cloth_params, delta, self.arm)
        except clothsim.SimulationDiverged:
            self.fault = True
            self.done = True
            force = ForceRecord.zero()
            reward = RewardBreakdown(0.0, 0.0, 0.0, 0.0)
            self.last_force = force
            return self.observe(), reward, force, True
        before = self.dressed
        self.dressed = self._measure_dressed()
        progress = self.dressed - before
        reward = compute_reward(force.magnitude, self.d_e(), self.d_g(), progress)
        self.last_force = force
        self.done = self.t >= cfg.horizon
        return self.observe(), reward, force, self.done


def make_env(config: EpisodeConfig) -> tuple[DressingEnv, Observation]:
    env = DressingEnv(config)
    return env, env.reset()


class ForceHistory:
    """Sliding window of the last ``n`` force vectors, newest first, zero-padded."""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("history length must be >= 1")
        self.n = n
        self.window = np.zeros((n, 3))
        self.count = 0

    def push(self, force) -> None:
        v = force.vector if isinstance(force, ForceRecord) else np.asarray(force, dtype=float)
        self.window = np.concatenate([v.reshape(1, 3), self.window[:-1]])
        self.count += 1

    @property
    def warm(self) -> bool:
        return self.count >= self.n

    def latest_magnitude(self) -> float:
        return float(np.linalg.norm(self.window[0]))

    def flat(self) -> np.ndarray:
        return self.window.ravel().copy()

    def copy(self) -> ForceHistory:
        out = ForceHistory(self.n)
        out.window = self.window.copy()
        out.count = self.count
        return out


def run_episode(config: EpisodeConfig, act, history_len: int = 5) -> Trajectory:
    """Roll out ``act(obs, env, history) -> (action, diagnostics)`` for one episode."""
    env = DressingEnv(config)
    obs = env.reset()
    history = ForceHistory(history_len)
    traj = Trajectory(env.arm.total_length, env.arm.forearm_length,
                      initial_dressed=env.dressed,
                      meta={"region": config.region, "garment_id": config.garment_id,
                            "seed": config.seed})
    while not env.done:
        action, diag = act(obs, env, history)
        a = np.clip(np.asarray(action, dtype=float).reshape(ACTION_DIM), -1.0, 1.0)
        digest = obs.digest()
        before = env.dressed
        obs, reward, force, _ = env.step(a)
        history.push(force)
        traj.steps.append(StepRecord(env.t, digest, a, force.vector.copy(), force.magnitude,
                                     reward, env.dressed, env.d_e(), env.d_g(),
                                     env.dressed - before, dict(diag or {})))
    traj.fault = env.fault
    return traj
