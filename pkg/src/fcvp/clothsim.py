"""Mass-spring tubular sleeve with penalty contact against the capsule arm.

Two parameter presets (``SIM_A``, ``SIM_B``) play the roles of the training
simulator and the "real world" stand-in.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import ArmModel, orthonormal_frame

STRETCH, SHEAR = 0, 1


class SimulationDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ClothParams:
    stretch_stiffness: float = 2000.0
    shear_stiffness: float = 1000.0
    damping: float = 6.0
    friction_coeff: float = 0.4
    contact_stiffness: float = 15000.0
    particle_mass: float = 0.1
    dt: float = 0.002
    substeps: int = 10
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    max_speed: float = 100.0

    def __post_init__(self):
        for name in ("stretch_stiffness", "shear_stiffness", "contact_stiffness",
                     "particle_mass", "dt", "max_speed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.damping < 0 or self.friction_coeff < 0:
            raise ValueError("damping and friction_coeff must be non-negative")
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")
        object.__setattr__(self, "substeps", int(self.substeps))
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = " ".join(repr(x) for x in v) if f.name == "gravity" else v
        return out

    @classmethod
    def from_dict(cls, d) -> ClothParams:
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "gravity":
                kw[f.name] = tuple(float(x) for x in (v.split() if isinstance(v, str) else v))
            elif f.name == "substeps":
                kw[f.name] = int(v)
            else:
                kw[f.name] = float(v)
        return cls(**kw)


SIM_A = ClothParams()
SIM_B = replace(SIM_A, friction_coeff=SIM_A.friction_coeff * 2.0,
                stretch_stiffness=SIM_A.stretch_stiffness * 1.5,
                damping=SIM_A.damping * 0.7)
PRESETS = {"sim_a": SIM_A, "sim_b": SIM_B}


@dataclass(frozen=True)
class SleeveTopology:
    rings: int = 8
    circumference: int = 8
    ring_radius: float = 0.075
    ring_spacing: float = 0.045
    cuff_radius: float = 0.04

    def __post_init__(self):
        if self.rings < 2 or self.circumference < 3:
            raise ValueError("sleeve needs at least 2 rings of 3 particles")
        if not (self.ring_radius > 0 and self.ring_spacing > 0 and self.cuff_radius > 0):
            raise ValueError("ring radius and spacing must be positive")

    @property
    def n_particles(self) -> int:
        return self.rings * self.circumference

    def radii(self) -> np.ndarray:
        """Per-ring radius: the held opening, then a linear taper to the cuff."""
        out = np.linspace(self.ring_radius, self.cuff_radius, self.rings)
        out[0] = self.ring_radius
        return out

    def index(self, ring: int, c: int) -> int:
        return ring * self.circumference + (c % self.circumference)

    def spring_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(pairs (S, 2), kinds (S,)); rest lengths come from the built geometry."""
        pairs, kinds = [], []
        R, C = self.rings, self.circumference
        for r in range(R):
            for c in range(C):
                pairs.append((self.index(r, c), self.index(r, c + 1)))
                kinds.append(STRETCH)
                if r + 1 < R:
                    pairs.append((self.index(r, c), self.index(r + 1, c)))
                    kinds.append(STRETCH)
                    pairs.append((self.index(r, c), self.index(r + 1, c + 1)))
                    kinds.append(SHEAR)
                    pairs.append((self.index(r, c + 1), self.index(r + 1, c)))
                    kinds.append(SHEAR)
        return np.array(pairs, dtype=np.int64), np.array(kinds, dtype=np.int64)


@dataclass
class GripperState:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # axis-angle
    attached: bool = True

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.orientation)):
            raise ValueError("gripper orientation must be finite")

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_rotvec(self.orientation).as_matrix()

    def copy(self) -> GripperState:
        return GripperState(self.position.copy(), self.orientation.copy(), self.attached)


@dataclass
class ForceRecord:
    vector: np.ndarray
    magnitude: float

    @classmethod
    def from_vector(cls, v) -> ForceRecord:
        v = np.asarray(v, dtype=float).reshape(3)
        return cls(v, float(np.linalg.norm(v)))

    @classmethod
    def zero(cls) -> ForceRecord:
        return cls(np.zeros(3), 0.0)


@dataclass
class ClothState:
    positions: np.ndarray
    velocities: np.ndarray
    grasped_indices: np.ndarray
    anchors: np.ndarray  # grasped offsets in the gripper frame
    springs: np.ndarray  # (S, 2) particle indices
    rest_lengths: np.ndarray
    kinds: np.ndarray
    gripper: GripperState

    def __post_init__(self):
        if len(self.grasped_indices) < 1:
            raise ValueError("at least one particle must be grasped")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        n = len(self.positions)
        free = np.ones(n, dtype=bool)
        free[self.grasped_indices] = False
        self._free = free
        # incidence matrix maps per-spring force on the first endpoint to particles
        inc = np.zeros((n, len(self.springs)))
        idx = np.arange(len(self.springs))
        inc[self.springs[:, 0], idx] += 1.0
        inc[self.springs[:, 1], idx] -= 1.0
        self._incidence = inc

    @property
    def n_particles(self) -> int:
        return len(self.positions)

    @property
    def free_mask(self) -> np.ndarray:
        return self._free

    def copy(self) -> ClothState:
        return ClothState(self.positions.copy(), self.velocities.copy(),
                          self.grasped_indices.copy(), self.anchors.copy(), self.springs,
                          self.rest_lengths, self.kinds, self.gripper.copy())

    def grasp_targets(self, position=None, rotation=None) -> np.ndarray:
        pos = self.gripper.position if position is None else position
        rot = self.gripper.rotation if rotation is None else rotation
        return pos + self.anchors @ rot.T


def spring_force(pa, pb, rest: float, k: float) -> np.ndarray:
    """Hookean force on ``pa`` from a spring to ``pb``."""
    d = np.asarray(pb, dtype=float) - np.asarray(pa, dtype=float)
    L = np.linalg.norm(d)
    if L < 1e-12:
        return np.zeros(3)
    return k * (L - rest) * d / L


def spring_forces(x, v, springs, rest, k, damping, incidence) -> np.ndarray:
    """Per-particle internal forces (elastic + damping along each spring)."""
    d = x[springs[:, 1]] - x[springs[:, 0]]
    L = np.linalg.norm(d, axis=1)
    ok = L >= 1e-12
    u = np.zeros_like(d)
    u[ok] = d[ok] / L[ok, None]
    dv = v[springs[:, 1]] - v[springs[:, 0]]
    mag = k * (L - rest) + damping * np.einsum("ij,ij->i", dv, u)
    mag[~ok] = 0.0
    return incidence @ (mag[:, None] * u)


def contact_forces(x, v, arm: ArmModel, params: ClothParams, h: float):
    """Penalty normal force plus Coulomb-capped friction on each particle.

    Each particle contacts whichever capsule it is deepest in. Returns
    (forces (n, 3), penetrated mask).
    """
    best_sd = np.full(len(x), np.inf)
    best_off = np.zeros_like(x)
    best_dist = np.ones(len(x))
    for cap in arm.capsules:
        a = cap.endpoint_a
        ab = cap.endpoint_b - a
        t = np.clip((x - a) @ ab / (ab @ ab), 0.0, 1.0)
        off = x - a - t[:, None] * ab
        dist = np.sqrt(np.einsum("ij,ij->i", off, off))
        sd = dist - cap.radius
        closer = sd < best_sd
        best_sd = np.where(closer, sd, best_sd)
        best_off[closer] = off[closer]
        best_dist = np.where(closer, dist, best_dist)
    hit = best_sd < 0.0
    forces = np.zeros_like(x)
    if not hit.any():
        return forces, hit
    d = best_dist[hit]
    nrm = np.zeros((len(d), 3))
    nz = d > 1e-12
    nrm[nz] = best_off[hit][nz] / d[nz, None]
    fn = params.contact_stiffness * (-best_sd[hit])
    vh = v[hit]
    vt = vh - np.einsum("ij,ij->i", vh, nrm)[:, None] * nrm
    speed = np.sqrt(np.einsum("ij,ij->i", vt, vt))
    cap = np.minimum(params.friction_coeff * fn, params.particle_mass * speed / h)
    scale = np.divide(cap, speed, out=np.zeros_like(cap), where=speed > 1e-12)
    forces[hit] = fn[:, None] * nrm - scale[:, None] * vt
    return forces, hit


def build_sleeve(topology: SleeveTopology, arm: ArmModel, gripper: GripperState) -> ClothState:
    """Tube whose leading ring hangs from the gripper and trails away from the arm.

    The gripper holds the top of the leading ring; the ring plane is normal to
    the forearm and the remaining rings extend past the fingertip.
    """
    axis = arm.elbow - arm.fingertip
    axis = axis / np.linalg.norm(axis)
    e1, e2 = orthonormal_frame(axis)
    R, C = topology.rings, topology.circumference
    radii = topology.radii()
    center0 = gripper.position - radii[0] * e1
    phis = 2 * np.pi * np.arange(C) / C
    ring = np.cos(phis)[:, None] * e1 + np.sin(phis)[:, None] * e2
    pos = np.concatenate([center0 - r * topology.ring_spacing * axis + radii[r] * ring
                          for r in range(R)])
    sd = arm.signed_distance(pos)
    if np.any(sd < 0):
        raise ValueError(f"sleeve placement penetrates the arm (min signed distance {sd.min():.4f})")
    springs, kinds = topology.spring_pairs()
    rest = np.linalg.norm(pos[springs[:, 1]] - pos[springs[:, 0]], axis=1)
    grasped = np.arange(C)
    anchors = (pos[grasped] - gripper.position) @ gripper.rotation
    return ClothState(pos, np.zeros_like(pos), grasped, anchors, springs, rest, kinds,
                      gripper.copy())


def step(state: ClothState, params: ClothParams, gripper_delta, arm: ArmModel,
         ) -> tuple[ClothState, ForceRecord]:
    """Advance one control step; ``gripper_delta`` is (translation(3), rotvec(3)).

    Grasped particles track the gripper pose, interpolated across substeps.
    The returned force is the mean over substeps of the total contact force
    the garment applies to the arm.
    """
    delta = np.asarray(gripper_delta, dtype=float).reshape(6)
    new = state.copy()
    x, v = new.positions, new.velocities
    S, h = params.substeps, params.dt
    m = params.particle_mass
    k = np.where(state.kinds == STRETCH, params.stretch_stiffness, params.shear_stiffness)
    g = m * np.asarray(params.gravity)
    free, grasped = state.free_mask, state.grasped_indices
    p0, r0 = state.gripper.position, Rotation.from_rotvec(state.gripper.orientation)
    arm_force = np.zeros(3)
    for s in range(1, S + 1):
        frac = s / S
        gp = p0 + frac * delta[:3]
        grot = Rotation.from_rotvec(frac * delta[3:]) * r0
        target = state.grasp_targets(gp, grot.as_matrix())
        f = spring_forces(x, v, state.springs, state.rest_lengths, k, params.damping,
                          state._incidence)
        fc, hit = contact_forces(x, v, arm, params, h)
        if hit.any():
            arm_force -= fc.sum(axis=0)
        f += fc + g
        v[free] += (h / m) * f[free]
        x[free] += h * v[free]
        v[grasped] = (target - x[grasped]) / h
        x[grasped] = target
    new.gripper = GripperState(p0 + delta[:3], (Rotation.from_rotvec(delta[3:]) * r0).as_rotvec(),
                               state.gripper.attached)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(v)):
        raise SimulationDiverged("non-finite particle state")
    vmax = float(np.sqrt(np.max(np.einsum("ij,ij->i", v, v))))
    if vmax > params.max_speed:
        raise SimulationDiverged(f"particle speed {vmax:.1f} exceeds {params.max_speed}")
    return new, ForceRecord.from_vector(arm_force / S)


def sample_garment_points(state: ClothState, n: int, seed) -> np.ndarray:
    """Deterministic subsample of particle positions (with replacement only if n exceeds them)."""
    N = state.n_particles
    if n == N:
        return state.positions.copy()
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(N, size=n, replace=n > N))
    return state.positions[idx].copy()


def kinetic_energy(state: ClothState, params: ClothParams) -> float:
    return 0.5 * params.particle_mass * float(np.sum(state.velocities ** 2))


def elastic_energy(state: ClothState, params: ClothParams) -> float:
    k = np.where(state.kinds == STRETCH, params.stretch_stiffness, params.shear_stiffness)
    x = state.positions
    L = np.linalg.norm(x[state.springs[:, 1]] - x[state.springs[:, 0]], axis=1)
    return 0.5 * float(np.sum(k * (L - state.rest_lengths) ** 2))
