"""Capsule arm model: signed distances, forward kinematics and arc-length projection."""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import cached_property

import numpy as np


def _vec(p) -> np.ndarray:
    return np.asarray(p, dtype=float).reshape(3)


def segment_parameter(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Clamped parameter in [0, 1] of the point on segment ab closest to p (vectorised over p)."""
    ab = b - a
    t = ((p - a) @ ab) / (ab @ ab)
    return np.clip(t, 0.0, 1.0)


@dataclass(frozen=True)
class Capsule:
    endpoint_a: np.ndarray
    endpoint_b: np.ndarray
    radius: float

    def __post_init__(self):
        a, b = _vec(self.endpoint_a), _vec(self.endpoint_b)
        object.__setattr__(self, "endpoint_a", a)
        object.__setattr__(self, "endpoint_b", b)
        if not self.radius > 0:
            raise ValueError(f"capsule radius must be positive, got {self.radius}")
        if np.allclose(a, b, rtol=0.0, atol=1e-12):
            raise ValueError("capsule endpoints coincide")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.endpoint_b - self.endpoint_a))

    def closest_axis_point(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        t = segment_parameter(self.endpoint_a, self.endpoint_b, p)
        return self.endpoint_a + t[..., None] * (self.endpoint_b - self.endpoint_a)

    def signed_distance(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.linalg.norm(p - self.closest_axis_point(p), axis=-1) - self.radius


def signed_distance(capsule: Capsule, p) -> float:
    """Distance from ``p`` to the capsule surface, negative inside."""
    return float(capsule.signed_distance(_vec(p)))


@dataclass(frozen=True)
class ArmModel:
    fingertip: np.ndarray
    elbow: np.ndarray
    shoulder: np.ndarray
    forearm_radius: float
    upperarm_radius: float

    def __post_init__(self):
        for name in ("fingertip", "elbow", "shoulder"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        pts = (self.fingertip, self.elbow, self.shoulder)
        for i in range(3):
            for j in range(i + 1, 3):
                if np.allclose(pts[i], pts[j], rtol=0.0, atol=1e-12):
                    raise ValueError("arm joints must be pairwise distinct")
        # validates radii and endpoints
        self.capsules  # noqa: B018

    @cached_property
    def forearm(self) -> Capsule:
        return Capsule(self.fingertip, self.elbow, self.forearm_radius)

    @cached_property
    def upperarm(self) -> Capsule:
        return Capsule(self.elbow, self.shoulder, self.upperarm_radius)

    @property
    def capsules(self) -> tuple[Capsule, Capsule]:
        return self.forearm, self.upperarm

    @property
    def forearm_length(self) -> float:
        return float(np.linalg.norm(self.elbow - self.fingertip))

    @property
    def upperarm_length(self) -> float:
        return float(np.linalg.norm(self.shoulder - self.elbow))

    @property
    def total_length(self) -> float:
        return self.forearm_length + self.upperarm_length

    def signed_distance(self, p) -> np.ndarray:
        """Signed distance to the union of both capsules (vectorised)."""
        fa, ua = self.capsules
        return np.minimum(fa.signed_distance(p), ua.signed_distance(p))

    def axis_distance(self, p) -> np.ndarray:
        """Distance to the fingertip-elbow-shoulder polyline (vectorised)."""
        fa, ua = self.capsules
        p = np.asarray(p, dtype=float)
        d0 = np.linalg.norm(p - fa.closest_axis_point(p), axis=-1)
        d1 = np.linalg.norm(p - ua.closest_axis_point(p), axis=-1)
        return np.minimum(d0, d1)

    def translated(self, offset) -> ArmModel:
        off = _vec(offset)
        return ArmModel(self.fingertip + off, self.elbow + off, self.shoulder + off,
                        self.forearm_radius, self.upperarm_radius)

    def surface_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Sample ``n`` points on the capsule side walls, proportional to segment length."""
        out = np.empty((n, 3))
        lengths = np.array([self.forearm_length, self.upperarm_length])
        which = rng.random(n) < lengths[0] / lengths.sum()
        ts = rng.random(n)
        phis = rng.uniform(0.0, 2 * np.pi, n)
        for k, cap in enumerate(self.capsules):
            mask = which if k == 0 else ~which
            axis = cap.endpoint_b - cap.endpoint_a
            u = axis / np.linalg.norm(axis)
            e1, e2 = orthonormal_frame(u)
            base = cap.endpoint_a + ts[mask, None] * axis
            ring = np.cos(phis[mask])[:, None] * e1 + np.sin(phis[mask])[:, None] * e2
            out[mask] = base + cap.radius * ring
        return out


def orthonormal_frame(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors spanning the plane normal to ``u``; the first leans toward +z."""
    up = np.array([0.0, 0.0, 1.0])
    e1 = up - (up @ u) * u
    if np.linalg.norm(e1) < 1e-8:
        e1 = np.array([1.0, 0.0, 0.0]) - u[0] * u
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


@dataclass(frozen=True)
class ArmPoseSpec:
    """Two-angle arm pose.

    ``shoulder_angle`` pitches the upper arm below horizontal (0 = horizontal,
    positive = downward); ``elbow_angle`` is the bend between upper arm and
    forearm. The upper arm points along -x from the shoulder.
    """

    shoulder_angle: float
    elbow_angle: float
    forearm_length: float
    upperarm_length: float
    forearm_radius: float
    upperarm_radius: float

    def __post_init__(self):
        for name in ("forearm_length", "upperarm_length", "forearm_radius", "upperarm_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> ArmPoseSpec:
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})


def arm_from_pose(spec: ArmPoseSpec, shoulder=(0.0, 0.0, 0.0)) -> ArmModel:
    s = _vec(shoulder)
    cs, ss = np.cos(spec.shoulder_angle), np.sin(spec.shoulder_angle)
    u = np.array([-cs, 0.0, -ss])
    # rotate u about the "up" axis orthogonal to it so the bend stays lateral
    up, _ = orthonormal_frame(u)
    side = np.cross(up, u)
    v = np.cos(spec.elbow_angle) * u + np.sin(spec.elbow_angle) * side
    elbow = s + spec.upperarm_length * u
    fingertip = elbow + spec.forearm_length * v
    return ArmModel(fingertip, elbow, s, spec.forearm_radius, spec.upperarm_radius)


@dataclass(frozen=True)
class PoseRegion:
    """Box of pose parameters; every ArmPoseSpec field gets a (low, high) range."""

    name: str
    shoulder_angle: tuple[float, float]
    elbow_angle: tuple[float, float]
    forearm_length: tuple[float, float]
    upperarm_length: tuple[float, float]
    forearm_radius: tuple[float, float]
    upperarm_radius: tuple[float, float]

    def __post_init__(self):
        lo, _ = self.shoulder_angle
        if lo < 0:
            raise ValueError("upward shoulder poses are excluded (shoulder_angle >= 0)")
        for f in fields(ArmPoseSpec):
            a, b = getattr(self, f.name)
            if a > b:
                raise ValueError(f"empty range for {f.name}")

    def sample(self, rng: np.random.Generator) -> ArmPoseSpec:
        return ArmPoseSpec(**{f.name: float(rng.uniform(*getattr(self, f.name)))
                              for f in fields(ArmPoseSpec)})

    def contains(self, spec: ArmPoseSpec) -> bool:
        return all(getattr(self, f.name)[0] <= getattr(spec, f.name) <= getattr(self, f.name)[1]
                   for f in fields(ArmPoseSpec))


def dressed_distance(arm: ArmModel, garment_leading_point) -> float:
    """Arc length from the fingertip to the projection of a point onto the arm polyline.

    The projection goes to whichever segment is closer; equal distances resolve
    to the forearm.
    """
    p = _vec(garment_leading_point)
    fa, ua = arm.capsules
    t0 = segment_parameter(fa.endpoint_a, fa.endpoint_b, p)
    t1 = segment_parameter(ua.endpoint_a, ua.endpoint_b, p)
    d0 = np.linalg.norm(p - (fa.endpoint_a + t0 * (fa.endpoint_b - fa.endpoint_a)))
    d1 = np.linalg.norm(p - (ua.endpoint_a + t1 * (ua.endpoint_b - ua.endpoint_a)))
    if d0 <= d1:
        s = t0 * arm.forearm_length
    else:
        s = arm.forearm_length + t1 * arm.upperarm_length
    return float(np.clip(s, 0.0, arm.total_length))
