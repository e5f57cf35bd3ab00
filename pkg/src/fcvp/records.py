"""JSON-lines files for trajectories and force datasets.

Every file starts with a header object carrying ``schema`` and ``version``.
Floats are written with ``repr`` precision so 64-bit values round-trip exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .env import RewardBreakdown, StepRecord, Trajectory
from .force_model import TransitionSample

TRAJECTORY_SCHEMA = "fcvp.trajectory"
DATASET_SCHEMA = "fcvp.dataset"
SCHEMA_VERSION = 1


class RecordFormatError(ValueError):
    """Malformed or incompatible JSON-lines content; the message names the line."""


def _clean(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _dump(obj) -> str:
    return json.dumps(_clean(obj), allow_nan=True, separators=(",", ":"))


def _read_lines(path):
    path = Path(path)
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for i, line in enumerate(lines, start=1):
        try:
            yield i, json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"{path}:{i}: malformed JSON ({exc.msg})") from None


def _check_header(path, obj, schema):
    if not isinstance(obj, dict) or "schema" not in obj:
        raise RecordFormatError(f"{path}:1: missing header line")
    if obj["schema"] != schema:
        raise RecordFormatError(f"{path}:1: expected schema {schema!r}, found {obj['schema']!r}")
    if obj.get("version") != SCHEMA_VERSION:
        raise RecordFormatError(f"{path}:1: unsupported {schema} version {obj.get('version')!r} "
                                f"(this build reads version {SCHEMA_VERSION})")


# --- trajectories -----------------------------------------------------

def step_to_dict(s: StepRecord) -> dict:
    r = s.reward
    return {"t": s.t, "obs": s.obs_digest, "action": s.action, "force": s.force,
            "force_magnitude": s.force_magnitude,
            "reward": {"r_m": r.r_m, "r_p": r.r_p, "r_c": r.r_c, "r_d": r.r_d},
            "dressed_distance": s.dressed_distance, "d_e": s.d_e, "d_g": s.d_g,
            "progress_delta": s.progress_delta, "diagnostics": s.diagnostics}


def step_from_dict(d: dict) -> StepRecord:
    r = d["reward"]
    return StepRecord(int(d["t"]), d["obs"], np.array(d["action"], dtype=float),
                      np.array(d["force"], dtype=float), float(d["force_magnitude"]),
                      RewardBreakdown(r["r_m"], r["r_p"], r["r_c"], r["r_d"]),
                      float(d["dressed_distance"]), float(d["d_e"]), float(d["d_g"]),
                      float(d["progress_delta"]), dict(d.get("diagnostics", {})))


def serialize_trajectory(traj: Trajectory, path) -> None:
    header = {"schema": TRAJECTORY_SCHEMA, "version": SCHEMA_VERSION,
              "arm_length": traj.arm_length, "forearm_length": traj.forearm_length,
              "initial_dressed": traj.initial_dressed, "fault": traj.fault, "meta": traj.meta}
    with open(path, "w") as fh:
        fh.write(_dump(header) + "\n")
        for s in traj.steps:
            fh.write(_dump(step_to_dict(s)) + "\n")


def deserialize_trajectory(path) -> Trajectory:
    it = _read_lines(path)
    try:
        _, header = next(it)
    except StopIteration:
        raise RecordFormatError(f"{path}:1: empty file") from None
    _check_header(path, header, TRAJECTORY_SCHEMA)
    traj = Trajectory(float(header["arm_length"]), float(header["forearm_length"]),
                      initial_dressed=float(header["initial_dressed"]),
                      fault=bool(header["fault"]), meta=dict(header.get("meta", {})))
    for i, obj in it:
        try:
            traj.steps.append(step_from_dict(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordFormatError(f"{path}:{i}: bad step record ({exc})") from None
    return traj


# --- datasets ---------------------------------------------------------

def save_dataset(samples, path, meta: dict | None = None) -> None:
    n = len(samples[0].history) if samples else 0
    header = {"schema": DATASET_SCHEMA, "version": SCHEMA_VERSION, "N": n,
              "target": "contact force magnitude", "count": len(samples), "meta": meta or {}}
    with open(path, "w") as fh:
        fh.write(_dump(header) + "\n")
        for s in samples:
            fh.write(_dump({"points": s.points, "history": s.history, "action": s.action,
                            "target": s.target, "trajectory": s.trajectory, "t": s.t}) + "\n")


def load_dataset(path):
    """Returns (samples, header)."""
    it = _read_lines(path)
    try:
        _, header = next(it)
    except StopIteration:
        raise RecordFormatError(f"{path}:1: empty file") from None
    _check_header(path, header, DATASET_SCHEMA)
    samples = []
    for i, obj in it:
        try:
            samples.append(TransitionSample(np.array(obj["points"], dtype=float),
                                            np.array(obj["history"], dtype=float).reshape(-1, 3),
                                            np.array(obj["action"], dtype=float),
                                            float(obj["target"]), int(obj["trajectory"]),
                                            int(obj["t"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordFormatError(f"{path}:{i}: bad sample ({exc})") from None
    if header.get("count", len(samples)) != len(samples):
        raise RecordFormatError(f"{path}: header promises {header['count']} samples, "
                                f"found {len(samples)}")
    return samples, header
