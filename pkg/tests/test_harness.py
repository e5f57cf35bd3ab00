import csv
from pathlib import Path

import numpy as np
import pytest

from fcvp import cli, pipeline
from fcvp.config import ConfigError, load_config, parse_config
from fcvp.env import RewardBreakdown, StepRecord, Trajectory
from fcvp.force_model import TransitionSample
from fcvp.records import (RecordFormatError, deserialize_trajectory, load_dataset, save_dataset,
                          serialize_trajectory)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMOKE = CONFIGS / "smoke.ini"

MINIMAL = """
[experiment]
methods = fcvp vision_only
seeds = 0 1 2
[region:a]
shoulder_angle = 0.1 0.3
elbow_angle = 0.0 0.2
forearm_length = 0.3
upperarm_length = 0.3
forearm_radius = 0.035
upperarm_radius = 0.045
[garment:g]
rings = 6
circumference = 8
"""


def random_trajectory(seed, steps=7):
    rng = np.random.default_rng(seed)
    traj = Trajectory(0.61, 0.3, initial_dressed=0.01, fault=bool(seed % 2),
                      meta={"method": "fcvp", "N": 5, "skip_steps": 2})
    for t in range(steps):
        traj.steps.append(StepRecord(
            t, f"{rng.integers(1 << 60):x}", rng.uniform(-1, 1, 6), rng.normal(size=3),
            float(rng.uniform(0, 200)), RewardBreakdown(*rng.normal(size=4)),
            float(rng.uniform(0, 0.6)), float(rng.uniform(0, 0.1)), float(rng.uniform(0, 0.1)),
            float(rng.normal(0, 0.01)), {"feasible": int(rng.integers(0, 64)),
                                         "predicted_force": float(rng.normal(50, 10))}))
    return traj


# --- config -----------------------------------------------------------

def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.methods == ["fcvp", "vision_only"]
    assert cfg.seeds == [0, 1, 2]
    assert cfg.pose_regions[0].forearm_length == (0.3, 0.3)
    assert cfg.N == 5 and cfg.skip_steps == 25


def test_resolved_config_round_trip(tmp_path):
    cfg = load_config(SMOKE)
    path = cfg.write_resolved(tmp_path)
    again = load_config(path)
    assert again.to_ini() == cfg.to_ini()
    assert again.cem == cfg.cem and again.sim_b == cfg.sim_b


@pytest.mark.parametrize("text", [
    MINIMAL + "\n[experiment2]\nx = 1\n",
    MINIMAL.replace("seeds = 0 1 2", "seeds = 0 1 2\nbogus = 3"),
    MINIMAL.replace("methods = fcvp vision_only", "methods = fcvp teleport"),
    MINIMAL.replace("seeds = 0 1 2", "seeds ="),
    MINIMAL.replace("rings = 6", "rings = six"),
    MINIMAL.split("[garment:g]")[0],
    "[experiment\nmethods = fcvp",
])
def test_malformed_configs_raise(text):
    with pytest.raises(ConfigError):
        parse_config(text).validate()


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.ini")


def test_cell_grid():
    cfg = load_config(CONFIGS / "desk.ini")
    assert list(cfg.cells()) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert len(list(cfg.cells())) * len(cfg.seeds) >= 8


# --- records ----------------------------------------------------------

def test_trajectory_round_trip_is_exact(tmp_path):
    traj = random_trajectory(3)
    serialize_trajectory(traj, tmp_path / "t.jsonl")
    back = deserialize_trajectory(tmp_path / "t.jsonl")
    assert back.meta == traj.meta and back.fault == traj.fault
    assert back.arm_length == traj.arm_length and back.initial_dressed == traj.initial_dressed
    for a, b in zip(traj.steps, back.steps):
        assert a.t == b.t and a.obs_digest == b.obs_digest
        assert np.array_equal(a.action, b.action) and np.array_equal(a.force, b.force)
        assert a.force_magnitude == b.force_magnitude
        assert a.reward == b.reward
        assert (a.dressed_distance, a.d_e, a.d_g, a.progress_delta) == \
               (b.dressed_distance, b.d_e, b.d_g, b.progress_delta)
        assert a.diagnostics == b.diagnostics


def test_truncated_line_names_line_number(tmp_path):
    path = tmp_path / "t.jsonl"
    serialize_trajectory(random_trajectory(1, steps=4), path)
    text = path.read_text()
    path.write_text(text[:-20])
    with pytest.raises(RecordFormatError, match=r"t\.jsonl:5:"):
        deserialize_trajectory(path)


def test_schema_version_mismatch_refused(tmp_path):
    path = tmp_path / "t.jsonl"
    serialize_trajectory(random_trajectory(2), path)
    lines = path.read_text().split("\n")
    lines[0] = lines[0].replace('"version":1', '"version":2')
    path.write_text("\n".join(lines))
    with pytest.raises(RecordFormatError, match="version"):
        deserialize_trajectory(path)


def test_wrong_schema_refused(tmp_path):
    path = tmp_path / "t.jsonl"
    serialize_trajectory(random_trajectory(2), path)
    with pytest.raises(RecordFormatError, match="schema"):
        load_dataset(path)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    samples = [TransitionSample(rng.normal(size=(5, 6)), rng.normal(size=(7, 3)),
                                rng.uniform(-1, 1, 6), float(rng.uniform(0, 99)), i, i + 1)
               for i in range(4)]
    save_dataset(samples, tmp_path / "d.jsonl", {"p": 0.1})
    back, header = load_dataset(tmp_path / "d.jsonl")
    assert header["N"] == 7 and header["count"] == 4 and header["meta"] == {"p": 0.1}
    for a, b in zip(samples, back):
        assert np.array_equal(a.points, b.points) and np.array_equal(a.history, b.history)
        assert np.array_equal(a.action, b.action)
        assert (a.target, a.trajectory, a.t) == (b.target, b.trajectory, b.t)


# --- metrics and aggregation -----------------------------------------

def test_result_row_invariants():
    with pytest.raises(ValueError):
        pipeline.ResultRow("fcvp", 5, "a", "g", 0, 1.2, 0.0, False)
    with pytest.raises(ValueError):
        pipeline.ResultRow("fcvp", 5, "a", "g", 0, 0.5, -1.0, False)


def test_summary_matches_independent_recomputation():
    rng = np.random.default_rng(0)
    rows = [pipeline.ResultRow(m, 5, r, g, s, float(rng.uniform()), float(rng.uniform(0, 50)),
                               False)
            for m in ("fcvp", "vision_only") for r in ("a", "b", "c") for g in ("x", "y")
            for s in range(3)]
    for summ in pipeline.summarize(rows):
        mine = [r for r in rows if r.method == summ.method]
        ratios = [r.dressed_ratio for r in mine]
        mean = sum(ratios) / len(ratios)
        std = (sum((x - mean) ** 2 for x in ratios) / len(ratios)) ** 0.5
        per_region = []
        for reg in ("a", "b", "c"):
            vals = [r.dressed_ratio for r in mine if r.pose_region == reg]
            per_region.append(sum(vals) / len(vals))
        rm = sum(per_region) / 3
        assert summ.n == 18
        assert summ.dressed_ratio_mean == pytest.approx(mean, abs=1e-12)
        assert summ.dressed_ratio_std_trials == pytest.approx(std, abs=1e-12)
        assert summ.dressed_ratio_std_regions == pytest.approx(
            (sum((x - rm) ** 2 for x in per_region) / 3) ** 0.5, abs=1e-12)
        viol = [r.avg_violation for r in mine]
        assert summ.avg_violation_mean == pytest.approx(sum(viol) / len(viol), abs=1e-12)


def test_short_faulted_episode_scored_over_completed_steps():
    traj = random_trajectory(1, steps=5)
    ratio, viol = pipeline.trajectory_metrics(traj, 80.0, 25)
    f = traj.forces
    assert viol == pytest.approx(np.mean(np.maximum(0, f - 80.0)), abs=1e-12)
    assert 0 <= ratio <= 1


def test_results_csv_round_trip(tmp_path):
    rows = [pipeline.ResultRow("fcvp", 7, "a", "g", 3, 0.1 + 0.2, 1 / 3, True)]
    pipeline.write_results(rows, tmp_path / "r.csv")
    assert pipeline.read_results(tmp_path / "r.csv") == rows


# --- end-to-end smoke pipeline through the CLI ------------------------

def call(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    assert call("train-policy", "--config", SMOKE, "--out", root) == 0
    pol = root / "policy.ckpt"
    assert call("train-policy", "--config", SMOKE, "--out", root, "--checkpoint", f"policy={pol}",
                "--method", "multimodal", "--method", "force_residual") == 0
    assert call("collect", "--config", SMOKE, "--out", root, "--checkpoint",
                f"policy={pol}") == 0
    assert call("train-force-model", "--config", SMOKE, "--out", root, "--checkpoint",
                f"dataset={root / 'dataset.jsonl'}") == 0
    ckpts = ["--checkpoint", f"policy={pol}",
             "--checkpoint", f"force_model={root / 'force_model_N5.ckpt'}",
             "--checkpoint", f"multimodal={root / 'multimodal.ckpt'}",
             "--checkpoint", f"force_residual={root / 'force_residual.ckpt'}"]
    assert call("eval", "--config", SMOKE, "--out", root / "eval", *ckpts) == 0
    return root, ckpts


def test_smoke_pipeline_emits_all_artifacts(smoke):
    root, _ = smoke
    for name in ("policy.ckpt", "policy_training.json", "multimodal.ckpt", "force_residual.ckpt",
                 "dataset.jsonl", "force_model_N5.ckpt", "force_model_N5.json",
                 "resolved_config.ini", "eval/results.csv", "eval/summary.csv",
                 "eval/forces.csv", "eval/resolved_config.ini"):
        assert (root / name).is_file(), name
    cfg = load_config(SMOKE)
    rows = pipeline.read_results(root / "eval" / "results.csv")
    n_cells = len(cfg.methods) * len(cfg.pose_regions) * len(cfg.garments) * len(cfg.seeds)
    assert len(rows) == n_cells
    assert len(set((r.method, r.pose_region, r.garment_id, r.seed) for r in rows)) == n_cells
    assert len(list((root / "eval" / "trajectories").glob("*.jsonl"))) == n_cells


def test_eval_is_bit_reproducible(smoke, tmp_path):
    root, ckpts = smoke
    assert call("eval", "--config", SMOKE, "--out", tmp_path, *ckpts) == 0
    assert (tmp_path / "results.csv").read_bytes() == (root / "eval" / "results.csv").read_bytes()


def test_metrics_replay_from_trajectory_logs(smoke):
    root, _ = smoke
    for row in pipeline.read_results(root / "eval" / "results.csv"):
        traj = deserialize_trajectory(root / "eval" / "trajectories" / pipeline.trajectory_name(
            row.method, row.N, row.pose_region, row.garment_id, row.seed))
        ratio, viol = pipeline.trajectory_metrics(traj, traj.meta["eval_tau"],
                                                  traj.meta["skip_steps"])
        assert (ratio, viol) == (row.dressed_ratio, row.avg_violation)


def test_force_distribution_holds_post_skip_forces(smoke):
    root, _ = smoke
    with open(root / "eval" / "forces.csv", newline="") as fh:
        got = [(r["method"], r["seed"], int(r["t"]), float(r["force"]))
               for r in csv.DictReader(fh)]
    expected = []
    for row in pipeline.read_results(root / "eval" / "results.csv"):
        traj = deserialize_trajectory(root / "eval" / "trajectories" / pipeline.trajectory_name(
            row.method, row.N, row.pose_region, row.garment_id, row.seed))
        expected += [(row.method, str(row.seed), s.t, s.force_magnitude)
                     for s in traj.steps[traj.meta["skip_steps"]:]]
    assert got == expected


def test_report_recomputes_summary(smoke, tmp_path):
    root, _ = smoke
    assert call("report", "--out", tmp_path, "--results", root / "eval" / "results.csv") == 0
    assert (tmp_path / "summary.csv").read_bytes() == (root / "eval" / "summary.csv").read_bytes()


def test_ablation_emits_one_row_per_history_length(smoke, tmp_path):
    root, _ = smoke
    cfg = load_config(SMOKE)
    cfg.force_model.epochs = 3
    samples, _ = load_dataset(root / "dataset.jsonl")
    from fcvp.policy import GaussianPolicy
    policy = GaussianPolicy.load(root / "policy.ckpt")
    rows, summaries, reports = pipeline.ablate_history(cfg, samples, policy, 0, out_dir=tmp_path)
    assert [s.N for s in summaries] == [3, 5, 7]
    assert sorted(reports) == [3, 5, 7]
    pipeline.write_results(rows, tmp_path / "results.csv")
    back = pipeline.summarize(pipeline.read_results(tmp_path / "results.csv"))
    assert [s.N for s in back] == [3, 5, 7]


# --- CLI errors -------------------------------------------------------

def test_eval_with_zero_seeds_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMOKE.read_text().replace("seeds = 0 1", "seeds ="))
    assert call("eval", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "seeds" in capsys.readouterr().err


def test_report_on_empty_csv(tmp_path, capsys):
    pipeline.write_results([], tmp_path / "results.csv")
    assert call("report", "--out", tmp_path) == 1
    assert "no rows" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    assert call("eval", "--config", SMOKE, "--out", tmp_path, "--frobnicate") == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error(capsys):
    assert call("teleport") == 2


def test_missing_checkpoint_argument(tmp_path, capsys):
    assert call("eval", "--config", SMOKE, "--out", tmp_path, "--method", "vision_only") == 2
    assert "policy" in capsys.readouterr().err


def test_checkpoint_file_not_found(tmp_path, capsys):
    assert call("eval", "--config", SMOKE, "--out", tmp_path, "--method", "vision_only",
                "--checkpoint", f"policy={tmp_path / 'nope.ckpt'}") == 1
    assert "not found" in capsys.readouterr().err


def test_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert call("eval", "--config", SMOKE, "--out", tmp_path, "--method", "vision_only",
                "--checkpoint", f"policy={bad}") == 1
    assert "fcvp: error" in capsys.readouterr().err


def test_malformed_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nmethods = fcvp\nwat = 1\n")
    assert call("eval", "--config", cfg, "--out", tmp_path / "o") == 2


def test_bad_checkpoint_syntax(tmp_path):
    assert call("eval", "--config", SMOKE, "--out", tmp_path, "--checkpoint", "policy") == 2
