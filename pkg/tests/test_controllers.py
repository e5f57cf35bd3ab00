import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcvp.controllers import (CandidateSet, FcvpConfig, MultimodalPolicy, ResidualPolicy,
                              cone_sample, fcvp_select, force_only_cost, force_only_select,
                              penalized_reward, progress_direction, select_constrained,
                              train_multimodal_finetune, vision_only_select,
                              vision_random_select)
from fcvp.env import ForceHistory, Observation
from fcvp.force_model import UNIFORM
from fcvp.geometry import ArmModel
from fcvp.policy import CemConfig, GaussianPolicy, episode_return, gaussian_log_prob

from selection_oracle import brute_force_select, random_trial

ARM = ArmModel((0, 0, 0), (0.3, 0, 0), (0.3, 0.3, 0), 0.04, 0.05)


def observation(seed=0):
    rng = np.random.default_rng(seed)
    return Observation(rng.normal(0, 0.1, (10, 3)), rng.normal(0, 0.1, (5, 3)),
                       rng.normal(0, 0.1, 3))


def policy(seed=0):
    return GaussianPolicy.create(np.random.default_rng(seed), (8,), (8,), 0.3)


class LinearForce:
    """Stand-in force model: f = offset + slope * a_x."""

    def __init__(self, N=5, offset=50.0, slope=100.0):
        self.N, self.offset, self.slope = N, offset, slope

    def predict_batch(self, obs, history, actions):
        return self.offset + self.slope * np.atleast_2d(actions)[:, 0]


def history(n=5, value=0.0):
    h = ForceHistory(n)
    for _ in range(n):
        h.push([value, 0, 0])
    return h


# --- constrained selection -------------------------------------------

def test_selection_examples():
    assert select_constrained([-1.0, -0.1, -2.0], [10, 50, 30], 40) == (0, True)
    assert select_constrained([-1.0, -0.5], [50, 60], 40) == (0, False)
    assert select_constrained([-3.0], [500], 40) == (0, False)


def test_selection_ties_take_lowest_index():
    assert select_constrained([-1.0, -1.0, -2.0], [1, 2, 3], 40) == (0, True)
    assert select_constrained([0.0, 0.0], [60, 60], 40) == (0, False)


def test_selection_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        lp, f, tau = random_trial(rng)
        assert select_constrained(lp, f, tau) == brute_force_select(lp, f, tau)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 0), st.floats(0, 100)), min_size=1, max_size=30),
       st.floats(0.1, 100), st.floats(0, 50))
def test_raising_tau_never_lowers_chosen_density(cands, tau, extra):
    lp = np.array([c[0] for c in cands])
    f = np.array([c[1] for c in cands])
    i1, ok1 = select_constrained(lp, f, tau)
    i2, ok2 = select_constrained(lp, f, tau + extra)
    assert np.sum(f <= tau + extra) >= np.sum(f <= tau)
    if ok1:
        assert ok2 and lp[i2] >= lp[i1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 0), st.floats(0, 100)), min_size=1, max_size=30),
       st.floats(0.1, 100))
def test_chosen_force_respects_tau_when_feasible(cands, tau):
    lp = np.array([c[0] for c in cands])
    f = np.array([c[1] for c in cands])
    i, ok = select_constrained(lp, f, tau)
    assert ok == bool(np.any(f <= tau))
    if ok:
        assert f[i] <= tau
    else:
        assert f[i] == f.min()


def test_candidate_set_validation():
    with pytest.raises(ValueError):
        CandidateSet(np.zeros((0, 6)), np.array([]), np.array([]), np.array([]))
    with pytest.raises(ValueError):
        CandidateSet(np.zeros((2, 6)), np.array(["policy"]), np.zeros(2), np.zeros(2))


def test_config_validation():
    for bad in ({"K": 0}, {"tau": 0.0}, {"p": 1.5}, {"resample_budget": -1}):
        with pytest.raises(ValueError):
            FcvpConfig(**bad)


# --- fcvp_select -----------------------------------------------------

def test_fcvp_select_follows_constraint():
    pol, obs, fm = policy(1), observation(1), LinearForce()
    cfg = FcvpConfig(K=32, tau=40.0, N=5)
    a, diag = fcvp_select(pol, fm, obs, history(), cfg, 3)
    assert not diag["fallback"]
    assert diag["predicted_force"] <= 40.0
    assert diag["predicted_force"] == pytest.approx(fm.predict_batch(obs, None, a)[0])


def test_fcvp_select_equals_enumeration_on_its_candidates():
    from fcvp.controllers import propose_candidates
    pol, obs, fm = policy(2), observation(2), LinearForce()
    cfg = FcvpConfig(K=48, tau=45.0)
    for seed in range(20):
        cands = propose_candidates(pol, fm, obs, history(), cfg, np.random.default_rng(seed))
        lp = [pol.log_prob(obs, a) for a in cands.actions]
        i, _ = brute_force_select(lp, cands.predicted_forces, cfg.tau)
        a, _ = fcvp_select(pol, fm, obs, history(), cfg, seed)
        assert np.array_equal(a, cands.actions[i])


def test_fcvp_single_candidate_is_returned():
    pol, obs = policy(3), observation(3)
    cfg = FcvpConfig(K=1, tau=1.0)
    a, diag = fcvp_select(pol, LinearForce(offset=1e3), obs, history(), cfg, 0)
    assert diag["candidates"] == 1 and diag["fallback"]
    a2, _ = fcvp_select(pol, LinearForce(offset=0.0, slope=0.0), obs, history(), cfg, 0)
    assert np.array_equal(a, a2)


def test_fcvp_fallback_picks_lowest_force():
    pol, obs = policy(4), observation(4)
    a, diag = fcvp_select(pol, LinearForce(offset=500), obs, history(), FcvpConfig(K=16), 1)
    assert diag["fallback"] and diag["feasible"] == 0
    # lowest force under the stub is the most negative x translation among the candidates
    assert diag["predicted_force"] == pytest.approx(500 + 100 * a[0])


def test_fcvp_density_is_policy_density_for_uniform_candidates():
    from fcvp.controllers import propose_candidates
    pol, obs = policy(5), observation(5)
    cfg = FcvpConfig(K=200, p=0.5)
    cands = propose_candidates(pol, LinearForce(), obs, history(), cfg, np.random.default_rng(0))
    assert np.any(cands.sources == UNIFORM)
    ref = gaussian_log_prob(pol.mean(obs), pol.sigma, cands.actions)
    assert np.array_equal(cands.log_probs, ref)


def test_fcvp_resample_budget_finds_feasible():
    pol, obs = policy(6), observation(6)
    # only candidates with a_x < -0.99 are feasible: rare in one batch of 4
    fm = LinearForce(offset=100.0, slope=100.0)
    plain = [fcvp_select(pol, fm, obs, history(), FcvpConfig(K=4, tau=1.0), s)[1]
             for s in range(20)]
    extra = [fcvp_select(pol, fm, obs, history(),
                         FcvpConfig(K=4, tau=1.0, p=1.0, resample_budget=200), s)[1]
             for s in range(20)]
    assert all(d["fallback"] for d in plain)
    assert sum(not d["fallback"] for d in extra) > 0
    assert all(d["candidates"] > 4 or not d["fallback"] for d in extra)


def test_fcvp_rejects_wrong_history_length():
    with pytest.raises(ValueError):
        fcvp_select(policy(), LinearForce(N=5), observation(), history(3), FcvpConfig(), 0)


def test_fcvp_is_seeded():
    pol, obs, fm = policy(7), observation(7), LinearForce()
    a, _ = fcvp_select(pol, fm, obs, history(), FcvpConfig(), 9)
    b, _ = fcvp_select(pol, fm, obs, history(), FcvpConfig(), 9)
    assert np.array_equal(a, b)


# --- vision baselines -------------------------------------------------

def test_vision_only_is_policy_mean():
    pol, obs = policy(8), observation(8)
    assert np.array_equal(vision_only_select(pol, obs), pol.mean(obs))
    assert np.array_equal(vision_only_select(pol, obs), vision_only_select(pol, obs))


def test_vision_random_fractions():
    pol, obs = policy(9), observation(9)
    rng = np.random.default_rng(0)
    tags = [vision_random_select(pol, obs, 0.1, rng)[1] for _ in range(10_000)]
    assert abs(np.mean(np.array(tags) == UNIFORM) - 0.1) <= 0.01
    a, tag = vision_random_select(pol, obs, 0.0, 4)
    assert tag != UNIFORM
    assert np.array_equal(a, pol.sample(obs, np.random.default_rng(4)))


# --- Force Only -------------------------------------------------------

def test_force_only_cost_examples():
    assert force_only_cost(0.0, [1, 0, 0], np.zeros(6))[0] == 0.0
    j = force_only_cost(10.0, [1, 0, 0], [0.5, 0, 0, 0, 0, 0])[0]
    assert j == pytest.approx(0.001 * 10 - 0.5 + 0.1 * 0.25, abs=1e-15)
    assert j == pytest.approx(-0.465, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e4), st.floats(1e-3, 1e3))
def test_force_only_cost_increases_with_force(f, df):
    a = np.array([0.3, -0.2, 0.1, 0.0, 0.5, 0.0])
    assert force_only_cost(f + df, [0, 1, 0], a)[0] > force_only_cost(f, [0, 1, 0], a)[0]


def test_progress_direction_by_stage():
    assert np.allclose(progress_direction(ARM, "forearm"), [1, 0, 0])
    assert np.allclose(progress_direction(ARM, "upperarm"), [0, 1, 0])
    with pytest.raises(ValueError):
        progress_direction(ARM, "hand")


@pytest.mark.parametrize("half_angle", [np.pi / 8, np.pi / 4, np.pi / 3])
def test_cone_samples_respect_angle_and_box(half_angle):
    d = np.array([1.0, 2.0, -0.5])
    d /= np.linalg.norm(d)
    acts = cone_sample(d, 2000, half_angle, np.random.default_rng(0))
    trans = acts[:, :3]
    cos = trans @ d / np.linalg.norm(trans, axis=1)
    assert np.all(cos >= np.cos(half_angle) - 1e-12)
    assert np.all(np.abs(acts) <= 1)


def test_force_only_select_picks_minimum_cost():
    obs = observation(10)
    fm = LinearForce()
    a, diag = force_only_select(fm, obs, history(), ARM, "forearm", 64, 2)
    acts = cone_sample(progress_direction(ARM, "forearm"), 64, np.pi / 4, np.random.default_rng(2))
    costs = force_only_cost(fm.predict_batch(obs, None, acts), [1, 0, 0], acts)
    assert np.array_equal(a, acts[np.argmin(costs)])
    assert diag["cost"] == costs.min()


# --- fine-tuned policies ----------------------------------------------

def test_penalized_reward_examples():
    assert penalized_reward(0.7, 30.0, 40.0, 0.1) == 0.7
    assert penalized_reward(1.0, 50.0, 40.0, 0.1) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        penalized_reward(1.0, 50.0, 40.0, -1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(0, 1e4), st.floats(0.1, 1e3), st.floats(0, 10))
def test_penalty_never_raises_reward(r, f, tau, w):
    assert penalized_reward(r, f, tau, w) <= r


def test_zero_residual_matches_base():
    base, obs = policy(11), observation(11)
    res = ResidualPolicy.create(base, 5, np.random.default_rng(0))
    assert np.array_equal(res.mean(obs, history(value=30.0)), base.mean(obs))
    assert res.log_prob(obs, base.mean(obs)) == base.log_prob(obs, base.mean(obs))


def test_multimodal_starts_as_vision_policy(tmp_path):
    base, obs = policy(12), observation(12)
    mm = MultimodalPolicy.from_vision(base, 5, np.random.default_rng(0))
    assert np.array_equal(mm.mean(obs, history(value=80.0)), base.mean(obs))
    mm.network.head_layers[0].weights[:, -15:] = 0.5
    assert not np.array_equal(mm.mean(obs, history(value=80.0)), base.mean(obs))
    mm.save(tmp_path / "mm.ckpt")
    back = MultimodalPolicy.load(tmp_path / "mm.ckpt")
    h = history(value=80.0)
    assert np.array_equal(back.mean(obs, h), mm.mean(obs, h))


def test_residual_checkpoint_round_trip(tmp_path):
    base, obs = policy(13), observation(13)
    res = ResidualPolicy.create(base, 5, np.random.default_rng(1))
    res.network.head_layers[-1].biases[:] = 0.1
    res.save(tmp_path / "r.ckpt")
    back = ResidualPolicy.load(tmp_path / "r.ckpt", base)
    assert np.array_equal(back.mean(obs, history()), res.mean(obs, history()))


def test_unpenalized_finetune_objective_is_plain_return():
    from fcvp.clothsim import SIM_B
    from fcvp.env import EpisodeConfig
    from fcvp.geometry import ArmPoseSpec
    cfg = EpisodeConfig(ArmPoseSpec(0.2, 0.3, 0.3, 0.3, 0.035, 0.045), cloth_params=SIM_B,
                        horizon=8, force_threshold=1e-3)
    base = policy(14)
    mm = MultimodalPolicy.from_vision(base, 5, np.random.default_rng(0))
    tiny = CemConfig(population=4, elite_frac=0.5, iterations=1, eval_episodes=1,
                     init_param_std=0.0, min_std=0.0)
    _, log = train_multimodal_finetune(mm, lambda rng: cfg, 1e-3, 0.0, tiny, 0)
    assert log.mean_score[0] == episode_return(cfg, base, 5)
