import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnap.envs import (
    EnvSpec,
    MountainCarContinuous,
    NJointChain,
    make_env,
    mcc_reset,
    mcc_step,
    njoint_step,
)


def _reference_mcc(position, velocity, action):
    # public MountainCarContinuous-v0 step, transcribed independently
    force = min(max(action, -1.0), 1.0)
    velocity += force * 0.0015 - 0.0025 * math.cos(3 * position)
    if velocity > 0.07:
        velocity = 0.07
    if velocity < -0.07:
        velocity = -0.07
    position += velocity
    if position > 0.6:
        position = 0.6
    if position < -1.2:
        position = -1.2
    if position == -1.2 and velocity < 0:
        velocity = 0
    done = bool(position >= 0.45 and velocity >= 0)
    reward = 0
    if done:
        reward = 100.0
    reward -= math.pow(force, 2) * 0.1  # penalty on the applied (clamped) force
    return np.array([position, velocity], dtype=np.float32), reward, done


def test_reset_deterministic_and_in_range():
    a = mcc_reset(np.random.default_rng(3))
    b = mcc_reset(np.random.default_rng(3))
    assert np.array_equal(a, b)
    rng = np.random.default_rng(0)
    obs = np.stack([mcc_reset(rng) for _ in range(10_000)])
    assert obs[:, 0].min() >= -0.6 and obs[:, 0].max() <= -0.4
    assert np.all(obs[:, 1] == 0.0)


def test_zero_force_equilibrium_of_gravity_term():
    pos = math.pi / 6
    res, _ = mcc_step(np.array([pos, 0.01]), 0.0)
    assert float(res.obs[1]) == pytest.approx(0.01, abs=1e-8)


def test_goal_step_reward():
    state = np.array([0.44, 0.05])
    res, _ = mcc_step(state, 0.6)
    assert res.done
    assert res.reward == pytest.approx(100 - 0.1 * 0.36, abs=1e-12)


def test_full_throttle_never_reaches_goal():
    env = MountainCarContinuous()
    env.reset(np.random.default_rng(0))
    for _ in range(999):
        res = env.step([1.0])
        assert not res.done
    assert res.truncated


def test_matches_reference_over_random_trajectories():
    rng = np.random.default_rng(1)
    for _ in range(20):
        env = MountainCarContinuous()
        obs = env.reset(rng)
        ref = obs.copy()
        for _ in range(300):
            a = float(rng.uniform(-1, 1))
            res = env.step([a])
            ref, r, d = _reference_mcc(float(ref[0]), float(ref[1]), a)
            assert np.array_equal(res.obs, ref)
            assert res.reward == r and res.done == d
            if d:
                break


def test_action_clamped_and_counted():
    env = MountainCarContinuous()
    env.reset(np.random.default_rng(0))
    res = env.step([3.0])
    assert env.clamp_warnings == 1
    assert res.reward == pytest.approx(-0.1)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1.2, 0.6), st.floats(-0.07, 0.07), st.floats(-1.0, 1.0))
def test_mcc_reward_accounting_and_bounds(pos, vel, a):
    res, _ = mcc_step(np.array([pos, vel]), a)
    base = -0.1 * a * a
    assert res.reward == pytest.approx(base + (100.0 if res.done else 0.0), abs=1e-12)
    lo, hi = np.float32([-1.2, -0.07]), np.float32([0.6, 0.07])
    assert np.all(res.obs >= lo) and np.all(res.obs <= hi)


def test_truncation_at_999():
    env = MountainCarContinuous()
    env.reset(np.random.default_rng(0))
    for t in range(999):
        res = env.step([0.0])
    assert res.truncated and env.t == 999


def test_mcc_rejects_wrong_action_shape():
    env = MountainCarContinuous()
    env.reset(np.random.default_rng(0))
    with pytest.raises(ValueError):
        env.step([0.0, 1.0])


def test_same_seed_same_actions_bit_identical():
    def roll(name):
        env = make_env(name)
        rng = np.random.default_rng(4)
        out = [env.reset(rng)]
        act = np.random.default_rng(5)
        for _ in range(200):
            out.append(env.step(act.uniform(-1, 1, env.spec.action_dim)).obs)
        return np.stack(out)

    for name in ("mountaincar-continuous", "njoint-6"):
        assert roll(name).tobytes() == roll(name).tobytes()


def test_njoint_zero_action_from_rest():
    env = NJointChain(6)
    env.set_state(np.zeros(6), np.zeros(6))
    res = njoint_step(env, np.zeros(6))
    assert res.reward == 0.0
    assert np.all(res.obs == 0)


def test_njoint_control_penalty():
    # rest with all masses pushed equally: springs stay relaxed
    a = np.ones(6)
    env = NJointChain(6)
    env.set_state(np.zeros(6), np.zeros(6))
    res = env.step(a)
    displacement = env.dt * env.dt * 1.0
    assert res.reward == pytest.approx(displacement - 0.006, abs=1e-15)


def test_njoint_stays_finite_under_random_actions():
    env = NJointChain(17, max_episode_steps=10**6)
    rng = np.random.default_rng(0)
    env.reset(rng)
    for _ in range(10_000):
        res = env.step(rng.uniform(-1, 1, 17))
    assert np.all(np.isfinite(res.obs))
    assert np.abs(env.vel).max() < 1 / env.damping * 17


def test_njoint_linear_dynamics_closed_form():
    # two masses, no action: the relative coordinate is a damped oscillator
    env = NJointChain(2, stiffness=1.0, damping=0.5, dt=0.01)
    env.set_state([0.0, 0.2], [0.0, 0.0])
    for _ in range(100):
        env.step(np.zeros(2))
    # semi-implicit Euler tracks the exact solution to O(dt)
    w2 = 2 * env.stiffness
    zeta = env.damping / 2
    wd = math.sqrt(w2 - zeta ** 2)
    t = 1.0
    exact = 0.2 * math.exp(-zeta * t) * (math.cos(wd * t) + zeta / wd * math.sin(wd * t))
    assert float(env.pos[1] - env.pos[0]) == pytest.approx(exact, abs=5e-3)


def test_njoint_truncates_at_1000():
    env = make_env("njoint-2")
    env.reset(np.random.default_rng(0))
    for _ in range(1000):
        res = env.step(np.zeros(2))
    assert res.truncated and not res.done


def test_njoint_dimension_mismatch():
    env = NJointChain(6)
    env.reset(np.random.default_rng(0))
    with pytest.raises(ValueError):
        env.step(np.zeros(5))


def test_env_registry_and_spec():
    assert make_env("njoint-17").spec.action_dim == 17
    assert make_env("njoint-6").spec.obs_dim == 11
    assert make_env("mountaincar-continuous").spec.max_episode_steps == 999
    with pytest.raises(ValueError):
        make_env("cartpole")
    with pytest.raises(ValueError):
        EnvSpec(2, 1, (1.0,), (0.0,), 10)
