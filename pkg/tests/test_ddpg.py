import numpy as np
import pytest
from hypothesis import given, strategies as st

from ldsc.ddpg import DdpgAgent, TransitionBuffer, intra_option_reward
from ldsc.dqn import LinearSchedule
from ldsc.nn import forward
from ldsc.smdp import OptionDef, OptionKind, StateVec, SubgoalSpec

KEY = SubgoalSpec("key", (5.0, 5.0), 1.0, (), (("key", 0), ("lock", 1)))
LOCK = SubgoalSpec("lock", (15.0, 15.0), 1.0, ("key",), (("key", 0), ("lock", 1)))


def small(seed=0, **kw):
    return DdpgAgent(3, hidden=(16, 16), rng=np.random.default_rng(seed), **kw)


def test_defaults_follow_table_sizes():
    agent = DdpgAgent(4)
    assert agent.actor.sizes == [4, 400, 300, 2]
    assert agent.critic.sizes == [6, 400, 300, 1]
    assert (agent.critic_lr, agent.actor_lr, agent.tau, agent.batch_size) == (1e-3, 1e-4, 0.01, 64)
    assert agent.actor_target.sizes == agent.actor.sizes


def test_initial_action_near_zero():
    agent = small()
    assert np.all(np.abs(agent.act(np.ones(3), explore=False)) < 0.05)


def test_greedy_action_deterministic():
    agent = small()
    x = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(agent.act(x, False), agent.act(x, False))


def test_noise_std():
    agent = small(noise=LinearSchedule(0.2, 0.2, 1), action_bound=100.0)
    x = np.zeros(3)
    mu = agent.act(x, False)
    samples = np.array([agent.act(x, True) for _ in range(10_000)]) - mu
    assert abs(samples.std() - 0.2) < 0.02


def test_actions_clipped():
    agent = small(noise=LinearSchedule(50.0, 50.0, 1))
    acts = np.array([agent.act(np.zeros(3), True) for _ in range(200)])
    assert np.all(np.abs(acts) <= 1.0)


def test_non_finite_action_raises():
    agent = small()
    agent.actor.biases[-1][:] = np.nan
    with pytest.raises(FloatingPointError):
        agent.act(np.zeros(3), False)


def test_noise_schedule_follows_clock():
    agent = small()
    agent.noise = LinearSchedule(0.3, 0.05, 10)
    agent.schedule_clock = 5
    assert agent.noise_sigma() == pytest.approx(0.175)


def batch_of(agent, n, done):
    rng = np.random.default_rng(5)
    return (rng.normal(size=(n, 3)), rng.uniform(-1, 1, (n, 2)), rng.normal(size=n), rng.normal(size=(n, 3)), np.full(n, float(done)))


def test_done_targets_equal_rewards(monkeypatch):
    agent = small()
    seen = {}
    import ldsc.ddpg as mod

    real = mod.backward

    def spy(params, cache, g, pre=None):
        if params is agent.critic and "y" not in seen:
            q = cache["activations"][-1][:, 0]
            seen["y"] = q - g[:, 0] * len(q) / 2.0
        return real(params, cache, g, pre)

    monkeypatch.setattr(mod, "backward", spy)
    batch = batch_of(agent, 8, True)
    agent.train_step(batch)
    assert np.allclose(seen["y"], batch[2])


def test_q_bounds_clip_targets():
    agent = small(q_bounds=(-0.5, 0.5))
    s, a, r, s2, d = batch_of(agent, 8, True)
    r = np.full(8, 3.0)
    before = forward(agent.critic, np.hstack([s, a]))[0][:, 0]
    loss, _ = agent.train_step((s, a, r, s2, d))
    assert loss == pytest.approx(np.mean((before - 0.5) ** 2))


def test_preact_hinge_pulls_saturated_actor_back():
    def final_bias(l2):
        agent = small(preact_l2=l2)
        agent.actor_lr = 1e-2
        agent.critic_lr = 0.0
        for layer in agent.critic.weights:
            layer[:] = 0.0
        agent.actor.biases[-1][:] = 6.0
        batch = batch_of(agent, 16, True)
        for _ in range(100):
            agent.train_step(batch)
        return agent.actor.biases[-1]

    assert np.all(final_bias(0.0) == 6.0)
    assert np.all(final_bias(1.0) < 5.9)


def test_hinge_inactive_inside_limit():
    a, b = small(preact_l2=0.0), small(preact_l2=1.0)
    batch = batch_of(a, 16, False)
    a.train_step(batch)
    b.train_step(batch)
    for x, y in zip(a.actor.arrays(), b.actor.arrays()):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("seed", range(5))
def test_bandit_converges_to_zero_action(seed):
    agent = DdpgAgent(1, action_dim=1, hidden=(64, 64), rng=np.random.default_rng(seed), noise=LinearSchedule(0.3, 0.3, 1))
    agent.actor.biases[-1][:] = 1.0
    s = np.ones(1)
    for step in range(3000):
        a = agent.act(s, True)
        agent.push(s, a, -float(a[0] ** 2), s, True)
        agent.maybe_train()
    assert abs(agent.act(s, False)[0]) < 0.05


def test_soft_update_targets_track_online():
    agent = small()
    for layer in agent.actor.arrays():
        layer += 1.0
    agent.tau = 0.5
    from ldsc.nn import soft_update

    def dist():
        return np.sqrt(sum(np.sum((t - o) ** 2) for t, o in zip(agent.actor_target.arrays(), agent.actor.arrays())))

    d0 = dist()
    for k in range(1, 6):
        soft_update(agent.actor_target, agent.actor, agent.tau)
        assert dist() == pytest.approx(d0 * 0.5**k)


def test_train_needs_replay():
    agent = small(batch_size=4)
    with pytest.raises(ValueError):
        agent.train_step()
    assert agent.maybe_train() is None


def test_buffer_fifo_and_growth():
    buf = TransitionBuffer(1, 1, capacity=3000)
    for i in range(3001):
        buf.push([i], [0.0], float(i), [i], False)
    assert len(buf) == 3000
    assert 0.0 not in buf.r[:, 0] and 3000.0 in buf.r[:, 0]


def test_clone_is_independent():
    agent = small()
    twin = agent.clone()
    twin.actor.biases[-1][:] += 1.0
    assert not np.array_equal(twin.actor.biases[-1], agent.actor.biases[-1])


def test_save_load(tmp_path):
    a, b = small(0), small(1)
    a.save(tmp_path / "a.json")
    b.load(tmp_path / "a.json")
    x = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(a.act(x, False), b.act(x, False))


def option(subgoal):
    return OptionDef(0, subgoal, OptionKind.GLOBAL, 1)


def test_intra_option_reward_examples():
    o = option(KEY)
    assert intra_option_reward(StateVec(0, 0), StateVec(5, 5, flags=(0, 0)), o) == (1.0, True)
    assert intra_option_reward(StateVec(0, 0), StateVec(9, 9, flags=(0, 0)), o) == (-0.01, False)
    lock = option(LOCK)
    assert intra_option_reward(StateVec(0, 0), StateVec(15, 15, flags=(0, 0)), lock, 0.05) == (-0.05, False)
    assert intra_option_reward(StateVec(0, 0), StateVec(15, 15, flags=(1, 0)), lock) == (1.0, True)


@given(st.floats(0, 20), st.floats(0, 20))
def test_intra_option_reward_matches_termination(x, y):
    o = option(KEY)
    r, done = intra_option_reward(StateVec(0, 0), StateVec(x, y, flags=(0, 0)), o)
    assert done == (np.hypot(x - 5, y - 5) <= 1.0)
    assert r == (1.0 if done else -0.01)
