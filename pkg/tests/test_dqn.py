import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldsc.dqn import DiscreteQPolicy, LinearSchedule, NoAdmissibleChoice, SmdpExperience
from ldsc.nn import MlpParams


def const_net(values):
    """Linear net mapping a 1-d input to fixed head values (bias only)."""
    v = np.asarray(values, float)
    return MlpParams([np.zeros((1, len(v)))], [v.copy()])


def policy_with(online, target=None, gamma=0.99):
    p = DiscreteQPolicy(1, len(online), hidden=(), gamma=gamma, batch_size=1, capacity=10)
    p.online = const_net(online)
    p.target = const_net(online if target is None else target)
    return p


def exp(choice=0, rewards=(0.0,), next_candidates=(0,), terminal=False, dim=1):
    return SmdpExperience(np.zeros(dim), choice, tuple(rewards), len(rewards), np.zeros(dim), tuple(next_candidates), terminal)


def test_select_singleton():
    p = policy_with([0.1, 0.9, 0.3])
    assert p.select([0.0], [2], explore=True) == 2


def test_select_argmax_and_mask():
    p = policy_with([0.1, 0.9, 0.3])
    assert p.select([0.0], [0, 1, 2], explore=False) == 1
    assert p.select([0.0], [0, 2], explore=False) == 2


def test_select_ties_lowest_index():
    p = policy_with([0.5, 0.5, 0.5])
    assert p.select([0.0], [2, 1], explore=False) == 1


def test_select_empty():
    with pytest.raises(NoAdmissibleChoice, match="no admissible choice"):
        policy_with([0.0]).select([0.0], [], explore=False)


@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.sets(st.integers(0, 3), min_size=1), st.booleans())
def test_select_returns_a_candidate(q, cands, explore):
    p = policy_with(q)
    assert p.select([0.0], cands, explore) in cands


def test_epsilon_uniform_when_one():
    p = policy_with([0.0, 10.0, 0.0])
    p.epsilon = LinearSchedule(1.0, 1.0, 1)
    picks = [p.select([0.0], [0, 1, 2], True) for _ in range(3000)]
    freq = np.bincount(picks, minlength=3) / 3000
    assert np.all(np.abs(freq - 1 / 3) < 0.04)


def test_linear_schedule():
    s = LinearSchedule(1.0, 0.05, 100)
    assert s.value(0) == 1.0
    assert s.value(100) == pytest.approx(0.05) and s.value(500) == pytest.approx(0.05)
    assert s.value(50) == pytest.approx(0.525)


def test_smdp_target_terminal():
    p = policy_with([3.0, 7.0])
    assert p.smdp_target([exp(rewards=[1.0], next_candidates=(), terminal=True)])[0] == 1.0


def test_smdp_target_double_dqn_example():
    p = policy_with([0.0, 1.0], target=[5.0, 2.0], gamma=0.99)
    y = p.smdp_target([exp(rewards=[0.0], next_candidates=(0, 1))])
    assert y[0] == pytest.approx(1.98)


def test_smdp_target_multi_step_example():
    p = policy_with([0.0, 1.0], target=[9.0, 4.0], gamma=0.5)
    y = p.smdp_target([exp(rewards=[0.0, 0.0, 1.0], next_candidates=(0, 1))])
    assert y[0] == pytest.approx(0.75)


def test_smdp_target_masks_bootstrap():
    p = policy_with([0.0, 1.0], target=[9.0, 4.0], gamma=0.5)
    assert p.smdp_target([exp(next_candidates=(0,))])[0] == pytest.approx(4.5)


def test_smdp_target_errors():
    p = policy_with([0.0])
    with pytest.raises(NoAdmissibleChoice):
        p.smdp_target([exp(next_candidates=())])
    with pytest.raises(ValueError):
        p.smdp_target([])


@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
)
def test_target_perturbation_keeps_bootstrap_index(online, target_a, target_b):
    gamma = 0.9
    pa = policy_with(online, target_a, gamma)
    pb = policy_with(online, target_b, gamma)
    e = exp(rewards=[0.0], next_candidates=(0, 1, 2))
    best = max(range(3), key=lambda c: (online[c], -c))
    assert pa.smdp_target([e])[0] == pytest.approx(gamma * target_a[best])
    assert pb.smdp_target([e])[0] == pytest.approx(gamma * target_b[best])


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 0.999))
def test_one_step_reduces_to_dqn(r, v, gamma):
    p = policy_with([v], gamma=gamma)
    assert p.smdp_target([exp(rewards=[r])])[0] == pytest.approx(r + gamma * v)


def test_train_converges_to_terminal_reward():
    p = DiscreteQPolicy(2, 1, hidden=(8,), lr=1e-2, batch_size=4, capacity=16, rng=np.random.default_rng(0))
    batch = [SmdpExperience(np.array([1.0, 0.0]), 0, (5.0,), 1, np.zeros(2), (), True)] * 4
    for _ in range(3000):
        p.train_step(batch)
    assert p.q_values([1.0, 0.0])[0] == pytest.approx(5.0, abs=0.01)
    assert p.train_step(batch) < 1e-3


def test_train_zero_loss_when_exact():
    p = policy_with([2.0])
    p.target = const_net([0.0])
    loss = p.train_step([exp(rewards=[2.0], next_candidates=(), terminal=True)])
    assert loss == 0.0
    assert p.online.biases[0][0] == pytest.approx(2.0, abs=1e-9)


def test_train_needs_enough_replay():
    p = DiscreteQPolicy(1, 1, batch_size=4, capacity=8)
    with pytest.raises(ValueError):
        p.train_step()
    assert p.maybe_train() is None


def test_defaults():
    p = DiscreteQPolicy(3, 2)
    assert p.batch_size == 64 and p.tau == 0.01 and p.gamma == 0.99
    assert p.replay.maxlen == 100_000


def test_push_fifo():
    p = DiscreteQPolicy(1, 2, batch_size=1, capacity=1)
    a = exp(choice=1)
    p.push(a)
    assert p.sample(1)[0] is a
    p = DiscreteQPolicy(1, 2, batch_size=1, capacity=3)
    items = [exp(rewards=[float(i)]) for i in range(4)]
    for e in items:
        p.push(e)
    assert items[0] not in p.replay and len(p.replay) == 3
    for _ in range(10_000):
        p.push(items[1])
    assert len(p.replay) == 3


def test_push_rejects_invalid():
    p = DiscreteQPolicy(1, 2, batch_size=1, capacity=3)
    with pytest.raises(ValueError):
        p.push(exp(choice=2))
    with pytest.raises(ValueError):
        p.push(exp(next_candidates=(5,)))
    with pytest.raises(ValueError):
        p.push(SmdpExperience(np.zeros(1), 0, (0.0, 0.0), 1, np.zeros(1), (0,), False))
    with pytest.raises(ValueError):
        p.push(exp(dim=3))


# chain 0 -> 1 -> 2 -> 3 (terminal). "step" moves +1 in one tick; "jump" moves
# +2 (clipped at 3) in three ticks. Reaching 3 pays 1 on the arriving tick.
CHAIN_GAMMA = 0.9


def chain_model(s, a):
    if a == 0:
        s2 = s + 1
        rewards = [1.0 if s2 == 3 else 0.0]
    else:
        s2 = min(s + 2, 3)
        rewards = [0.0, 0.0, 1.0 if s2 == 3 else 0.0]
    return rewards, s2


def value_iteration():
    q = np.zeros((4, 2))
    for _ in range(200):
        v = q.max(axis=1)
        v[3] = 0.0
        for s in range(3):
            for a in range(2):
                rewards, s2 = chain_model(s, a)
                ret = sum(CHAIN_GAMMA**i * r for i, r in enumerate(rewards))
                q[s, a] = ret + CHAIN_GAMMA ** len(rewards) * v[s2]
    return q[:3]


def test_matches_tabular_smdp_value_iteration():
    expected = value_iteration()
    p = DiscreteQPolicy(4, 2, hidden=(16,), gamma=CHAIN_GAMMA, lr=3e-3, batch_size=6, capacity=100, rng=np.random.default_rng(3))
    onehot = np.eye(4)
    for s in range(3):
        for a in range(2):
            rewards, s2 = chain_model(s, a)
            p.push(SmdpExperience(onehot[s], a, tuple(rewards), len(rewards), onehot[s2], (0, 1) if s2 < 3 else (), s2 == 3))
    for _ in range(5000):
        p.train_step()
    learned = np.array([p.q_values(onehot[s]) for s in range(3)])
    assert np.max(np.abs(learned - expected)) < 0.05


def test_save_and_load(tmp_path):
    p = DiscreteQPolicy(3, 2, hidden=(4,), rng=np.random.default_rng(1))
    p.decisions = 17
    p.save(tmp_path, names=["key", "lock"], conditioning={"task_ids": [0]})
    side = json.loads((tmp_path / "policy.json").read_text())
    assert side["candidate_names"] == ["key", "lock"]
    assert side["epsilon"]["decisions"] == 17
    assert side["replay_size"] == 0
    q = DiscreteQPolicy(3, 2, hidden=(4,), rng=np.random.default_rng(2))
    q.load_weights(tmp_path)
    x = np.array([0.1, -0.3, 0.7])
    assert np.array_equal(p.q_values(x), q.q_values(x))
    assert q.decisions == 17
