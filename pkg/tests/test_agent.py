import numpy as np
import pytest

from mobprof import environment as envmod
from mobprof import synthetic as S
from mobprof.agent import (
    Agent,
    AgentConfig,
    QNetwork,
    RewardConfig,
    Trainer,
    compute_target,
    epsilon_at,
    load_agent,
    pool_kg,
    pool_weights,
    q_forward,
    run_training,
    save_agent,
    select_action,
    state_vector,
    sync_target,
    train_step,
)
from mobprof.errors import ConfigError
from mobprof.evaluation import evaluate
from mobprof.pipeline import build_artifacts, event_stream, make_env
from mobprof.replay import Transition
from mobprof.reward import CategoryVectors, RewardBaselines, RewardWeights
from mobprof.spatial_kg import KgState


def test_pool_equal_vectors(ten_poi_env):
    env, _ = ten_poi_env
    kg = env.kg
    v = np.arange(6.0)
    ks = KgState(np.tile(v, (kg.n_pois, 1)), np.tile(v, (kg.n_categories + kg.n_zones, 1)), env.kg_state.rel)
    np.testing.assert_allclose(pool_kg(ks, kg), v, atol=1e-12)


def test_pool_loop_oracle(ten_poi_env):
    env, _ = ten_poi_env
    kg, ks = env.kg, env.kg_state
    belong = [ks.heads[p] for p in range(kg.n_pois)] + [ks.tails[c] for c in range(kg.n_categories)]
    locate = [ks.heads[p] for p in range(kg.n_pois)] + [ks.tails[kg.n_categories + z] for z in range(kg.n_zones)]
    a = sum(belong) / len(belong)
    b = sum(locate) / len(locate)
    np.testing.assert_allclose(pool_kg(ks, kg), (a + b) / 2, rtol=0, atol=1e-12)
    wh, wc, wz = pool_weights(kg)
    lin = wh * ks.heads.sum(0) + wc * ks.tails[: kg.n_categories].sum(0) + wz * ks.tails[kg.n_categories :].sum(0)
    np.testing.assert_allclose(pool_kg(ks, kg), lin, rtol=0, atol=1e-12)


def test_q_forward_shapes_and_hand_values():
    net = QNetwork([4, 3, 5], seed=0)
    for W in net.weights:
        W[:] = 0
    assert not q_forward(net, np.ones(2), np.ones(2)).any()
    assert QNetwork([6, 8, 7], seed=1).forward(np.ones(6)).shape == (1, 7)
    # identity single layer: Q = (u1, g1) for the 2-action toy
    lin = QNetwork([2, 2], seed=0)
    lin.weights[0][:] = np.eye(2)
    lin.biases[0][:] = [0.5, -0.5]
    np.testing.assert_array_equal(q_forward(lin, np.array([2.0]), np.array([3.0])), [2.5, 2.5])


def test_select_action():
    rng = np.random.default_rng(0)
    assert select_action(np.array([1.0, 3.0, 2.0]), 0.0, rng) == 1
    assert select_action(np.array([5.0, 5.0]), 0.0, rng) == 0
    n = 100_000
    draws = np.bincount([select_action(np.zeros(4), 1.0, rng) for _ in range(n)], minlength=4) / n
    assert np.all(np.abs(draws - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / n))


def test_compute_target_examples():
    qe, qt = np.array([1.0, 3.0]), np.array([2.0, 0.5])
    assert compute_target("ddqn", 1.0, qe, qt, 0.9) == pytest.approx(1.45)
    assert compute_target("dqn", 1.0, qe, qt, 0.9) == pytest.approx(2.8)
    assert compute_target("ddqn", 1.0, qe, qt, 0.0) == compute_target("dqn", 1.0, qe, qt, 0.0) == 1.0
    assert compute_target("ddqn", 0.3, qt, qt, 0.9) == compute_target("dqn", 0.3, qt, qt, 0.9)
    batch = compute_target("dqn", np.array([1.0, 2.0]), np.zeros((2, 2)), np.array([[1.0, 0.0], [0.0, 3.0]]), 0.5)
    np.testing.assert_allclose(batch, [1.5, 3.5])
    with pytest.raises(ConfigError):
        compute_target("sarsa", 1.0, qe, qt, 0.9)


def fd_qnet(net, x, acts, y, step=1e-5):
    _, gW, gb, gx = net.loss_and_grad(x, acts, y)
    worst = 0.0
    for params, grads in ((net.weights, gW), (net.biases, gb)):
        for P, G in zip(params, grads):
            num = np.zeros_like(P)
            for i in np.ndindex(P.shape):
                old = P[i]
                P[i] = old + step
                lp = net.loss_and_grad(x, acts, y)[0]
                P[i] = old - step
                lm = net.loss_and_grad(x, acts, y)[0]
                P[i] = old
                num[i] = (lp - lm) / (2 * step)
            worst = max(worst, np.linalg.norm(num - G) / max(np.linalg.norm(num), np.linalg.norm(G), 1e-12))
    numx = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + step
        lp = net.loss_and_grad(x, acts, y)[0]
        x[i] = old - step
        lm = net.loss_and_grad(x, acts, y)[0]
        x[i] = old
        numx[i] = (lp - lm) / (2 * step)
    worst = max(worst, np.linalg.norm(numx - gx) / max(np.linalg.norm(numx), 1e-12))
    return worst


def test_qnet_gradient():
    rng = np.random.default_rng(3)
    net = QNetwork([5, 7, 4, 3], seed=2)
    x = rng.normal(size=(6, 5))
    assert fd_qnet(net, x, rng.integers(0, 3, 6), rng.normal(size=6)) <= 1e-4


def small_batch(rng, n, dim=4, actions=3):
    return [Transition(rng.normal(size=dim), int(rng.integers(actions)), float(rng.normal()), rng.normal(size=dim)) for _ in range(n)]


def test_train_step_fixed_point_and_hand_loss():
    rng = np.random.default_rng(4)
    cfg = AgentConfig(hidden=(5,), lr=0.1, gamma=0.9)
    qe = QNetwork([4, 5, 3], seed=0)
    qt = qe.copy()
    (t,) = small_batch(rng, 1)
    y = compute_target("ddqn", t.reward, qe.forward(t.next_state)[0], qt.forward(t.next_state)[0], 0.9)
    want = (qe.forward(t.state)[0, t.action] - y) ** 2
    assert train_step([t], qe.copy(), qt, cfg) == pytest.approx(want, rel=1e-12)
    # make the target exactly match: reward chosen so y == Q(s, a)
    t.reward = float(qe.forward(t.state)[0, t.action] - 0.9 * qt.forward(t.next_state)[0, np.argmax(qe.forward(t.next_state)[0])])
    before = [w.copy() for w in qe.weights]
    assert train_step([t], qe, qt, cfg) == pytest.approx(0.0, abs=1e-20)
    for a, b in zip(before, qe.weights):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_train_step_leaves_target_alone():
    rng = np.random.default_rng(5)
    cfg = AgentConfig(hidden=(5,), lr=0.1)
    qe = QNetwork([4, 5, 3], seed=0)
    qt = qe.copy()
    ref = [w.copy() for w in qt.weights]
    train_step(small_batch(rng, 8), qe, qt, cfg)
    assert any(not np.array_equal(a, b) for a, b in zip(ref, qe.weights))
    for a, b in zip(ref, qt.weights):
        np.testing.assert_array_equal(a, b)


def test_sync_target():
    qe = QNetwork([2, 3], seed=0)
    qt = QNetwork([2, 3], seed=1)
    assert sync_target(qe, qt, 10, 10)
    np.testing.assert_array_equal(qt.weights[0], qe.weights[0])
    assert not sync_target(qe, qt, 11, 10)
    qe.weights[0] += 1
    assert not np.array_equal(qt.weights[0], qe.weights[0])
    for step in range(1, 4):
        qe.weights[0] += 1
        sync_target(qe, qt, step, 1)
        np.testing.assert_array_equal(qt.weights[0], qe.weights[0])
    with pytest.raises(ConfigError):
        sync_target(qe, qt, 1, 0)


def test_epsilon_schedule_and_config():
    cfg = AgentConfig()
    assert epsilon_at(0, 100, cfg) == 1.0
    assert epsilon_at(25, 100, cfg) == pytest.approx(0.525)
    assert epsilon_at(50, 100, cfg) == 0.05 == epsilon_at(99, 100, cfg)
    for bad in ({"gamma": 1.0}, {"variant": "x"}, {"priority": "x"}, {"sync_every": 0}):
        with pytest.raises(ConfigError):
            AgentConfig(**bad)


def alternating_setup(cycles=10, dim=8):
    events, grid = S.cyclic_user(n_pois=2, cycles=cycles)
    trips = S.periodic_trips(grid, events[0].timestamp, events[-1].timestamp, 30)
    art = build_artifacts(events, trips, grid, dim=dim, transd_epochs=100, seed=0)
    env = make_env(art, grid, seed=0)
    vec = CategoryVectors.from_word_vectors(art.kg.category_names, S.word_vectors(), 8)
    train = event_stream(art.train, art.contexts, grid.m)
    test = event_stream(art.test, art.contexts, grid.m)
    return env, train, test, vec


def test_zero_events_untrained():
    env, _, _, vec = alternating_setup(cycles=2)
    agent = Agent(16, env.kg.n_pois, AgentConfig(hidden=(4,)))
    ref = agent.q_e.copy()
    tr = run_training(env, agent, [], vec, RewardConfig(), episodes=5)
    assert tr.log == [] and agent.step == 0
    np.testing.assert_array_equal(agent.q_e.weights[0], ref.weights[0])


def test_alternating_user_learned():
    env, train, test, vec = alternating_setup()
    cfg = AgentConfig(lr=1e-3, hidden=(32, 16), batch_size=16, learning_starts=16, seed=0)
    agent = Agent(16, env.kg.n_pois, cfg)
    rc = RewardConfig("r1", RewardWeights(0.01, 1.0, 1.0), RewardBaselines())
    trainer = Trainer(env, agent, train, vec, rc, episodes=200)
    seen = []

    def spy(state, user_id, poi_id, T_flat, strategy):
        seen.append(poi_id)
        return envmod.apply_event(state, user_id, poi_id, T_flat, strategy)

    trainer.apply = spy
    trainer.run()
    # the environment only ever sees the true visits
    assert seen == [e.poi_id for e, _ in train] * 200
    start = trainer.initial.snapshot()
    rep = evaluate(agent.greedy, start, train, vec)
    assert np.mean([a == b for _, a, b in rep.pairs]) >= 0.9
    rep = evaluate(agent.greedy, env, test, vec)
    assert np.mean([a == b for _, a, b in rep.pairs]) >= 0.9


def test_training_determinism_and_resume(tmp_path):
    def run(until=None, resume_from=None):
        env, train, _, vec = alternating_setup(cycles=4)
        cfg = AgentConfig(lr=1e-3, hidden=(8,), batch_size=4, learning_starts=4, seed=1)
        tr = Trainer(env, Agent(16, env.kg.n_pois, cfg), train, vec, RewardConfig(), episodes=6)
        tr.run(until)
        return tr

    a, b = run(), run()
    assert [r.row() for r in a.log] == [r.row() for r in b.log]
    half = run(until=3)
    half.save(tmp_path / "t.pkl")
    resumed = Trainer.load(tmp_path / "t.pkl")
    resumed.run()
    assert [r.row() for r in resumed.log] == [r.row() for r in a.log]
    for x, y in zip(resumed.agent.q_e.weights, a.agent.q_e.weights):
        np.testing.assert_array_equal(x, y)
    save_agent(tmp_path / "a.npz", a.agent, fingerprint="f", seed=1)
    back = load_agent(tmp_path / "a.npz")
    assert back.step == a.agent.step and back.cfg == a.agent.cfg
    for x, y in zip(back.q_t.weights, a.agent.q_t.weights):
        np.testing.assert_array_equal(x, y)
    x = state_vector(a.env, "u0")
    np.testing.assert_array_equal(back.q_e.forward(x), a.agent.q_e.forward(x))
