import math
import pickle

import numpy as np
import pytest

from dynsim import SimState
from initstate import FixedStateInit, InitialSample
from rlcore import (
    Agent, CheckpointError, Episode, Mlp, MomentumSgd, PointMassReachEnv, RunningNormalizer, TrainConfig,
    Trainer, TrainingError, collect_rollouts, evaluate_policy, gae, gae_advantages, gaussian_logprob,
    load_checkpoint, make_rng, policy_sample, ppo_surrogate, ppo_update, save_checkpoint, td_lambda_returns,
    td_lambda_targets, value_loss_and_gradient, value_update,
)


@pytest.fixture
def agent():
    return Agent(3, 2, hidden=(8, 8), std=0.1, rng=np.random.default_rng(7))


@pytest.fixture
def batch(rng):
    return {
        'obs': rng.normal(size=(16, 3)),
        'actions': rng.normal(size=(16, 2)),
        'advantages': rng.normal(size=16),
        'returns': rng.normal(size=16),
    }


def small_config(**overrides):
    options = dict(samples_per_batch=120, minibatch=40, hidden=(8, 8), policy_lr=0.01, value_lr=0.01,
                   policy_std=0.3, iterations=2)
    options.update(overrides)
    return TrainConfig(**options)


def point_mass_trainer(config=None, seed=3):
    config = config or small_config()
    env = PointMassReachEnv()
    agent = Agent(env.obs_dim, env.action_dim, config.hidden, config.policy_std, rng=np.random.default_rng(seed))
    start = FixedStateInit(SimState([0.0], [0.0]))
    return Trainer(agent, env, start, config, seed=seed)


def lambda_return_oracle(rewards, values, bootstrap, gamma, lam):
    """Weighted sum of n-step returns, computed directly."""
    T = len(rewards)
    v = list(values) + [bootstrap]
    out = []
    for t in range(T):
        horizon = T - t

        def n_step(n):
            g = sum(gamma ** i * rewards[t + i] for i in range(n))
            return g + gamma ** n * v[t + n]

        total = sum((1 - lam) * lam ** (n - 1) * n_step(n) for n in range(1, horizon))
        out.append(total + lam ** (horizon - 1) * n_step(horizon))
    return np.array(out)


# Policy distribution

def test_logprob_at_mean(agent):
    mean = np.array([[0.2, -0.4]])
    expected = -2.0 * math.log(0.1) - math.log(2.0 * math.pi)
    assert gaussian_logprob(mean, mean, agent.std)[0] == pytest.approx(expected)


def test_sampled_actions_center_on_the_mean(agent):
    obs = np.array([0.5, -1.0, 2.0])
    rng = np.random.default_rng(11)
    actions = np.array([policy_sample(agent, obs, rng)[0] for _ in range(20000)])
    np.testing.assert_allclose(actions.mean(axis=0), agent.mean_action(obs[None, :])[0], atol=0.005)
    np.testing.assert_allclose(actions.std(axis=0), [0.1, 0.1], rtol=0.05)


def test_sampled_logprob_is_exact(agent):
    obs = np.array([0.1, 0.2, 0.3])
    action, logprob = agent.policy_sample(obs, np.random.default_rng(0))
    assert logprob == pytest.approx(agent.logprob(obs[None, :], action[None, :])[0])


# Returns and advantages

def test_td_zero_is_one_step_bootstrap():
    rewards, values = np.array([1.0, 0.5, 0.2]), np.array([2.0, 3.0, 4.0])
    out = td_lambda_returns(rewards, values, 5.0, 0.9, 0.0)
    np.testing.assert_allclose(out, [1.0 + 0.9 * 3.0, 0.5 + 0.9 * 4.0, 0.2 + 0.9 * 5.0])


def test_td_one_is_discounted_monte_carlo():
    rewards, values = np.array([1.0, 0.5, 0.2]), np.array([2.0, 3.0, 4.0])
    out = td_lambda_returns(rewards, values, 0.0, 0.9, 1.0)
    assert out[0] == pytest.approx(1.0 + 0.9 * 0.5 + 0.81 * 0.2)
    assert out[2] == pytest.approx(0.2)


@pytest.mark.parametrize('lam', [0.0, 0.5, 0.95, 1.0])
def test_td_lambda_matches_n_step_oracle(rng, lam):
    rewards, values = rng.uniform(size=12), rng.normal(size=12)
    out = td_lambda_returns(rewards, values, 0.7, 0.95, lam)
    np.testing.assert_allclose(out, lambda_return_oracle(rewards, values, 0.7, 0.95, lam), atol=1e-12)


def test_gae_plus_value_is_lambda_return(rng):
    rewards, values = rng.uniform(size=10), rng.normal(size=10)
    advantages = gae(rewards, values, 0.3, 0.95, 0.9)
    np.testing.assert_allclose(advantages + values, td_lambda_returns(rewards, values, 0.3, 0.95, 0.9), atol=1e-12)


def test_gae_zero_lambda_is_td_error():
    rewards, values = np.array([1.0, 2.0]), np.array([0.5, 0.25])
    np.testing.assert_allclose(gae(rewards, values, 0.0, 0.5, 0.0), [1.0 + 0.125 - 0.5, 2.0 - 0.25])


def test_episode_targets_use_bootstrap_only_when_truncated():
    common = dict(obs=np.zeros((3, 2)), actions=np.zeros((2, 1)), rewards=np.array([1.0, 1.0]),
                  logprobs=np.zeros(2), values=np.array([0.0, 0.0, 10.0]), normalized_return=1.0)
    truncated = Episode(terminated=False, **common)
    terminated = Episode(terminated=True, **common)
    td_lambda_targets([truncated, terminated], 1.0, 1.0)
    gae_advantages([truncated, terminated], 1.0, 1.0)
    np.testing.assert_allclose(truncated.returns, [12.0, 11.0])
    np.testing.assert_allclose(terminated.returns, [2.0, 1.0])
    np.testing.assert_allclose(terminated.advantages, [2.0, 1.0])
    assert truncated.discounted_return(0.5) == pytest.approx(1.5)


def test_targets_do_not_depend_on_episode_order(rng):
    def episode(length, terminated):
        return Episode(np.zeros((length + 1, 2)), np.zeros((length, 1)), rng.normal(size=length),
                       np.zeros(length), rng.normal(size=length + 1), terminated, 0.5)

    batch = [episode(5, True), episode(3, False), episode(7, False)]
    advantages = [a.copy() for a in gae_advantages(batch, 0.95, 0.9)]
    returns = [r.copy() for r in td_lambda_targets(batch, 0.95, 0.9)]
    reordered = [batch[2], batch[0], batch[1]]
    for got, want in zip(gae_advantages(reordered, 0.95, 0.9), [advantages[2], advantages[0], advantages[1]]):
        np.testing.assert_array_equal(got, want)
    for got, want in zip(td_lambda_targets(reordered, 0.95, 0.9), [returns[2], returns[0], returns[1]]):
        np.testing.assert_array_equal(got, want)


# Policy and value updates

def test_surrogate_at_unit_ratio_is_mean_advantage(agent, batch):
    old = agent.logprob(batch['obs'], batch['actions'])
    surrogate, _, clip_frac = ppo_surrogate(agent, batch['obs'], batch['actions'], old, batch['advantages'], 0.2)
    assert surrogate == pytest.approx(batch['advantages'].mean())
    assert clip_frac == 0.0


def test_unit_ratio_gradient_is_plain_policy_gradient(agent, batch):
    old = agent.logprob(batch['obs'], batch['actions'])
    _, grad, _ = ppo_surrogate(agent, batch['obs'], batch['actions'], old, batch['advantages'], 0.2)
    means, activations = agent.policy.forward(agent.normalizer(batch['obs']))
    # mean of A·∇log π, with ∇_μ log π = (a − μ)/σ²
    score = (batch['actions'] - means) / agent.std ** 2
    plain = agent.policy.backward(activations, batch['advantages'][:, None] * score / len(batch['obs']))
    np.testing.assert_allclose(grad, plain, rtol=1e-12, atol=1e-15)


def test_clipped_samples_contribute_no_gradient(agent, batch):
    old = agent.logprob(batch['obs'], batch['actions']) - 1.0
    advantages = np.abs(batch['advantages']) + 0.1
    surrogate, grad, clip_frac = ppo_surrogate(agent, batch['obs'], batch['actions'], old, advantages, 0.2)
    assert not grad.any()
    assert clip_frac == 1.0
    assert surrogate == pytest.approx(1.2 * advantages.mean())


def test_surrogate_gradient_matches_finite_differences(agent, batch):
    old = agent.logprob(batch['obs'], batch['actions']) + 0.05
    _, grad, _ = ppo_surrogate(agent, batch['obs'], batch['actions'], old, batch['advantages'], 10.0)
    eps = 1e-6
    for i in np.random.default_rng(5).choice(agent.policy.params.size, 15, replace=False):
        saved = agent.policy.params[i]
        agent.policy.params[i] = saved + eps
        plus = ppo_surrogate(agent, batch['obs'], batch['actions'], old, batch['advantages'], 10.0)[0]
        agent.policy.params[i] = saved - eps
        minus = ppo_surrogate(agent, batch['obs'], batch['actions'], old, batch['advantages'], 10.0)[0]
        agent.policy.params[i] = saved
        assert grad[i] == pytest.approx((plus - minus) / (2 * eps), abs=1e-6)


def test_zero_stepsizes_leave_parameters_unchanged(agent, batch):
    batch = dict(batch, logprobs=agent.logprob(batch['obs'], batch['actions']) - 0.1)
    policy_before = agent.policy.params.copy()
    value_before = agent.value.params.copy()
    ppo_update(agent, batch, 0.2, MomentumSgd(agent.policy.params.size, 0.0))
    value_update(agent, batch, MomentumSgd(agent.value.params.size, 0.0))
    assert np.array_equal(agent.policy.params, policy_before)
    assert np.array_equal(agent.value.params, value_before)


def test_value_gradient_vanishes_at_targets(agent, batch):
    loss, grad = value_loss_and_gradient(agent, batch['obs'], agent.values(batch['obs']))
    assert loss == 0.0
    assert not grad.any()


def test_value_gradient_matches_finite_differences(agent, batch):
    _, grad = value_loss_and_gradient(agent, batch['obs'], batch['returns'])
    eps = 1e-6
    for i in np.random.default_rng(6).choice(agent.value.params.size, 15, replace=False):
        saved = agent.value.params[i]
        agent.value.params[i] = saved + eps
        plus = value_loss_and_gradient(agent, batch['obs'], batch['returns'])[0]
        agent.value.params[i] = saved - eps
        minus = value_loss_and_gradient(agent, batch['obs'], batch['returns'])[0]
        agent.value.params[i] = saved
        assert grad[i] == pytest.approx((plus - minus) / (2 * eps), abs=1e-6)


def test_value_updates_reduce_loss(agent, batch):
    optimizer = MomentumSgd(agent.value.params.size, 0.01, momentum=0.0)
    first = value_loss_and_gradient(agent, batch['obs'], batch['returns'])[0]
    for _ in range(50):
        value_update(agent, batch, optimizer)
    assert value_loss_and_gradient(agent, batch['obs'], batch['returns'])[0] < first


def test_non_finite_minibatch_is_skipped(agent, batch):
    batch = dict(batch, logprobs=agent.logprob(batch['obs'], batch['actions']))
    batch['advantages'] = batch['advantages'].copy()
    batch['advantages'][0] = np.nan
    before = agent.policy.params.copy()
    stats = ppo_update(agent, batch, 0.2, MomentumSgd(agent.policy.params.size, 0.1))
    assert stats.skipped == 1 and stats.updates == 0
    assert np.array_equal(agent.policy.params, before)


# Networks and normalization

def test_mlp_backward_matches_finite_differences(rng):
    net = Mlp([4, 8, 8, 3], rng, out_scale=1.0)
    x = rng.normal(size=(5, 4))
    grad_out = rng.normal(size=(5, 3))
    _, activations = net.forward(x)
    grad = net.backward(activations, grad_out)
    eps = 1e-6
    for i in range(net.params.size):
        saved = net.params[i]
        net.params[i] = saved + eps
        plus = np.sum(grad_out * net(x))
        net.params[i] = saved - eps
        minus = np.sum(grad_out * net(x))
        net.params[i] = saved
        assert grad[i] == pytest.approx((plus - minus) / (2 * eps), abs=1e-6)


def test_mlp_survives_pickling(rng):
    net = Mlp([2, 4, 1], rng)
    clone = pickle.loads(pickle.dumps(net))
    x = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(clone(x), net(x))
    clone.params[:] = 0.0
    assert not clone.weights[0].any()


def test_normalizer_matches_pooled_statistics(rng):
    a, b = rng.normal(1.0, 2.0, size=(50, 3)), rng.normal(-1.0, 0.5, size=(30, 3))
    norm = RunningNormalizer(3)
    norm.update(a)
    norm.update(b)
    pooled = np.vstack([a, b])
    np.testing.assert_allclose(norm.mean, pooled.mean(axis=0))
    np.testing.assert_allclose(norm.var, pooled.var(axis=0))


def test_normalizer_freezes_after_max_count(rng):
    norm = RunningNormalizer(2, max_count=10)
    norm.update(rng.normal(size=(10, 2)))
    mean = norm.mean.copy()
    norm.update(rng.normal(5.0, size=(10, 2)))
    np.testing.assert_array_equal(norm.mean, mean)
    assert norm.count == 10


def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(1, 2, 3).standard_normal(5)
    np.testing.assert_array_equal(a, make_rng(1, 2, 3).standard_normal(5))
    assert not np.array_equal(a, make_rng(1, 2, 4).standard_normal(5))
    assert not np.array_equal(a, make_rng(1, 3, 3).standard_normal(5))


# Configuration

def test_train_config_rejects_unknown_keys():
    with pytest.raises(TrainingError, match='Unknown training options'):
        TrainConfig.from_dict({'gamma': 0.9, 'learning_rate': 0.1})


@pytest.mark.parametrize('options', [{'gamma': 1.5}, {'lam': -0.1}, {'ppo_clip': 0.0}, {'minibatch': 0}])
def test_train_config_validation(options):
    with pytest.raises(TrainingError):
        TrainConfig(**options)


def test_train_config_round_trip():
    config = TrainConfig(hidden=[32, 16], gamma=0.9)
    assert TrainConfig.from_dict(config.to_dict()) == config


# Training

def test_rollouts_cover_the_sample_quota():
    trainer = point_mass_trainer()
    episodes = collect_rollouts(trainer.agent, trainer.env, trainer.init_dist, 50, seed=0, iteration=0, workers=2)
    # each worker stops at the first episode boundary past its quota of 25
    assert sum(ep.length for ep in episodes) == 80
    assert all(ep.obs.shape == (21, 2) for ep in episodes)


def test_training_is_reproducible():
    runs = []
    for _ in range(2):
        trainer = point_mass_trainer()
        metrics = [trainer.train_iteration() for _ in range(2)]
        runs.append((trainer.agent.policy.params.copy(), trainer.agent.value.params.copy(), metrics))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert np.array_equal(runs[0][1], runs[1][1])
    assert runs[0][2] == runs[1][2]


def test_iteration_metrics(mocker):
    trainer = point_mass_trainer()
    perf = mocker.patch('rlcore.perf_logger')
    metrics = trainer.train_iteration()
    assert metrics['iteration'] == 1
    assert metrics['samples'] == 120
    assert metrics['avg_episode_len'] == 20.0
    assert 0.0 < metrics['avg_normalized_return'] <= 1.0
    perf.info.assert_called_once()


def asi_episode(ret, component=0):
    start = InitialSample(SimState([0.0], [0.0]), 0.0, component, np.array([0.1, 0.2]))
    return Episode(np.zeros((2, 2)), np.zeros((1, 1)), np.array([ret]), np.zeros(1), np.zeros(2), True, 0.5,
                   start=start)


def test_asi_steps_once_per_batch_and_tracks_baseline(mocker):
    trainer = point_mass_trainer(small_config(asi_batch_episodes=3, asi_baseline_decay=0.9))
    update = mocker.patch('rlcore.asi_update', side_effect=lambda dist, records, lr, baseline: dist)

    trainer._asi_step([asi_episode(1.0), asi_episode(9.0, component=None), asi_episode(2.0)])
    assert update.call_count == 0
    assert trainer.asi_baseline is None

    trainer._asi_step([asi_episode(ret) for ret in (3.0, 4.0, 5.0, 6.0, 7.0)])
    # seven records: two full batches, one left over
    assert update.call_count == 2
    assert trainer.asi_updates == 2
    assert len(trainer.asi_records) == 1
    first, second = update.call_args_list
    assert [record.ret for record in first.args[1]] == [1.0, 2.0, 3.0]
    assert first.args[3] is None
    assert second.args[3] == pytest.approx(2.0)
    assert trainer.asi_baseline == pytest.approx(0.9 * 2.0 + 0.1 * 5.0)


@pytest.mark.slow
def test_point_mass_policy_improves():
    config = small_config(samples_per_batch=2000, minibatch=100, hidden=(32, 32), policy_lr=1e-3)
    trainer = point_mass_trainer(config)
    returns = [trainer.train_iteration()['avg_normalized_return'] for _ in range(50)]
    assert np.mean(returns[-3:]) > returns[0] + 0.2


def test_evaluation_report():
    trainer = point_mass_trainer()
    report = evaluate_policy(trainer.agent, trainer.env, trainer.init_dist, episodes=4)
    assert report.to_dict()['episodes'] == 4
    assert report.lengths == [20, 20, 20, 20]
    # deterministic rollouts from a fixed start are identical
    assert report.min == report.max


# Checkpoints

def test_checkpoint_round_trip(tmp_path):
    trainer = point_mass_trainer()
    trainer.train_iteration()
    path = tmp_path / 'run' / 'policy.bin'
    save_checkpoint(path, trainer, extra={'clip': 'walk'})
    checkpoint = load_checkpoint(path)
    assert checkpoint.header['iteration'] == 1
    assert checkpoint.header['extra'] == {'clip': 'walk'}

    restored = point_mass_trainer(seed=99)
    checkpoint.restore(restored)
    assert np.array_equal(restored.agent.policy.params, trainer.agent.policy.params)
    assert np.array_equal(restored.agent.normalizer.mean, trainer.agent.normalizer.mean)
    assert np.array_equal(restored.policy_opt.velocity, trainer.policy_opt.velocity)
    assert restored.iteration == 1 and restored.samples == trainer.samples
    obs = np.array([[0.3, 0.5]])
    np.testing.assert_array_equal(checkpoint.agent().mean_action(obs), trainer.agent.mean_action(obs))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match='not found'):
        load_checkpoint(tmp_path / 'absent.bin')


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / 'short.bin'
    path.write_bytes(b'\x01\x02')
    with pytest.raises(CheckpointError, match='truncated'):
        load_checkpoint(path)


def test_corrupt_checkpoint_header(tmp_path):
    path = tmp_path / 'corrupt.bin'
    path.write_bytes(np.array([4], dtype='<u8').tobytes() + b'{{{{')
    with pytest.raises(CheckpointError, match='corrupt header'):
        load_checkpoint(path)


def test_foreign_file_is_not_a_checkpoint(tmp_path):
    path = tmp_path / 'other.bin'
    blob = b'{"format": "other"}'
    path.write_bytes(np.array([len(blob)], dtype='<u8').tobytes() + blob)
    with pytest.raises(CheckpointError, match='not a checkpoint'):
        load_checkpoint(path)


def test_checkpoint_with_missing_floats(tmp_path):
    trainer = point_mass_trainer()
    path = tmp_path / 'policy.bin'
    save_checkpoint(path, trainer)
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError, match='holds'):
        load_checkpoint(path)


# Smoke task

def test_point_mass_env_contract():
    env = PointMassReachEnv(goal=1.0, steps=2)
    obs = env.reset(SimState([0.0], [0.0]))
    np.testing.assert_array_equal(obs, [0.0, 0.0])
    _, reward, done = env.step([5.0])
    assert reward == pytest.approx(1.0) and not done
    _, _, done = env.step([0.0])
    assert done
    assert env.normalized_return() == pytest.approx(1.0)
    with pytest.raises(TrainingError):
        env.step([0.0])
