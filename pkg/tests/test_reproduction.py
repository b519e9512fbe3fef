import argparse
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from imitenv import ImitationEnv
from initstate import ReferenceStateInit
from rlcore import Agent, evaluate_policy
from workbench import ExperimentConfig, cmd_ablate, load_experiment, run_training

REPO_DIR = Path(__file__).resolve().parent.parent
CONFIG_DIR = REPO_DIR / 'configs'


@pytest.fixture
def quiet_perf(mocker):
    mocker.patch('rlcore.perf_logger')


def test_untrained_walker_scores_low(walker7, walk_clip):
    env = ImitationEnv(walker7, walk_clip)
    agent = Agent(env.obs_dim, env.action_dim, rng=np.random.default_rng(0))
    report = evaluate_policy(agent, env, ReferenceStateInit(env.track), episodes=3, seed=0)
    assert report.mean < 0.2
    assert all(length < env.max_steps for length in report.lengths)


def test_training_is_reproducible(tmp_path, quiet_perf):
    def config(name):
        return ExperimentConfig(
            character=str(REPO_DIR / 'characters' / 'walker7.json'), motion='synth:walk', init='asi', k=2,
            iterations=2, eval_episodes=2, episode={'horizon': 0.5}, out=str(tmp_path / name),
            overrides={'samples_per_batch': 30, 'minibatch': 15, 'hidden': [8, 8], 'ppo_epochs': 1,
                       'value_epochs': 1, 'asi_batch_episodes': 2},
        )

    first, second = config('a'), config('b')
    run_training(first, first.out_dir, seed=5)
    run_training(second, second.out_dir, seed=5)
    for name in ('metrics.csv', 'eval.json', 'metadata.json', 'checkpoint.bin'):
        assert (first.out_dir / name).read_bytes() == (second.out_dir / name).read_bytes()


# Long desk-scale runs

def ablation_summary(config_name, tmp_path):
    cfg = load_experiment(CONFIG_DIR / config_name)
    cfg.out = str(tmp_path / 'ablation')
    assert cmd_ablate(cfg, argparse.Namespace(mode=None)) == 0
    runs = pd.read_csv(cfg.out_dir / 'runs.csv')
    assert (runs['status'] == 'ok').all()
    return pd.read_csv(cfg.out_dir / 'summary.csv').iloc[0]


@pytest.mark.slow
def test_walk_with_asi_reaches_good_tracking(tmp_path):
    cfg = load_experiment(CONFIG_DIR / 'walk.json')
    summary = run_training(cfg, tmp_path / 'walk', seed=0)
    assert summary['final_return'] >= 0.6


@pytest.mark.slow
def test_flip_ablation_orders_init_strategies(tmp_path):
    summary = ablation_summary('backflip_ablation.json', tmp_path)
    assert summary['ASI'] >= summary['RSI'] >= summary['FSI']
    assert summary['ASI'] - summary['FSI'] >= 0.1


@pytest.mark.slow
def test_component_count_barely_matters(tmp_path):
    summary = ablation_summary('backflip_k_sweep.json', tmp_path)
    finals = [summary[column] for column in summary.index if column != 'Skill']
    assert len(finals) == 3
    assert max(finals) - min(finals) < 0.1
