import os
from datetime import date

import numpy as np
import pytest

from tdqn import agent as agent_module
from tdqn.agent import (RESUME_FILE, GreedyPolicy, TDQNAgent, aggregate_curves, compute_targets, epsilon_schedule,
                        evaluate, expected_performance, load_agent, select_action, train)
from tdqn.benchmarks import PassivePolicy
from tdqn.errors import CheckpointError, ConfigError, DataError, NetworkShapeError, TrainingError
from tdqn.market_data import split_series
from tdqn.metrics import full_report
from tdqn.neural_net import NetworkParams, load_checkpoint
from tdqn.settings import AugmentationSpec, EnvConfig, Hyperparams, NetworkSpec
from tdqn.trading_env import Experience, Position, run_trajectory
from tests.helpers import sine_series, small_env, small_hyperparams, small_network

env = small_env()
network = small_network(env)
split = split_series(sine_series(300), date(2012, 10, 31), 0.2)


def linear_params(bias, role="main"):
    spec = NetworkSpec(input_width=1, hidden_widths=())
    return NetworkParams(spec, {"W0": np.zeros((1, 2)), "b0": np.array(bias, dtype="float64")}, role)


class CurveRun:
    """Stands in for a TrainingRun in the curve aggregation."""

    def __init__(self, train_curve, test_curve):
        self.episodes = list(range(len(train_curve)))
        self.curves = {"train_sharpe": train_curve, "test_sharpe": test_curve}

    def curve(self, name):
        return self.curves[name]


def test_select_action():
    """Verify greedy choice, the tie rule and exploration.
    """
    rng = np.random.default_rng(0)
    assert select_action([0.3, 0.1], 0.0, rng) == 0
    assert select_action([0.1, 0.3], 0.0, rng) == 1
    assert select_action([0.2, 0.2], 0.0, rng) == 1
    picks = [select_action([1.0, 0.0], 1.0, rng) for _ in range(4_000)]
    assert np.mean(picks) == pytest.approx(0.5, abs=0.03)
    with pytest.raises(ValueError):
        select_action([0.0, 1.0], 1.5, rng)


def test_epsilon_schedule():
    """Verify the linear decay and the constant tail of the exploration rate.
    """
    hp = small_hyperparams(epsilon_start=1.0, epsilon_end=0.1, epsilon_decay_steps=100)
    assert epsilon_schedule(0, hp) == 1.0
    assert epsilon_schedule(50, hp) == pytest.approx(0.55)
    assert epsilon_schedule(100, hp) == 0.1
    assert epsilon_schedule(10_000, hp) == 0.1


def test_double_q_targets():
    """Verify that the main network picks the next action and the target network values it.
    """
    main = linear_params([0.5, 0.7])
    target = linear_params([0.4, 0.3], role="target")
    batch = [Experience(np.zeros(1), 0, 0.1, np.zeros(1), False),
             Experience(np.zeros(1), 1, -0.2, np.zeros(1), True)]
    np.testing.assert_allclose(compute_targets(batch, main, target, 0.6), [0.28, -0.2])
    with pytest.raises(ValueError):
        compute_targets([], main, target, 0.6)


def test_greedy_policy():
    """Verify that the greedy policy follows the larger Q-value.
    """
    series = sine_series(40)
    trajectory, _ = run_trajectory(series, GreedyPolicy(network_with_bias(0.0, 1.0)), env)
    assert {r.action for r in trajectory.records} == {1}
    trajectory, _ = run_trajectory(series, GreedyPolicy(network_with_bias(1.0, 0.0)), env)
    assert {r.action for r in trajectory.records} == {0}


def network_with_bias(short, long):
    spec = NetworkSpec(input_width=env.observation_width, hidden_widths=())
    return NetworkParams(spec, {"W0": np.zeros((env.observation_width, 2)), "b0": np.array([short, long])})


def test_agent_needs_batches_for_batch_norm():
    """Verify that batch normalisation refuses single-sample batches.
    """
    with pytest.raises(ConfigError):
        TDQNAgent(network, small_hyperparams(batch_size=1), seed=0)
    TDQNAgent(network.replace(batch_norm=False), small_hyperparams(batch_size=1), seed=0)


def test_learning_and_target_sync():
    """Verify that learning waits for a full batch and the target network follows every N updates.
    """
    learner = TDQNAgent(network, small_hyperparams(batch_size=4, target_sync=3), seed=1)
    vector = np.zeros(env.observation_width)
    step = [Experience(vector, 0, 0.01, vector, False), Experience(vector, 1, -0.01, vector, False)]
    learner.observe(step)
    assert learner.updates == 0 and not learner.losses
    learner.observe(step)
    assert learner.updates == 1
    assert not learner.target.equals(learner.main)
    learner.observe(step)
    learner.observe(step)
    assert learner.updates == 3
    assert learner.target.equals(learner.main)
    assert learner.target is not learner.main
    assert learner.steps == 4 and len(learner.losses) == 3


def test_train_records_episodes():
    """Verify the per-episode records, the best parameters and the fingerprints of a short run.
    """
    run = train(split, env, network, small_hyperparams(episodes=3, epsilon_decay_steps=1_000), seed=0)
    assert [r.episode for r in run.episodes] == [1, 2, 3]
    assert all(r.variant == split.train.instrument for r in run.episodes)
    assert run.episodes[-1].updates > 0
    assert run.episodes[-1].epsilon < run.episodes[0].epsilon
    assert 1 <= run.best_episode <= 3
    assert run.best_params is not run.final_params
    assert set(run.fingerprints) == {"train", "validation", "test"}
    assert len(run.curve("test_sharpe")) == 3
    assert "seconds" not in run.to_manifest()["episodes"][0]


def test_train_is_reproducible():
    """Verify that the same seed gives the same run and another seed does not.
    """
    hp = small_hyperparams(episodes=2)
    first = train(split, env, network, hp, seed=4)
    again = train(split, env, network, hp, seed=4)
    other = train(split, env, network, hp, seed=5)
    assert first.to_manifest() == again.to_manifest()
    assert first.best_params.equals(again.best_params)
    assert not first.final_params.equals(other.final_params)


def test_best_episode_follows_validation(monkeypatch):
    """Verify that the kept parameters come from the episode with the best validation Sharpe ratio.
    """
    scores = iter([0.1, 0.5, 0.2])

    def fake_sharpe(params, series, env_config, scaler):
        return next(scores) if series is split.validation else 0.0

    monkeypatch.setattr(agent_module, "greedy_sharpe", fake_sharpe)
    run = train(split, env, network, small_hyperparams(episodes=3), seed=0)
    assert run.best_episode == 2
    assert run.curve("validation_sharpe") == [0.1, 0.5, 0.2]


def test_early_stopping(monkeypatch):
    """Verify that training stops once the validation Sharpe ratio stays flat for `patience` episodes.
    """
    monkeypatch.setattr(agent_module, "greedy_sharpe", lambda params, series, env_config, scaler: None)
    run = train(split, env, network, small_hyperparams(episodes=10, early_stopping=True, patience=2), seed=0)
    assert run.stopped_early
    assert len(run.episodes) == 3
    assert run.best_episode == 1


def test_train_cycles_augmented_variants():
    """Verify that episodes walk through the augmented training series.
    """
    spec = AugmentationSpec(shifts=(0, 1), filter_windows=(1,), noise_levels=(0.0,))
    run = train(split, env, network, small_hyperparams(episodes=3, augment=True), seed=0, augmentation=spec)
    name = split.train.instrument
    assert [r.variant for r in run.episodes] == [f"{name}+s0f1n0", f"{name}+s1f1n0", f"{name}+s0f1n0"]


def test_train_checks_inputs():
    """Verify the network width and series length checks.
    """
    with pytest.raises(NetworkShapeError):
        train(split, env, network.replace(input_width=7), small_hyperparams(), seed=0)
    short = split_series(sine_series(60), date(2012, 3, 16), 0.05)
    with pytest.raises(DataError):
        train(short, env, network, small_hyperparams(), seed=0)


def test_checkpoint_and_evaluation(tmp_path):
    """Verify that a saved run evaluates to the same trajectory as the in-memory parameters.
    """
    run = train(split, env, network, small_hyperparams(episodes=1), seed=2)
    path = run.save(tmp_path)
    params, scaler = load_agent(path)
    assert params.equals(run.best_params)
    assert scaler == run.scaler
    trajectory, report = evaluate(params, split.test, env, scaler)
    expected, _ = evaluate(run.best_params, split.test, env, run.scaler)
    assert trajectory.records == expected.records
    assert report.pnl == pytest.approx(trajectory.values()[-1] - trajectory.values()[0])
    with pytest.raises(NetworkShapeError):
        evaluate(params, split.test, small_env(tau=3), scaler)


def test_resumed_training_matches_one_run(tmp_path):
    """Verify that training one episode, saving and resuming to three equals training three episodes at once.
    """
    hp = small_hyperparams(episodes=3)
    whole = train(split, env, network, hp, seed=3)
    first = train(split, env, network, hp.replace(episodes=1), seed=3)
    first.save(tmp_path)
    resumed = train(split, env, network, hp, seed=3, resume=tmp_path / RESUME_FILE)
    assert resumed.to_manifest() == whole.to_manifest()
    assert resumed.final_params.equals(whole.final_params)
    assert resumed.best_params.equals(whole.best_params)
    assert resumed.resume_state.target.equals(whole.resume_state.target)
    assert resumed.resume_state.inserted == whole.resume_state.inserted
    assert resumed.optimizer.step == whole.optimizer.step == whole.episodes[-1].updates
    for name in whole.optimizer.first:
        np.testing.assert_array_equal(resumed.optimizer.first[name], whole.optimizer.first[name])
        np.testing.assert_array_equal(resumed.optimizer.second[name], whole.optimizer.second[name])
    assert resumed.rng_state == whole.rng_state


def test_checkpoint_files_are_consistent(tmp_path):
    """Verify that the evaluation checkpoint holds the best parameters alone and the resume checkpoint the final state.
    """
    run = train(split, env, network, small_hyperparams(episodes=2), seed=0)
    best = load_checkpoint(run.save(tmp_path))
    assert best.params.equals(run.best_params)
    assert best.optimizer is None and best.rng_state is None
    state = load_checkpoint(tmp_path / RESUME_FILE)
    assert state.params.equals(run.final_params)
    assert state.best.equals(run.best_params)
    assert state.target.equals(run.resume_state.target)
    assert state.optimizer.step == run.episodes[-1].updates
    assert state.metadata["steps"] == run.resume_state.steps
    assert len(state.replay["reward"]) == len(run.resume_state.replay)


def test_resume_checks_the_run(tmp_path):
    """Verify that a resume checkpoint is refused for another seed, network or data set.
    """
    run = train(split, env, network, small_hyperparams(episodes=1), seed=0)
    run.save(tmp_path)
    path = tmp_path / RESUME_FILE
    hp = small_hyperparams(episodes=2)
    with pytest.raises(CheckpointError):
        train(split, env, network, hp, seed=1, resume=path)
    with pytest.raises(CheckpointError):
        train(split, env, small_network(env, hidden=(4,)), hp, seed=0, resume=path)
    other = split_series(sine_series(300, period=30), date(2012, 10, 31), 0.2)
    with pytest.raises(CheckpointError):
        train(other, env, network, hp, seed=0, resume=path)
    with pytest.raises(CheckpointError):
        train(split, env, network, hp, seed=0, resume=tmp_path / "checkpoint.npz")


def test_aggregate_curves():
    """Verify per-episode mean, sample deviation and count, skipping undefined values.
    """
    runs = [CurveRun([1.0, 2.0, 3.0], [0.0, None, 1.0]), CurveRun([3.0, 4.0], [2.0, 1.0])]
    curves = aggregate_curves(runs)
    assert curves["episode"].tolist() == [1, 2, 3]
    assert curves["train_mean"].tolist() == [2.0, 3.0, 3.0]
    assert curves["train_sd"].iloc[0] == pytest.approx(np.sqrt(2.0))
    assert np.isnan(curves["train_sd"].iloc[2])
    assert curves["test_n"].tolist() == [2, 1, 1]
    assert curves["test_mean"].tolist() == [1.0, 1.0, 1.0]


def test_expected_performance():
    """Verify the multi-seed aggregation and its minimum number of runs.
    """
    hp = small_hyperparams(episodes=2)
    with pytest.raises(ConfigError):
        expected_performance(split, env, network, hp, seeds=[0])
    outcome = expected_performance(split, env, network, hp, seeds=[0, 1])
    assert [run.seed for run in outcome.runs] == [0, 1]
    assert outcome.curves["episode"].tolist() == [1, 2]
    assert not outcome.failures


def test_expected_performance_records_failures(monkeypatch):
    """Verify that a failing seed is reported while the others complete.
    """
    real_train = agent_module.train

    def flaky_train(split_, env_, network_, hyperparams, seed, augmentation=None):
        if seed == 1:
            raise TrainingError("non-finite loss")
        return real_train(split_, env_, network_, hyperparams, seed, augmentation)

    monkeypatch.setattr(agent_module, "train", flaky_train)
    outcome = expected_performance(split, env, network, small_hyperparams(episodes=1), seeds=[0, 1, 2])
    assert [run.seed for run in outcome.runs] == [0, 2]
    assert "TrainingError" in outcome.failures[1]
    assert outcome.curves["train_n"].max() <= 2

    with pytest.raises(TrainingError):
        expected_performance(split, env, network, small_hyperparams(episodes=1), seeds=[1, 1])


@pytest.mark.slow
def test_agent_learns_a_periodic_market():
    """Verify that agents trained with the default settings beat buy-and-hold on a sine wave in most seeds.
    """
    series = sine_series(2_000, period=20, amplitude=0.1)
    market = split_series(series, series.dates[1_499], 0.2)
    config = EnvConfig()
    outcome = expected_performance(market, config, NetworkSpec(), Hyperparams(episodes=30), seeds=range(10),
                                   workers=os.cpu_count() or 1)
    assert len(outcome.runs) == 10
    hold, _ = run_trajectory(market.test, PassivePolicy(Position.LONG), config)
    benchmark = full_report(hold).sharpe
    wins = 0
    for run in outcome.runs:
        _, report = evaluate(run.best_params, market.test, config, run.scaler)
        wins += report.sharpe is not None and report.sharpe > benchmark
    assert wins >= 8
