import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from tdqn.errors import CheckpointError, ConfigError, DataError, NetworkShapeError, TdqnError, TrainingError
from tdqn.market_data import DatasetSplit, OhlcvSeries, series_fingerprint
from tdqn.metrics import PerformanceReport, full_report, sharpe_of_values
from tdqn.neural_net import (AdamState, Checkpoint, NetworkParams, adam_step, clip_gradients, forward,
                             init_xavier, load_checkpoint, loss_and_gradients, save_checkpoint)
from tdqn.preprocessing import FeatureScaler, augment, compute_features, minimum_length
from tdqn.replay import ReplayMemory
from tdqn.settings import AugmentationSpec, EnvConfig, Hyperparams, NetworkSpec
from tdqn.trading_env import Experience, Observation, Position, Trajectory, run_trajectory

logger = logging.getLogger(__name__)


def select_action(q_values: Sequence[float], epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice between short (0) and long (1).

    Args:
        q_values (Sequence[float]): Q-values of short and long.
        epsilon (float): Probability of a uniformly random action.
        rng (np.random.Generator): The random source.

    Returns:
        int: The action index; equal Q-values choose long.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon {epsilon} outside [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(2))
    return int(Position.LONG) if q_values[1] >= q_values[0] else int(Position.SHORT)


def greedy_actions(q_values: np.ndarray) -> np.ndarray:
    return np.where(q_values[:, 1] >= q_values[:, 0], int(Position.LONG), int(Position.SHORT))


def epsilon_schedule(step: int, hyperparams: Hyperparams) -> float:
    """Exploration rate after `step` environment steps: linear from start to end, then constant."""
    if step >= hyperparams.epsilon_decay_steps:
        return hyperparams.epsilon_end
    fraction = step / hyperparams.epsilon_decay_steps
    return hyperparams.epsilon_start + (hyperparams.epsilon_end - hyperparams.epsilon_start) * fraction


def compute_targets(batch: Sequence[Experience], main: NetworkParams, target: NetworkParams,
                    gamma: float) -> np.ndarray:
    """Double deep Q-learning targets.

    The next action is picked by the main network and valued by the target network; a
    terminal experience keeps its reward alone.

    Args:
        batch (Sequence[Experience]): Sampled experiences.
        main (NetworkParams): The main network.
        target (NetworkParams): The target network.
        gamma (float): Discount factor.

    Returns:
        np.ndarray: One target per experience.
    """
    if not batch:
        raise ValueError("empty batch")
    rewards = np.array([e.reward for e in batch], dtype="float64")
    terminal = np.array([e.terminal for e in batch], dtype=bool)
    following = np.stack([e.next_observation for e in batch])
    chosen = greedy_actions(forward(main, following, "eval"))
    valued = forward(target, following, "eval")[np.arange(len(batch)), chosen]
    return np.where(terminal, rewards, rewards + gamma * valued)


class GreedyPolicy:
    """Acts greedily with a frozen network, evaluated in eval mode.

    Args:
        params (NetworkParams): The network parameters.
    """

    def __init__(self, params: NetworkParams):
        self.params = params

    def __call__(self, observation: Observation) -> int:
        q = forward(self.params, observation.vector(), "eval")[0]
        return select_action(q, 0.0, None)


class TDQNAgent:
    """The learning side of a training run: networks, optimizer, replay memory and counters.

    Args:
        network (NetworkSpec): Shape of the Q-network.
        hyperparams (Hyperparams): Training loop settings.
        seed (int): Seed of every random draw of the run.
    """

    def __init__(self, network: NetworkSpec, hyperparams: Hyperparams, seed: int):
        if network.batch_norm and network.hidden_widths and hyperparams.batch_size < 2:
            raise ConfigError([f"Hyperparams: batch_size {hyperparams.batch_size} must be >= 2 with batch normalisation"])
        self.hyperparams = hyperparams
        self.rng = np.random.default_rng(seed)
        self.main = init_xavier(network, self.rng)
        self.target = self.main.copy(role="target")
        self.optimizer = AdamState.zeros_like(self.main.tensors, self.main.trainable_names)
        self.memory = ReplayMemory(hyperparams.replay_capacity)
        self.steps = 0
        self.updates = 0
        self.losses: List[float] = []

    @property
    def epsilon(self) -> float:
        return epsilon_schedule(self.steps, self.hyperparams)

    def act(self, observation: Observation) -> int:
        q = forward(self.main, observation.vector(), "eval")[0]
        return select_action(q, self.epsilon, self.rng)

    def observe(self, experiences: List[Experience]) -> None:
        """Store the experiences of one environment step and learn when it is time to."""
        self.memory.extend(experiences)
        self.steps += 1
        if self.steps % self.hyperparams.learn_every == 0:
            loss = self.learn()
            if loss is not None:
                self.losses.append(loss)

    def learn(self) -> Optional[float]:
        """One gradient update on a sampled batch; None while the memory holds too few experiences."""
        hp = self.hyperparams
        if len(self.memory) < hp.batch_size:
            return None
        batch = self.memory.sample(hp.batch_size, self.rng)
        targets = compute_targets(batch, self.main, self.target, hp.gamma)
        inputs = np.stack([e.observation for e in batch])
        actions = np.array([e.action for e in batch])
        grads = loss_and_gradients(self.main, inputs, actions, targets, "train", self.rng)
        if not math.isfinite(grads.loss):
            raise TrainingError(f"non-finite loss {grads.loss} at update {self.updates + 1}")
        adam_step(self.main, clip_gradients(grads, hp.clip_threshold), self.optimizer, hp.learning_rate)
        self.updates += 1
        if self.updates % hp.target_sync == 0:
            self.target.load_from(self.main)
            logger.debug("target network synchronised after %d updates", self.updates)
        return grads.loss

    def policy(self) -> GreedyPolicy:
        return GreedyPolicy(self.main)


@dataclass
class EpisodeRecord:
    episode: int
    variant: str
    epsilon: float
    loss: Optional[float]
    updates: int
    train_sharpe: Optional[float]
    validation_sharpe: Optional[float]
    test_sharpe: Optional[float]
    seconds: float = 0.0


RESUME_FILE = "resume.npz"


@dataclass
class ResumeState:
    """The learner and loop counters at the end of the last trained episode."""

    target: NetworkParams
    replay: List[Experience]
    inserted: int
    steps: int
    updates: int
    waited: int
    best_score: float


@dataclass
class TrainingRun:
    """Outcome of one seeded training run.

    `best_params` are the parameters of the episode with the highest validation Sharpe ratio,
    `final_params` those at the end of the last episode.  `optimizer`, `rng_state` and
    `resume_state` belong to the final parameters.
    """

    seed: int
    env: EnvConfig
    network: NetworkSpec
    hyperparams: Hyperparams
    episodes: List[EpisodeRecord]
    best_params: NetworkParams
    best_episode: int
    scaler: FeatureScaler
    optimizer: AdamState
    rng_state: Dict[str, Any]
    fingerprints: Dict[str, str] = field(default_factory=dict)
    stopped_early: bool = False
    final_params: Optional[NetworkParams] = None
    resume_state: Optional[ResumeState] = None

    def curve(self, name: str) -> List[Optional[float]]:
        """Per-episode values of one record field, e.g. "test_sharpe"."""
        return [getattr(record, name) for record in self.episodes]

    def checkpoint(self) -> Checkpoint:
        """The best-validation parameters and feature statistics, for evaluation."""
        return Checkpoint(self.best_params, scaler=self.scaler.to_dict(),
                          metadata={"seed": self.seed, "best_episode": self.best_episode, "env": self.env.to_dict()})

    def resume_checkpoint(self) -> Checkpoint:
        """The full learner state at the end of the last episode, for continuing the run."""
        if self.resume_state is None or self.final_params is None:
            raise CheckpointError(f"run with seed {self.seed} kept no resume state")
        state = self.resume_state
        metadata = {
            "seed": self.seed,
            "env": self.env.to_dict(),
            "fingerprints": dict(self.fingerprints),
            "episodes": [asdict(record) for record in self.episodes],
            "best_episode": self.best_episode,
            "best_score": state.best_score,
            "waited": state.waited,
            "stopped_early": self.stopped_early,
            "steps": state.steps,
            "updates": state.updates,
            "inserted": state.inserted,
            "replay_capacity": self.hyperparams.replay_capacity,
        }
        return Checkpoint(self.final_params, self.optimizer, self.rng_state, self.scaler.to_dict(), metadata,
                          target=state.target, best=self.best_params,
                          replay=_replay_arrays(state.replay, self.network.input_width))

    def save(self, directory: Union[str, Path], name: str = "checkpoint.npz") -> Path:
        """Write the evaluation checkpoint and, when the run kept one, the resume checkpoint
        (RESUME_FILE) into `directory`.

        Returns:
            Path: The evaluation checkpoint.
        """
        directory = Path(directory)
        if self.resume_state is not None:
            save_checkpoint(directory / RESUME_FILE, self.resume_checkpoint())
        return save_checkpoint(directory / name, self.checkpoint())

    def to_manifest(self, checkpoint: Optional[str] = "checkpoint.npz") -> Dict[str, Any]:
        """Run description for manifest.json; wall-clock times are left out so that repeated
        runs produce identical manifests."""
        episodes = []
        for record in self.episodes:
            data = asdict(record)
            data.pop("seconds")
            episodes.append(data)
        return {
            "seed": self.seed,
            "env": self.env.to_dict(),
            "network": self.network.to_dict(),
            "agent": self.hyperparams.to_dict(),
            "fingerprints": dict(self.fingerprints),
            "best_episode": self.best_episode,
            "stopped_early": self.stopped_early,
            "checkpoint": checkpoint,
            "resume": RESUME_FILE if checkpoint and self.resume_state is not None else None,
            "episodes": episodes,
        }


def _replay_arrays(experiences: Sequence[Experience], width: int) -> Dict[str, np.ndarray]:
    count = len(experiences)
    return {
        "observation": np.array([e.observation for e in experiences], dtype="float64").reshape(count, width),
        "action": np.array([e.action for e in experiences], dtype="int64"),
        "reward": np.array([e.reward for e in experiences], dtype="float64"),
        "next_observation": np.array([e.next_observation for e in experiences], dtype="float64").reshape(count, width),
        "terminal": np.array([e.terminal for e in experiences], dtype=bool),
    }


def _replay_experiences(arrays: Dict[str, np.ndarray]) -> List[Experience]:
    return [Experience(arrays["observation"][i], int(arrays["action"][i]), float(arrays["reward"][i]),
                       arrays["next_observation"][i], bool(arrays["terminal"][i]))
            for i in range(len(arrays["action"]))]


def _score(sharpe: Optional[float]) -> float:
    return -math.inf if sharpe is None else sharpe


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def greedy_sharpe(params: NetworkParams, series: OhlcvSeries, env: EnvConfig,
                  scaler: FeatureScaler) -> Optional[float]:
    trajectory, _ = run_trajectory(series, GreedyPolicy(params), env, scaler=scaler)
    return sharpe_of_values(trajectory.values())


def _restore(path: Union[str, Path], agent: TDQNAgent, seed: int, network: NetworkSpec,
             fingerprints: Dict[str, str]) -> Tuple[List[EpisodeRecord], NetworkParams, int, float, int, bool]:
    """Load a resume checkpoint into a fresh agent and return the loop state it was saved with."""
    checkpoint = load_checkpoint(path)
    meta = checkpoint.metadata
    problems = []
    if meta.get("seed") != seed:
        problems.append(f"seed {meta.get('seed')} differs from {seed}")
    if checkpoint.params.spec.to_dict() != network.to_dict():
        problems.append("network shape differs")
    if meta.get("fingerprints") != fingerprints:
        problems.append("market data differs")
    if meta.get("replay_capacity") != agent.memory.capacity:
        problems.append(f"replay capacity {meta.get('replay_capacity')} differs from {agent.memory.capacity}")
    if checkpoint.target is None or checkpoint.best is None or checkpoint.optimizer is None \
            or checkpoint.replay is None or checkpoint.rng_state is None:
        problems.append("not a resume checkpoint")
    if problems:
        raise CheckpointError(f"cannot resume from {path}: {'; '.join(problems)}")
    agent.main = checkpoint.params
    agent.target = checkpoint.target
    agent.optimizer = checkpoint.optimizer
    agent.rng.bit_generator.state = checkpoint.rng_state
    agent.memory.restore(_replay_experiences(checkpoint.replay), meta["inserted"])
    agent.steps = meta["steps"]
    agent.updates = meta["updates"]
    records = [EpisodeRecord(**record) for record in meta["episodes"]]
    return records, checkpoint.best, meta["best_episode"], meta["best_score"], meta["waited"], meta["stopped_early"]


def train(split: DatasetSplit, env: EnvConfig, network: NetworkSpec, hyperparams: Hyperparams, seed: int,
          augmentation: Optional[AugmentationSpec] = None, resume: Optional[Union[str, Path]] = None) -> TrainingRun:
    """Train a TDQN agent.

    Each episode is one pass over a training series, cycling through the augmented variants.
    After every episode the greedy policy is scored on the training, validation and test sets,
    and training stops once the validation Sharpe ratio has not improved for `patience`
    episodes (when early stopping is enabled).

    Args:
        split (DatasetSplit): Training, validation and test series.
        env (EnvConfig): Environment settings.
        network (NetworkSpec): Shape of the Q-network.
        hyperparams (Hyperparams): Training loop settings.
        seed (int): Seed of the run.
        augmentation (AugmentationSpec, optional): Variants to train on. Defaults to the built-in set.
        resume (Union[str, Path], optional): Resume checkpoint of an earlier run with the same seed,
            network and data; training continues after its last episode up to `hyperparams.episodes`.
            Defaults to None.

    Returns:
        TrainingRun: Curves and the best-validation parameters.
    """
    if network.input_width != env.observation_width:
        raise NetworkShapeError(f"network input width {network.input_width} does not match "
                                f"observation width {env.observation_width}")
    needed = minimum_length(env.tau, env.filter_window) + 1
    for name, series in (("train", split.train), ("validation", split.validation), ("test", split.test)):
        if len(series) < needed:
            raise DataError(f"{series.instrument}: {name} set has {len(series)} bars, at least {needed} needed")
    scaler = FeatureScaler.fit(compute_features(split.train, env.filter_window))
    variants = [split.train]
    if hyperparams.augment:
        variants = [v for v in augment(split.train, augmentation or AugmentationSpec(), seed) if len(v) >= needed]
        if not variants:
            raise DataError(f"{split.train.instrument}: every augmented variant is too short")
    fingerprints = {name: series_fingerprint(getattr(split, name)) for name in ("train", "validation", "test")}

    agent = TDQNAgent(network, hyperparams, seed)
    records = []
    best_params, best_score, best_episode = None, -math.inf, 0
    waited = 0
    stopped_early = False
    if resume is not None:
        records, best_params, best_episode, best_score, waited, stopped_early = _restore(
            resume, agent, seed, network, fingerprints)
        logger.info("%s seed %d: resuming after episode %d", split.train.instrument, seed, len(records))
    for episode in range(len(records) + 1, hyperparams.episodes + 1):
        if stopped_early:
            break
        started = time.perf_counter()
        series = variants[(episode - 1) % len(variants)]
        agent.losses = []
        run_trajectory(series, agent.act, env, mirror=hyperparams.mirror, scaler=scaler, on_step=agent.observe)
        record = EpisodeRecord(
            episode=episode,
            variant=series.instrument,
            epsilon=agent.epsilon,
            loss=float(np.mean(agent.losses)) if agent.losses else None,
            updates=agent.updates,
            train_sharpe=greedy_sharpe(agent.main, split.train, env, scaler),
            validation_sharpe=greedy_sharpe(agent.main, split.validation, env, scaler),
            test_sharpe=greedy_sharpe(agent.main, split.test, env, scaler),
        )
        record.seconds = time.perf_counter() - started
        records.append(record)
        logger.info("%s seed %d episode %d/%d: epsilon %.3f loss %s train %s validation %s test %s",
                    split.train.instrument, seed, episode, hyperparams.episodes, record.epsilon,
                    "n/a" if record.loss is None else f"{record.loss:.3g}", _fmt(record.train_sharpe),
                    _fmt(record.validation_sharpe), _fmt(record.test_sharpe))
        score = _score(record.validation_sharpe)
        if best_params is None or score > best_score:
            best_params, best_score, best_episode = agent.main.copy(), score, episode
            waited = 0
        else:
            waited += 1
        if hyperparams.early_stopping and waited >= hyperparams.patience:
            logger.info("%s seed %d: validation Sharpe flat for %d episodes, stopping after episode %d",
                        split.train.instrument, seed, waited, episode)
            stopped_early = True
    if best_params is None:
        raise TrainingError(f"{split.train.instrument} seed {seed}: no episode was trained")

    resume_state = ResumeState(agent.target, agent.memory.slots(), agent.memory.inserted, agent.steps,
                               agent.updates, waited, best_score)
    return TrainingRun(seed=seed, env=env, network=network, hyperparams=hyperparams, episodes=records,
                       best_params=best_params, best_episode=best_episode, scaler=scaler,
                       optimizer=agent.optimizer, rng_state=agent.rng.bit_generator.state,
                       fingerprints=fingerprints, stopped_early=stopped_early, final_params=agent.main,
                       resume_state=resume_state)


def evaluate(params: NetworkParams, series: OhlcvSeries, env: EnvConfig,
             scaler: Optional[FeatureScaler] = None) -> Tuple[Trajectory, PerformanceReport]:
    """Run the greedy policy of frozen parameters over a series.

    Args:
        params (NetworkParams): The parameters to evaluate.
        series (OhlcvSeries): The bars to trade.
        env (EnvConfig): Environment settings.
        scaler (FeatureScaler, optional): Training feature statistics. Defaults to None.

    Returns:
        tuple (Trajectory, PerformanceReport): The trajectory and its indicators.
    """
    if params.spec.input_width != env.observation_width:
        raise NetworkShapeError(f"checkpoint input width {params.spec.input_width} does not match "
                                f"observation width {env.observation_width}")
    trajectory, _ = run_trajectory(series, GreedyPolicy(params), env, scaler=scaler)
    return trajectory, full_report(trajectory)


def load_agent(path: Union[str, Path]) -> Tuple[NetworkParams, Optional[FeatureScaler]]:
    """Parameters and feature statistics stored in a training checkpoint."""
    checkpoint = load_checkpoint(path)
    scaler = FeatureScaler.from_dict(checkpoint.scaler) if checkpoint.scaler else None
    return checkpoint.params, scaler


@dataclass
class ExpectedPerformance:
    """Per-episode mean, deviation and count of the Sharpe curves of several runs."""

    seeds: List[int]
    curves: pd.DataFrame
    runs: List[TrainingRun]
    failures: Dict[int, str] = field(default_factory=dict)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.curves.to_csv(path, index=False, lineterminator="\n")
        return path


def _train_seed(job: Tuple) -> Tuple[int, Optional[TrainingRun], Optional[str]]:
    split, env, network, hyperparams, augmentation, seed = job
    try:
        run = train(split, env, network, hyperparams, seed, augmentation)
    except TdqnError as error:
        return seed, None, f"{type(error).__name__}: {error}"
    # replay memories stay in the worker
    run.resume_state = None
    return seed, run, None


def aggregate_curves(runs: Sequence[TrainingRun], names: Sequence[str] = ("train_sharpe", "test_sharpe")) -> pd.DataFrame:
    """Mean, sample deviation and count per episode for each curve, undefined values skipped."""
    length = max(len(run.episodes) for run in runs)
    rows = []
    for episode in range(length):
        row = {"episode": episode + 1}
        for name in names:
            values = [run.curve(name)[episode] for run in runs if episode < len(run.episodes)]
            values = np.array([v for v in values if v is not None], dtype="float64")
            prefix = name.removesuffix("_sharpe")
            row[f"{prefix}_mean"] = float(values.mean()) if len(values) else np.nan
            row[f"{prefix}_sd"] = float(values.std(ddof=1)) if len(values) >= 2 else np.nan
            row[f"{prefix}_n"] = len(values)
        rows.append(row)
    return pd.DataFrame(rows)


def expected_performance(split: DatasetSplit, env: EnvConfig, network: NetworkSpec, hyperparams: Hyperparams,
                         seeds: Sequence[int], workers: int = 1,
                         augmentation: Optional[AugmentationSpec] = None) -> ExpectedPerformance:
    """Train one agent per seed and aggregate their Sharpe curves.

    Args:
        split (DatasetSplit): Training, validation and test series.
        env (EnvConfig): Environment settings.
        network (NetworkSpec): Shape of the Q-network.
        hyperparams (Hyperparams): Training loop settings.
        seeds (Sequence[int]): One seed per run, at least two.
        workers (int): Worker processes; 1 trains sequentially. Defaults to 1.
        augmentation (AugmentationSpec, optional): Variants to train on. Defaults to None.

    Returns:
        ExpectedPerformance: Curves over the completed runs, in seed order.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigError([f"expected performance needs at least 2 runs, got {len(seeds)}"])
    jobs = [(split, env, network, hyperparams, augmentation, seed) for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_train_seed, jobs))
    else:
        outcomes = [_train_seed(job) for job in jobs]
    runs = [run for _, run, _ in outcomes if run is not None]
    failures = {seed: message for seed, _, message in outcomes if message is not None}
    for seed, message in failures.items():
        logger.warning("run with seed %d failed: %s", seed, message)
    if not runs:
        raise TrainingError(f"all {len(seeds)} runs failed")
    logger.info("%s: %d of %d runs completed", split.train.instrument, len(runs), len(seeds))
    return ExpectedPerformance(seeds, aggregate_curves(runs), runs, failures)
