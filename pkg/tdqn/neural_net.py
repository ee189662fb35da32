import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, MutableMapping, Optional, Tuple, Union

import numpy as np

from tdqn.errors import CheckpointError, NetworkShapeError, TrainingError
from tdqn.settings import NetworkSpec

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

RandomSource = Union[None, int, np.random.Generator]


def _generator(rng: RandomSource) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class NetworkParams:
    """Weights, biases and batch-norm tensors of a Q-network.

    Names follow the layer index i: W{i}, b{i} for every linear layer and gamma{i}, beta{i},
    mean{i}, var{i} for the batch-norm of every hidden layer.

    Args:
        spec (NetworkSpec): The network shape.
        tensors (Dict[str, np.ndarray]): All tensors by name.
        role (str): "main" for theta or "target" for the target network. Defaults to "main".
    """

    def __init__(self, spec: NetworkSpec, tensors: Dict[str, np.ndarray], role: str = "main"):
        self.spec = spec
        self.tensors = tensors
        self.role = role
        self._check_shapes()

    @property
    def depth(self) -> int:
        return len(self.spec.layer_widths) - 1

    def hidden_layers(self) -> range:
        return range(self.depth - 1)

    @property
    def trainable_names(self) -> List[str]:
        names = []
        for i in range(self.depth):
            names += [f"W{i}", f"b{i}"]
            if self.spec.batch_norm and i < self.depth - 1:
                names += [f"gamma{i}", f"beta{i}"]
        return names

    @property
    def buffer_names(self) -> List[str]:
        if not self.spec.batch_norm:
            return []
        return [name for i in self.hidden_layers() for name in (f"mean{i}", f"var{i}")]

    def _check_shapes(self):
        widths = self.spec.layer_widths
        expected = dict()
        for i in range(self.depth):
            expected[f"W{i}"] = (widths[i], widths[i + 1])
            expected[f"b{i}"] = (widths[i + 1],)
            if self.spec.batch_norm and i < self.depth - 1:
                for name in ("gamma", "beta", "mean", "var"):
                    expected[f"{name}{i}"] = (widths[i + 1],)
        if set(expected) != set(self.tensors):
            raise NetworkShapeError(f"tensor names {sorted(self.tensors)} do not match spec {sorted(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise NetworkShapeError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self, role: Optional[str] = None) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.tensors.items()}, role or self.role)

    def load_from(self, other: "NetworkParams") -> None:
        """Overwrite every tensor with the values of `other` (target sync)."""
        for name, value in other.tensors.items():
            np.copyto(self.tensors[name], value)

    def equals(self, other: "NetworkParams") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())

    def __repr__(self):
        return f'NetworkParams("{self.role}", widths={self.spec.layer_widths})'


@dataclass
class GradientSet:
    """Gradients of the trainable parameters, by tensor name."""

    tensors: Dict[str, np.ndarray]
    loss: float = float("nan")

    @property
    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.tensors.values())))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def init_xavier(spec: NetworkSpec, rng_seed: RandomSource = 0) -> NetworkParams:
    """Initialise a network: normal weights of variance 2 / (fan_in + fan_out), zero biases,
    unit batch-norm scale and zero shift.

    Args:
        spec (NetworkSpec): The network shape.
        rng_seed (int): Seed of the weight draw. Defaults to 0.

    Returns:
        NetworkParams: The main-network parameters.
    """
    rng = _generator(rng_seed)
    widths = spec.layer_widths
    tensors = dict()
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        tensors[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
        tensors[f"b{i}"] = np.zeros(fan_out)
        if spec.batch_norm and i < len(widths) - 2:
            tensors[f"gamma{i}"] = np.ones(fan_out)
            tensors[f"beta{i}"] = np.zeros(fan_out)
            tensors[f"mean{i}"] = np.zeros(fan_out)
            tensors[f"var{i}"] = np.ones(fan_out)
    return NetworkParams(spec, tensors)


def _check_inputs(params: NetworkParams, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype="float64")
    if inputs.ndim == 1:
        inputs = inputs[np.newaxis, :]
    if inputs.ndim != 2 or inputs.shape[1] != params.spec.input_width:
        raise NetworkShapeError(f"inputs of shape {inputs.shape}, expected (batch, {params.spec.input_width})")
    if not np.all(np.isfinite(inputs)):
        raise NetworkShapeError("inputs contain non-finite values")
    return inputs


def forward_with_cache(params: NetworkParams, inputs: np.ndarray, mode: str = "eval", rng: RandomSource = None,
                       track_statistics: bool = True) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Run the network and keep every intermediate needed by `backward`.

    Hidden layers apply linear -> batch norm -> leaky rectifier -> inverted dropout.  In train
    mode batch norm uses the batch statistics (and updates the running ones when
    `track_statistics` is set) and dropout masks are drawn from `rng`.

    Args:
        params (NetworkParams): The parameters.
        inputs (np.ndarray): A (batch, input_width) array.
        mode (str): "train" or "eval". Defaults to "eval".
        rng (RandomSource): Dropout mask source in train mode. Defaults to None.
        track_statistics (bool): Update batch-norm running statistics in train mode. Defaults to True.

    Returns:
        tuple (np.ndarray, dict): The (batch, 2) Q-values and the cache.
    """
    spec = params.spec
    x = _check_inputs(params, inputs)
    match mode:
        case "train":
            training = True
        case "eval":
            training = False
        case _:
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if training and spec.batch_norm and x.shape[0] < 2 and params.depth > 1:
        raise NetworkShapeError("train mode with batch normalisation needs a batch of at least 2")
    if training and spec.dropout_rate > 0:
        rng = _generator(rng)

    cache = {"mode": mode, "a0": x}
    a = x
    for i in params.hidden_layers():
        z = a @ params[f"W{i}"] + params[f"b{i}"]
        cache[f"z{i}"] = z
        if spec.batch_norm:
            if training:
                mean, var = z.mean(axis=0), z.var(axis=0)
                if track_statistics:
                    params[f"mean{i}"][:] = BN_MOMENTUM * params[f"mean{i}"] + (1.0 - BN_MOMENTUM) * mean
                    params[f"var{i}"][:] = BN_MOMENTUM * params[f"var{i}"] + (1.0 - BN_MOMENTUM) * var
            else:
                mean, var = params[f"mean{i}"], params[f"var{i}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
            zhat = (z - mean) * inv_std
            cache[f"zhat{i}"], cache[f"inv_std{i}"] = zhat, inv_std
            y = params[f"gamma{i}"] * zhat + params[f"beta{i}"]
        else:
            y = z
        cache[f"y{i}"] = y
        h = np.where(y > 0, y, spec.leaky_slope * y)
        if training and spec.dropout_rate > 0:
            mask = (rng.random(h.shape) >= spec.dropout_rate) / (1.0 - spec.dropout_rate)
            cache[f"mask{i}"] = mask
            h = h * mask
        cache[f"a{i + 1}"] = h
        a = h
    last = params.depth - 1
    q = a @ params[f"W{last}"] + params[f"b{last}"]
    cache["q"] = q
    return q, cache


def forward(params: NetworkParams, inputs: np.ndarray, mode: str = "eval", rng: RandomSource = None) -> np.ndarray:
    """Q-values of a batch of observation vectors.

    Args:
        params (NetworkParams): The parameters.
        inputs (np.ndarray): A (batch, input_width) array.
        mode (str): "train" or "eval". Defaults to "eval".
        rng (RandomSource): Dropout mask source in train mode. Defaults to None.

    Returns:
        np.ndarray: A (batch, 2) array.
    """
    q, _ = forward_with_cache(params, inputs, mode, rng)
    return q


def huber_loss(prediction, target) -> Tuple[Any, Any]:
    """Huber loss and its derivative with respect to the prediction (knee at 1).

    Args:
        prediction: Scalar or array.
        target: Scalar or array.

    Returns:
        tuple: (loss, dLoss/dPrediction), same shape as the inputs.
    """
    x = np.asarray(prediction, dtype="float64") - np.asarray(target, dtype="float64")
    quadratic = np.abs(x) <= 1.0
    loss = np.where(quadratic, 0.5 * x * x, np.abs(x) - 0.5)
    derivative = np.where(quadratic, x, np.sign(x))
    if loss.ndim == 0:
        return float(loss), float(derivative)
    return loss, derivative


def l2_penalty(params: NetworkParams) -> float:
    return params.spec.l2_coefficient * sum(float(np.sum(params[f"W{i}"] ** 2)) for i in range(params.depth))


def backward(params: NetworkParams, cache: Dict[str, Any], actions: np.ndarray,
             targets: np.ndarray) -> GradientSet:
    """Exact gradients of the mean Huber loss on the taken actions plus the L2 weight penalty.

    Args:
        params (NetworkParams): The parameters used by the forward pass.
        cache (Dict[str, Any]): Cache returned by `forward_with_cache` for this batch.
        actions (np.ndarray): Action index per sample; only that Q-value enters the loss.
        targets (np.ndarray): Target value per sample.

    Returns:
        GradientSet: Gradients of every trainable tensor, with the loss attached.
    """
    spec = params.spec
    q = cache["q"]
    batch = q.shape[0]
    actions = np.asarray(actions, dtype=int)
    targets = np.asarray(targets, dtype="float64")
    if actions.shape != (batch,) or targets.shape != (batch,):
        raise NetworkShapeError(f"expected {batch} actions and targets, got {actions.shape} and {targets.shape}")
    rows = np.arange(batch)
    losses, slopes = huber_loss(q[rows, actions], targets)
    loss = float(np.mean(losses)) + l2_penalty(params)

    grads = dict()
    upstream = np.zeros_like(q)
    upstream[rows, actions] = slopes / batch
    training = cache["mode"] == "train"
    for i in reversed(range(params.depth)):
        a = cache[f"a{i}"]
        grads[f"W{i}"] = a.T @ upstream + 2.0 * spec.l2_coefficient * params[f"W{i}"]
        grads[f"b{i}"] = upstream.sum(axis=0)
        if i == 0:
            break
        j = i - 1
        upstream = upstream @ params[f"W{i}"].T
        if f"mask{j}" in cache:
            upstream = upstream * cache[f"mask{j}"]
        upstream = upstream * np.where(cache[f"y{j}"] > 0, 1.0, spec.leaky_slope)
        if spec.batch_norm:
            zhat, inv_std = cache[f"zhat{j}"], cache[f"inv_std{j}"]
            grads[f"gamma{j}"] = np.sum(upstream * zhat, axis=0)
            grads[f"beta{j}"] = upstream.sum(axis=0)
            upstream = upstream * params[f"gamma{j}"]
            if training:
                upstream = inv_std / batch * (batch * upstream - upstream.sum(axis=0)
                                              - zhat * np.sum(upstream * zhat, axis=0))
            else:
                upstream = upstream * inv_std
        if not np.all(np.isfinite(upstream)):
            raise TrainingError("non-finite gradient", layer=j)
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient in {name}", layer=int(re.sub(r"\D", "", name)))
    return GradientSet({name: grads[name] for name in params.trainable_names}, loss)


def loss_and_gradients(params: NetworkParams, inputs: np.ndarray, actions: np.ndarray, targets: np.ndarray,
                       mode: str = "train", rng: RandomSource = None,
                       track_statistics: bool = True) -> GradientSet:
    """Forward pass followed by `backward` on the same batch."""
    _, cache = forward_with_cache(params, inputs, mode, rng, track_statistics)
    return backward(params, cache, actions, targets)


def clip_gradients(grads: GradientSet, threshold: float) -> GradientSet:
    """Rescale gradients whose global L2 norm exceeds `threshold`.

    Args:
        grads (GradientSet): The gradients.
        threshold (float): Maximum global norm.

    Returns:
        GradientSet: The same gradients when within the threshold, otherwise a scaled copy.
    """
    if threshold <= 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    norm = grads.global_norm
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return GradientSet({k: v * scale for k, v in grads.tensors.items()}, grads.loss)


@dataclass
class AdamState:
    """First and second moment estimates and the step counter of ADAM."""

    first: Dict[str, np.ndarray]
    second: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def zeros_like(cls, tensors: Mapping[str, np.ndarray], names: Optional[List[str]] = None) -> "AdamState":
        names = list(names if names is not None else tensors)
        return cls({n: np.zeros_like(tensors[n]) for n in names}, {n: np.zeros_like(tensors[n]) for n in names})

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.first.items()}, {k: v.copy() for k, v in self.second.items()},
                         self.step, self.beta1, self.beta2, self.epsilon)


def adam_step(params: Union[NetworkParams, MutableMapping[str, np.ndarray]],
              grads: Union[GradientSet, Mapping[str, np.ndarray]], state: AdamState,
              rate: float) -> Tuple[Union[NetworkParams, MutableMapping[str, np.ndarray]], AdamState]:
    """One bias-corrected ADAM update, applied in place.

    Args:
        params: Parameters to update (NetworkParams or a name -> array mapping).
        grads: Gradients with the same names.
        state (AdamState): Moment estimates, updated in place.
        rate (float): Learning rate.

    Returns:
        tuple: The updated parameters and optimizer state.
    """
    tensors = params.tensors if isinstance(params, NetworkParams) else params
    gradients = grads.tensors if isinstance(grads, GradientSet) else grads
    if set(gradients) != set(state.first):
        raise NetworkShapeError(f"optimizer state holds {sorted(state.first)}, gradients {sorted(gradients)}")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, g in gradients.items():
        m = state.first[name]
        v = state.second[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensors[name] -= rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params, state


class QNetwork:
    """A network spec together with its parameters, evaluated in eval mode.

    Args:
        params (NetworkParams): The parameters.
    """

    def __init__(self, params: NetworkParams):
        self.params = params

    @property
    def spec(self) -> NetworkSpec:
        return self.params.spec

    def predict(self, observations: np.ndarray) -> np.ndarray:
        return forward(self.params, observations, "eval")

    def copy(self) -> "QNetwork":
        return QNetwork(self.params.copy())


REPLAY_FIELDS = ("observation", "action", "reward", "next_observation", "terminal")


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a training run.

    An evaluation checkpoint only fills `params` (and the scaler); a resume checkpoint also
    carries the optimizer, the generator state, the target network, the best parameters so far
    and the replay memory as arrays named after REPLAY_FIELDS.
    """

    params: NetworkParams
    optimizer: Optional[AdamState] = None
    rng_state: Optional[Dict[str, Any]] = None
    scaler: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    target: Optional[NetworkParams] = None
    best: Optional[NetworkParams] = None
    replay: Optional[Dict[str, np.ndarray]] = None


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """Write a checkpoint as a numpy archive with a JSON header.

    Args:
        path (Union[str, Path]): Destination file (.npz).
        checkpoint (Checkpoint): What to save.

    Returns:
        Path: The written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "spec": checkpoint.params.spec.to_dict(),
        "role": checkpoint.params.role,
        "rng_state": checkpoint.rng_state,
        "scaler": checkpoint.scaler,
        "metadata": checkpoint.metadata,
        "optimizer": None,
        "networks": ["param"],
        "replay": checkpoint.replay is not None,
    }
    arrays = {f"param__{k}": v for k, v in checkpoint.params.tensors.items()}
    for group, params in (("target", checkpoint.target), ("best", checkpoint.best)):
        if params is not None:
            header["networks"].append(group)
            arrays.update({f"{group}__{k}": v for k, v in params.tensors.items()})
    if checkpoint.optimizer is not None:
        opt = checkpoint.optimizer
        header["optimizer"] = {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2, "epsilon": opt.epsilon}
        arrays.update({f"first__{k}": v for k, v in opt.first.items()})
        arrays.update({f"second__{k}": v for k, v in opt.second.items()})
    if checkpoint.replay is not None:
        missing = set(REPLAY_FIELDS) - set(checkpoint.replay)
        if missing:
            raise CheckpointError(f"replay arrays {sorted(missing)} missing")
        arrays.update({f"replay__{k}": checkpoint.replay[k] for k in REPLAY_FIELDS})
    with path.open("wb") as f:
        np.savez(f, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint written by `save_checkpoint`.

    Args:
        path (Union[str, Path]): The .npz file.

    Returns:
        Checkpoint: The restored checkpoint.
    """
    path = Path(path)
    groups = {name: {} for name in ("param", "target", "best", "first", "second", "replay")}
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive["header"]))
            for key in archive.files:
                if "__" in key:
                    group, name = key.split("__", 1)
                    groups[group][name] = archive[key].copy()
    except (OSError, KeyError, ValueError) as error:
        raise CheckpointError(f"cannot read checkpoint {path}: {error}")
    spec = NetworkSpec(**header["spec"])
    networks = header.get("networks", ["param"])
    params = NetworkParams(spec, groups["param"], header["role"])
    target = NetworkParams(spec, groups["target"], "target") if "target" in networks else None
    best = NetworkParams(spec, groups["best"], "main") if "best" in networks else None
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = AdamState(groups["first"], groups["second"], **header["optimizer"])
    replay = groups["replay"] if header.get("replay") else None
    return Checkpoint(params, optimizer, header["rng_state"], header["scaler"], header["metadata"], target, best,
                      replay)
