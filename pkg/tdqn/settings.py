import copy
import os
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import yaml

from tdqn.errors import ConfigError

FEATURES_PER_BAR = 5
DATA_DIR_VARIABLE = "TDQN_DATA_DIR"


class Field:
    """A set of descriptors that validate a value before it is stored on a settings object.

    Args:
        default (Any): Value used when the field is not given.
    """

    def __init__(self, default: Any = None):
        self.default = default

    def __set_name__(self, owner, name):
        self.public_name = name
        self.private_name = '_' + name

    def __get__(self, obj, objtype=None) -> Any:
        if obj is None:
            return self
        return getattr(obj, self.private_name)

    def __set__(self, obj, value: Any):
        setattr(obj, self.private_name, self.convert(obj, value))

    def fail(self, obj, message: str):
        raise ConfigError([f"{type(obj).__name__}.{self.public_name}: {message}"])

    def convert(self, obj, value: Any) -> Any:
        return value


class Number(Field):
    """A real or integer value with optional bounds.

    Args:
        default (float): Value used when the field is not given.
        minimum (float, optional): Lower bound. Defaults to None.
        maximum (float, optional): Upper bound. Defaults to None.
        open_min (bool): Exclude the lower bound itself. Defaults to False.
        open_max (bool): Exclude the upper bound itself. Defaults to False.
        integer (bool): Store as int. Defaults to False.
    """

    def __init__(self, default: float, minimum: Optional[float] = None, maximum: Optional[float] = None,
                 open_min: bool = False, open_max: bool = False, integer: bool = False):
        super().__init__(default)
        self.minimum, self.maximum = minimum, maximum
        self.open_min, self.open_max = open_min, open_max
        self.integer = integer

    def convert(self, obj, value: Any) -> Union[int, float]:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            self.fail(obj, f"expected a number, got {value!r}")
        try:
            number = float(value)
        except ValueError:
            self.fail(obj, f"expected a number, got {value!r}")
        if self.integer:
            if not number.is_integer():
                self.fail(obj, f"expected an integer, got {value!r}")
            number = int(number)
        if self.minimum is not None:
            if number < self.minimum or (self.open_min and number == self.minimum):
                self.fail(obj, f"{number} must be {'>' if self.open_min else '>='} {self.minimum}")
        if self.maximum is not None:
            if number > self.maximum or (self.open_max and number == self.maximum):
                self.fail(obj, f"{number} must be {'<' if self.open_max else '<='} {self.maximum}")
        return number


class Flag(Field):
    """A boolean switch."""

    def convert(self, obj, value: Any) -> bool:
        if not isinstance(value, bool):
            self.fail(obj, f"expected true/false, got {value!r}")
        return value


class Text(Field):
    """A string, optionally restricted to a set of choices."""

    def __init__(self, default: Optional[str] = None, choices: Optional[Sequence[str]] = None,
                 optional: bool = True):
        super().__init__(default)
        self.choices = tuple(choices) if choices else None
        self.optional = optional

    def convert(self, obj, value: Any) -> Optional[str]:
        if value is None:
            if not self.optional:
                self.fail(obj, "is required")
            return None
        value = str(value)
        if self.choices and value not in self.choices:
            self.fail(obj, f"{value!r} is not one of {', '.join(self.choices)}")
        return value


class DateField(Field):
    """A calendar date given as a date object or an ISO-8601 string."""

    def convert(self, obj, value: Any) -> Optional[date]:
        if value is None or isinstance(value, date):
            return value
        try:
            return date.fromisoformat(str(value))
        except ValueError:
            self.fail(obj, f"{value!r} is not an ISO-8601 date")


class NumberTuple(Field):
    """A tuple of numbers, each checked by an inner Number descriptor."""

    def __init__(self, default: Tuple, item: Number, allow_empty: bool = False):
        super().__init__(tuple(default))
        self.item = item
        self.allow_empty = allow_empty

    def __set_name__(self, owner, name):
        super().__set_name__(owner, name)
        self.item.public_name = name

    def convert(self, obj, value: Any) -> Tuple:
        if isinstance(value, (int, float, str)):
            value = [value]
        values = tuple(self.item.convert(obj, v) for v in value)
        if not values and not self.allow_empty:
            self.fail(obj, "must not be empty")
        return values


class TextTuple(Field):
    """A tuple of strings."""

    def convert(self, obj, value: Any) -> Tuple[str, ...]:
        if value is None:
            return ()
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return tuple(str(v) for v in value)


class Settings:
    """Base for validated settings objects.

    Every Field declared on the class becomes a keyword argument of the constructor.  All
    violations are gathered before a single ConfigError is raised.
    """

    _fields: Tuple[str, ...] = ()

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        names = []
        for klass in reversed(cls.__mro__):
            for name, attribute in vars(klass).items():
                if isinstance(attribute, Field) and name not in names:
                    names.append(name)
        cls._fields = tuple(names)

    def __init__(self, **values):
        violations = []
        for name in self._fields:
            value = values.pop(name, getattr(type(self), name).default)
            try:
                setattr(self, name, value)
            except ConfigError as error:
                violations.extend(error.violations)
                setattr(self, '_' + name, None)
        violations.extend(f"{type(self).__name__}: unknown key {key!r}" for key in values)
        if not violations:
            violations.extend(self.check())
        if violations:
            raise ConfigError(violations)

    def check(self) -> List[str]:
        """Cross-field checks.

        Returns:
            List[str]: Violations found, empty when the object is consistent.
        """
        return []

    def to_dict(self) -> Dict[str, Any]:
        data = dict()
        for name in self._fields:
            value = getattr(self, name)
            if isinstance(value, tuple):
                value = list(value)
            elif isinstance(value, date):
                value = value.isoformat()
            elif isinstance(value, Enum):
                value = value.value
            data[name] = value
        return data

    def replace(self, **changes) -> "Settings":
        values = {name: getattr(self, name) for name in self._fields}
        values.update(changes)
        return type(self)(**values)

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    def __repr__(self):
        fields = ", ".join(f"{k}={v!r}" for k, v in self.to_dict().items())
        return f"{type(self).__name__}({fields})"


class EnvConfig(Settings):
    """Trading environment settings: trading costs, the assumed maximum daily move, the
    starting cash and the observation history length."""

    cost_rate = Number(0.001, minimum=0.0, maximum=1.0, open_max=True)
    epsilon_bound = Number(0.1, minimum=0.0, open_min=True)
    initial_cash = Number(100_000.0, minimum=0.0, open_min=True)
    tau = Number(30, minimum=1, integer=True)
    filter_window = Number(5, minimum=1, integer=True)

    @property
    def observation_width(self) -> int:
        return observation_width(self.tau)


def observation_width(tau: int) -> int:
    """Length of a flattened observation: tau+1 feature rows plus the position slot."""
    return (tau + 1) * FEATURES_PER_BAR + 1


class NetworkSpec(Settings):
    """Shape and regularisation of the feedforward Q-network."""

    input_width = Number(observation_width(30), minimum=1, integer=True)
    hidden_widths = NumberTuple((512, 512, 512, 512, 512), Number(1, minimum=1, integer=True),
                                allow_empty=True)
    output_width = Number(2, minimum=2, maximum=2, integer=True)
    leaky_slope = Number(0.01, minimum=0.0, maximum=1.0, open_max=True)
    dropout_rate = Number(0.2, minimum=0.0, maximum=1.0, open_max=True)
    l2_coefficient = Number(1e-6, minimum=0.0)
    batch_norm = Flag(True)

    @property
    def layer_widths(self) -> Tuple[int, ...]:
        return (self.input_width, *self.hidden_widths, self.output_width)


class Hyperparams(Settings):
    """Training loop settings of the double deep Q-learning trainer."""

    gamma = Number(0.4, minimum=0.0, maximum=1.0)
    epsilon_start = Number(1.0, minimum=0.0, maximum=1.0)
    epsilon_end = Number(0.01, minimum=0.0, maximum=1.0)
    epsilon_decay_steps = Number(10_000, minimum=1, integer=True)
    batch_size = Number(32, minimum=1, integer=True)
    learn_every = Number(1, minimum=1, integer=True)
    target_sync = Number(1000, minimum=1, integer=True)
    episodes = Number(50, minimum=1, integer=True)
    replay_capacity = Number(100_000, minimum=1, integer=True)
    learning_rate = Number(1e-4, minimum=0.0, open_min=True)
    clip_threshold = Number(1.0, minimum=0.0, open_min=True)
    patience = Number(10, minimum=1, integer=True)
    early_stopping = Flag(True)
    mirror = Flag(True)
    augment = Flag(True)

    def check(self) -> List[str]:
        if self.epsilon_end > self.epsilon_start:
            return [f"Hyperparams: epsilon_end {self.epsilon_end} exceeds epsilon_start {self.epsilon_start}"]
        return []


class AugmentationSpec(Settings):
    """Which derived series to generate from a training series.  Every combination of
    shift, filter window and noise level yields one variant."""

    shifts = NumberTuple((0, 1, 2), Number(0, minimum=0, integer=True))
    filter_windows = NumberTuple((1, 5), Number(1, minimum=1, integer=True))
    noise_levels = NumberTuple((0.0, 0.002), Number(0.0, minimum=0.0))


class StrategyKind(str, Enum):
    BUY_HOLD = "buy-hold"
    SELL_HOLD = "sell-hold"
    TREND_FOLLOWING = "trend-following"
    MEAN_REVERSION = "mean-reversion"
    TDQN = "tdqn"

    @property
    def is_passive(self) -> bool:
        return self in (StrategyKind.BUY_HOLD, StrategyKind.SELL_HOLD)

    @property
    def is_moving_average(self) -> bool:
        return self in (StrategyKind.TREND_FOLLOWING, StrategyKind.MEAN_REVERSION)


class StrategySpec(Settings):
    """A trading strategy and, for the moving-average strategies, its two windows."""

    kind = Text("buy-hold", choices=[k.value for k in StrategyKind])
    short_window = Number(5, minimum=1, integer=True)
    long_window = Number(20, minimum=1, integer=True)

    @property
    def strategy(self) -> StrategyKind:
        return StrategyKind(self.kind)

    def check(self) -> List[str]:
        if self.short_window >= self.long_window:
            return [f"StrategySpec: short_window {self.short_window} must be < long_window {self.long_window}"]
        return []


class DataConfig(Settings):
    """Where market data comes from and how it is split."""

    source = Text("csv", choices=["csv", "http", "synthetic"])
    data_dir = Text(None)
    url_template = Text(None)
    timeout = Number(10.0, minimum=0.0, open_min=True)
    retries = Number(3, minimum=0, integer=True)
    tickers = TextTuple(())
    testbench = Text(None)
    start = DateField(date(2012, 1, 1))
    end = DateField(date(2019, 12, 31))
    train_end = DateField(date(2017, 12, 31))
    validation_fraction = Number(0.2, minimum=0.0, maximum=1.0, open_min=True, open_max=True)

    def resolved_data_dir(self) -> Path:
        """The data directory: explicit setting, then the TDQN_DATA_DIR variable, then ./data."""
        return Path(self.data_dir or os.environ.get(DATA_DIR_VARIABLE, "data"))

    def check(self) -> List[str]:
        violations = []
        if self.start and self.end and self.start >= self.end:
            violations.append(f"DataConfig: start {self.start} must precede end {self.end}")
        if self.train_end and self.start and not (self.start < self.train_end):
            violations.append(f"DataConfig: train_end {self.train_end} must follow start {self.start}")
        if self.train_end and self.end and not (self.train_end < self.end):
            violations.append(f"DataConfig: train_end {self.train_end} must precede end {self.end}")
        if self.source == "http" and not self.url_template:
            violations.append("DataConfig: url_template is required for the http source")
        return violations


class RunConfig:
    """The fully resolved configuration of one command: defaults < config file < flags.

    Args:
        data (DataConfig): Data source and split.
        env (EnvConfig): Trading environment settings.
        network (NetworkSpec): Q-network shape.
        agent (Hyperparams): Training loop settings.
        augmentation (AugmentationSpec): Data augmentation variants.
        strategies (List[StrategySpec]): Strategies compared by backtest/testbench.
        output (str): Output directory.
        seeds (List[int]): Seeds, the first one being used by single runs.
        workers (int): Worker processes for fan-out commands.
    """

    sections = {
        "data": DataConfig,
        "env": EnvConfig,
        "network": NetworkSpec,
        "agent": Hyperparams,
        "augmentation": AugmentationSpec,
    }

    def __init__(self, data: DataConfig, env: EnvConfig, network: NetworkSpec, agent: Hyperparams,
                 augmentation: AugmentationSpec, strategies: List[StrategySpec], output: str = "runs",
                 seeds: Sequence[int] = (0,), workers: int = 1):
        self.data = data
        self.env = env
        self.network = network.replace(input_width=env.observation_width)
        self.agent = agent
        self.augmentation = augmentation
        self.strategies = list(strategies)
        self.output = output
        self.seeds = [int(s) for s in seeds]
        self.workers = int(workers)

    @classmethod
    def from_mapping(cls, tree: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Build a configuration from a parsed YAML tree, collecting every violation.

        Args:
            tree (Dict[str, Any], optional): Parsed configuration. Defaults to None (all defaults).

        Returns:
            RunConfig: The validated configuration.
        """
        tree = dict(tree or {})
        violations = []
        built = dict()
        for key, klass in cls.sections.items():
            values = tree.pop(key, None) or {}
            if not isinstance(values, dict):
                violations.append(f"{key}: expected a mapping")
                continue
            try:
                built[key] = klass(**values)
            except ConfigError as error:
                violations.extend(error.violations)
        strategies = []
        for entry in tree.pop("strategies", None) or [{"kind": k.value} for k in StrategyKind if k != StrategyKind.TDQN]:
            if isinstance(entry, str):
                entry = {"kind": entry}
            try:
                strategies.append(StrategySpec(**entry))
            except ConfigError as error:
                violations.extend(error.violations)
        output = tree.pop("output", "runs")
        seeds = tree.pop("seeds", [0])
        workers = tree.pop("workers", 1)
        if isinstance(seeds, int):
            seeds = [seeds]
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            violations.append(f"seeds: expected a non-empty list of integers, got {seeds!r}")
        if not isinstance(workers, int) or workers < 1:
            violations.append(f"workers: expected a positive integer, got {workers!r}")
        violations.extend(f"unknown top-level key {key!r}" for key in tree)
        if violations:
            raise ConfigError(violations)
        return cls(strategies=strategies, output=str(output), seeds=seeds, workers=workers, **built)

    def override(self, section: str, **values) -> None:
        """Replace values of one section, ignoring values that are None (flags not given).

        Args:
            section (str): One of data, env, network, agent, augmentation.
        """
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return
        setattr(self, section, getattr(self, section).replace(**values))
        if section == "env":
            self.network = self.network.replace(input_width=self.env.observation_width)

    def overridden(self, section: str, **values) -> "RunConfig":
        """A copy with `override` applied, this configuration left untouched."""
        twin = copy.copy(self)
        twin.strategies = list(self.strategies)
        twin.seeds = list(self.seeds)
        twin.override(section, **values)
        return twin

    def validate(self, require_tickers: bool = False) -> None:
        """Check that nothing required is missing before a run starts.

        Args:
            require_tickers (bool): Whether at least one ticker must be configured.
        """
        violations = []
        if require_tickers and self.data.source != "synthetic" and not self.data.tickers:
            violations.append("data.tickers: at least one ticker is required")
        if self.network.input_width != self.env.observation_width:
            violations.append(f"network.input_width {self.network.input_width} does not match "
                              f"the observation width {self.env.observation_width}")
        if violations:
            raise ConfigError(violations)

    def to_dict(self) -> Dict[str, Any]:
        tree = {key: getattr(self, key).to_dict() for key in self.sections}
        tree["strategies"] = [s.to_dict() for s in self.strategies]
        tree["output"] = self.output
        tree["seeds"] = list(self.seeds)
        tree["workers"] = self.workers
        return tree


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Read a YAML configuration file.

    Args:
        path (Union[str, Path], optional): The file to read. Defaults to None (built-in defaults).

    Returns:
        RunConfig: The validated configuration.
    """
    if path is None:
        return RunConfig.from_mapping({})
    path = Path(path)
    try:
        with path.open("r") as f:
            tree = yaml.safe_load(f) or {}
    except OSError as error:
        raise ConfigError([f"cannot read config file {path}: {error}"])
    except yaml.YAMLError as error:
        raise ConfigError([f"config file {path} is not valid YAML: {error}"])
    if not isinstance(tree, dict):
        raise ConfigError([f"config file {path} must contain a mapping"])
    return RunConfig.from_mapping(tree)
