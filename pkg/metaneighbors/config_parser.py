"""Configuration parser for metaneighbors - handles YAML run configs."""

import yaml
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints
from pathlib import Path
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from .dictionary import METRICS, VALUE_MODES
from .estimator import HEAD_OUTPUTS, TASKS
from .meta import ALPHA_MODES, GROUP_ORDER, METHODS
from .records import to_plain

logger = logging.getLogger('metaneighbors.config')

DATA_SOURCES = ('spirals', 'delimited')
OPTIMIZERS = ('adamw', 'sgd')
AUX_TAU_MODES = ('own', 'shared')
KNN_METRICS = ('euclidean', 'cosine')


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class DatasetConfig:
    """Where the data comes from and how it is split."""
    source: str = 'spirals'
    # spirals
    n_per_class: int = 500
    test_per_class: int = 500
    noise_std: float = 0.1
    turns: float = 2.0
    n_classes: Optional[int] = None   # spirals default to 2
    # delimited files
    path: Optional[str] = None
    label_columns: List[int] = field(default_factory=lambda: [-1])
    delimiter: str = ','
    header: Optional[bool] = None     # None sniffs the first row
    test_fraction: float = 0.2
    # splits and preprocessing
    folds: int = 0
    validation_fraction: float = 0.1
    normalize: bool = False
    normalize_labels: bool = False


@dataclass
class ModelConfig:
    method: str = 'meta_neighborhoods'
    extractor: List[int] = field(default_factory=list)   # widths after the input; last is n_z
    extractor_final_relu: bool = True
    head_hidden: List[int] = field(default_factory=list)
    head_output: str = 'dot'
    dictionary_size: int = 5000
    gamma: float = 5.0
    metric: str = 'cosine'
    value_mode: Optional[str] = None   # task default
    inner_steps: int = 1
    alpha_mode: str = 'scalar'
    alpha_init: float = 0.1
    aux_weight: float = 1.0
    aux_tau: str = 'own'
    tau_init: float = 10.0
    init_std: float = 0.1


@dataclass
class OptimizerConfig:
    kind: str = 'adamw'
    learning_rate: float = 1e-3
    weight_decay: float = 7.5e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.0
    lr_drop_epoch: Optional[int] = None
    lr_drop_factor: float = 0.1
    decay_exempt: List[str] = field(default_factory=lambda: ['dict_values', 'alpha'])


@dataclass
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 128
    chunk_size: Optional[int] = None
    eval_chunk_size: int = 64
    patience: Optional[int] = None
    trace_every: int = 1
    compare_vanilla: bool = False


@dataclass
class SweepConfig:
    dictionary_size: List[int] = field(default_factory=list)
    gamma: List[float] = field(default_factory=list)
    seeds: List[int] = field(default_factory=lambda: [0])


@dataclass
class EvalConfig:
    split: str = 'test'          # 'test' or 'train'
    similarity_shift: bool = False
    nearest_points: int = 0      # k dataset rows per entry; 0 disables the report
    nearest_entries: int = 10    # how many dictionary entries to report
    attention_knn: int = 0       # k for attention-vector kNN accuracy; 0 disables
    knn_k: int = 5
    knn_metric: str = 'euclidean'


@dataclass
class RunConfig:
    """Complete configuration for one metaneighbors run."""
    task: str = 'classification'
    seed: int = 0
    output_dir: str = 'runs'
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(asdict(self))

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> 'RunConfig':
        updated = replace(self,
                          seed=self.seed if seed is None else seed,
                          output_dir=self.output_dir if output_dir is None else str(output_dir))
        updated.validate()
        return updated

    def validate(self):
        _check(self.task in TASKS, 'task', f"must be one of {TASKS}, got {self.task!r}")
        _check(self.seed >= 0, 'seed', "must be nonnegative")
        self._validate_dataset(self.dataset)
        self._validate_model(self.model)
        self._validate_optimizer(self.optimizer)
        self._validate_training(self.training)

        sweep = self.sweep
        _check(all(s >= 1 for s in sweep.dictionary_size), 'sweep.dictionary_size', "sizes must be positive")
        _check(all(g > 0 for g in sweep.gamma), 'sweep.gamma', "temperatures must be positive")
        _check(len(sweep.seeds) >= 1, 'sweep.seeds', "need at least one seed")

        ev = self.eval
        _check(ev.split in ('test', 'train'), 'eval.split', "must be 'test' or 'train'")
        for name in ('nearest_points', 'nearest_entries', 'attention_knn'):
            _check(getattr(ev, name) >= 0, f'eval.{name}', "must be nonnegative")
        _check(ev.knn_k >= 1, 'eval.knn_k', "must be at least 1")
        _check(ev.knn_metric in KNN_METRICS, 'eval.knn_metric', f"must be one of {KNN_METRICS}")
        if ev.similarity_shift:
            _check(self.model.head_output == 'cosine', 'eval.similarity_shift',
                   "needs model.head_output: cosine")
        if self.task == 'regression':
            # both reports compare class labels
            _check(ev.nearest_points == 0, 'eval.nearest_points', "only defined for classification")
            _check(ev.attention_knn == 0, 'eval.attention_knn', "only defined for classification")

    def _validate_dataset(self, ds: DatasetConfig):
        _check(ds.source in DATA_SOURCES, 'dataset.source', f"must be one of {DATA_SOURCES}, got {ds.source!r}")
        if ds.source == 'spirals':
            _check(self.task == 'classification', 'dataset.source', "spirals are a classification dataset")
            _check(ds.n_per_class >= 1, 'dataset.n_per_class', "must be at least 1")
            _check(ds.test_per_class >= 0, 'dataset.test_per_class', "must be nonnegative")
            _check(ds.noise_std >= 0, 'dataset.noise_std', "must be nonnegative")
            _check(ds.n_classes is None or ds.n_classes >= 2, 'dataset.n_classes', "must be at least 2")
        else:
            _check(bool(ds.path), 'dataset.path', "required for delimited data")
            _check(len(ds.label_columns) >= 1, 'dataset.label_columns', "need at least one label column")
            _check(len(ds.delimiter) == 1, 'dataset.delimiter', "must be a single character")
            _check(0 < ds.test_fraction < 1, 'dataset.test_fraction', "must be in (0, 1)")
        _check(ds.folds == 0 or ds.folds >= 2, 'dataset.folds', "must be 0 (single split) or at least 2")
        _check(0 <= ds.validation_fraction < 1, 'dataset.validation_fraction', "must be in [0, 1)")
        _check(not ds.normalize_labels or self.task == 'regression', 'dataset.normalize_labels',
               "only regression labels can be standardized")

    def _validate_model(self, m: ModelConfig):
        _check(m.method in METHODS, 'model.method', f"must be one of {METHODS}, got {m.method!r}")
        _check(all(w >= 1 for w in m.extractor), 'model.extractor', "widths must be positive")
        _check(all(w >= 1 for w in m.head_hidden), 'model.head_hidden', "widths must be positive")
        _check(m.head_output in HEAD_OUTPUTS, 'model.head_output', f"must be one of {HEAD_OUTPUTS}")
        _check(m.head_output == 'dot' or self.task == 'classification', 'model.head_output',
               "the cosine output layer is for classification")
        _check(m.dictionary_size >= 1, 'model.dictionary_size', "must be at least 1")
        _check(m.gamma > 0, 'model.gamma', "must be positive")
        _check(m.metric in METRICS, 'model.metric', f"must be one of {METRICS}")
        _check(m.value_mode is None or m.value_mode in VALUE_MODES, 'model.value_mode',
               f"must be one of {VALUE_MODES}")
        _check(m.inner_steps >= 1, 'model.inner_steps', "must be at least 1")
        _check(m.alpha_mode in ALPHA_MODES, 'model.alpha_mode', f"must be one of {ALPHA_MODES}")
        _check(m.aux_weight >= 0, 'model.aux_weight', "must be nonnegative")
        _check(m.aux_tau in AUX_TAU_MODES, 'model.aux_tau', f"must be one of {AUX_TAU_MODES}")
        _check(m.tau_init > 0, 'model.tau_init', "must be positive")
        _check(m.init_std > 0, 'model.init_std', "must be positive")

    def _validate_optimizer(self, o: OptimizerConfig):
        _check(o.kind in OPTIMIZERS, 'optimizer.kind', f"must be one of {OPTIMIZERS}")
        _check(o.learning_rate > 0, 'optimizer.learning_rate', "must be positive")
        _check(o.weight_decay >= 0, 'optimizer.weight_decay', "must be nonnegative")
        _check(all(0 <= b < 1 for b in o.betas), 'optimizer.betas', "must lie in [0, 1)")
        _check(o.eps > 0, 'optimizer.eps', "must be positive")
        _check(0 <= o.momentum < 1, 'optimizer.momentum', "must lie in [0, 1)")
        _check(o.lr_drop_epoch is None or o.lr_drop_epoch >= 1, 'optimizer.lr_drop_epoch', "must be at least 1")
        _check(o.lr_drop_factor > 0, 'optimizer.lr_drop_factor', "must be positive")
        unknown = [g for g in o.decay_exempt if g not in GROUP_ORDER]
        _check(not unknown, 'optimizer.decay_exempt', f"unknown parameter groups {unknown}; known: {GROUP_ORDER}")

    def _validate_training(self, t: TrainingConfig):
        _check(t.epochs >= 1, 'training.epochs', "must be at least 1")
        _check(t.batch_size >= 1, 'training.batch_size', "must be at least 1")
        _check(t.chunk_size is None or t.chunk_size >= 1, 'training.chunk_size', "must be at least 1")
        _check(t.eval_chunk_size >= 1, 'training.eval_chunk_size', "must be at least 1")
        _check(t.patience is None or t.patience >= 1, 'training.patience', "must be at least 1")
        _check(t.trace_every >= 1, 'training.trace_every', "must be at least 1")


def _check(condition: bool, field_name: str, message: str):
    if not condition:
        raise ConfigError(field_name, message)


def _coerce(value, hint, name: str):
    """Cast a YAML scalar or list to the annotated field type."""
    origin, args = get_origin(hint), get_args(hint)
    if origin is Union:
        if value is None:
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(value, inner, name)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{name}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(name, f"expected a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(v, a, f"{name}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(name, f"expected true or false, got {value!r}")
    if hint is int:
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, (int, str)) and not isinstance(value, bool):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if hint is float:
        if isinstance(value, bool):
            raise ConfigError(name, f"expected a number, got {value!r}")
        # YAML 1.1 reads 1e-3 as a string
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(name, f"expected a number, got {value!r}") from None
    if hint is str:
        if isinstance(value, str):
            return value
        raise ConfigError(name, f"expected a string, got {value!r}")
    raise ConfigError(name, f"unsupported field type {hint}")


class ConfigParser:
    """Parse configuration from YAML."""

    DEFAULT_FILES = ('metaneighbors.yaml', 'config.yaml', 'config.yml')

    def __init__(self):
        self.logger = logger

    def parse_dict(self, data: Optional[Dict[str, Any]]) -> RunConfig:
        config = self._build(RunConfig, data or {}, '')
        config.validate()
        return config

    def parse_yaml(self, config_path: Path) -> RunConfig:
        try:
            with open(config_path, 'r') as f:
                data = yaml.safe_load(f)
        except FileNotFoundError:
            raise ConfigError('config', f"Config file {config_path} not found")
        except yaml.YAMLError as e:
            raise ConfigError('config', f"Invalid YAML in {config_path}: {e}") from e
        if data is not None and not isinstance(data, dict):
            raise ConfigError('config', f"{config_path} must contain a mapping")
        return self.parse_dict(data)

    def load_config(self, config_path: Optional[Path] = None) -> RunConfig:
        if config_path:
            self.logger.info(f"Loading config from {config_path}")
            return self.parse_yaml(Path(config_path))

        # Look for default config files
        for name in self.DEFAULT_FILES:
            p = Path(name)
            if p.exists():
                self.logger.info(f"Loading config from {p}")
                return self.parse_yaml(p)

        raise ConfigError('config', "No configuration found. Please provide a config file using --config.")

    def _build(self, cls, data, prefix: str):
        if not isinstance(data, dict):
            raise ConfigError(prefix or 'config', f"expected a mapping, got {data!r}")
        hints = get_type_hints(cls)
        known = [f.name for f in fields(cls)]
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(_join(prefix, str(unknown[0])), "unknown key")
        kwargs = {}
        for name in known:
            if name not in data:
                continue
            path = _join(prefix, name)
            if is_dataclass(hints[name]):
                kwargs[name] = self._build(hints[name], data[name] or {}, path)
            else:
                kwargs[name] = _coerce(data[name], hints[name], path)
        return cls(**kwargs)


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name
