"""Dataset generation, delimited-file ingestion, normalization and splits."""

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger('metaneighbors.data')


class DataFormatError(ValueError):
    """Malformed delimited input."""

    def __init__(self, message: str, path: Optional[Path] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if path is not None and line is not None else (f"{path}: " if path else "")
        super().__init__(f"{where}{message}")


@dataclass
class Normalizer:
    """Per-dimension standardization fitted on training rows."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> 'Normalizer':
        rows = np.asarray(rows, dtype=np.float64)
        std = rows.std(axis=0)
        # constant dimensions are only centered
        std = np.where(std > 0, std, 1.0)
        return cls(mean=rows.mean(axis=0), std=std)

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) * self.std + self.mean


@dataclass
class Dataset:
    """Inputs (N x d) and labels (N x n_o; one-hot for classification)."""
    inputs: np.ndarray
    labels: np.ndarray
    task: str
    name: str = 'dataset'
    normalizer: Optional[Normalizer] = None
    label_normalizer: Optional[Normalizer] = None
    indices: Optional[np.ndarray] = None   # row ids in the source table

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim == 1:
            self.labels = self.labels.reshape(-1, 1)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"inputs {self.inputs.shape} and labels {self.labels.shape} do not align")
        if self.indices is None:
            self.indices = np.arange(len(self))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.labels.shape[1]

    @property
    def n_classes(self) -> Optional[int]:
        return self.output_dim if self.task == 'classification' else None

    @property
    def classes(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.classes == c)

    def subset(self, rows: Sequence[int]) -> 'Dataset':
        rows = np.asarray(rows, dtype=int)
        return replace(self, inputs=self.inputs[rows], labels=self.labels[rows], indices=self.indices[rows])


def one_hot(classes: Sequence[int], n_classes: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=int)
    out = np.zeros((classes.size, n_classes))
    out[np.arange(classes.size), classes] = 1.0
    return out


def generate_spirals(n_per_class: int, noise_std: float = 0.1, turns: float = 2.0,
                     seed: int = 0, n_classes: int = 2,
                     radius: Tuple[float, float] = (0.2, 2.0)) -> Dataset:
    """Interleaved 2-D spirals, one arm per class, with Gaussian radial noise.

    Arm positions are fixed by ``n_per_class`` and ``turns``; the seed only
    drives the noise, so the radius of each arm grows monotonically with angle.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be at least 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, n_per_class) if n_per_class > 1 else np.zeros(1)
    r_min, r_max = radius
    points, classes = [], []
    for c in range(n_classes):
        angle = 2.0 * np.pi * turns * t + 2.0 * np.pi * c / n_classes
        r = r_min + (r_max - r_min) * t + rng.normal(0.0, noise_std, size=t.size)
        points.append(np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1))
        classes.append(np.full(t.size, c))
    return Dataset(inputs=np.concatenate(points), labels=one_hot(np.concatenate(classes), n_classes),
                   task='classification', name='spirals')


def _looks_like_header(cells: List[str]) -> bool:
    for cell in cells:
        try:
            float(cell)
        except ValueError:
            return True
    return False


def load_delimited(path: Union[str, Path], label_columns: Sequence[int], delimiter: str = ',',
                   header: Union[bool, str] = 'auto', task: str = 'regression',
                   n_classes: Optional[int] = None) -> Dataset:
    """Read a rectangular numeric table; ``label_columns`` may be negative.

    Classification labels are integer class ids converted to one-hot rows.
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError("file not found", path=path)
    rows, first_line = [], None
    with open(path, 'r', newline='') as f:
        reader = csv.reader(f, delimiter=delimiter)
        for line_no, cells in enumerate(reader, start=1):
            cells = [c.strip() for c in cells]
            if not cells or all(c == '' for c in cells):
                continue
            if first_line is None:
                first_line = line_no
                skip = header is True or (header == 'auto' and _looks_like_header(cells))
                if skip:
                    continue
            if rows and len(cells) != len(rows[0]):
                raise DataFormatError(f"ragged row with {len(cells)} columns, expected {len(rows[0])}",
                                      path=path, line=line_no)
            try:
                values = [float(c) for c in cells]
            except ValueError:
                bad = next(c for c in cells if not _is_number(c))
                raise DataFormatError(f"non-numeric cell {bad!r}", path=path, line=line_no) from None
            if not np.all(np.isfinite(values)):
                bad = next(c for c, v in zip(cells, values) if not np.isfinite(v))
                raise DataFormatError(f"non-finite cell {bad!r}", path=path, line=line_no)
            rows.append(values)
    if not rows:
        raise DataFormatError("no data rows", path=path)
    table = np.asarray(rows)
    n_cols = table.shape[1]
    label_idx = sorted({c % n_cols for c in label_columns if -n_cols <= c < n_cols})
    if len(label_idx) != len(set(label_columns)) or not label_idx:
        raise DataFormatError(f"label columns {list(label_columns)} not in a {n_cols}-column table", path=path)
    input_idx = [c for c in range(n_cols) if c not in label_idx]
    inputs, labels = table[:, input_idx], table[:, label_idx]
    if task == 'classification':
        classes = labels[:, 0].astype(int)
        labels = one_hot(classes, n_classes or int(classes.max()) + 1)
    logger.info("Loaded %s: %d rows, %d input columns, %d label columns",
                path, table.shape[0], len(input_idx), len(label_idx))
    return Dataset(inputs=inputs, labels=labels, task=task, name=path.stem)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def kfold(n_rows: int, folds: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Shuffled (train, test) index partitions; test folds cover every row once."""
    if folds < 2:
        raise ValueError(f"folds must be at least 2, got {folds}")
    if folds > n_rows:
        raise ValueError(f"cannot split {n_rows} rows into {folds} folds")
    order = np.random.default_rng(seed).permutation(n_rows)
    parts = np.array_split(order, folds)
    return [(np.sort(np.concatenate(parts[:i] + parts[i + 1:])), np.sort(part))
            for i, part in enumerate(parts)]


def validation_split(rows: np.ndarray, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Split ``rows`` into (train, validation); at least one validation row when fraction > 0."""
    rows = np.asarray(rows)
    if fraction <= 0:
        return rows, rows[:0]
    shuffled = np.random.default_rng(seed).permutation(rows)
    n_val = min(max(1, int(round(fraction * rows.size))), rows.size - 1)
    return np.sort(shuffled[n_val:]), np.sort(shuffled[:n_val])


def holdout(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Random (train, test) split of a whole dataset."""
    if not 0 < fraction < 1:
        raise ValueError(f"holdout fraction must be in (0, 1), got {fraction}")
    train_rows, test_rows = validation_split(np.arange(len(dataset)), fraction, seed)
    return dataset.subset(train_rows), dataset.subset(test_rows)


def normalize_split(train: Dataset, *others: Dataset, labels: bool = False) -> List[Dataset]:
    """Standardize inputs (and regression labels) with statistics from ``train`` only."""
    normalizer = Normalizer.fit(train.inputs)
    label_normalizer = Normalizer.fit(train.labels) if labels else None
    result = []
    for ds in (train,) + others:
        result.append(replace(
            ds,
            inputs=normalizer.transform(ds.inputs),
            labels=label_normalizer.transform(ds.labels) if label_normalizer else ds.labels,
            normalizer=normalizer,
            label_normalizer=label_normalizer,
        ))
    return result
