"""Run metrics and atomic file output."""

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

METRICS_FORMAT_VERSION = 1


def atomic_write(path, payload) -> Path:
    """Write text or bytes to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode('utf-8') if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def check_finite(values: Dict[str, Any], where: str):
    """Raise ValueError if any numeric entry of ``values`` is NaN or infinite."""
    for key, value in values.items():
        if isinstance(value, (float, np.floating)) and not np.isfinite(value):
            raise ValueError(f"non-finite metric {key}={value} in {where}")


def to_plain(value):
    if isinstance(value, dict):
        return {k: to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    return value


@dataclass
class MetricsRecord:
    """Per-epoch history plus final metrics of one run."""
    config: Dict[str, Any] = field(default_factory=dict)
    epochs: List[Dict[str, float]] = field(default_factory=list)
    final: Dict[str, Any] = field(default_factory=dict)
    wall_clock: float = 0.0
    format_version: int = METRICS_FORMAT_VERSION

    def add_epoch(self, epoch: int, **values):
        if self.epochs and epoch <= self.epochs[-1]['epoch']:
            raise ValueError(f"epoch {epoch} recorded after epoch {self.epochs[-1]['epoch']}")
        check_finite({k: float(v) for k, v in values.items() if v is not None}, f"epoch {epoch}")
        self.epochs.append({'epoch': epoch, **{k: float(v) for k, v in values.items() if v is not None}})

    def best_epoch(self, key: str = 'val_loss') -> Optional[int]:
        scored = [e for e in self.epochs if key in e]
        if not scored:
            return None
        return min(scored, key=lambda e: e[key])['epoch']

    def to_lines(self) -> List[str]:
        check_finite(self.final, 'final metrics')
        lines = [json.dumps({'record': 'config', 'format_version': self.format_version,
                             'config': to_plain(self.config)}, sort_keys=True)]
        for entry in self.epochs:
            lines.append(json.dumps({'record': 'epoch', **to_plain(entry)}, sort_keys=True))
        lines.append(json.dumps({'record': 'final', 'wall_clock': self.wall_clock,
                                 **to_plain(self.final)}, sort_keys=True))
        return lines

    def write(self, path) -> Path:
        return atomic_write(path, '\n'.join(self.to_lines()) + '\n')


def write_records(path, header: Dict[str, Any], rows: List[Dict[str, Any]]) -> Path:
    """Line-delimited output for tables such as sweeps and reports."""
    for row in rows:
        check_finite(row, str(path))
    lines = [json.dumps({'record': 'config', 'format_version': METRICS_FORMAT_VERSION,
                         **to_plain(header)}, sort_keys=True)]
    lines += [json.dumps({'record': 'row', **to_plain(row)}, sort_keys=True) for row in rows]
    return atomic_write(path, '\n'.join(lines) + '\n')


def read_records(path) -> List[Dict[str, Any]]:
    with open(path, 'r') as f:
        return [json.loads(line) for line in f if line.strip()]
