"""Experiment drivers behind the command-line subcommands."""

import csv
import io
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .artifacts import check_compatible, load_model, save_model
from .config_parser import ConfigError, RunConfig
from .data import (Dataset, generate_spirals, holdout, kfold, load_delimited, normalize_split,
                   validation_split)
from .dictionary import nearest_dataset_points
from .knn import KNNBaseline, induction_accuracy
from .meta import (MetaModel, attention_vectors, build_model, evaluate, predict,
                   similarity_shift_report, train)
from .optim import DivergenceError
from .records import METRICS_FORMAT_VERSION, atomic_write, to_plain, write_records
from .tasks import create_task

logger = logging.getLogger('metaneighbors.experiments')

TEST_SEED_OFFSET = 10_000


@dataclass
class Split:
    """One train/validation/test partition; ``name`` is 'holdout' or 'foldN'."""
    name: str
    train: Dataset
    validation: Optional[Dataset]
    test: Dataset

    @property
    def suffix(self) -> str:
        return '' if self.name == 'holdout' else f'_{self.name}'


def load_source(config: RunConfig) -> Dataset:
    ds = config.dataset
    if ds.source == 'spirals':
        return generate_spirals(ds.n_per_class, noise_std=ds.noise_std, turns=ds.turns,
                                seed=config.seed, n_classes=ds.n_classes or 2)
    header = 'auto' if ds.header is None else ds.header
    return load_delimited(ds.path, ds.label_columns, delimiter=ds.delimiter, header=header,
                          task=config.task, n_classes=ds.n_classes)


def prepare_splits(config: RunConfig, normalize: bool = True) -> List[Split]:
    """Partition the configured data; normalization statistics come from each training part."""
    ds = config.dataset
    source = load_source(config)
    if ds.source == 'spirals' and ds.folds == 0:
        test = generate_spirals(max(ds.test_per_class, 1), noise_std=ds.noise_std, turns=ds.turns,
                                seed=config.seed + TEST_SEED_OFFSET, n_classes=ds.n_classes or 2)
        parts = [('holdout', source, test)]
    elif ds.folds >= 2:
        parts = [(f'fold{i + 1}', source.subset(train_rows), source.subset(test_rows))
                 for i, (train_rows, test_rows) in enumerate(kfold(len(source), ds.folds, config.seed))]
    else:
        train_part, test = holdout(source, ds.test_fraction, config.seed)
        parts = [('holdout', train_part, test)]

    splits = []
    for name, train_part, test in parts:
        train_rows, val_rows = validation_split(np.arange(len(train_part)), ds.validation_fraction, config.seed)
        train_set = train_part.subset(train_rows)
        validation = train_part.subset(val_rows) if val_rows.size else None
        if normalize and (ds.normalize or ds.normalize_labels):
            train_set, validation, test = _normalize(train_set, validation, test, ds.normalize, ds.normalize_labels)
        splits.append(Split(name, train_set, validation, test))
        logger.info("Split %s: %d train, %d validation, %d test", name, len(train_set),
                    len(validation) if validation is not None else 0, len(test))
    return splits


def _normalize(train_set, validation, test, inputs: bool, labels: bool):
    others = [test] if validation is None else [validation, test]
    normalized = normalize_split(train_set, *others, labels=labels)
    if not inputs:
        # keep raw inputs, only the label statistics apply
        normalized = [replace(n, inputs=o.inputs, normalizer=None)
                      for n, o in zip(normalized, [train_set] + others)]
    if validation is None:
        return normalized[0], None, normalized[1]
    return normalized[0], normalized[1], normalized[2]


def apply_normalizers(dataset: Dataset, normalizer, label_normalizer) -> Dataset:
    return replace(dataset,
                   inputs=normalizer.transform(dataset.inputs) if normalizer else dataset.inputs,
                   labels=label_normalizer.transform(dataset.labels) if label_normalizer else dataset.labels,
                   normalizer=normalizer, label_normalizer=label_normalizer)


def score_split(model: MetaModel, test: Dataset, chunk_size: int = 64) -> Dict[str, float]:
    """Loss and headline metric; regression also reports MSE in original label units."""
    metrics = evaluate(model, test.inputs, test.labels, chunk_size)
    if test.label_normalizer is not None:
        predictions = test.label_normalizer.inverse_transform(predict(model, test.inputs, chunk_size))
        truth = test.label_normalizer.inverse_transform(test.labels)
        metrics['mse_original'] = model.objective.score(predictions, truth)['mse']
    return metrics


def fit_split(config: RunConfig, split: Split,
              on_step: Optional[Callable[[int, MetaModel], None]] = None,
              model: Optional[MetaModel] = None):
    """Build (unless given) and train one model on one split."""
    if model is None:
        model = build_model(config.model, config.task, split.train.input_dim, split.train.output_dim,
                            seed=config.seed, labels=split.train.labels)
    model, record = train(model, split.train, config, validation=split.validation, on_step=on_step)
    metrics = score_split(model, split.test, config.training.eval_chunk_size)
    bad = sorted(k for k, v in metrics.items() if not np.isfinite(v))
    if bad:
        raise DivergenceError(f"non-finite test metrics on {split.name}: {', '.join(bad)}")
    record.final.update({f'test_{k}': v for k, v in metrics.items()})
    record.final['split'] = split.name
    return model, record


def _summarize(rows: List[Dict[str, Any]], keys: List[str]) -> Dict[str, float]:
    summary = {}
    for key in keys:
        values = [r[key] for r in rows if key in r]
        if values:
            summary[f'{key}_mean'] = float(np.mean(values))
            summary[f'{key}_std'] = float(np.std(values))
    return summary


def run_training(config: RunConfig, out_dir: Path) -> Dict[str, Any]:
    """Train on every split, write artifacts, metrics and a summary."""
    out_dir = Path(out_dir)
    splits = prepare_splits(config)
    methods = [config.model.method]
    if config.training.compare_vanilla and config.model.method != 'vanilla':
        methods.append('vanilla')
    headline = f'test_{create_task(config.task).headline_metric}'
    rows = []
    for method in methods:
        run_config = replace(config, model=replace(config.model, method=method))
        prefix = '' if method == config.model.method else f'{method}_'
        for split in splits:
            logger.info("Training %s on %s", method, split.name)
            model, record = fit_split(run_config, split)
            record.final['method'] = method
            save_model(out_dir / f'{prefix}model{split.suffix}.yaml', model, run_config.to_dict(),
                       split.train.normalizer, split.train.label_normalizer, split=split.name)
            record.write(out_dir / f'{prefix}metrics{split.suffix}.jsonl')
            rows.append({'method': method, 'split': split.name, **record.final})
            logger.info("%s %s: %s=%.5g", method, split.name, headline, record.final[headline])

    metric_keys = sorted({k for r in rows for k in r if k.startswith('test_')})
    summaries = {m: _summarize([r for r in rows if r['method'] == m], metric_keys) for m in methods}
    aggregate = [{'method': m, 'split': 'mean', **s} for m, s in summaries.items()]
    write_records(out_dir / 'summary.jsonl', config.to_dict(), rows + aggregate)
    for method, summary in summaries.items():
        if f'{headline}_mean' in summary:
            logger.info("%s over %d split(s): %s = %.5g +/- %.5g", method, len(splits), headline,
                        summary[f'{headline}_mean'], summary[f'{headline}_std'])
    return {'rows': rows, 'summary': summaries}


def select_split(splits: List[Split], name: Optional[str]) -> Split:
    """The partition an artifact was trained on, so evaluation never scores its training rows."""
    by_name = {s.name: s for s in splits}
    if name is None:
        if len(splits) > 1:
            raise ConfigError('dataset.folds', "artifact does not record its fold; "
                              f"cannot choose among {len(splits)} splits")
        return splits[0]
    if name not in by_name:
        raise ConfigError('dataset', f"artifact was trained on split {name!r}, "
                          f"configured data gives {sorted(by_name)}")
    return by_name[name]


def run_evaluation(config: RunConfig, artifact_path: Path, out_dir: Path) -> Dict[str, Any]:
    """Test metrics of a saved model plus the optional analysis reports."""
    artifact = load_model(artifact_path)
    model = artifact.model
    if model.task != config.task:
        raise ConfigError('task', f"artifact was trained for {model.task}, config says {config.task}")
    split = select_split(prepare_splits(config, normalize=False), artifact.split)
    train_set = apply_normalizers(split.train, artifact.normalizer, artifact.label_normalizer)
    target = split.test if config.eval.split == 'test' else split.train
    target = apply_normalizers(target, artifact.normalizer, artifact.label_normalizer)
    check_compatible(model, target.input_dim, target.output_dim)

    chunk = config.training.eval_chunk_size
    metrics = score_split(model, target, chunk)
    report: Dict[str, Any] = {'metrics': metrics, 'rows': len(target)}
    rows: List[Dict[str, Any]] = [{'report': 'metrics', 'split': config.eval.split, **metrics}]
    logger.info("Evaluated %s on %d %s rows: %s", artifact_path, len(target), config.eval.split,
                ", ".join(f"{k}={v:.5g}" for k, v in metrics.items()))

    if config.eval.similarity_shift:
        shift = similarity_shift_report(model, target.inputs, target.labels, chunk)
        improved = float(np.mean(shift[:, 1] >= shift[:, 0]))
        report['similarity_shift'] = {'rows': shift.shape[0], 'improved_fraction': improved}
        rows += [{'report': 'similarity_shift', 'sample': i, 'before': b, 'after': a}
                 for i, (b, a) in enumerate(shift)]
        logger.info("Similarity shift: %.1f%% of samples moved toward their class weight", 100 * improved)

    if config.eval.nearest_points:
        features = model.frozen().embed(train_set.inputs).data
        entries = range(min(config.eval.nearest_entries, model.dictionary.size))
        classes = model.dictionary.entry_classes()
        for j in entries:
            nearest = nearest_dataset_points(model.dictionary, j, features,
                                             min(config.eval.nearest_points, len(train_set)))
            rows.append({'report': 'nearest_points', 'entry': j, 'entry_class': int(classes[j]),
                         'rows': train_set.indices[nearest], 'row_classes': train_set.classes[nearest]})
        report['nearest_points'] = len(entries)

    if config.eval.attention_knn:
        k = config.eval.attention_knn
        feature_acc = induction_accuracy(model.frozen().embed(train_set.inputs).data, train_set.classes,
                                         model.frozen().embed(target.inputs).data, target.classes, k=k)
        attention_acc = induction_accuracy(attention_vectors(model, train_set.inputs), train_set.classes,
                                           attention_vectors(model, target.inputs), target.classes, k=k)
        report['attention_knn'] = {'features': feature_acc, 'attention': attention_acc}
        rows.append({'report': 'attention_knn', 'k': k, 'feature_accuracy': feature_acc,
                     'attention_accuracy': attention_acc})

    write_records(Path(out_dir) / 'eval.jsonl', {'config': config.to_dict(), 'artifact': str(artifact_path)}, rows)
    return report


def run_sweep(config: RunConfig, out_dir: Path) -> List[Dict[str, Any]]:
    """Grid over dictionary size and gamma; seeds are shared by every grid point."""
    sizes = config.sweep.dictionary_size or [config.model.dictionary_size]
    gammas = config.sweep.gamma or [config.model.gamma]
    split = prepare_splits(config)[0]
    headline = f'test_{create_task(config.task).headline_metric}'
    rows = []
    for size in sizes:
        for gamma in gammas:
            for seed in config.sweep.seeds:
                cell = replace(config, seed=seed, model=replace(config.model, dictionary_size=size, gamma=gamma))
                row = {'dictionary_size': size, 'gamma': gamma, 'seed': seed}
                try:
                    _, record = fit_split(cell, split)
                    row.update(status='ok', **{k: v for k, v in record.final.items() if k.startswith('test_')})
                except (DivergenceError, ValueError) as e:
                    logger.error("Sweep cell S=%d gamma=%s seed=%d failed: %s", size, gamma, seed, e)
                    row.update(status='failed', error=str(e))
                rows.append(row)

    medians = []
    for size in sizes:
        for gamma in gammas:
            scores = [r[headline] for r in rows
                      if r['dictionary_size'] == size and r['gamma'] == gamma and r['status'] == 'ok']
            medians.append({'dictionary_size': size, 'gamma': gamma, 'aggregate': 'median',
                            'completed': len(scores),
                            f'{headline}_median': float(np.median(scores)) if scores else None})
            logger.info("S=%d gamma=%s: median %s over %d seed(s) = %s", size, gamma, headline, len(scores),
                        medians[-1][f'{headline}_median'])
    write_records(Path(out_dir) / 'sweep.jsonl', config.to_dict(), rows + medians)
    return medians


def trace_rows(iteration: int, model: MetaModel) -> List[List[float]]:
    keys = model.dictionary.keys.data
    values = model.dictionary.value_targets().data
    return [[iteration, j, *keys[j], *values[j]] for j in range(model.dictionary.size)]


def run_trace(config: RunConfig, out_dir: Path) -> Path:
    """Train once, dumping dictionary keys and values every ``trace_every`` iterations.

    ``trace.csv`` opens with ``#`` lines holding the format version and the
    config echo, then one CSV header row.
    """
    if config.model.extractor:
        raise ConfigError('model.extractor', "trace needs an input-space dictionary (no extractor)")
    split = prepare_splits(config)[0]
    if split.train.input_dim != 2:
        raise ConfigError('dataset', f"trace needs 2-D inputs, got {split.train.input_dim} columns")
    model = build_model(config.model, config.task, split.train.input_dim, split.train.output_dim,
                        seed=config.seed, labels=split.train.labels)
    rows = trace_rows(0, model)

    def record_keys(iteration, current):
        if iteration % config.training.trace_every == 0:
            rows.extend(trace_rows(iteration, current))

    model, record = fit_split(config, split, on_step=record_keys, model=model)
    record.write(Path(out_dir) / 'metrics.jsonl')

    buffer = io.StringIO()
    buffer.write(f"# format_version: {METRICS_FORMAT_VERSION}\n")
    buffer.write(f"# config: {json.dumps(to_plain(config.to_dict()), sort_keys=True)}\n")
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['iteration', 'entry', 'key_0', 'key_1'] +
                    [f'value_{c}' for c in range(model.dictionary.value_dim)])
    for row in rows:
        writer.writerow([int(row[0]), int(row[1])] + [repr(float(v)) for v in row[2:]])
    path = atomic_write(Path(out_dir) / 'trace.csv', buffer.getvalue())
    logger.info("Wrote %d trace rows for %d dictionary entries to %s", len(rows), model.dictionary.size, path)
    return path


def run_knn_baseline(config: RunConfig, out_dir: Path) -> Dict[str, float]:
    """Exact kNN on the same splits the model would see."""
    task = create_task(config.task)
    rows = []
    for split in prepare_splits(config):
        baseline = KNNBaseline(config.eval.knn_k, metric=config.eval.knn_metric, task=config.task)
        baseline.fit(split.train.inputs, split.train.labels)
        metrics = task.score(baseline.predict(split.test.inputs), split.test.labels)
        rows.append({'split': split.name, 'k': config.eval.knn_k, **{f'test_{k}': v for k, v in metrics.items()}})
        logger.info("kNN k=%d on %s: %s", config.eval.knn_k, split.name, metrics)
    summary = _summarize(rows, sorted({k for r in rows for k in r if k.startswith('test_')}))
    write_records(Path(out_dir) / 'knn.jsonl', config.to_dict(), rows + [{'split': 'mean', **summary}])
    return summary
