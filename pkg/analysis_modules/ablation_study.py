"""
Dataset splits, nested training subsets and the dataset-size ablation.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.config import RunConfig
from src.corpus_store import Corpus
from src.cross_encoder_trainer import CrossEncoderModel, TrainConfig, train
from src.encoders import create_encoder
from src.errors import ArgumentError, StateError
from src.ranking_evaluator import (IN_DOMAIN, METRIC_NAMES, OUT_DOMAIN, EvalQuery, MetricReport, evaluate_model,
                                   eval_set_fingerprint)
from src.relevance_miner import TrainingTriplet

logger = logging.getLogger(__name__)

TABLE_METRICS = ('map', 'mrr', 'ndcg')
TABLE_METRIC_LABELS = {'precision': 'Precision', 'map': 'MAP', 'mrr': 'MRR', 'ndcg': 'NDCG'}
DOMAIN_LABELS = {IN_DOMAIN: 'in', OUT_DOMAIN: 'out'}


def split_dataset(triplets: Sequence[TrainingTriplet], test_size: int,
                  rng_seed: int) -> Tuple[List[TrainingTriplet], List[TrainingTriplet]]:
    """
    Disjoint train/test split; both parts keep the input order.

    Args:
        triplets: All accepted triplets
        test_size: Number of held-out triplets (0 gives an empty test set)
        rng_seed: Seed of the permutation choosing the test triplets

    Returns:
        (train, test)
    """
    total = len(triplets)
    if test_size < 0:
        raise ArgumentError(f"test_size must be >= 0, got {test_size}")
    if test_size >= total:
        raise ArgumentError(f"test_size={test_size} leaves no training data out of {total} triplets")
    if test_size == 0:
        logger.warning("test_size=0: every triplet goes to training, the test set is empty")
        return list(triplets), []

    permutation = np.random.default_rng(rng_seed).permutation(total)
    test_positions = set(int(i) for i in permutation[:test_size])
    train_set = [t for i, t in enumerate(triplets) if i not in test_positions]
    test_set = [t for i, t in enumerate(triplets) if i in test_positions]
    return train_set, test_set


def make_nested_subsets(train_set: Sequence[TrainingTriplet], sizes: Sequence[int],
                        rng_seed: int) -> List[List[TrainingTriplet]]:
    """
    Training subsets where each is a strict superset of the previous one.

    All subsets are prefixes of one seeded permutation, kept in input order.
    """
    sizes = list(sizes)
    if not sizes:
        raise ArgumentError("At least one subset size is required")
    if sizes[0] < 1 or any(a >= b for a, b in zip(sizes, sizes[1:])):
        raise ArgumentError(f"Subset sizes must be positive and strictly increasing, got {sizes}")
    if sizes[-1] > len(train_set):
        raise ArgumentError(f"Largest subset ({sizes[-1]}) exceeds the training set ({len(train_set)})")

    permutation = np.random.default_rng(rng_seed).permutation(len(train_set))
    subsets = []
    for size in sizes:
        chosen = sorted(int(i) for i in permutation[:size])
        subsets.append([train_set[i] for i in chosen])
    return subsets


@dataclass
class AblationRow:
    size: int
    epoch: int
    domain: str
    report: MetricReport


@dataclass
class AblationResult:
    """Per size x epoch x domain reports, the untrained baseline and the shared test fingerprints."""

    sizes: List[int]
    epochs: int
    domains: List[str]
    rows: List[AblationRow] = field(default_factory=list)
    baseline: Dict[str, MetricReport] = field(default_factory=dict)
    fingerprints: Dict[str, str] = field(default_factory=dict)
    losses: Dict[int, List[float]] = field(default_factory=dict)
    subset_fingerprints: Dict[int, str] = field(default_factory=dict)

    def validate(self):
        if any(a >= b for a, b in zip(self.sizes, self.sizes[1:])):
            raise StateError("Ablation sizes must be strictly increasing")
        present = {(row.size, row.epoch, row.domain) for row in self.rows}
        for size in self.sizes:
            for epoch in range(1, self.epochs + 1):
                for domain in self.domains:
                    if (size, epoch, domain) not in present:
                        raise StateError(f"Missing ablation row size={size} epoch={epoch} domain={domain}")

    def report(self, size: int, epoch: int, domain: str) -> MetricReport:
        for row in self.rows:
            if (row.size, row.epoch, row.domain) == (size, epoch, domain):
                return row.report
        raise KeyError((size, epoch, domain))

    def per_epoch_frame(self) -> pd.DataFrame:
        """Long format: one row per size, epoch, domain and metric."""
        records = [
            {'size': row.size, 'epoch': row.epoch, 'domain': row.domain, 'metric': metric,
             'value': row.report.aggregate[metric]}
            for row in self.rows for metric in METRIC_NAMES
        ]
        return pd.DataFrame.from_records(records, columns=['size', 'epoch', 'domain', 'metric', 'value'])

    def first_epoch_table(self) -> pd.DataFrame:
        """Rows {MAP, MRR, NDCG} x {in, out}; columns Base and one per size, after epoch 1."""
        records = []
        for metric in TABLE_METRICS:
            for domain in self.domains:
                record = {'metric': TABLE_METRIC_LABELS[metric], 'domain': DOMAIN_LABELS.get(domain, domain)}
                if domain in self.baseline:
                    record['Base'] = self.baseline[domain].aggregate[metric]
                for size in self.sizes:
                    record[str(size)] = self.report(size, 1, domain).aggregate[metric]
                records.append(record)
        return pd.DataFrame.from_records(records)

    def improvement_summary(self) -> pd.DataFrame:
        """Mean and standard deviation over epochs of (epoch metric - untrained metric)."""
        frame = self.per_epoch_frame()
        base = pd.DataFrame.from_records([
            {'domain': domain, 'metric': metric, 'base': report.aggregate[metric]}
            for domain, report in self.baseline.items() for metric in METRIC_NAMES
        ], columns=['domain', 'metric', 'base'])
        merged = frame.merge(base, on=['domain', 'metric'], how='inner')
        merged['improvement'] = merged['value'] - merged['base']
        summary = (merged.groupby(['size', 'domain', 'metric'])['improvement']
                   .agg(['mean', 'std']).reset_index()
                   .rename(columns={'mean': 'mean_improvement', 'std': 'std_improvement'}))
        summary['std_improvement'] = summary['std_improvement'].fillna(0.0)
        return summary

    def to_dict(self) -> Dict[str, Any]:
        return {
            'sizes': self.sizes,
            'epochs': self.epochs,
            'domains': self.domains,
            'fingerprints': self.fingerprints,
            'subset_fingerprints': {str(k): v for k, v in self.subset_fingerprints.items()},
            'losses': {str(k): v for k, v in self.losses.items()},
            'baseline': {domain: report.to_dict() for domain, report in self.baseline.items()},
            'rows': [{'size': r.size, 'epoch': r.epoch, 'domain': r.domain, 'report': r.report.to_dict()}
                     for r in self.rows],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AblationResult':
        return cls(
            sizes=list(data['sizes']),
            epochs=int(data['epochs']),
            domains=list(data['domains']),
            rows=[AblationRow(r['size'], r['epoch'], r['domain'], MetricReport.from_dict(r['report']))
                  for r in data['rows']],
            baseline={d: MetricReport.from_dict(r) for d, r in data.get('baseline', {}).items()},
            fingerprints=dict(data.get('fingerprints', {})),
            losses={int(k): v for k, v in data.get('losses', {}).items()},
            subset_fingerprints={int(k): v for k, v in data.get('subset_fingerprints', {}).items()},
        )

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write('\n')

    @classmethod
    def load(cls, path: str) -> 'AblationResult':
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def make_model(config: RunConfig) -> CrossEncoderModel:
    """Fresh model: encoder from config.encoder, score head seeded by config.training.rng_seed."""
    return CrossEncoderModel.initialize(create_encoder(config.encoder), rng_seed=config.training.rng_seed)


def _triplet_ids_fingerprint(triplets: Sequence[TrainingTriplet]) -> str:
    return hashlib.sha256('\n'.join(t.query.query_id for t in triplets).encode('utf-8')).hexdigest()


def run_ablation(config: RunConfig, train_set: Sequence[TrainingTriplet], test_sets: Dict[str, List[EvalQuery]],
                 corpus: Corpus, sizes: Optional[Sequence[int]] = None, epochs: Optional[int] = None,
                 label_sources: Optional[Dict[str, str]] = None,
                 model_factory: Optional[Callable[[RunConfig], CrossEncoderModel]] = None) -> AblationResult:
    """
    Train a fresh model per nested subset size and evaluate it on every test set after each epoch.

    Args:
        config: Run configuration (training, evaluation and encoder sections are used)
        train_set: Training triplets
        test_sets: Eval sets by domain tag; fixed for every size and epoch
        corpus: Corpus resolving triplet doc_ids
        sizes: Subset sizes (default config.ablation_sizes)
        epochs: Epochs per size (default config.training.epochs)
        label_sources: Label provenance per domain, recorded in the reports
        model_factory: Builds the initial model (default: make_model)

    Returns:
        AblationResult with sizes x epochs x domains reports and the untrained baseline
    """
    sizes = list(sizes or config.ablation_sizes)
    epochs = config.training.epochs if epochs is None else epochs
    model_factory = model_factory or make_model
    label_sources = label_sources or {}
    k, max_pool = config.evaluation.k, config.evaluation.max_pool

    test_sets = {domain: eval_set for domain, eval_set in test_sets.items() if eval_set}
    if not test_sets:
        raise ArgumentError("The ablation needs at least one non-empty test set")
    if epochs < 1:
        raise ArgumentError("The ablation needs at least one epoch")

    subsets = make_nested_subsets(train_set, sizes, config.training.rng_seed)
    fingerprints = {domain: eval_set_fingerprint(eval_set) for domain, eval_set in test_sets.items()}

    def evaluate_all(model: CrossEncoderModel) -> Dict[str, MetricReport]:
        reports = {}
        for domain, eval_set in test_sets.items():
            report = evaluate_model(model, eval_set, k=k, max_pool=max_pool, dataset_tag=domain,
                                    label_source=label_sources.get(domain))
            if report.fingerprint != fingerprints[domain]:
                raise StateError(f"Test set '{domain}' changed during the ablation")
            reports[domain] = report
        return reports

    result = AblationResult(sizes=sizes, epochs=epochs, domains=list(test_sets), fingerprints=fingerprints)
    result.baseline = evaluate_all(model_factory(config))

    train_config = TrainConfig.from_params(config.training, config.pipeline.m)
    train_config.epochs = epochs

    for size, subset in zip(sizes, subsets):
        logger.info(f"Ablation: training on {size} triplets for {epochs} epochs")
        model = model_factory(config)
        _, history = train(model, subset, corpus, train_config,
                           eval_hook=lambda snapshot, epoch: evaluate_all(snapshot))
        for record in history.records:
            for domain in result.domains:
                result.rows.append(AblationRow(size, record.epoch, domain, record.evals[domain]))
        result.losses[size] = history.losses
        result.subset_fingerprints[size] = _triplet_ids_fingerprint(subset)

    result.validate()
    logger.info(f"Ablation complete: {len(sizes)} sizes x {epochs} epochs x {len(result.domains)} domains")
    return result
