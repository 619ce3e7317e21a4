"""
Ranking metrics at a cutoff and cross-encoder evaluation over labeled query pools.
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from src.corpus_store import Corpus, Document
from src.cross_encoder_trainer import CrossEncoderModel, score_pair
from src.errors import ArgumentError, ConfigurationError
from src.performance_optimizer import PerformanceOptimizer
from src.relevance_miner import TrainingTriplet

logger = logging.getLogger(__name__)

METRIC_NAMES = ('precision', 'map', 'mrr', 'ndcg')
IN_DOMAIN = 'in_domain'
OUT_DOMAIN = 'out_domain'
LABEL_SOURCES = ('native', 'rescored', 'mined')


@dataclass(frozen=True)
class RankedList:
    """Doc ids in model order plus binary labels for every pool document."""

    query_id: str
    ranked_doc_ids: Tuple[str, ...]
    relevance: Dict[str, int] = field(hash=False)

    def __post_init__(self):
        object.__setattr__(self, 'ranked_doc_ids', tuple(self.ranked_doc_ids))
        if len(set(self.ranked_doc_ids)) != len(self.ranked_doc_ids):
            raise ArgumentError(f"Ranked list of '{self.query_id}' contains duplicates")
        missing = [d for d in self.ranked_doc_ids if d not in self.relevance]
        if missing:
            raise ArgumentError(f"Ranked doc '{missing[0]}' of '{self.query_id}' has no relevance label")

    @property
    def n_relevant(self) -> int:
        return sum(1 for label in self.relevance.values() if label)

    def gains(self, k: int) -> List[int]:
        return [1 if self.relevance[d] else 0 for d in self.ranked_doc_ids[:k]]


def _check_k(k: int):
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")


def precision_at_k(ranked: RankedList, k: int) -> float:
    _check_k(k)
    return sum(ranked.gains(k)) / k


def average_precision_at_k(ranked: RankedList, k: int) -> float:
    """Sum of precision at each relevant rank within k, over min(R, k)."""
    _check_k(k)
    n_relevant = ranked.n_relevant
    if n_relevant == 0:
        return 0.0
    hits = 0
    precisions = []
    for rank, gain in enumerate(ranked.gains(k), start=1):
        if gain:
            hits += 1
            precisions.append(hits / rank)
    return math.fsum(precisions) / min(n_relevant, k)


def reciprocal_rank_at_k(ranked: RankedList, k: int) -> float:
    _check_k(k)
    for rank, gain in enumerate(ranked.gains(k), start=1):
        if gain:
            return 1.0 / rank
    return 0.0


def ndcg_at_k(ranked: RankedList, k: int) -> float:
    """Binary-gain nDCG with a log2(rank + 1) discount; 0 when the pool has no relevant document."""
    _check_k(k)
    ideal_hits = min(ranked.n_relevant, k)
    if ideal_hits == 0:
        return 0.0
    dcg = math.fsum(gain / math.log2(rank + 1) for rank, gain in enumerate(ranked.gains(k), start=1))
    idcg = math.fsum(1.0 / math.log2(rank + 1) for rank in range(1, ideal_hits + 1))
    return dcg / idcg


def compute_metrics(ranked: RankedList, k: int) -> Dict[str, float]:
    return {
        'precision': precision_at_k(ranked, k),
        'map': average_precision_at_k(ranked, k),
        'mrr': reciprocal_rank_at_k(ranked, k),
        'ndcg': ndcg_at_k(ranked, k),
    }


# ---------------------------------------------------------------------------
# Evaluation sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolDocument:
    doc_id: str
    text: str
    label: int
    hardness: float = 0.0


@dataclass(frozen=True)
class EvalQuery:
    query_id: str
    query_text: str
    pool: Tuple[PoolDocument, ...]

    def to_record(self) -> Dict[str, Any]:
        return {
            'query_id': self.query_id,
            'query_text': self.query_text,
            'pool': [{'doc_id': d.doc_id, 'text': d.text, 'label': d.label, 'hardness': d.hardness} for d in self.pool],
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'EvalQuery':
        pool = tuple(PoolDocument(d['doc_id'], d['text'], int(d['label']), float(d.get('hardness', 0.0)))
                     for d in record['pool'])
        return cls(record['query_id'], record['query_text'], pool)


def truncate_pool(pool: Sequence[PoolDocument], max_pool: int) -> List[PoolDocument]:
    """Keep at most max_pool documents: positives first, then the hardest negatives."""
    if len(pool) <= max_pool:
        return list(pool)
    order = lambda d: (-d.hardness, d.doc_id)
    positives = sorted((d for d in pool if d.label), key=order)
    negatives = sorted((d for d in pool if not d.label), key=order)
    return (positives + negatives)[:max_pool]


def eval_set_fingerprint(eval_set: Sequence[EvalQuery]) -> str:
    """SHA-256 over queries, pool doc ids and labels."""
    canonical = json.dumps([[q.query_id, q.query_text, [[d.doc_id, d.label] for d in q.pool]] for q in eval_set],
                           separators=(',', ':'), ensure_ascii=False)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def relevance_regime(eval_set: Sequence[EvalQuery]) -> str:
    """'single' when no query has more than one relevant document, else 'multi'."""
    return 'multi' if any(sum(d.label for d in q.pool) > 1 for q in eval_set) else 'single'


def build_in_domain_eval_set(triplets: Sequence[TrainingTriplet], corpus: Corpus, t: float) -> List[EvalQuery]:
    """Every scored candidate of each held-out query; relevant iff p_yes >= t."""
    eval_set = []
    for triplet in triplets:
        pool = []
        for judgment in triplet.judgments:
            doc = corpus.get(judgment.doc_id)
            if doc is None:
                raise ArgumentError(f"Judged doc '{judgment.doc_id}' is not in the corpus")
            pool.append(PoolDocument(doc.doc_id, doc.text, int(judgment.p_yes >= t), judgment.p_yes))
        eval_set.append(EvalQuery(triplet.query.query_id, triplet.query.text, tuple(pool)))
    return eval_set


def load_eval_set_jsonl(path: str) -> Tuple[List[EvalQuery], str]:
    """
    Load a labeled eval set.

    Each line: {"query_id", "query_text", "pool": [{"doc_id", "text", "label", "hardness"?}],
    "label_source"?}. Returns (eval_set, label_source).
    """
    if not os.path.exists(path):
        raise ConfigurationError(f"Eval set not found: {path}")
    eval_set = []
    sources = set()
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            sources.add(record.get('label_source', 'native'))
            eval_set.append(EvalQuery.from_record(record))
    if len(sources) > 1:
        raise ConfigurationError(f"Eval set {path} mixes label sources {sorted(sources)}")
    label_source = sources.pop() if sources else 'native'
    if label_source not in LABEL_SOURCES:
        raise ConfigurationError(f"Unknown label_source '{label_source}' in {path}")
    return eval_set, label_source


def write_eval_set_jsonl(eval_set: Iterable[EvalQuery], path: str, label_source: str = 'native'):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for query in eval_set:
            f.write(json.dumps(dict(query.to_record(), label_source=label_source), ensure_ascii=False) + '\n')


def rescore_eval_set(eval_set: Sequence[EvalQuery], backend, template, t: float,
                     labels: Sequence[str] = ('Yes', 'No')) -> List[EvalQuery]:
    """Relabel every pool document with the LLM judge (relevant iff p_yes >= t)."""
    from src.query_generator import SyntheticQuery
    from src.relevance_miner import relevance_score

    rescored = []
    for query in eval_set:
        synthetic = SyntheticQuery(query.query_id, query.query_text, seed_doc_id='')
        pool = []
        for d in query.pool:
            p_yes = relevance_score(backend, template, synthetic,
                                    Document(d.doc_id, d.text, len(d.text.split())), labels)
            pool.append(PoolDocument(d.doc_id, d.text, int(p_yes >= t), p_yes))
        rescored.append(EvalQuery(query.query_id, query.query_text, tuple(pool)))
    return rescored


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    k: int
    dataset_tag: str
    per_query: List[Dict[str, Any]]
    aggregate: Dict[str, float]
    relevance_regime: str = 'single'
    label_source: Optional[str] = None
    fingerprint: Optional[str] = None

    @property
    def n_queries(self) -> int:
        return len(self.per_query)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'k': self.k,
            'dataset_tag': self.dataset_tag,
            'n_queries': self.n_queries,
            'per_query': self.per_query,
            'aggregate': self.aggregate,
            'relevance_regime': self.relevance_regime,
            'label_source': self.label_source,
            'fingerprint': self.fingerprint,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MetricReport':
        return cls(k=data['k'], dataset_tag=data['dataset_tag'], per_query=data['per_query'],
                   aggregate=data['aggregate'], relevance_regime=data.get('relevance_regime', 'single'),
                   label_source=data.get('label_source'), fingerprint=data.get('fingerprint'))

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write('\n')


def rank_pool(model: CrossEncoderModel, query: EvalQuery, max_pool: int) -> RankedList:
    """Score the (truncated) pool and order it by score desc, doc_id asc."""
    pool = truncate_pool(query.pool, max_pool)
    scored = [(d.doc_id, score_pair(model, query.query_text, d.text)) for d in pool]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return RankedList(query.query_id, tuple(d for d, _ in scored), {d.doc_id: d.label for d in pool})


def evaluate_model(model: CrossEncoderModel, eval_set: Sequence[EvalQuery], k: int = 10, max_pool: int = 30,
                   dataset_tag: str = IN_DOMAIN, label_source: Optional[str] = None,
                   max_workers: int = 1) -> MetricReport:
    """
    Precision / MAP / MRR / nDCG at k, macro-averaged over the eval set.

    Raises:
        ArgumentError: empty eval set, empty pool or non-binary label
    """
    _check_k(k)
    if not eval_set:
        raise ArgumentError("Eval set is empty")
    if max_pool < 1:
        raise ArgumentError(f"max_pool must be >= 1, got {max_pool}")
    for query in eval_set:
        if not query.pool:
            raise ArgumentError(f"Eval query '{query.query_id}' has an empty pool")
        if any(d.label not in (0, 1) for d in query.pool):
            raise ArgumentError(f"Eval query '{query.query_id}' has non-binary labels")

    optimizer = PerformanceOptimizer(progress=False)
    outcomes = optimizer.parallel_map(lambda q: rank_pool(model, q, max_pool), list(eval_set),
                                      max_workers=max_workers, desc=f"Evaluating {dataset_tag}")

    per_query = []
    for query, outcome in zip(eval_set, outcomes):
        if not outcome['success']:
            raise outcome['error']
        per_query.append(dict(query_id=query.query_id, **compute_metrics(outcome['result'], k)))

    aggregate = {name: math.fsum(row[name] for row in per_query) / len(per_query) for name in METRIC_NAMES}
    report = MetricReport(k=k, dataset_tag=dataset_tag, per_query=per_query, aggregate=aggregate,
                          relevance_regime=relevance_regime(eval_set), label_source=label_source,
                          fingerprint=eval_set_fingerprint(eval_set))
    logger.info(f"Evaluated {report.n_queries} {dataset_tag} queries @ {k}: "
                + ', '.join(f"{name}={value:.4f}" for name, value in aggregate.items()))
    return report
