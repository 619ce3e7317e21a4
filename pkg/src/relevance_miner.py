"""
LLM-as-judge relevance scoring and positive / hard-negative mining.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from src.candidate_retriever import CandidateSet
from src.corpus_store import Corpus, Document
from src.errors import ArgumentError, StateError
from src.llm_gateway import DOCUMENT, QUERY, LLMBackend, PromptTemplate, label_logits, render_prompt
from src.performance_optimizer import PerformanceOptimizer
from src.query_generator import SyntheticQuery

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
DEFAULT_MIN_NEGATIVES = 4
DEFAULT_LABELS = ('Yes', 'No')

REJECT_NO_CANDIDATES = 'no_candidates'
REJECT_WEAK_POSITIVE = 'weak_positive'
REJECT_NO_NEGATIVES = 'no_negatives'
REJECT_TOO_FEW_NEGATIVES = 'too_few_negatives'


def relevance_probability(z_yes: float, z_no: float) -> float:
    """Two-way softmax probability of the positive label, max-shifted."""
    shift = max(z_yes, z_no)
    e_yes = math.exp(z_yes - shift)
    e_no = math.exp(z_no - shift)
    return e_yes / (e_yes + e_no)


@dataclass(frozen=True)
class RelevanceJudgment:
    query_id: str
    doc_id: str
    p_yes: float

    def __post_init__(self):
        if not 0.0 <= self.p_yes <= 1.0:
            raise ArgumentError(f"p_yes must lie in [0, 1], got {self.p_yes}")

    def to_record(self) -> Dict[str, Any]:
        return {'query_id': self.query_id, 'doc_id': self.doc_id, 'p_yes': self.p_yes}


@dataclass(frozen=True)
class TrainingTriplet:
    """(query, positive, hard negatives) with the full scored candidate list."""

    query: SyntheticQuery
    positive_doc_id: str
    negative_doc_ids: Tuple[str, ...]
    judgments: Tuple[RelevanceJudgment, ...]
    threshold_used: float

    @property
    def scores(self) -> Dict[str, float]:
        return {j.doc_id: j.p_yes for j in self.judgments}

    def to_record(self) -> Dict[str, Any]:
        return {
            'query_id': self.query.query_id,
            'query_text': self.query.text,
            'positive_doc_id': self.positive_doc_id,
            'negative_doc_ids': list(self.negative_doc_ids),
            'scores': self.scores,
            'threshold': self.threshold_used,
            'seed_doc_id': self.query.seed_doc_id,
            'created_with': self.query.created_with,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'TrainingTriplet':
        query = SyntheticQuery(query_id=record['query_id'], text=record['query_text'],
                               seed_doc_id=record['seed_doc_id'], created_with=record.get('created_with', {}))
        judgments = tuple(RelevanceJudgment(query.query_id, doc_id, float(p)) for doc_id, p in record['scores'].items())
        return cls(query=query, positive_doc_id=record['positive_doc_id'],
                   negative_doc_ids=tuple(record['negative_doc_ids']), judgments=judgments,
                   threshold_used=float(record['threshold']))


@dataclass(frozen=True)
class TripletRejection:
    query_id: str
    reason: str
    detail: Dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def to_record(self) -> Dict[str, Any]:
        return {'query_id': self.query_id, 'reason': self.reason, **self.detail}


def relevance_score(backend: LLMBackend, template: PromptTemplate, query: SyntheticQuery, doc: Document,
                    labels: Sequence[str] = DEFAULT_LABELS) -> float:
    """Probability that doc is relevant to query, from the judge's label logits."""
    prompt = render_prompt(template, {QUERY: query.text, DOCUMENT: doc.text})
    logits = label_logits(backend, prompt, labels)
    return relevance_probability(logits[labels[0]], logits[labels[1]])


def score_candidates(backend: LLMBackend, template: PromptTemplate, query: SyntheticQuery,
                     candidates: CandidateSet, corpus: Corpus, labels: Sequence[str] = DEFAULT_LABELS,
                     max_workers: int = 1) -> List[RelevanceJudgment]:
    """
    Judge every candidate of a query, preserving candidate order.

    Raises:
        StateError: a candidate doc_id is not in the corpus
        CapabilityError / GatewayError: propagated from the backend
    """
    documents = []
    for doc_id in candidates.doc_ids:
        doc = corpus.get(doc_id)
        if doc is None:
            raise StateError(f"Candidate '{doc_id}' of query '{query.query_id}' is not in the corpus")
        documents.append(doc)

    if not documents:
        return []

    optimizer = PerformanceOptimizer(progress=False)
    outcomes = optimizer.parallel_map(lambda doc: relevance_score(backend, template, query, doc, labels),
                                      documents, max_workers=max_workers, desc="Scoring candidates")

    judgments = []
    for doc, outcome in zip(documents, outcomes):
        if not outcome['success']:
            raise outcome['error']
        judgments.append(RelevanceJudgment(query_id=query.query_id, doc_id=doc.doc_id, p_yes=outcome['result']))
    return judgments


def mine_positive(judgments: Sequence[RelevanceJudgment], seed_doc_id: Optional[str] = None) -> str:
    """
    Highest-scored candidate. Ties prefer the seed document, then the smallest doc_id.
    """
    if not judgments:
        raise ArgumentError("Cannot mine a positive from an empty judgment list")

    best = max(j.p_yes for j in judgments)
    tied = [j.doc_id for j in judgments if j.p_yes == best]
    if seed_doc_id is not None and seed_doc_id in tied:
        return seed_doc_id
    return min(tied)


def mine_negatives(judgments: Sequence[RelevanceJudgment], t: float = DEFAULT_THRESHOLD) -> List[str]:
    """Candidates scored below t, hardest (highest p_yes) first, ties by doc_id."""
    if not 0.0 < t < 1.0:
        raise ArgumentError(f"Threshold must lie in (0, 1), got {t}")
    below = [j for j in judgments if j.p_yes < t]
    below.sort(key=lambda j: (-j.p_yes, j.doc_id))
    return [j.doc_id for j in below]


def assemble_triplet(query: SyntheticQuery, judgments: Sequence[RelevanceJudgment], t: float = DEFAULT_THRESHOLD,
                     min_negatives: int = DEFAULT_MIN_NEGATIVES,
                     min_positive_score: Optional[float] = None) -> Union[TrainingTriplet, TripletRejection]:
    """
    Combine positive and negative mining into a triplet, or a rejection record.

    Candidates scored at or above t that are not the positive take no part in the triplet.
    min_positive_score defaults to t.
    """
    if not 0.0 < t < 1.0:
        raise ArgumentError(f"Threshold must lie in (0, 1), got {t}")
    if min_positive_score is None:
        min_positive_score = t

    if not judgments:
        return TripletRejection(query.query_id, REJECT_NO_CANDIDATES)

    positive = mine_positive(judgments, query.seed_doc_id)
    positive_score = next(j.p_yes for j in judgments if j.doc_id == positive)
    if positive_score < min_positive_score:
        return TripletRejection(query.query_id, REJECT_WEAK_POSITIVE,
                                {'best_score': positive_score, 'min_positive_score': min_positive_score})

    negatives = [doc_id for doc_id in mine_negatives(judgments, t) if doc_id != positive]
    if not negatives:
        return TripletRejection(query.query_id, REJECT_NO_NEGATIVES, {'n_negatives': 0})
    if len(negatives) < min_negatives:
        return TripletRejection(query.query_id, REJECT_TOO_FEW_NEGATIVES,
                                {'n_negatives': len(negatives), 'min_negatives': min_negatives})

    return TrainingTriplet(query=query, positive_doc_id=positive, negative_doc_ids=tuple(negatives),
                           judgments=tuple(judgments), threshold_used=t)


def write_triplets_jsonl(triplets: Iterable[TrainingTriplet], path: str):
    _write_jsonl((triplet.to_record() for triplet in triplets), path)


def read_triplets_jsonl(path: str) -> List[TrainingTriplet]:
    return [TrainingTriplet.from_record(record) for record in _read_jsonl(path)]


def write_rejections_jsonl(rejections: Iterable[TripletRejection], path: str):
    _write_jsonl((rejection.to_record() for rejection in rejections), path)


def write_judgments_jsonl(judgments_by_query: Dict[str, List[RelevanceJudgment]], path: str):
    _write_jsonl(({'query_id': query_id, 'judgments': [[j.doc_id, j.p_yes] for j in judgments]}
                  for query_id, judgments in judgments_by_query.items()), path)


def read_judgments_jsonl(path: str) -> Dict[str, List[RelevanceJudgment]]:
    return {
        record['query_id']: [RelevanceJudgment(record['query_id'], d, float(p)) for d, p in record['judgments']]
        for record in _read_jsonl(path)
    }


def _write_jsonl(records: Iterable[Dict[str, Any]], path: str):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + '\n')


def _read_jsonl(path: str) -> List[Dict[str, Any]]:
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]
