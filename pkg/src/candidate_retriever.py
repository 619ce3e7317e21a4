"""
Dense first-stage retrieval: embedding backends, an immutable exact-search index and top-k candidate sets.
"""

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.corpus_store import Document
from src.errors import ArgumentError, BuildError, ConfigurationError, StateError
from src.performance_optimizer import PerformanceOptimizer
from src.query_generator import SyntheticQuery

logger = logging.getLogger(__name__)

INDEX_MAGIC = 'SYNTHRANK-IDX-1'
DEFAULT_K = 30

# Margin for the numpy preselection; final ordering always uses cosine_similarity
_PRESELECT_MARGIN = 1e-9

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


@dataclass(frozen=True)
class EmbeddingVector:
    values: Tuple[float, ...]
    dim: int

    def __post_init__(self):
        object.__setattr__(self, 'values', tuple(float(v) for v in self.values))
        if self.dim < 1 or len(self.values) != self.dim:
            raise ArgumentError(f"Embedding has {len(self.values)} values, expected dim {self.dim}")
        if not all(math.isfinite(v) for v in self.values):
            raise ArgumentError("Embedding contains non-finite values")
        if not any(self.values):
            raise ArgumentError("Embedding is the all-zero vector")

    @classmethod
    def of(cls, values: Sequence[float]) -> 'EmbeddingVector':
        values = tuple(float(v) for v in values)
        return cls(values=values, dim=len(values))


VectorLike = Union[EmbeddingVector, Sequence[float]]


def _as_vector(vector: VectorLike) -> EmbeddingVector:
    return vector if isinstance(vector, EmbeddingVector) else EmbeddingVector.of(vector)


def cosine_similarity(a: VectorLike, b: VectorLike) -> float:
    """
    Cosine similarity clamped to [-1, 1].

    Sums use math.fsum, so the result does not depend on summation order.
    """
    a, b = _as_vector(a), _as_vector(b)
    if a.dim != b.dim:
        raise ArgumentError(f"Dimension mismatch: {a.dim} vs {b.dim}")

    dot = math.fsum(x * y for x, y in zip(a.values, b.values))
    norm_a = math.sqrt(math.fsum(x * x for x in a.values))
    norm_b = math.sqrt(math.fsum(y * y for y in b.values))
    return max(-1.0, min(1.0, dot / (norm_a * norm_b)))


# ---------------------------------------------------------------------------
# Embedding backends
# ---------------------------------------------------------------------------

class MockEmbeddingBackend:
    """Hashed bag of words, L2-normalized."""

    def __init__(self, dim: int = 64, hash_seed: int = 13):
        self.dim = dim
        self.hash_seed = hash_seed
        self.backend_id = f"mock-hash-bow:{dim}:{hash_seed}"
        self._key = str(hash_seed).encode('utf-8')

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode('utf-8'), key=self._key, digest_size=8).digest()
        return int.from_bytes(digest, 'big') % self.dim

    def embed(self, text: str) -> List[float]:
        tokens = [t.lower() for t in _TOKEN_RE.findall(text)]
        if not tokens:
            raise ArgumentError(f"Text has no word tokens to embed: {text!r}")
        counts = [0.0] * self.dim
        for token in tokens:
            counts[self._bucket(token)] += 1.0
        norm = math.sqrt(math.fsum(c * c for c in counts))
        return [c / norm for c in counts]


class SentenceTransformerBackend:
    """Pretrained bi-encoder through sentence-transformers (mean pooling is the model's own)."""

    def __init__(self, model_name: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as e:
            raise ConfigurationError("The sentence_transformers embedding backend needs the "
                                     "sentence-transformers package") from e

        self.model_name = model_name
        self.model = SentenceTransformer(model_name)
        self.dim = int(self.model.get_sentence_embedding_dimension())
        self.backend_id = f"sentence-transformers:{model_name}"
        logger.info(f"Loaded embedding model {model_name} (dim={self.dim})")

    def embed(self, text: str) -> List[float]:
        vector = self.model.encode(text, convert_to_numpy=True, show_progress_bar=False)
        return [float(v) for v in np.asarray(vector, dtype=np.float64).ravel()]


def create_embedding_backend(config) -> Any:
    """Instantiate the embedding backend named in an EmbeddingBackendConfig."""
    if config.backend == 'mock':
        return MockEmbeddingBackend(dim=config.mock_dim, hash_seed=config.mock_hash_seed)
    if config.backend == 'sentence_transformers':
        return SentenceTransformerBackend(config.model_name)
    raise ConfigurationError(f"Unknown embedding backend '{config.backend}'")


def embed(backend, text: str, expected_dim: Optional[int] = None) -> EmbeddingVector:
    """
    Embed a text with a backend.

    Raises:
        ArgumentError: empty text or invalid vector
        ConfigurationError: vector dim differs from expected_dim (e.g. the index dim)
    """
    if not text or not text.strip():
        raise ArgumentError("Cannot embed empty text")
    values = backend.embed(text)
    if expected_dim is not None and len(values) != expected_dim:
        raise ConfigurationError(f"Backend '{backend.backend_id}' produced dim {len(values)}, "
                                 f"index expects {expected_dim}")
    return EmbeddingVector.of(values)


# ---------------------------------------------------------------------------
# Index and candidate sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenseIndex:
    """Immutable exact-search index; one vector per document."""

    backend_id: str
    dim: int
    doc_ids: Tuple[str, ...]
    vectors: Tuple[EmbeddingVector, ...]
    _matrix: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'doc_ids', tuple(self.doc_ids))
        object.__setattr__(self, 'vectors', tuple(self.vectors))
        if len(self.doc_ids) != len(self.vectors):
            raise ArgumentError("doc_ids and vectors differ in length")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ArgumentError("Index contains duplicate doc_ids")
        if any(v.dim != self.dim for v in self.vectors):
            raise ConfigurationError(f"Index vectors must all have dim {self.dim}")

        matrix = np.array([v.values for v in self.vectors], dtype=np.float64).reshape(len(self.vectors), self.dim)
        if len(matrix):
            matrix = matrix / np.linalg.norm(matrix, axis=1, keepdims=True)
        matrix.setflags(write=False)
        object.__setattr__(self, '_matrix', matrix)

    def __len__(self) -> int:
        return len(self.doc_ids)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'backend_id': self.backend_id,
            'dim': self.dim,
            'doc_ids': list(self.doc_ids),
            'vectors': [list(v.values) for v in self.vectors],
        }

    def save(self, path: str):
        """Write the index as the magic header line followed by one JSON document."""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(INDEX_MAGIC + '\n')
            json.dump(self.to_dict(), f, separators=(',', ':'))
            f.write('\n')

    @classmethod
    def load(cls, path: str) -> 'DenseIndex':
        with open(path, 'r', encoding='utf-8') as f:
            header = f.readline().rstrip('\n')
            if header != INDEX_MAGIC:
                raise ConfigurationError(f"{path} is not an index file (header {header!r})")
            data = json.load(f)
        dim = int(data['dim'])
        return cls(
            backend_id=data['backend_id'],
            dim=dim,
            doc_ids=tuple(data['doc_ids']),
            vectors=tuple(EmbeddingVector(values=tuple(v), dim=dim) for v in data['vectors']),
        )


@dataclass(frozen=True)
class CandidateSet:
    """Top-k retrieval result: (doc_id, similarity) sorted by similarity desc, doc_id asc."""

    query_id: str
    entries: Tuple[Tuple[str, float], ...]
    k: int

    def __post_init__(self):
        object.__setattr__(self, 'entries', tuple((str(d), float(s)) for d, s in self.entries))

    @property
    def doc_ids(self) -> List[str]:
        return [doc_id for doc_id, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def to_record(self) -> Dict[str, Any]:
        return {'query_id': self.query_id, 'k': self.k, 'entries': [[d, s] for d, s in self.entries]}

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'CandidateSet':
        return cls(query_id=record['query_id'], entries=tuple((d, s) for d, s in record['entries']),
                   k=int(record['k']))


def build_index(backend, documents: Iterable[Document], max_workers: int = 1, progress: bool = False) -> DenseIndex:
    """
    Embed every document and build the index.

    Raises:
        ArgumentError: no documents
        BuildError: a document could not be embedded (names the doc_id)
    """
    documents = list(documents)
    if not documents:
        raise ArgumentError("Cannot build an index over an empty corpus")

    optimizer = PerformanceOptimizer(progress=progress)
    outcomes = optimizer.parallel_map(lambda doc: embed(backend, doc.text, getattr(backend, 'dim', None)),
                                      documents, max_workers=max_workers, desc="Embedding documents")

    vectors = []
    for doc, outcome in zip(documents, outcomes):
        if not outcome['success']:
            logger.error(f"Embedding failed for document '{doc.doc_id}': {outcome['error']}")
            raise BuildError(f"Embedding failed for document '{doc.doc_id}': {outcome['error']}",
                             doc_id=doc.doc_id) from outcome['error']
        vectors.append(outcome['result'])

    index = DenseIndex(backend_id=backend.backend_id, dim=vectors[0].dim,
                       doc_ids=tuple(doc.doc_id for doc in documents), vectors=tuple(vectors))
    logger.info(f"Built index of {len(index)} documents (backend={index.backend_id}, dim={index.dim})")
    return index


def rank_by_similarity(index: DenseIndex, query_vector: EmbeddingVector, k: int) -> List[Tuple[str, float]]:
    """Exact top-k (doc_id, cosine) pairs, similarity desc then doc_id asc."""
    if len(index) == 0:
        raise StateError("Index is empty")
    if query_vector.dim != index.dim:
        raise ConfigurationError(f"Query vector dim {query_vector.dim} does not match index dim {index.dim}")

    if len(index) <= k:
        positions = range(len(index))
    else:
        q = np.asarray(query_vector.values, dtype=np.float64)
        approx = index._matrix @ (q / np.linalg.norm(q))
        kth = np.partition(-approx, k - 1)[k - 1]
        positions = np.flatnonzero(approx >= -kth - _PRESELECT_MARGIN).tolist()

    scored = [(index.doc_ids[i], cosine_similarity(index.vectors[i], query_vector)) for i in positions]
    scored.sort(key=lambda entry: (-entry[1], entry[0]))
    return scored[:k]


def retrieve_top_k(index: DenseIndex, backend, query: SyntheticQuery, k: int = DEFAULT_K) -> CandidateSet:
    """
    Exact top-k retrieval for one query.

    Raises:
        StateError: empty index
        ConfigurationError: backend differs from the one that built the index
    """
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise StateError("Index is empty")
    if backend.backend_id != index.backend_id:
        raise ConfigurationError(f"Index was built with '{index.backend_id}', query backend is '{backend.backend_id}'")

    query_vector = embed(backend, query.text, expected_dim=index.dim)
    return CandidateSet(query_id=query.query_id, entries=tuple(rank_by_similarity(index, query_vector, k)), k=k)


def retrieve_batch(index: DenseIndex, backend, queries: List[SyntheticQuery], k: int = DEFAULT_K,
                   max_workers: int = 1, progress: bool = False) -> List[CandidateSet]:
    """Retrieve candidates for every query, preserving query order; the first failure is raised."""
    optimizer = PerformanceOptimizer(progress=progress)
    outcomes = optimizer.parallel_map(lambda q: retrieve_top_k(index, backend, q, k), queries,
                                      max_workers=max_workers, desc="Retrieving candidates")
    for outcome in outcomes:
        if not outcome['success']:
            raise outcome['error']
    return [outcome['result'] for outcome in outcomes]


def write_candidates_jsonl(candidate_sets: Iterable[CandidateSet], path: str):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for candidates in candidate_sets:
            f.write(json.dumps(candidates.to_record()) + '\n')


def read_candidates_jsonl(path: str) -> List[CandidateSet]:
    with open(path, 'r', encoding='utf-8') as f:
        return [CandidateSet.from_record(json.loads(line)) for line in f if line.strip()]
