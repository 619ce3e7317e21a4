"""
Corpus store: tokenizer registry, length-filtered ingestion, JSONL I/O and seed sampling.
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

from src.errors import ArgumentError, ConfigurationError, IngestionError

logger = logging.getLogger(__name__)

DEFAULT_TOKENIZER = 'whitespace'
DEFAULT_MAX_TOKENS = 512

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

Tokenizer = Callable[[str], List[str]]

_TOKENIZERS: Dict[str, Tokenizer] = {
    'whitespace': lambda text: text.split(),
    # word runs plus single punctuation marks, so non-blank text never counts 0
    'word': lambda text: _WORD_RE.findall(text),
}


def register_tokenizer(name: str, tokenize: Tokenizer):
    """Register a tokenizer under a spec name (overrides an existing entry)."""
    if not name or name.startswith('hf:'):
        raise ConfigurationError(f"Invalid tokenizer name: {name!r}")
    _TOKENIZERS[name] = tokenize
    logger.debug(f"Registered tokenizer '{name}'")


def available_tokenizers() -> List[str]:
    return sorted(_TOKENIZERS)


@lru_cache(maxsize=8)
def _hf_tokenizer(model_name: str) -> Tokenizer:
    try:
        from transformers import AutoTokenizer
    except ImportError as e:
        raise ConfigurationError(f"Tokenizer 'hf:{model_name}' needs the transformers package") from e

    tokenizer = AutoTokenizer.from_pretrained(model_name)
    logger.info(f"Loaded pretrained tokenizer {model_name}")
    return tokenizer.tokenize


def get_tokenizer(tokenizer_spec: str = DEFAULT_TOKENIZER) -> Tokenizer:
    """Resolve a tokenizer spec to a callable returning the token list."""
    if tokenizer_spec in _TOKENIZERS:
        return _TOKENIZERS[tokenizer_spec]
    if isinstance(tokenizer_spec, str) and tokenizer_spec.startswith('hf:') and len(tokenizer_spec) > 3:
        return _hf_tokenizer(tokenizer_spec[3:])
    raise ConfigurationError(
        f"Unknown tokenizer spec {tokenizer_spec!r}. Available: {', '.join(available_tokenizers())}, hf:<model>"
    )


def count_tokens(text: str, tokenizer_spec: str = DEFAULT_TOKENIZER) -> int:
    """
    Count the tokens of a text under a registered tokenizer spec.

    Args:
        text: Passage text
        tokenizer_spec: Registered spec name, or 'hf:<model>' for a pretrained tokenizer

    Returns:
        Number of tokens; 0 for empty or whitespace-only text
    """
    tokenize = get_tokenizer(tokenizer_spec)
    if not text or not text.strip():
        return 0
    return len(tokenize(text))


@dataclass(frozen=True)
class Document:
    """An indexed corpus passage."""

    doc_id: str
    text: str
    token_count: int
    source_tag: Optional[str] = None

    def to_record(self) -> Dict[str, str]:
        record = {'doc_id': self.doc_id, 'text': self.text}
        if self.source_tag is not None:
            record['source_tag'] = self.source_tag
        return record


@dataclass(frozen=True)
class Corpus:
    """Immutable, insertion-ordered collection of length-filtered documents."""

    documents: Tuple[Document, ...] = ()
    tokenizer_spec: str = DEFAULT_TOKENIZER
    max_tokens: int = DEFAULT_MAX_TOKENS
    empty_rejected: int = field(default=0, compare=False)
    _by_id: Dict[str, Document] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'documents', tuple(self.documents))
        object.__setattr__(self, '_by_id', {doc.doc_id: doc for doc in self.documents})
        if len(self._by_id) != len(self.documents):
            raise IngestionError("Corpus contains duplicate doc_id values")

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Optional[Document]:
        return self._by_id.get(doc_id)

    @property
    def doc_ids(self) -> List[str]:
        return [doc.doc_id for doc in self.documents]


Record = Union[Tuple, Dict[str, str]]


def _unpack_record(record: Record) -> Tuple[str, str, Optional[str]]:
    if isinstance(record, dict):
        return record.get('doc_id'), record.get('text'), record.get('source_tag')
    if len(record) == 2:
        return record[0], record[1], None
    return record[0], record[1], record[2]


def ingest_corpus(records: Iterable[Record], max_tokens: int = DEFAULT_MAX_TOKENS,
                  tokenizer_spec: str = DEFAULT_TOKENIZER) -> Tuple[Corpus, int]:
    """
    Build a Corpus from (doc_id, text, source_tag) records, excluding overlong passages.

    Args:
        records: Iterable of tuples or dicts with doc_id, text and optional source_tag
        max_tokens: Passages with more tokens are skipped
        tokenizer_spec: Tokenizer used for counting

    Returns:
        (corpus, skipped_count) where skipped_count counts length exclusions only.
        Empty-text records are counted separately in corpus.empty_rejected.
    """
    if max_tokens < 1:
        raise ArgumentError(f"max_tokens must be positive, got {max_tokens}")
    get_tokenizer(tokenizer_spec)

    documents: List[Document] = []
    seen_ids = set()
    skipped = 0
    empty = 0

    for record in records:
        doc_id, text, source_tag = _unpack_record(record)
        if not isinstance(doc_id, str) or not doc_id:
            raise IngestionError(f"Record without a valid doc_id: {record!r}")
        if doc_id in seen_ids:
            raise IngestionError(f"Duplicate doc_id '{doc_id}'", doc_id=doc_id)
        seen_ids.add(doc_id)

        if not isinstance(text, str) or not text.strip():
            empty += 1
            logger.warning(f"Rejected document '{doc_id}': empty text")
            continue

        token_count = count_tokens(text, tokenizer_spec)
        if token_count > max_tokens:
            skipped += 1
            logger.debug(f"Skipped document '{doc_id}': {token_count} tokens > {max_tokens}")
            continue

        documents.append(Document(doc_id=doc_id, text=text, token_count=token_count, source_tag=source_tag))

    corpus = Corpus(documents=tuple(documents), tokenizer_spec=tokenizer_spec,
                    max_tokens=max_tokens, empty_rejected=empty)
    logger.info(f"Ingested {len(corpus)} documents ({skipped} too long, {empty} empty)")
    return corpus, skipped


def read_corpus_jsonl(path: str) -> Iterator[Tuple[str, str, Optional[str]]]:
    """Stream (doc_id, text, source_tag) records from a JSON Lines corpus file."""
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestionError(f"{path}:{line_number}: invalid JSON ({e})", line_number=line_number) from e
            if not isinstance(obj, dict) or not isinstance(obj.get('doc_id'), str) or not isinstance(obj.get('text'), str):
                raise IngestionError(f"{path}:{line_number}: expected an object with string doc_id and text",
                                     line_number=line_number)
            source_tag = obj.get('source_tag')
            if source_tag is not None and not isinstance(source_tag, str):
                raise IngestionError(f"{path}:{line_number}: source_tag must be a string", line_number=line_number)
            yield obj['doc_id'], obj['text'], source_tag


def write_corpus_jsonl(corpus: Corpus, path: str):
    """Write a corpus as UTF-8 JSON Lines (LF line endings)."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for doc in corpus:
            f.write(json.dumps(doc.to_record(), ensure_ascii=False) + '\n')


def load_corpus(path: str, max_tokens: int = DEFAULT_MAX_TOKENS,
                tokenizer_spec: str = DEFAULT_TOKENIZER) -> Tuple[Corpus, int]:
    """Read and ingest a JSONL corpus file."""
    if not os.path.exists(path):
        raise ConfigurationError(f"Corpus file not found: {path}")
    return ingest_corpus(read_corpus_jsonl(path), max_tokens=max_tokens, tokenizer_spec=tokenizer_spec)


def sample_seed_documents(corpus: Corpus, n: int, rng_seed: int) -> List[Document]:
    """
    Sample n distinct documents uniformly without replacement.

    The same (corpus, n, rng_seed) always yields the same list.
    """
    if n < 1:
        raise ArgumentError(f"n must be positive, got {n}")
    if n > len(corpus):
        raise ArgumentError(f"Cannot sample {n} seed documents from a corpus of {len(corpus)}")

    rng = np.random.default_rng(rng_seed)
    indices = rng.choice(len(corpus), size=n, replace=False)
    return [corpus.documents[int(i)] for i in indices]
