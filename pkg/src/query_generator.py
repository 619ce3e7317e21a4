"""
Synthetic query generation: one few-shot prompted query per seed document.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Union

from src.corpus_store import Document
from src.errors import ArgumentError, BatchError, GenerationError, SynthRankError, TemplateError
from src.llm_gateway import SEED_DOCUMENT, DecodeParams, LLMBackend, PromptTemplate, complete, render_prompt
from src.performance_optimizer import PerformanceOptimizer

logger = logging.getLogger(__name__)

DEFAULT_MAX_QUERY_TOKENS = 64


@dataclass(frozen=True)
class SyntheticQuery:
    query_id: str
    text: str
    seed_doc_id: str
    created_with: Dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def to_record(self) -> Dict[str, Any]:
        return {
            'query_id': self.query_id,
            'text': self.text,
            'seed_doc_id': self.seed_doc_id,
            'created_with': self.created_with,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> 'SyntheticQuery':
        return cls(
            query_id=record['query_id'],
            text=record['text'],
            seed_doc_id=record['seed_doc_id'],
            created_with=record.get('created_with', {}),
        )


@dataclass
class GenerationFailure:
    seed_doc_id: str
    error_type: str
    message: str

    def to_record(self) -> Dict[str, str]:
        return {'seed_doc_id': self.seed_doc_id, 'error_type': self.error_type, 'message': self.message}


@dataclass
class QueryBatchResult:
    """Batch output: kept queries in seed order, per-seed failures and dropped duplicates."""

    queries: List[SyntheticQuery] = field(default_factory=list)
    failures: List[GenerationFailure] = field(default_factory=list)
    duplicates: List[Dict[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.queries)


def normalize_whitespace(text: str) -> str:
    return ' '.join(text.split())


def default_query_id(seed: Document) -> str:
    return f"q-{seed.doc_id}"


def _clean_generation(raw: str) -> str:
    # The first non-blank line is the query; models sometimes continue with another example
    for line in raw.splitlines():
        if line.strip():
            return normalize_whitespace(line)
    return ''


def generate_query(backend: LLMBackend, template: PromptTemplate, seed: Document,
                   decode_params: Optional[DecodeParams] = None, query_id: Optional[str] = None,
                   max_query_tokens: int = DEFAULT_MAX_QUERY_TOKENS,
                   dry_run: bool = False) -> Union[SyntheticQuery, str]:
    """
    Generate one synthetic query for a seed document.

    Args:
        backend: LLM backend
        template: Generation template with a {seed_document} placeholder
        seed: Seed document
        decode_params: Decoding parameters (defaults: 64 tokens, greedy, seed 0)
        query_id: Identifier of the query; derived from the seed doc_id when omitted
        max_query_tokens: Longer generations are rejected
        dry_run: Return the rendered prompt without calling the backend

    Returns:
        SyntheticQuery, or the rendered prompt string when dry_run is set
    """
    if seed is None or not seed.text or not seed.text.strip():
        raise ArgumentError(f"Seed document {getattr(seed, 'doc_id', None)!r} has empty text")
    decode_params = decode_params or DecodeParams()

    prompt = render_prompt(template, {SEED_DOCUMENT: seed.text})
    if dry_run:
        return prompt

    text = _clean_generation(complete(backend, prompt, decode_params))
    if not text:
        raise GenerationError(f"Empty generation for seed '{seed.doc_id}'")
    n_tokens = len(text.split())
    if n_tokens > max_query_tokens:
        raise GenerationError(f"Generation for seed '{seed.doc_id}' has {n_tokens} tokens > {max_query_tokens}")

    return SyntheticQuery(
        query_id=query_id or default_query_id(seed),
        text=text,
        seed_doc_id=seed.doc_id,
        created_with={'template_id': template.template_id, 'decode_params': decode_params.to_dict()},
    )


def generate_query_batch(backend: LLMBackend, template: PromptTemplate, seeds: List[Document],
                         decode_params: Optional[DecodeParams] = None, dedupe: bool = True,
                         max_query_tokens: int = DEFAULT_MAX_QUERY_TOKENS, max_workers: int = 1,
                         progress: bool = False) -> QueryBatchResult:
    """
    Generate one query per seed, in seed order.

    Per-seed failures are collected in the result. With dedupe on, a query whose
    whitespace-normalized text equals an earlier one is dropped.

    Raises:
        BatchError: every seed failed
    """
    if not seeds:
        raise ArgumentError("At least one seed document is required")
    extra = [name for name in template.required_bindings() if name != SEED_DOCUMENT]
    if extra:
        raise TemplateError(f"Generation template '{template.template_id}' needs a binding for {{{extra[0]}}}",
                            placeholder=extra[0])

    optimizer = PerformanceOptimizer(progress=progress)
    outcomes = optimizer.parallel_map(
        lambda seed: generate_query(backend, template, seed, decode_params, max_query_tokens=max_query_tokens),
        seeds,
        max_workers=max_workers,
        desc="Generating queries",
    )

    result = QueryBatchResult()
    seen_texts: Dict[str, str] = {}
    for seed, outcome in zip(seeds, outcomes):
        if not outcome['success']:
            error = outcome['error']
            if not isinstance(error, SynthRankError):
                raise error
            logger.warning(f"Query generation failed for seed '{seed.doc_id}': {error}")
            result.failures.append(GenerationFailure(seed.doc_id, type(error).__name__, str(error)))
            continue

        query = outcome['result']
        if dedupe and query.text in seen_texts:
            logger.debug(f"Dropped duplicate query for seed '{seed.doc_id}': {query.text!r}")
            result.duplicates.append({'query_id': query.query_id, 'seed_doc_id': seed.doc_id,
                                      'duplicate_of': seen_texts[query.text]})
            continue
        seen_texts.setdefault(query.text, query.query_id)
        result.queries.append(query)

    if not result.queries and not result.duplicates:
        logger.error(f"All {len(seeds)} seeds failed query generation")
        raise BatchError(f"All {len(seeds)} seeds failed query generation", failures=result.failures)

    logger.info(f"Generated {len(result.queries)} queries from {len(seeds)} seeds "
                f"({len(result.failures)} failed, {len(result.duplicates)} duplicates dropped)")
    return result


def write_queries_jsonl(queries: Iterable[SyntheticQuery], path: str):
    _write_jsonl((q.to_record() for q in queries), path)


def read_queries_jsonl(path: str) -> List[SyntheticQuery]:
    with open(path, 'r', encoding='utf-8') as f:
        return [SyntheticQuery.from_record(json.loads(line)) for line in f if line.strip()]


def write_failures_jsonl(failures: Iterable[GenerationFailure], path: str):
    _write_jsonl((failure.to_record() for failure in failures), path)


def _write_jsonl(records: Iterable[Dict[str, Any]], path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + '\n')
