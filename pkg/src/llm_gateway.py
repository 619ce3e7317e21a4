"""
LLM gateway: prompt templates, free-text completion and label-restricted logit scoring.

Two backends share one contract: an HTTP client for a remote model server and a
deterministic mock used for offline runs and tests.
"""

import hashlib
import json
import logging
import math
import os
import re
import string
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import requests

from src.api_monitor import RequestMonitor, request_monitor
from src.config import LLMBackendConfig, load_llm_token
from src.errors import ArgumentError, CapabilityError, GatewayError, GenerationError, TemplateError

logger = logging.getLogger(__name__)

SEED_DOCUMENT = 'seed_document'
QUERY = 'query'
DOCUMENT = 'document'
FEW_SHOT = 'few_shot'
DATA_PLACEHOLDERS = (SEED_DOCUMENT, QUERY, DOCUMENT)

DEFAULT_EXAMPLE_FORMAT = "Passage: {example_document}\nQuery: {example_query}\n\n"


@dataclass
class DecodeParams:
    max_tokens: int = 64
    temperature: float = 0.0
    rng_seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class PromptTemplate:
    """
    Instruction with named placeholders plus ordered few-shot examples.

    The examples are rendered with example_format and substituted at the {few_shot}
    slot, or prepended to the instruction when the slot is absent.
    """

    template_id: str
    instruction: str
    few_shot_examples: List[Tuple[str, str]] = field(default_factory=list)
    example_format: str = DEFAULT_EXAMPLE_FORMAT

    def __post_init__(self):
        self.few_shot_examples = [tuple(example) for example in self.few_shot_examples]
        names = self.placeholders()
        unknown = [name for name in names if name not in DATA_PLACEHOLDERS + (FEW_SHOT,)]
        if unknown:
            raise TemplateError(f"Template '{self.template_id}' has unknown placeholder {{{unknown[0]}}}",
                                placeholder=unknown[0])
        if FEW_SHOT in names:
            first_data = next((i for i, name in enumerate(names) if name in DATA_PLACEHOLDERS), None)
            if first_data is not None and first_data < names.index(FEW_SHOT):
                raise TemplateError(f"Template '{self.template_id}': {{few_shot}} must precede the data placeholders",
                                    placeholder=FEW_SHOT)

    def placeholders(self) -> List[str]:
        """Placeholder names of the instruction in order of appearance."""
        try:
            return [name for _, name, _, _ in string.Formatter().parse(self.instruction) if name is not None]
        except ValueError as e:
            raise TemplateError(f"Template '{self.template_id}' is malformed: {e}") from e

    def required_bindings(self) -> List[str]:
        return [name for name in self.placeholders() if name != FEW_SHOT]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'template_id': self.template_id,
            'instruction': self.instruction,
            'few_shot_examples': [{'document': d, 'query': q} for d, q in self.few_shot_examples],
            'example_format': self.example_format,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PromptTemplate':
        examples = [(ex['document'], ex['query']) for ex in data.get('few_shot_examples', [])]
        return cls(
            template_id=data['template_id'],
            instruction=data['instruction'],
            few_shot_examples=examples,
            example_format=data.get('example_format', DEFAULT_EXAMPLE_FORMAT),
        )

    def save(self, filepath: str):
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
            f.write('\n')

    @classmethod
    def load(cls, filepath: str) -> 'PromptTemplate':
        try:
            with open(filepath, 'r', encoding='utf-8') as f:
                data = json.load(f)
            return cls.from_dict(data)
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise TemplateError(f"Cannot load prompt template {filepath}: {e}") from e


@dataclass(frozen=True)
class LabelLogits:
    """Logits for exactly the requested labels."""

    entries: Dict[str, float]

    def __post_init__(self):
        for label, value in self.entries.items():
            if not math.isfinite(value):
                raise GatewayError(f"Non-finite logit for label '{label}': {value}", retryable=False)

    def __getitem__(self, label: str) -> float:
        return self.entries[label]

    def labels(self) -> List[str]:
        return list(self.entries)


def render_prompt(template: PromptTemplate, bindings: Dict[str, str]) -> str:
    """
    Render a template with the given placeholder bindings.

    Args:
        template: Prompt template
        bindings: Values for the data placeholders referenced by the instruction

    Returns:
        The prompt; few-shot examples appear before the bound content
    """
    for name in template.required_bindings():
        if name not in bindings or bindings[name] is None:
            raise TemplateError(f"Missing binding for placeholder {{{name}}} in template '{template.template_id}'",
                                placeholder=name)

    try:
        few_shot_block = ''.join(
            template.example_format.format(example_document=doc, example_query=query)
            for doc, query in template.few_shot_examples
        )
    except (KeyError, IndexError, ValueError) as e:
        raise TemplateError(f"Invalid example_format in template '{template.template_id}': {e}") from e

    values = {name: bindings[name] for name in template.required_bindings()}
    if FEW_SHOT in template.placeholders():
        values[FEW_SHOT] = few_shot_block
        return template.instruction.format(**values)
    return few_shot_block + template.instruction.format(**values)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class LLMBackend:
    """Backend contract. Subclasses implement complete() and, when supported, label_logits()."""

    backend_id = 'base'
    supports_label_logits = False

    def complete(self, prompt: str, decode_params: DecodeParams) -> str:
        raise NotImplementedError

    def label_logits(self, prompt: str, labels: Sequence[str]) -> Dict[str, float]:
        raise CapabilityError(f"Backend '{self.backend_id}' cannot report label-restricted logits")


_MOCK_WORD_RE = re.compile(r"\w+", re.UNICODE)
_SENTENCE_END_RE = re.compile(r"(?<=[.!?])\s+")

# Words ignored by the mock relevance overlap; the interrogative frames only use words from this list
MOCK_STOPWORDS = frozenset({
    'a', 'an', 'the', 'of', 'in', 'on', 'and', 'or', 'to', 'for', 'with', 'by', 'at', 'from',
    'is', 'are', 'was', 'were', 'be', 'it', 'its', 'this', 'that', 'as',
    'what', 'which', 'how', 'about', 'does', 'do',
})

MOCK_QUERY_FRAMES = ("What is {}?", "What are {}?", "What about {}?", "What does {} do?")


def mock_word_set(text: str) -> set:
    return {word for word in (w.lower() for w in _MOCK_WORD_RE.findall(text)) if word not in MOCK_STOPWORDS}


def mock_jaccard(query_text: str, doc_text: str) -> float:
    """Jaccard overlap of lowercase word sets, stopwords removed; 0 when both sets are empty."""
    a, b = mock_word_set(query_text), mock_word_set(doc_text)
    union = a | b
    if not union:
        return 0.0
    return len(a & b) / len(union)


def mock_head_phrase(text: str, n_words: int = 3) -> str:
    """First n non-stopword words of the first sentence."""
    stripped = text.strip()
    first_sentence = _SENTENCE_END_RE.split(stripped, maxsplit=1)[0] if stripped else ''
    words = [w.lower() for w in _MOCK_WORD_RE.findall(first_sentence)]
    content = [w for w in words if w not in MOCK_STOPWORDS]
    return ' '.join(content[:n_words])


class MockLLMBackend(LLMBackend):
    """
    Deterministic offline backend.

    complete() reformulates the head of the passage found between the last
    passage marker and the following query marker as a question. label_logits()
    returns logit_no = 0 and logit_yes = alpha * (2 * J - 1), J being the word
    overlap between the query and the document parsed out of the prompt.
    """

    backend_id = 'mock'

    def __init__(self, alpha: float = 10.0, supports_label_logits: bool = True,
                 passage_marker: str = 'Passage:', query_marker: str = 'Query:',
                 document_marker: str = 'Document:', answer_marker: str = 'Relevant:'):
        self.alpha = alpha
        self.supports_label_logits = supports_label_logits
        self.passage_marker = passage_marker
        self.query_marker = query_marker
        self.document_marker = document_marker
        self.answer_marker = answer_marker

    def extract_passage(self, prompt: str) -> str:
        end = prompt.rfind('\n' + self.query_marker)
        if end < 0:
            return prompt
        start = prompt.rfind(self.passage_marker, 0, end)
        if start < 0:
            return prompt[:end]
        return prompt[start + len(self.passage_marker):end]

    def extract_pair(self, prompt: str) -> Tuple[str, str]:
        """(query, document) texts of a relevance prompt."""
        answer = prompt.rfind('\n' + self.answer_marker)
        if answer < 0:
            answer = len(prompt)
        doc_start = prompt.rfind('\n' + self.document_marker, 0, answer)
        if doc_start < 0:
            return '', prompt[:answer]
        query_start = prompt.rfind(self.query_marker, 0, doc_start)
        query = prompt[query_start + len(self.query_marker):doc_start] if query_start >= 0 else ''
        document = prompt[doc_start + 1 + len(self.document_marker):answer]
        return query.strip(), document.strip()

    def complete(self, prompt: str, decode_params: DecodeParams) -> str:
        head = mock_head_phrase(self.extract_passage(prompt))
        if not head:
            return ''

        frame = MOCK_QUERY_FRAMES[0]
        if decode_params.temperature > 0:
            digest = int(hashlib.sha256(prompt.encode('utf-8')).hexdigest()[:16], 16)
            rng = np.random.default_rng([abs(int(decode_params.rng_seed)), digest])
            frame = MOCK_QUERY_FRAMES[int(rng.integers(len(MOCK_QUERY_FRAMES)))]

        words = frame.format(head).split()
        return ' '.join(words[:decode_params.max_tokens])

    def label_logits(self, prompt: str, labels: Sequence[str]) -> Dict[str, float]:
        if not self.supports_label_logits:
            return super().label_logits(prompt, labels)
        query, document = self.extract_pair(prompt)
        jaccard = mock_jaccard(query, document)
        return {labels[0]: self.alpha * (2.0 * jaccard - 1.0), labels[1]: 0.0}


class HTTPLLMBackend(LLMBackend):
    """Client for a remote model server exposing /v1/complete and /v1/label_logits."""

    backend_id = 'http'
    supports_label_logits = True

    COMPLETE_ENDPOINT = '/v1/complete'
    LABEL_LOGITS_ENDPOINT = '/v1/label_logits'

    def __init__(self, config: LLMBackendConfig, token: Optional[str] = None,
                 session: Optional[requests.Session] = None, monitor: Optional[RequestMonitor] = None):
        self.config = config
        self.base_url = config.base_url.rstrip('/')
        self.monitor = monitor or request_monitor
        self.session = session or requests.Session()
        self.session.headers.update({
            'User-Agent': 'synthrank/1.0',
            'Accept': 'application/json',
        })
        token = token if token is not None else load_llm_token()
        if token:
            self.session.headers['Authorization'] = f"Bearer {token}"
        self._in_flight = threading.BoundedSemaphore(config.max_in_flight)

    def _post(self, endpoint: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        """POST with bounded retries and exponential backoff; returns the decoded JSON body."""
        url = f"{self.base_url}{endpoint}"
        attempts = self.config.max_retries + 1
        last_error = ''

        request_id = self.monitor.start_request('POST', endpoint)
        for attempt in range(attempts):
            if attempt > 0:
                self.monitor.record_retry(request_id, attempt, last_error)
                # The in-flight slot is not held while backing off
                time.sleep(self.config.backoff_seconds * (2 ** (attempt - 1)))
            try:
                with self._in_flight:
                    response = self.session.post(url, json=payload, timeout=self.config.timeout_seconds)
                if endpoint == self.LABEL_LOGITS_ENDPOINT and response.status_code in (404, 501):
                    self.monitor.update_status(request_id, 'error', f"HTTP {response.status_code}")
                    raise CapabilityError(f"Backend at {self.base_url} does not support label logits "
                                          f"(HTTP {response.status_code})")
                response.raise_for_status()
                data = response.json()
                self.monitor.update_status(request_id, 'success')
                return data
            except requests.exceptions.HTTPError as e:
                status = e.response.status_code if e.response is not None else None
                last_error = f"HTTP {status}"
                if status is not None and status < 500 and status != 429:
                    self.monitor.update_status(request_id, 'error', str(e))
                    raise GatewayError(f"{endpoint} rejected the request: {e}", retryable=False,
                                       status_code=status) from e
            except ValueError as e:
                self.monitor.update_status(request_id, 'error', str(e))
                raise GatewayError(f"{endpoint} returned a non-JSON body", retryable=False) from e
            except requests.exceptions.RequestException as e:
                last_error = str(e)

        self.monitor.update_status(request_id, 'error', last_error)
        raise GatewayError(f"{endpoint} failed after {attempts} attempts: {last_error}", retryable=True)

    def complete(self, prompt: str, decode_params: DecodeParams) -> str:
        data = self._post(self.COMPLETE_ENDPOINT, {
            'prompt': prompt,
            'max_tokens': decode_params.max_tokens,
            'temperature': decode_params.temperature,
            'seed': decode_params.rng_seed,
        })
        text = data.get('text') if isinstance(data, dict) else None
        if not isinstance(text, str):
            raise GatewayError("Completion response has no 'text' field", retryable=False)
        return text

    def label_logits(self, prompt: str, labels: Sequence[str]) -> Dict[str, float]:
        data = self._post(self.LABEL_LOGITS_ENDPOINT, {'prompt': prompt, 'labels': list(labels)})
        logits = data.get('logits') if isinstance(data, dict) else None
        if not isinstance(logits, dict):
            raise CapabilityError("Label-logits response carries no 'logits' map")
        try:
            return {label: float(logits[label]) for label in logits}
        except (TypeError, ValueError) as e:
            raise GatewayError(f"Label-logits response is malformed: {e}", retryable=False) from e


def create_llm_backend(config: LLMBackendConfig) -> LLMBackend:
    """Instantiate the backend named in the configuration."""
    if config.backend == 'mock':
        return MockLLMBackend()
    if config.backend == 'http':
        return HTTPLLMBackend(config)
    raise ArgumentError(f"Unknown LLM backend '{config.backend}'")


# ---------------------------------------------------------------------------
# Gateway operations
# ---------------------------------------------------------------------------

def complete(backend: LLMBackend, prompt: str, decode_params: Optional[DecodeParams] = None) -> str:
    """
    Free-text completion.

    Raises:
        ArgumentError: empty prompt
        GenerationError: the backend returned an empty generation
        GatewayError: transport failure after retries
    """
    if not prompt or not prompt.strip():
        raise ArgumentError("Prompt must be non-empty")
    decode_params = decode_params or DecodeParams()

    text = backend.complete(prompt, decode_params)
    if not text or not text.strip():
        raise GenerationError(f"Backend '{backend.backend_id}' returned an empty generation")
    return text


def label_logits(backend: LLMBackend, prompt: str, labels: Sequence[str] = ('Yes', 'No')) -> LabelLogits:
    """Logits of exactly the two requested labels as continuations of the prompt."""
    labels = tuple(labels)
    if len(labels) != 2 or not all(isinstance(label, str) and label for label in labels):
        raise ArgumentError(f"Exactly two non-empty labels are required, got {labels!r}")
    if labels[0] == labels[1]:
        raise ArgumentError(f"Labels must be distinct, got {labels!r}")
    if not prompt or not prompt.strip():
        raise ArgumentError("Prompt must be non-empty")
    if not getattr(backend, 'supports_label_logits', False):
        raise CapabilityError(f"Backend '{backend.backend_id}' cannot report label-restricted logits")

    entries = backend.label_logits(prompt, labels)
    if set(entries) != set(labels):
        raise CapabilityError(f"Backend returned logits for {sorted(entries)} instead of {list(labels)}")
    return LabelLogits(entries={label: float(entries[label]) for label in labels})


def load_template(path: str) -> PromptTemplate:
    if not os.path.exists(path):
        raise TemplateError(f"Prompt template not found: {path}")
    return PromptTemplate.load(path)
