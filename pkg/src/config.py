import json
import hashlib
import os
from dataclasses import dataclass, asdict, field, fields, is_dataclass
from typing import Any, Dict, List, Optional

from src.errors import ConfigurationError

# Relative paths that do not exist from the working directory are looked up here
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

TOKEN_ENV_VAR = 'SYNTHRANK_LLM_TOKEN'


@dataclass
class LLMBackendConfig:
    """Remote LLM used for query generation and relevance classification."""

    backend: str = 'http'  # http, mock
    base_url: str = 'http://localhost:8000'
    timeout_seconds: float = 60.0
    max_retries: int = 3
    backoff_seconds: float = 1.0
    max_in_flight: int = 4
    labels: List[str] = field(default_factory=lambda: ['Yes', 'No'])

    # Decode parameters for query generation
    max_tokens: int = 64
    temperature: float = 0.7
    rng_seed: int = 0


@dataclass
class EmbeddingBackendConfig:
    """Bi-encoder used for first-stage candidate retrieval."""

    backend: str = 'sentence_transformers'  # sentence_transformers, mock
    model_name: str = 'sentence-transformers/all-MiniLM-L6-v2'
    mock_dim: int = 64
    mock_hash_seed: int = 13
    max_workers: int = 4


@dataclass
class EncoderConfig:
    """Sequence encoder under the cross-encoder score head."""

    backend: str = 'toy'  # toy, transformer
    model_name: str = 'BAAI/bge-reranker-base'
    vocab_size: int = 4096
    d_model: int = 32
    max_length: int = 512
    rng_seed: int = 0


@dataclass
class PipelineParams:
    tokenizer: str = 'whitespace'
    max_tokens: int = 512
    n_seeds: int = 1000
    k_candidates: int = 30
    threshold: float = 0.5
    m: int = 4
    min_negatives: int = 4
    min_positive_score: Optional[float] = None  # None means "same as threshold"
    max_query_tokens: int = 64
    dedupe: bool = True
    search_pool: str = 'corpus'  # corpus, seeds
    rng_seed: int = 0

    def resolved_min_positive_score(self) -> float:
        return self.threshold if self.min_positive_score is None else self.min_positive_score


@dataclass
class TrainingParams:
    epochs: int = 10
    batch_size: int = 2
    grad_accum_steps: int = 2
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0


@dataclass
class EvalParams:
    k: int = 10
    max_pool: int = 30
    test_size: int = 500
    out_domain_path: Optional[str] = None
    rescore_out_domain: bool = False  # relabel out-domain pools with the LLM judge
    rng_seed: int = 0


@dataclass
class RunConfig:
    """Configuration of one pipeline run."""

    corpus_path: str = 'data/corpus.jsonl'
    output_dir: str = 'runs/default'
    generation_template_path: str = 'prompts/query_generation.json'
    relevance_template_path: str = 'prompts/relevance_classification.json'

    llm: LLMBackendConfig = field(default_factory=LLMBackendConfig)
    embedding: EmbeddingBackendConfig = field(default_factory=EmbeddingBackendConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    training: TrainingParams = field(default_factory=TrainingParams)
    evaluation: EvalParams = field(default_factory=EvalParams)

    ablation_sizes: List[int] = field(default_factory=lambda: list(range(100, 1001, 100)))

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> 'RunConfig':
        """Build a config from a (possibly partial) nested dictionary."""
        return _build_dataclass(cls, config_dict, path='')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save_config(self, filepath: str):
        """Save configuration to a JSON file."""
        directory = os.path.dirname(filepath)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write('\n')

    @classmethod
    def load_config(cls, filepath: str = 'config.json') -> 'RunConfig':
        """Load configuration from a JSON file; a missing file yields the defaults."""
        if not os.path.exists(filepath):
            return cls()

        try:
            with open(filepath, 'r', encoding='utf-8') as f:
                config_dict = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {filepath} is not valid JSON: {e}") from e

        return cls.from_dict(config_dict)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON form of the resolved configuration."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def apply_seed(self, seed: int):
        """Override every rng seed of the run with a single value."""
        self.llm.rng_seed = seed
        self.encoder.rng_seed = seed
        self.pipeline.rng_seed = seed
        self.training.rng_seed = seed
        self.evaluation.rng_seed = seed

    def use_mock_backends(self):
        """Swap the remote LLM and the embedding model for their deterministic mocks."""
        self.llm.backend = 'mock'
        self.embedding.backend = 'mock'

    def resolve_path(self, path: Optional[str]) -> Optional[str]:
        return resolve_path(path)

    def validate(self, check_paths: bool = True):
        """Raise ConfigurationError on the first out-of-range value or missing path."""
        p, tr, ev = self.pipeline, self.training, self.evaluation

        _require(self.llm.backend in ('http', 'mock'), f"llm.backend must be 'http' or 'mock', got {self.llm.backend!r}")
        _require(self.embedding.backend in ('sentence_transformers', 'mock'),
                 f"embedding.backend must be 'sentence_transformers' or 'mock', got {self.embedding.backend!r}")
        _require(self.encoder.backend in ('toy', 'transformer'),
                 f"encoder.backend must be 'toy' or 'transformer', got {self.encoder.backend!r}")
        _require(len(self.llm.labels) == 2 and len(set(self.llm.labels)) == 2 and all(self.llm.labels),
                 "llm.labels must be two distinct non-empty strings")
        _require(self.llm.timeout_seconds > 0, "llm.timeout_seconds must be positive")
        _require(self.llm.max_retries >= 0, "llm.max_retries must be >= 0")
        _require(self.llm.max_in_flight >= 1, "llm.max_in_flight must be >= 1")
        _require(self.llm.max_tokens >= 1, "llm.max_tokens must be >= 1")
        _require(self.llm.temperature >= 0, "llm.temperature must be >= 0")
        _require(self.embedding.mock_dim >= 1, "embedding.mock_dim must be >= 1")
        _require(self.encoder.d_model >= 1 and self.encoder.vocab_size >= 8, "encoder dimensions too small")
        _require(self.encoder.max_length >= 4, "encoder.max_length must be >= 4")

        _require(p.max_tokens >= 1, "pipeline.max_tokens must be positive")
        _require(p.n_seeds >= 1, "pipeline.n_seeds must be positive")
        _require(p.k_candidates >= 1, "pipeline.k_candidates must be >= 1")
        _require(0.0 < p.threshold < 1.0, "pipeline.threshold must lie in (0, 1)")
        _require(p.m >= 1, "pipeline.m must be >= 1")
        _require(p.min_negatives >= p.m, "pipeline.min_negatives must be >= pipeline.m")
        _require(0.0 <= p.resolved_min_positive_score() <= 1.0, "pipeline.min_positive_score must lie in [0, 1]")
        _require(p.max_query_tokens >= 1, "pipeline.max_query_tokens must be positive")
        _require(p.search_pool in ('corpus', 'seeds'), "pipeline.search_pool must be 'corpus' or 'seeds'")

        _require(tr.epochs >= 0, "training.epochs must be >= 0")
        _require(tr.batch_size >= 1, "training.batch_size must be >= 1")
        _require(tr.grad_accum_steps >= 1, "training.grad_accum_steps must be >= 1")
        _require(tr.learning_rate >= 0, "training.learning_rate must be >= 0")
        _require(0 <= tr.beta1 < 1 and 0 <= tr.beta2 < 1 and tr.eps > 0, "training Adam constants out of range")

        _require(ev.k >= 1, "evaluation.k must be >= 1")
        _require(ev.max_pool >= 1, "evaluation.max_pool must be >= 1")
        _require(ev.test_size >= 0, "evaluation.test_size must be >= 0")

        sizes = self.ablation_sizes
        _require(all(s >= 1 for s in sizes), "ablation_sizes must be positive")
        _require(all(a < b for a, b in zip(sizes, sizes[1:])), "ablation_sizes must be strictly increasing")

        if check_paths:
            for name in ('corpus_path', 'generation_template_path', 'relevance_template_path'):
                value = getattr(self, name)
                if resolve_path(value) is None or not os.path.exists(resolve_path(value)):
                    raise ConfigurationError(f"{name} does not exist: {value}")
            if ev.out_domain_path and not os.path.exists(resolve_path(ev.out_domain_path)):
                raise ConfigurationError(f"evaluation.out_domain_path does not exist: {ev.out_domain_path}")


def resolve_path(path: Optional[str]) -> Optional[str]:
    """Return path as given when it exists, else the project-root-relative path if that exists."""
    if not path:
        return path
    if os.path.isabs(path) or os.path.exists(path):
        return path
    candidate = os.path.join(PROJECT_ROOT, path)
    return candidate if os.path.exists(candidate) else path


def load_llm_token() -> Optional[str]:
    """Bearer token for the LLM gateway, from the environment (or a .env file)."""
    try:
        from dotenv import load_dotenv
        load_dotenv()
    except ImportError:
        pass
    return os.environ.get(TOKEN_ENV_VAR)


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigurationError(message)


def _build_dataclass(cls, values: Dict[str, Any], path: str):
    if not isinstance(values, dict):
        raise ConfigurationError(f"Config section '{path or 'root'}' must be an object")

    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigurationError(f"Unknown config keys in '{path or 'root'}': {', '.join(unknown)}")

    kwargs = {}
    for name, value in values.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build_dataclass(type(default), value, f"{path}.{name}".lstrip('.'))
        else:
            kwargs[name] = value
    return cls(**kwargs)

