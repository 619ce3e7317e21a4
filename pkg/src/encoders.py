"""
Sequence encoders under the cross-encoder score head.

An encoder maps the joint input "CLS ; query ; SEP ; document" to a d_model
classification vector and, for trainable encoders, back-propagates a gradient
on that vector into its own parameters.
"""

import copy
import functools
import hashlib
import logging
import re
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.errors import ConfigurationError, StateError

logger = logging.getLogger(__name__)

CLS_ID = 0
SEP_ID = 1
PAD_ID = 2
N_SPECIAL_IDS = 3

TOKEN_CACHE_SIZE = 65536

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)
_VOCAB_HASH_KEY = b'synthrank-vocab'


@dataclass
class EncodeCache:
    """What backward() needs from one encode() call."""

    query_ids: List[int]
    doc_ids: List[int]
    u: np.ndarray
    v: np.ndarray
    truncated: bool = False
    graph: Optional[Any] = None  # autograd output, transformer backend only


class ToyEncoder:
    """
    Small trainable encoder for desk-scale runs.

    Tokens are hashed into a fixed vocabulary with a trainable embedding table E.
    u is the mean embedding of the CLS+query segment, v the mean embedding of
    the SEP+document segment, and the classification vector is u * v.
    Overlong joint inputs lose document tokens from the tail.
    """

    backend_id = 'toy'
    inline_parameters = True

    def __init__(self, vocab_size: int = 4096, d_model: int = 32, max_length: int = 512, rng_seed: int = 0,
                 init_scale: float = 1.0, token_cache_size: int = TOKEN_CACHE_SIZE):
        if vocab_size <= N_SPECIAL_IDS or d_model < 1 or max_length < 3:
            raise ConfigurationError(f"Invalid toy encoder shape: vocab={vocab_size}, d_model={d_model}, "
                                     f"max_length={max_length}")
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.max_length = max_length
        self.rng_seed = rng_seed
        self.token_cache_size = token_cache_size

        rng = np.random.default_rng([rng_seed, 1])
        self.embeddings = rng.normal(0.0, init_scale, size=(vocab_size, d_model))
        self._reset_token_cache()

    def _reset_token_cache(self):
        self._tokenize_cached = functools.lru_cache(maxsize=self.token_cache_size)(self._tokenize_text)

    def token_id(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode('utf-8'), key=_VOCAB_HASH_KEY, digest_size=8).digest()
        return N_SPECIAL_IDS + int.from_bytes(digest, 'big') % (self.vocab_size - N_SPECIAL_IDS)

    def _tokenize_text(self, text: str) -> Tuple[int, ...]:
        return tuple(self.token_id(t.lower()) for t in _TOKEN_RE.findall(text))

    def tokenize(self, text: str) -> Tuple[int, ...]:
        return self._tokenize_cached(text)

    def token_cache_info(self):
        """functools cache statistics of the tokenizer (hits, misses, maxsize, currsize)."""
        return self._tokenize_cached.cache_info()

    def joint_ids(self, query_text: str, doc_text: str) -> Tuple[List[int], List[int], bool]:
        """CLS+query and SEP+document id segments after document-tail truncation."""
        query_ids = [CLS_ID, *self.tokenize(query_text)]
        doc_ids = [SEP_ID, *self.tokenize(doc_text)]
        room = self.max_length - len(query_ids)
        # The SEP position is always kept so the document segment is never empty
        room = max(room, 1)
        truncated = len(doc_ids) > room
        return query_ids, doc_ids[:room], truncated

    def parameters(self) -> Dict[str, np.ndarray]:
        return {'embeddings': self.embeddings}

    def load_parameters(self, params: Dict[str, np.ndarray]):
        embeddings = np.asarray(params['embeddings'], dtype=np.float64)
        if embeddings.shape != (self.vocab_size, self.d_model):
            raise ConfigurationError(f"Embedding table has shape {embeddings.shape}, "
                                     f"expected {(self.vocab_size, self.d_model)}")
        self.embeddings = embeddings.copy()

    def clone(self) -> 'ToyEncoder':
        """Copy with its own embedding table and token cache."""
        clone = copy.copy(self)
        clone.embeddings = self.embeddings.copy()
        clone._reset_token_cache()
        return clone

    def encode(self, query_text: str, doc_text: str, requires_grad: bool = False) -> Tuple[np.ndarray, EncodeCache]:
        query_ids, doc_ids, truncated = self.joint_ids(query_text, doc_text)
        u = self.embeddings[query_ids].mean(axis=0)
        v = self.embeddings[doc_ids].mean(axis=0)
        return u * v, EncodeCache(query_ids, doc_ids, u, v, truncated)

    def backward(self, cache: EncodeCache, grad_h: np.ndarray, grads: Dict[str, np.ndarray]):
        """Accumulate d(loss)/dE into grads['embeddings'] given d(loss)/dh."""
        grad_u = grad_h * cache.v
        grad_v = grad_h * cache.u
        table = grads.setdefault('embeddings', np.zeros_like(self.embeddings))
        np.add.at(table, cache.query_ids, grad_u / len(cache.query_ids))
        np.add.at(table, cache.doc_ids, grad_v / len(cache.doc_ids))

    def config(self) -> Dict[str, Any]:
        return {'vocab_size': self.vocab_size, 'd_model': self.d_model, 'max_length': self.max_length,
                'rng_seed': self.rng_seed}


class TransformerEncoder:
    """
    Pretrained sequence-classification reranker, fine-tuned end to end.

    The classification vector is the model's label logits, so d_model equals
    num_labels. initial_score_head() returns the head that reproduces the
    pretrained relevance score: an untrained model ranks like the pretrained
    reranker. Gradients on the logits go through torch autograd into every
    trainable weight; weights are exchanged with the optimizer as float32
    numpy arrays keyed by their torch parameter names.
    """

    backend_id = 'transformer'
    inline_parameters = False

    def __init__(self, model_name: str, max_length: int = 512):
        try:
            import torch
            from transformers import AutoModelForSequenceClassification, AutoTokenizer
        except ImportError as e:
            raise ConfigurationError("The transformer encoder backend needs torch and transformers") from e

        self._torch = torch
        self.model_name = model_name
        self.max_length = max_length
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModelForSequenceClassification.from_pretrained(model_name)
        # Dropout stays off during fine-tuning
        self.model.eval()
        self.d_model = int(self.model.config.num_labels)
        self._bind_parameters()
        logger.info(f"Loaded reranker {model_name} ({self.d_model} label logits, "
                    f"{len(self._params)} trainable tensors)")

    def _bind_parameters(self):
        self._params = {name: p for name, p in self.model.named_parameters() if p.requires_grad}

    def initial_score_head(self) -> np.ndarray:
        if self.d_model == 1:
            return np.ones(1)
        # Multi-label heads: last label is "relevant", first is "not relevant"
        head = np.zeros(self.d_model)
        head[0], head[-1] = -1.0, 1.0
        return head

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: p.detach().cpu().numpy() for name, p in self._params.items()}

    def load_parameters(self, params: Dict[str, np.ndarray]):
        """Copy the given weights into the model; names not given keep their values."""
        for name, value in params.items():
            target = self._params.get(name)
            if target is None:
                raise ConfigurationError(f"{self.model_name} has no trainable parameter '{name}'")
            array = np.asarray(value)
            if tuple(array.shape) != tuple(target.shape):
                raise ConfigurationError(f"Parameter '{name}' has shape {array.shape}, "
                                         f"expected {tuple(target.shape)}")
            with self._torch.no_grad():
                target.copy_(self._torch.as_tensor(array, dtype=target.dtype, device=target.device))

    def clone(self) -> 'TransformerEncoder':
        """Copy with its own model weights; the tokenizer is shared."""
        clone = copy.copy(self)
        clone.model = copy.deepcopy(self.model)
        clone._bind_parameters()
        return clone

    def encode(self, query_text: str, doc_text: str, requires_grad: bool = False) -> Tuple[np.ndarray, EncodeCache]:
        untruncated = self.tokenizer(query_text, doc_text, truncation=False)['input_ids']
        inputs = self.tokenizer(query_text, doc_text, truncation='only_second', max_length=self.max_length,
                                return_tensors='pt')
        if requires_grad:
            logits = self.model(**inputs).logits[0]
        else:
            with self._torch.no_grad():
                logits = self.model(**inputs).logits[0]
        h = logits.detach().double().cpu().numpy()
        truncated = len(untruncated) > self.max_length
        return h, EncodeCache([], [], h, h, truncated, graph=logits if requires_grad else None)

    def backward(self, cache: EncodeCache, grad_h: np.ndarray, grads: Dict[str, np.ndarray]):
        """Accumulate d(loss)/d(weight) for every trainable weight given d(loss)/d(logits)."""
        if cache.graph is None:
            raise StateError("backward() needs a cache from encode(..., requires_grad=True)")
        names = list(self._params)
        grad_output = self._torch.as_tensor(np.asarray(grad_h), dtype=cache.graph.dtype, device=cache.graph.device)
        parts = self._torch.autograd.grad(cache.graph, [self._params[n] for n in names], grad_outputs=grad_output,
                                          allow_unused=True)
        cache.graph = None
        for name, part in zip(names, parts):
            if part is None:
                continue
            value = part.detach().cpu().numpy()
            if name in grads:
                grads[name] += value
            else:
                grads[name] = value.copy()

    def config(self) -> Dict[str, Any]:
        return {'model_name': self.model_name, 'max_length': self.max_length}


def create_encoder(config) -> Any:
    """Instantiate the encoder named in an EncoderConfig."""
    if config.backend == 'toy':
        return ToyEncoder(vocab_size=config.vocab_size, d_model=config.d_model,
                          max_length=config.max_length, rng_seed=config.rng_seed)
    if config.backend == 'transformer':
        return TransformerEncoder(config.model_name, max_length=config.max_length)
    raise ConfigurationError(f"Unknown encoder backend '{config.backend}'")
