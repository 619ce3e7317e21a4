"""
Cross-encoder scorer and contrastive (LCE) training.

score(q, d) = cls(encoder(CLS ; q ; SEP ; d)) . W_s, trained with the
batch-averaged softmax cross-entropy of each query's positive against its
hard negatives.
"""

import copy
import json
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.corpus_store import Corpus
from src.encoders import ToyEncoder, TransformerEncoder
from src.errors import ArgumentError, ConfigurationError, GroupError, StateError, TrainingError
from src.relevance_miner import TrainingTriplet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = 'SYNTHRANK-CKPT-1'
ARRAYS_SUFFIX = '.weights.npz'


class CrossEncoderModel:
    """Encoder backend plus a linear score head W_s of length d_model."""

    def __init__(self, encoder, score_head: np.ndarray, rng_seed: int = 0):
        score_head = np.asarray(score_head, dtype=np.float64)
        if score_head.shape != (encoder.d_model,):
            raise ConfigurationError(f"Score head has shape {score_head.shape}, encoder dim is {encoder.d_model}")
        self.encoder = encoder
        self.score_head = score_head
        self.rng_seed = rng_seed
        self.stats = {'truncated_pairs': 0}
        self._stats_lock = threading.Lock()

    @classmethod
    def initialize(cls, encoder, rng_seed: int = 0) -> 'CrossEncoderModel':
        """
        Fresh model on top of an encoder.

        Encoders with a pretrained head provide initial_score_head(); otherwise the
        head is drawn uniformly from [-1/sqrt(d), 1/sqrt(d)] under rng_seed.
        """
        if hasattr(encoder, 'initial_score_head'):
            return cls(encoder, encoder.initial_score_head(), rng_seed=rng_seed)
        bound = 1.0 / math.sqrt(encoder.d_model)
        rng = np.random.default_rng(rng_seed)
        return cls(encoder, rng.uniform(-bound, bound, size=encoder.d_model), rng_seed=rng_seed)

    @property
    def d_model(self) -> int:
        return self.encoder.d_model

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {'score_head': self.score_head}
        params.update({f"encoder.{name}": value for name, value in self.encoder.parameters().items()})
        return params

    def set_parameter(self, name: str, value: np.ndarray):
        if name == 'score_head':
            self.score_head = value
        elif name.startswith('encoder.'):
            self.encoder.load_parameters({name[len('encoder.'):]: value})
        else:
            raise ArgumentError(f"Unknown parameter '{name}'")

    def record_truncation(self):
        with self._stats_lock:
            self.stats['truncated_pairs'] += 1

    def snapshot(self) -> 'CrossEncoderModel':
        """Independent copy for evaluation hooks."""
        if hasattr(self.encoder, 'clone'):
            encoder = self.encoder.clone()
        else:
            encoder = copy.copy(self.encoder)
            if self.encoder.parameters():
                encoder.load_parameters({name: value.copy() for name, value in self.encoder.parameters().items()})
        clone = CrossEncoderModel(encoder, self.score_head.copy(), rng_seed=self.rng_seed)
        clone.stats = dict(self.stats)
        return clone


def score_pair(model: CrossEncoderModel, query_text: str, doc_text: str) -> float:
    """Relevance score of a (query, document) pair; unbounded real."""
    if not query_text or not query_text.strip() or not doc_text or not doc_text.strip():
        raise ArgumentError("Query and document text must be non-empty")
    h, cache = model.encoder.encode(query_text, doc_text)
    if cache.truncated:
        model.record_truncation()
    return float(np.dot(h, model.score_head))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass
class GroupScores:
    positive_score: float
    negative_scores: List[float]


GroupScoresLike = Union[GroupScores, Tuple[float, Sequence[float]]]


def _unpack_group(group: GroupScoresLike) -> Tuple[float, List[float]]:
    if isinstance(group, GroupScores):
        return group.positive_score, list(group.negative_scores)
    positive, negatives = group
    return positive, list(negatives)


def group_loss(positive_score: float, negative_scores: Sequence[float]) -> float:
    """-log softmax of the positive within its group, with the log-sum-exp max shift."""
    scores = [positive_score] + list(negative_scores)
    shift = max(scores)
    log_sum = shift + math.log(math.fsum(math.exp(s - shift) for s in scores))
    return max(0.0, log_sum - positive_score)


def lce_loss(group_scores: Sequence[GroupScoresLike]) -> float:
    """
    Batch-averaged localized contrastive loss.

    Args:
        group_scores: Per group, the positive score and the negative scores

    Returns:
        Mean over groups of -log(exp(s+) / sum over the group of exp(s))
    """
    if not group_scores:
        raise ArgumentError("lce_loss needs at least one group")
    losses = []
    for group in group_scores:
        positive, negatives = _unpack_group(group)
        if not negatives:
            raise ArgumentError("Every group needs at least one negative score")
        losses.append(group_loss(positive, negatives))
    return math.fsum(losses) / len(losses)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = np.exp(scores - scores.max())
    return shifted / shifted.sum()


# ---------------------------------------------------------------------------
# Groups and batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingGroup:
    """One positive and exactly m negatives for a query."""

    query_id: str
    query_text: str
    positive: Tuple[str, str]
    negatives: Tuple[Tuple[str, str], ...]

    @property
    def m(self) -> int:
        return len(self.negatives)

    def documents(self) -> List[Tuple[str, str]]:
        return [self.positive] + list(self.negatives)


@dataclass
class TrainingBatch:
    groups: List[TrainingGroup]

    def __post_init__(self):
        if not self.groups:
            raise ArgumentError("A training batch needs at least one group")
        if len({g.m for g in self.groups}) != 1:
            raise GroupError("All groups of a batch must have the same number of negatives")


def build_group(triplet: TrainingTriplet, m: int, corpus: Corpus) -> TrainingGroup:
    """Positive plus the m hardest negatives, in the triplet's hard-first order."""
    if m < 1:
        raise ArgumentError(f"m must be >= 1, got {m}")
    if len(triplet.negative_doc_ids) < m:
        raise GroupError(f"Triplet '{triplet.query.query_id}' has {len(triplet.negative_doc_ids)} "
                         f"negatives, {m} required")

    def resolve(doc_id: str) -> Tuple[str, str]:
        doc = corpus.get(doc_id)
        if doc is None:
            raise StateError(f"Document '{doc_id}' of triplet '{triplet.query.query_id}' is not in the corpus")
        return doc_id, doc.text

    return TrainingGroup(
        query_id=triplet.query.query_id,
        query_text=triplet.query.text,
        positive=resolve(triplet.positive_doc_id),
        negatives=tuple(resolve(doc_id) for doc_id in triplet.negative_doc_ids[:m]),
    )


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass
class Hyperparams:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    """Adam moment estimates, keyed by parameter name."""

    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def compute_gradients(model: CrossEncoderModel, batch: TrainingBatch) -> Tuple[float, Dict[str, np.ndarray]]:
    """LCE loss of the batch and its gradient w.r.t. every trainable parameter."""
    n_groups = len(batch.groups)
    grads: Dict[str, np.ndarray] = {'score_head': np.zeros_like(model.score_head)}
    encoder_grads: Dict[str, np.ndarray] = {}
    losses = []

    for group in batch.groups:
        encoded = []
        for _, doc_text in group.documents():
            h, cache = model.encoder.encode(group.query_text, doc_text, requires_grad=True)
            if cache.truncated:
                model.record_truncation()
            encoded.append((h, cache))
        scores = np.array([float(np.dot(h, model.score_head)) for h, _ in encoded])
        losses.append(group_loss(scores[0], scores[1:]))

        # d(loss)/d(score_i) = (softmax_i - [i == positive]) / |Q|
        coefficients = _softmax(scores)
        coefficients[0] -= 1.0
        coefficients /= n_groups
        for coefficient, (h, cache) in zip(coefficients, encoded):
            grads['score_head'] += coefficient * h
            model.encoder.backward(cache, coefficient * model.score_head, encoder_grads)

    grads.update({f"encoder.{name}": value for name, value in encoder_grads.items()})
    return math.fsum(losses) / n_groups, grads


def _check_finite(loss: float, grads: Dict[str, np.ndarray], context: Dict[str, Any]):
    bad = [name for name, value in grads.items() if not np.all(np.isfinite(value))]
    if not math.isfinite(loss) or bad:
        diagnostics = dict(context, loss=loss, non_finite_gradients=bad)
        logger.error(f"Training diverged: {diagnostics}")
        raise TrainingError(f"Non-finite loss or gradient at {context}", diagnostics=diagnostics)


def apply_update(model: CrossEncoderModel, grads: Dict[str, np.ndarray], optimizer_state: OptimizerState,
                 hyperparams: Hyperparams) -> OptimizerState:
    """One Adam step. A zero learning rate leaves parameters and optimizer state untouched."""
    if hyperparams.learning_rate == 0:
        return optimizer_state

    optimizer_state.step += 1
    t = optimizer_state.step
    b1, b2 = hyperparams.beta1, hyperparams.beta2
    params = model.parameters()
    for name, grad in grads.items():
        m = optimizer_state.first_moment.get(name, np.zeros_like(grad))
        v = optimizer_state.second_moment.get(name, np.zeros_like(grad))
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        optimizer_state.first_moment[name] = m
        optimizer_state.second_moment[name] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        model.set_parameter(name, params[name] - hyperparams.learning_rate * m_hat / (np.sqrt(v_hat) + hyperparams.eps))
    return optimizer_state


def train_step(model: CrossEncoderModel, batch: TrainingBatch, optimizer_state: Optional[OptimizerState] = None,
               hyperparams: Optional[Hyperparams] = None) -> Tuple[CrossEncoderModel, OptimizerState, float]:
    """
    One optimization step on a batch.

    Returns:
        (model, optimizer_state, loss) where loss is computed before the update
    """
    optimizer_state = optimizer_state or OptimizerState()
    hyperparams = hyperparams or Hyperparams()
    loss, grads = compute_gradients(model, batch)
    _check_finite(loss, grads, {'step': optimizer_state.step + 1, 'query_ids': [g.query_id for g in batch.groups]})
    apply_update(model, grads, optimizer_state, hyperparams)
    return model, optimizer_state, loss


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2
    grad_accum_steps: int = 2
    m: int = 4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0

    @classmethod
    def from_params(cls, training, m: int) -> 'TrainConfig':
        """Build from a TrainingParams section plus the group size."""
        return cls(epochs=training.epochs, batch_size=training.batch_size,
                   grad_accum_steps=training.grad_accum_steps, m=m, learning_rate=training.learning_rate,
                   beta1=training.beta1, beta2=training.beta2, eps=training.eps, rng_seed=training.rng_seed)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.learning_rate, self.beta1, self.beta2, self.eps)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    n_updates: int
    evals: Dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        evals = {tag: report.to_dict() if hasattr(report, 'to_dict') else report for tag, report in self.evals.items()}
        return {'epoch': self.epoch, 'mean_loss': self.mean_loss, 'n_updates': self.n_updates, 'evals': evals}


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise StateError("Epoch ids must be strictly increasing")
        self.records.append(record)

    @property
    def losses(self) -> List[float]:
        return [record.mean_loss for record in self.records]

    def write_jsonl(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            for record in self.records:
                f.write(json.dumps(record.to_record()) + '\n')


EvalHook = Callable[[CrossEncoderModel, int], Dict[str, Any]]


def train(model: CrossEncoderModel, triplets: Sequence[TrainingTriplet], corpus: Corpus,
          config: Optional[TrainConfig] = None, eval_hook: Optional[EvalHook] = None,
          optimizer_state: Optional[OptimizerState] = None) -> Tuple[CrossEncoderModel, TrainingHistory]:
    """
    Train the model with LCE over fixed per-triplet groups.

    Each epoch shuffles the groups under rng_seed, splits them into micro-batches of
    batch_size and applies one update every grad_accum_steps micro-batches, so the
    effective batch is batch_size * grad_accum_steps groups.

    Args:
        model: Model to train (updated in place)
        triplets: Training triplets, each with at least m negatives
        corpus: Corpus resolving the triplets' doc_ids
        config: Training configuration
        eval_hook: Called after every epoch with a model snapshot and the epoch id;
            its returned reports are stored in the history
        optimizer_state: Adam state to continue from

    Returns:
        (model, history)
    """
    config = config or TrainConfig()
    if not triplets:
        raise ArgumentError("Cannot train on an empty dataset")
    if config.batch_size < 1 or config.grad_accum_steps < 1:
        raise ArgumentError("batch_size and grad_accum_steps must be >= 1")

    history = TrainingHistory()
    if config.epochs == 0:
        return model, history

    groups = [build_group(triplet, config.m, corpus) for triplet in triplets]
    hyperparams = config.hyperparams()
    optimizer_state = optimizer_state or OptimizerState()
    rng = np.random.default_rng(config.rng_seed)

    logger.info(f"Training on {len(groups)} groups for {config.epochs} epochs "
                f"(batch {config.batch_size} x accumulation {config.grad_accum_steps}, m={config.m}, "
                f"lr={config.learning_rate})")

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(groups))
        micro_batches = [TrainingBatch([groups[i] for i in order[start:start + config.batch_size]])
                         for start in range(0, len(order), config.batch_size)]

        weighted_loss = 0.0
        n_updates = 0
        pending: List[Tuple[Dict[str, np.ndarray], int]] = []

        for index, batch in enumerate(micro_batches, start=1):
            loss, grads = compute_gradients(model, batch)
            _check_finite(loss, grads, {'epoch': epoch, 'micro_batch': index,
                                        'query_ids': [g.query_id for g in batch.groups]})
            weighted_loss += loss * len(batch.groups)
            pending.append((grads, len(batch.groups)))

            if len(pending) == config.grad_accum_steps or index == len(micro_batches):
                # Each micro-batch gradient is a per-group mean; re-weight to a mean over all groups
                total = sum(n for _, n in pending)
                accumulated = {}
                for grads_part, n in pending:
                    for name, value in grads_part.items():
                        scaled = value * (n / total)
                        accumulated[name] = accumulated[name] + scaled if name in accumulated else scaled
                apply_update(model, accumulated, optimizer_state, hyperparams)
                n_updates += 1
                pending = []

        record = EpochRecord(epoch=epoch, mean_loss=weighted_loss / len(groups), n_updates=n_updates)
        if eval_hook is not None:
            record.evals = dict(eval_hook(model.snapshot(), epoch) or {})
        history.append(record)
        logger.info(f"Epoch {epoch}/{config.epochs}: mean loss {record.mean_loss:.4f} ({n_updates} updates)")

    if model.stats['truncated_pairs']:
        logger.warning(f"{model.stats['truncated_pairs']} pair encodings had their document truncated")
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _array_to_json(value: np.ndarray) -> Dict[str, Any]:
    return {'shape': list(value.shape), 'values': value.ravel().tolist()}


def _array_from_json(data: Dict[str, Any]) -> np.ndarray:
    return np.array(data['values'], dtype=np.float64).reshape(data['shape'])


def arrays_path(path: str) -> str:
    """Companion file holding the weights of encoders too large to inline in the JSON document."""
    return path + ARRAYS_SUFFIX


def save_checkpoint(model: CrossEncoderModel, path: str, optimizer_state: Optional[OptimizerState] = None,
                    config_fingerprint: Optional[str] = None):
    """
    Write the magic header line followed by one JSON document.

    Encoders with inline_parameters=False (pretrained transformers) keep their
    weights and Adam moments in an npz file next to the checkpoint instead.
    """
    optimizer_state = optimizer_state or OptimizerState()
    sections = {
        'parameters': model.parameters(),
        'first_moment': optimizer_state.first_moment,
        'second_moment': optimizer_state.second_moment,
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    arrays_file = None
    if not getattr(model.encoder, 'inline_parameters', True):
        arrays_file = os.path.basename(arrays_path(path))
        np.savez(arrays_path(path), **{f"{section}::{name}": value
                                       for section, values in sections.items() for name, value in values.items()})
        sections = {section: {} for section in sections}

    payload = {
        'encoder_backend': model.encoder.backend_id,
        'encoder_config': model.encoder.config(),
        'd_model': model.d_model,
        'rng_seed': model.rng_seed,
        'parameters': {name: _array_to_json(value) for name, value in sections['parameters'].items()},
        'optimizer': {
            'step': optimizer_state.step,
            'first_moment': {n: _array_to_json(v) for n, v in sections['first_moment'].items()},
            'second_moment': {n: _array_to_json(v) for n, v in sections['second_moment'].items()},
        },
        'arrays_file': arrays_file,
        'config_fingerprint': config_fingerprint,
    }
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(CHECKPOINT_MAGIC + '\n')
        json.dump(payload, f, separators=(',', ':'))
        f.write('\n')


def _encoder_from_payload(payload: Dict[str, Any], path: str):
    encoder_config = payload['encoder_config']
    if payload['encoder_backend'] == 'toy':
        return ToyEncoder(vocab_size=encoder_config['vocab_size'], d_model=encoder_config['d_model'],
                          max_length=encoder_config['max_length'], rng_seed=encoder_config['rng_seed'])
    if payload['encoder_backend'] == 'transformer':
        return TransformerEncoder(encoder_config['model_name'], max_length=encoder_config['max_length'])
    raise ConfigurationError(f"Unknown encoder backend '{payload['encoder_backend']}' in {path}")


def load_checkpoint(path: str) -> Tuple[CrossEncoderModel, OptimizerState, Dict[str, Any]]:
    """Rebuild model and optimizer state; returns (model, optimizer_state, metadata)."""
    with open(path, 'r', encoding='utf-8') as f:
        header = f.readline().rstrip('\n')
        if header != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path} is not a checkpoint (header {header!r})")
        payload = json.load(f)

    optimizer = payload['optimizer']
    sections = {
        'parameters': {n: _array_from_json(v) for n, v in payload['parameters'].items()},
        'first_moment': {n: _array_from_json(v) for n, v in optimizer['first_moment'].items()},
        'second_moment': {n: _array_from_json(v) for n, v in optimizer['second_moment'].items()},
    }
    if payload.get('arrays_file'):
        stored_path = os.path.join(os.path.dirname(path), payload['arrays_file'])
        if not os.path.exists(stored_path):
            raise ConfigurationError(f"Checkpoint {path} is missing its weights file {stored_path}")
        with np.load(stored_path) as stored:
            for key in stored.files:
                section, name = key.split('::', 1)
                sections[section][name] = stored[key]

    params = sections['parameters']
    model = CrossEncoderModel(_encoder_from_payload(payload, path), params.pop('score_head'),
                              rng_seed=payload['rng_seed'])
    for name, value in params.items():
        model.set_parameter(name, value)

    optimizer_state = OptimizerState(step=optimizer['step'], first_moment=sections['first_moment'],
                                     second_moment=sections['second_moment'])
    metadata = {'config_fingerprint': payload.get('config_fingerprint'), 'd_model': payload['d_model']}
    return model, optimizer_state, metadata
