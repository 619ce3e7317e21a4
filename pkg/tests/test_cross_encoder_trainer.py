import json
import math
import os

import numpy as np
import pytest

from src.config import EncoderConfig, TrainingParams
from src.corpus_store import ingest_corpus
from src.cross_encoder_trainer import (ARRAYS_SUFFIX, CHECKPOINT_MAGIC, CrossEncoderModel, EpochRecord, GroupScores,
                                       Hyperparams, OptimizerState, TrainConfig, TrainingBatch, TrainingGroup,
                                       TrainingHistory, arrays_path, build_group, compute_gradients, group_loss,
                                       lce_loss, load_checkpoint, save_checkpoint, score_pair, train, train_step)
from src.encoders import ToyEncoder, create_encoder
from src.errors import ArgumentError, ConfigurationError, GroupError, StateError
from src.query_generator import SyntheticQuery
from src.relevance_miner import TrainingTriplet

WORDS = ['renal', 'cardiac', 'lesion', 'therapy', 'dose', 'fever', 'chronic', 'acute', 'scan', 'tissue', 'nerve',
         'muscle', 'joint', 'vision', 'liver', 'blood']


def random_text(rng, n_words):
    return ' '.join(WORDS[int(i)] for i in rng.integers(len(WORDS), size=n_words))


def toy_model(d_model=4, vocab_size=50, max_length=16, rng_seed=0):
    encoder = ToyEncoder(vocab_size=vocab_size, d_model=d_model, max_length=max_length, rng_seed=rng_seed)
    return CrossEncoderModel.initialize(encoder, rng_seed=rng_seed)


def random_batch(rng, n_groups, m):
    groups = []
    for g in range(n_groups):
        docs = [(f"g{g}d{i}", random_text(rng, int(rng.integers(2, 9)))) for i in range(m + 1)]
        groups.append(TrainingGroup(query_id=f"q{g}", query_text=random_text(rng, int(rng.integers(1, 5))),
                                    positive=docs[0], negatives=tuple(docs[1:])))
    return TrainingBatch(groups)


def batch_loss(model, batch):
    loss, _ = compute_gradients(model, batch)
    return loss


def make_triplet_corpus(n_triplets=4, n_negatives=4, seed=0):
    rng = np.random.default_rng(seed)
    records, triplets = [], []
    for t in range(n_triplets):
        doc_ids = [f"t{t}d{i}" for i in range(n_negatives + 1)]
        for doc_id in doc_ids:
            records.append((doc_id, random_text(rng, 6)))
        query = SyntheticQuery(f"q{t}", random_text(rng, 3), doc_ids[0])
        triplets.append(TrainingTriplet(query=query, positive_doc_id=doc_ids[0],
                                        negative_doc_ids=tuple(doc_ids[1:]), judgments=(), threshold_used=0.5))
    corpus, _ = ingest_corpus(records)
    return triplets, corpus


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('m', [1, 4, 9])
def test_uniform_scores_give_log_group_size(m):
    assert group_loss(0.3, [0.3] * m) == pytest.approx(math.log(m + 1))
    assert lce_loss([GroupScores(-2.0, [-2.0] * m), (5.0, [5.0] * m)]) == pytest.approx(math.log(m + 1))


def test_loss_is_shift_invariant():
    rng = np.random.default_rng(2)
    for _ in range(50):
        scores = rng.normal(scale=3.0, size=5)
        shift = float(rng.normal(scale=100.0))
        base = lce_loss([(scores[0], scores[1:])])
        assert lce_loss([(scores[0] + shift, scores[1:] + shift)]) == pytest.approx(base, rel=1e-9, abs=1e-9)


def test_loss_is_stable_for_large_scores():
    assert group_loss(1000.0, [-1000.0]) == 0.0
    assert group_loss(-1000.0, [1000.0]) == pytest.approx(2000.0)


def test_loss_requires_groups_and_negatives():
    with pytest.raises(ArgumentError):
        lce_loss([])
    with pytest.raises(ArgumentError):
        lce_loss([(1.0, [])])


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

GRADIENT_CASES = [(seed, n_groups, m, max_length)
                  for seed, (n_groups, m, max_length) in enumerate(
                      [(g, m, L) for g in (1, 2, 3) for m in (1, 2, 4) for L in (6, 16)] + [(2, 3, 8), (4, 1, 12)])]


@pytest.mark.parametrize('seed, n_groups, m, max_length', GRADIENT_CASES)
def test_gradients_match_central_differences(seed, n_groups, m, max_length):
    rng = np.random.default_rng(100 + seed)
    model = toy_model(max_length=max_length, rng_seed=seed)
    batch = random_batch(rng, n_groups, m)
    _, grads = compute_gradients(model, batch)
    step = 1e-4

    def check(array, index, analytic):
        original = array[index]
        array[index] = original + step
        plus = batch_loss(model, batch)
        array[index] = original - step
        minus = batch_loss(model, batch)
        array[index] = original
        numeric = (plus - minus) / (2 * step)
        assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic), 1e-3), (index, numeric, analytic)

    for i in range(model.d_model):
        check(model.score_head, i, grads['score_head'][i])

    texts = [group.query_text for group in batch.groups]
    texts += [text for group in batch.groups for _, text in group.documents()]
    used_rows = sorted({token for text in texts for token in model.encoder.tokenize(text)} | {0, 1})
    table = model.encoder.embeddings
    analytic_table = grads['encoder.embeddings']
    for _ in range(8):
        index = (int(rng.choice(used_rows)), int(rng.integers(model.d_model)))
        check(table, index, analytic_table[index])


def test_gradient_case_count():
    assert len(GRADIENT_CASES) >= 20


# ---------------------------------------------------------------------------
# Model and groups
# ---------------------------------------------------------------------------

def test_score_pair_is_deterministic_and_counts_truncation():
    model = toy_model(max_length=5)
    first = score_pair(model, 'renal therapy', 'cardiac lesion dose fever chronic')
    assert first == score_pair(toy_model(max_length=5), 'renal therapy', 'cardiac lesion dose fever chronic')
    assert model.stats['truncated_pairs'] == 1
    score_pair(model, 'renal', 'dose')
    assert model.stats['truncated_pairs'] == 1
    with pytest.raises(ArgumentError):
        score_pair(model, '', 'dose')


def test_initialize_respects_seed_and_bounds():
    encoder = create_encoder(EncoderConfig(vocab_size=64, d_model=9))
    model = CrossEncoderModel.initialize(encoder, rng_seed=3)
    assert np.all(np.abs(model.score_head) <= 1.0 / 3.0)
    assert np.array_equal(model.score_head, CrossEncoderModel.initialize(encoder, rng_seed=3).score_head)
    with pytest.raises(ConfigurationError):
        CrossEncoderModel(encoder, np.zeros(4))


def test_build_group_takes_hardest_negatives_in_order():
    triplets, corpus = make_triplet_corpus(n_triplets=1, n_negatives=6)
    group = build_group(triplets[0], 4, corpus)
    assert group.positive[0] == 't0d0'
    assert [doc_id for doc_id, _ in group.negatives] == ['t0d1', 't0d2', 't0d3', 't0d4']
    assert group.negatives[0][1] == corpus.get('t0d1').text


def test_build_group_with_too_few_negatives():
    triplets, corpus = make_triplet_corpus(n_triplets=1, n_negatives=2)
    with pytest.raises(GroupError):
        build_group(triplets[0], 4, corpus)
    with pytest.raises(ArgumentError):
        build_group(triplets[0], 0, corpus)


def test_batch_groups_must_share_m():
    rng = np.random.default_rng(0)
    mixed = random_batch(rng, 1, 2).groups + random_batch(rng, 1, 3).groups
    with pytest.raises(GroupError):
        TrainingBatch(mixed)
    with pytest.raises(ArgumentError):
        TrainingBatch([])


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def test_zero_learning_rate_leaves_parameters_unchanged():
    model = toy_model()
    before = {name: value.copy() for name, value in model.parameters().items()}
    batch = random_batch(np.random.default_rng(5), 2, 3)
    _, state, loss = train_step(model, batch, hyperparams=Hyperparams(learning_rate=0.0))
    assert loss > 0
    assert state.step == 0
    for name, value in model.parameters().items():
        assert np.array_equal(value, before[name])


def test_train_step_reduces_batch_loss():
    model = toy_model()
    batch = random_batch(np.random.default_rng(6), 2, 3)
    state = OptimizerState()
    losses = []
    for _ in range(30):
        model, state, loss = train_step(model, batch, state, Hyperparams(learning_rate=0.05))
        losses.append(loss)
    assert state.step == 30
    assert losses[-1] < losses[0]


def test_train_decreases_loss_and_counts_updates():
    triplets, corpus = make_triplet_corpus(n_triplets=5)
    model = toy_model(d_model=8, vocab_size=128, max_length=32)
    config = TrainConfig(epochs=20, batch_size=2, grad_accum_steps=2, m=4, learning_rate=0.05)
    model, history = train(model, triplets, corpus, config)

    assert [r.epoch for r in history.records] == list(range(1, 21))
    # 5 groups: 3 micro-batches of 2, 2, 1 and updates after the 2nd and the last
    assert all(r.n_updates == 2 for r in history.records)
    assert history.losses[-1] < history.losses[0]


def test_train_is_deterministic():
    triplets, corpus = make_triplet_corpus(n_triplets=4)
    config = TrainConfig(epochs=3, m=4, learning_rate=0.01, rng_seed=7)
    first, _ = train(toy_model(), triplets, corpus, config)
    second, _ = train(toy_model(), triplets, corpus, config)
    for name, value in first.parameters().items():
        assert np.array_equal(value, second.parameters()[name])


def test_eval_hook_receives_independent_snapshots():
    triplets, corpus = make_triplet_corpus(n_triplets=4)
    seen = []

    def hook(snapshot, epoch):
        seen.append(epoch)
        snapshot.score_head[:] = 0.0
        return {'in_domain': {'epoch': epoch}}

    model, history = train(toy_model(), triplets, corpus, TrainConfig(epochs=2, m=4, learning_rate=0.01), hook)
    assert seen == [1, 2]
    assert np.any(model.score_head != 0.0)
    assert history.records[1].evals == {'in_domain': {'epoch': 2}}


def test_zero_epochs_and_empty_dataset():
    triplets, corpus = make_triplet_corpus(n_triplets=2)
    model = toy_model()
    head = model.score_head.copy()
    _, history = train(model, triplets, corpus, TrainConfig(epochs=0, m=4))
    assert len(history) == 0
    assert np.array_equal(model.score_head, head)
    with pytest.raises(ArgumentError):
        train(model, [], corpus)


def test_train_config_from_params():
    config = TrainConfig.from_params(TrainingParams(epochs=3, learning_rate=0.1, rng_seed=4), m=2)
    assert (config.epochs, config.m, config.learning_rate, config.rng_seed) == (3, 2, 0.1, 4)
    assert config.hyperparams().learning_rate == 0.1


def test_history_requires_increasing_epochs(tmp_path):
    history = TrainingHistory()
    history.append(EpochRecord(1, 1.2, 3))
    with pytest.raises(StateError):
        history.append(EpochRecord(1, 1.0, 3))
    history.write_jsonl(str(tmp_path / 'history.jsonl'))
    assert (tmp_path / 'history.jsonl').read_text(encoding='utf-8') == \
        '{"epoch": 1, "mean_loss": 1.2, "n_updates": 3, "evals": {}}\n'


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    triplets, corpus = make_triplet_corpus(n_triplets=4)
    state = OptimizerState()
    model, _ = train(toy_model(), triplets, corpus, TrainConfig(epochs=2, m=4, learning_rate=0.01),
                     optimizer_state=state)
    path = tmp_path / 'model.ckpt'
    save_checkpoint(model, str(path), state, config_fingerprint='abc123')

    assert path.read_text(encoding='utf-8').startswith(CHECKPOINT_MAGIC + '\n')
    loaded, loaded_state, metadata = load_checkpoint(str(path))
    assert metadata == {'config_fingerprint': 'abc123', 'd_model': 4}
    # 4 groups, batch 2 x accumulation 2: one update per epoch
    assert loaded_state.step == state.step == 2
    assert score_pair(loaded, 'renal dose', 'cardiac lesion') == score_pair(model, 'renal dose', 'cardiac lesion')
    for name, value in model.parameters().items():
        assert np.array_equal(loaded.parameters()[name], value)
        assert np.array_equal(loaded_state.first_moment[name], state.first_moment[name])


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / 'model.ckpt'
    path.write_text('not a checkpoint\n', encoding='utf-8')
    with pytest.raises(ConfigurationError):
        load_checkpoint(str(path))


class ExternalWeightsEncoder(ToyEncoder):
    inline_parameters = False


def test_external_weights_go_to_the_arrays_file(tmp_path):
    triplets, corpus = make_triplet_corpus(n_triplets=4)
    state = OptimizerState()
    encoder = ExternalWeightsEncoder(vocab_size=50, d_model=4, max_length=16)
    model, _ = train(CrossEncoderModel.initialize(encoder), triplets, corpus,
                     TrainConfig(epochs=2, m=4, learning_rate=0.01), optimizer_state=state)
    path = tmp_path / 'model.ckpt'
    save_checkpoint(model, str(path), state)

    assert os.path.exists(arrays_path(str(path)))
    payload = json.loads(path.read_text(encoding='utf-8').split('\n', 1)[1])
    assert payload['parameters'] == {} and payload['arrays_file'] == 'model.ckpt' + ARRAYS_SUFFIX

    loaded, loaded_state, _ = load_checkpoint(str(path))
    assert loaded_state.step == state.step
    for name, value in model.parameters().items():
        assert np.array_equal(loaded.parameters()[name], value)
        assert np.array_equal(loaded_state.second_moment[name], state.second_moment[name])

    os.remove(arrays_path(str(path)))
    with pytest.raises(ConfigurationError):
        load_checkpoint(str(path))


def test_initialize_uses_the_encoder_head_when_provided():
    class PretrainedHeadEncoder(ToyEncoder):
        def initial_score_head(self):
            return np.full(self.d_model, 0.5)

    model = CrossEncoderModel.initialize(PretrainedHeadEncoder(vocab_size=50, d_model=3), rng_seed=9)
    assert np.array_equal(model.score_head, [0.5, 0.5, 0.5])


# ---------------------------------------------------------------------------
# Token cache and snapshots
# ---------------------------------------------------------------------------

def test_token_cache_is_bounded():
    encoder = ToyEncoder(vocab_size=50, d_model=4, token_cache_size=8)
    for i in range(40):
        encoder.tokenize(f"renal dose {i}")
    info = encoder.token_cache_info()
    assert info.maxsize == 8
    assert info.currsize == 8
    assert encoder.tokenize('renal dose 39') == encoder.tokenize('renal dose 39')
    assert encoder.token_cache_info().hits >= 1


def test_snapshot_owns_its_encoder_state():
    model = toy_model()
    score_pair(model, 'renal dose', 'cardiac lesion')
    snapshot = model.snapshot()
    assert snapshot.encoder.token_cache_info().currsize == 0
    score_pair(snapshot, 'acute fever', 'chronic scan')
    assert model.encoder.token_cache_info().currsize == 2

    snapshot.encoder.embeddings[:] = 0.0
    assert np.any(model.encoder.embeddings != 0.0)
    assert snapshot.encoder.embeddings is not model.encoder.embeddings


# ---------------------------------------------------------------------------
# Pretrained transformer reranker
# ---------------------------------------------------------------------------

@pytest.fixture(scope='module')
def tiny_reranker_dir(tmp_path_factory):
    """A one-layer BERT sequence classifier saved locally, so no download is needed."""
    torch = pytest.importorskip('torch')
    transformers = pytest.importorskip('transformers')
    directory = tmp_path_factory.mktemp('tiny-reranker')
    vocab_file = directory / 'vocab.txt'
    vocab_file.write_text('\n'.join(['[PAD]', '[UNK]', '[CLS]', '[SEP]', '[MASK]'] + WORDS) + '\n', encoding='utf-8')
    tokenizer = transformers.BertTokenizer(str(vocab_file))
    config = transformers.BertConfig(vocab_size=tokenizer.vocab_size, hidden_size=16, num_hidden_layers=1,
                                     num_attention_heads=2, intermediate_size=32, max_position_embeddings=64,
                                     num_labels=1, hidden_dropout_prob=0.0, attention_probs_dropout_prob=0.0)
    torch.manual_seed(0)
    transformers.BertForSequenceClassification(config).save_pretrained(str(directory))
    tokenizer.save_pretrained(str(directory))
    return str(directory)


def test_untrained_transformer_model_scores_like_the_pretrained_reranker(tiny_reranker_dir):
    import torch
    from src.encoders import TransformerEncoder

    encoder = TransformerEncoder(tiny_reranker_dir, max_length=32)
    model = CrossEncoderModel.initialize(encoder, rng_seed=4)
    assert encoder.d_model == 1
    assert np.array_equal(model.score_head, [1.0])

    inputs = encoder.tokenizer('renal dose', 'cardiac lesion therapy', return_tensors='pt')
    with torch.no_grad():
        logit = float(encoder.model(**inputs).logits[0, 0])
    assert score_pair(model, 'renal dose', 'cardiac lesion therapy') == pytest.approx(logit, rel=1e-5, abs=1e-6)


def test_transformer_weights_are_trained_and_checkpointed(tiny_reranker_dir, tmp_path):
    from src.encoders import TransformerEncoder

    model = CrossEncoderModel.initialize(TransformerEncoder(tiny_reranker_dir, max_length=32))
    before = {name: value.copy() for name, value in model.parameters().items()}
    assert 'encoder.classifier.weight' in before
    assert any(name.startswith('encoder.bert.encoder.layer.0.') for name in before)

    batch = random_batch(np.random.default_rng(11), 2, 2)
    snapshot = model.snapshot()
    snapshot_score = score_pair(snapshot, 'renal dose', 'cardiac lesion')
    state = OptimizerState()
    losses = []
    for _ in range(15):
        model, state, loss = train_step(model, batch, state, Hyperparams(learning_rate=5e-3))
        losses.append(loss)
    assert losses[-1] < losses[0]

    after = model.parameters()
    changed = [name for name in before if not np.array_equal(before[name], after[name])]
    assert 'encoder.classifier.weight' in changed
    assert any(name.startswith('encoder.bert.encoder.layer.0.') for name in changed)
    assert score_pair(snapshot, 'renal dose', 'cardiac lesion') == snapshot_score

    path = tmp_path / 'reranker.ckpt'
    save_checkpoint(model, str(path), state)
    assert os.path.exists(arrays_path(str(path)))
    loaded, loaded_state, metadata = load_checkpoint(str(path))
    assert metadata['d_model'] == 1
    assert loaded_state.step == 15
    for name in changed:
        assert np.array_equal(loaded.parameters()[name], after[name])
    assert score_pair(loaded, 'acute fever', 'chronic scan') == \
        pytest.approx(score_pair(model, 'acute fever', 'chronic scan'), rel=1e-6, abs=1e-7)
