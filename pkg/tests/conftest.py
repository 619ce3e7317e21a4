"""
Shared desk-scale fixtures: a clustered synthetic corpus, mock backends and one mock pipeline run.
"""

import json

import numpy as np
import pytest

from analysis_modules.pipeline_stages import run_pipeline
from src.candidate_retriever import MockEmbeddingBackend
from src.config import RunConfig
from src.llm_gateway import MockLLMBackend

SYLLABLES = ['ka', 'lo', 'mi', 'ne', 'ru', 'sa', 'te', 'vo', 'zi', 'pu', 'de', 'go', 'fi', 'ha', 'ju', 'bre', 'cly',
             'dro', 'fen', 'gri']

N_CLUSTERS = 20
DOCS_PER_CLUSTER = 10
CLUSTER_VOCAB = 14


def make_words(n: int, rng: np.random.Generator, taken: set) -> list:
    """n distinct pseudo-words of three syllables, none already in `taken`."""
    words = []
    while len(words) < n:
        word = ''.join(SYLLABLES[i] for i in rng.integers(len(SYLLABLES), size=3))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def make_desk_corpus(seed: int = 7) -> list:
    """
    200 one-sentence documents in 20 topic clusters.

    Each document uses 5 distinct words of its cluster's vocabulary, so a mock query
    built from a document's first three words overlaps its seed far more than anything else.
    """
    rng = np.random.default_rng(seed)
    taken: set = set()
    records = []
    for cluster in range(N_CLUSTERS):
        vocab = make_words(CLUSTER_VOCAB, rng, taken)
        for j in range(DOCS_PER_CLUSTER):
            a, b, c, d, e = (vocab[int(i)] for i in rng.choice(CLUSTER_VOCAB, size=5, replace=False))
            records.append({
                'doc_id': f"d{cluster * DOCS_PER_CLUSTER + j:03d}",
                'text': f"The {a} {b} {c} of {d} and {e}.",
                'source_tag': f"topic-{cluster:02d}",
            })
    return records


def make_out_domain_records(n_queries: int = 20, pool_size: int = 10, seed: int = 11) -> list:
    """Labeled pools over a disjoint vocabulary; one relevant document per query."""
    rng = np.random.default_rng(seed)
    taken: set = set()
    records = []
    for q in range(n_queries):
        vocab = make_words(12, rng, taken)
        x, y, z = vocab[:3]
        pool = [{'doc_id': f"o{q:02d}-0", 'text': f"The {x} {y} {z} of {vocab[3]} and {vocab[4]}.", 'label': 1}]
        for j in range(1, pool_size):
            picks = [vocab[int(i)] for i in rng.choice(np.arange(1, 12), size=5, replace=False)]
            pool.append({'doc_id': f"o{q:02d}-{j}", 'text': "The {} {} {} of {} and {}.".format(*picks), 'label': 0})
        records.append({'query_id': f"oq-{q:02d}", 'query_text': f"What is {x} {y} {z}?", 'pool': pool,
                        'label_source': 'native'})
    return records


def write_jsonl(records: list, path) -> str:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record) + '\n')
    return str(path)


def make_desk_config(corpus_path: str, output_dir: str, out_domain_path: str = None) -> RunConfig:
    config = RunConfig()
    config.corpus_path = corpus_path
    config.output_dir = output_dir
    config.use_mock_backends()
    config.llm.max_in_flight = 2
    config.embedding.max_workers = 2
    config.pipeline.n_seeds = 180
    config.encoder.vocab_size = 1024
    config.encoder.d_model = 16
    config.encoder.max_length = 64
    config.training.epochs = 5
    config.training.learning_rate = 0.05
    config.evaluation.test_size = 50
    config.evaluation.out_domain_path = out_domain_path
    config.ablation_sizes = [25, 50, 100]
    return config


@pytest.fixture(scope='session')
def desk_records():
    return make_desk_corpus()


@pytest.fixture(scope='session')
def desk_data_dir(tmp_path_factory, desk_records):
    data_dir = tmp_path_factory.mktemp('data')
    write_jsonl(desk_records, data_dir / 'corpus.jsonl')
    write_jsonl(make_out_domain_records(), data_dir / 'out_domain.jsonl')
    return data_dir


@pytest.fixture(scope='session')
def desk_run(tmp_path_factory, desk_data_dir):
    """One complete mock pipeline run (ingest through split); returns (config, manifest)."""
    out_dir = tmp_path_factory.mktemp('run')
    config = make_desk_config(str(desk_data_dir / 'corpus.jsonl'), str(out_dir),
                              str(desk_data_dir / 'out_domain.jsonl'))
    manifest = run_pipeline(config)
    return config, manifest


@pytest.fixture
def desk_config_factory(desk_data_dir, tmp_path):
    def factory(name: str = 'run', out_domain: bool = True) -> RunConfig:
        out_domain_path = str(desk_data_dir / 'out_domain.jsonl') if out_domain else None
        return make_desk_config(str(desk_data_dir / 'corpus.jsonl'), str(tmp_path / name), out_domain_path)
    return factory


@pytest.fixture
def mock_llm():
    return MockLLMBackend()


@pytest.fixture
def mock_embedder():
    return MockEmbeddingBackend(dim=64, hash_seed=13)
