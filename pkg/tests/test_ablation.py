import os

import pytest

from analysis_modules.ablation_study import AblationResult, make_model, make_nested_subsets, run_ablation, split_dataset
from analysis_modules.pipeline_stages import PipelineRunner, run_command
from src.errors import ArgumentError, StateError
from src.query_generator import SyntheticQuery
from src.ranking_evaluator import IN_DOMAIN, METRIC_NAMES, OUT_DOMAIN
from src.relevance_miner import TrainingTriplet, read_triplets_jsonl
from src.run_manifest import RunManifest


def fake_triplets(n):
    return [TrainingTriplet(SyntheticQuery(f"q{i:03d}", f"query {i}", f"d{i}"), f"d{i}", ('x1', 'x2', 'x3', 'x4'),
                            (), 0.5) for i in range(n)]


@pytest.fixture(scope='module')
def desk_ablation(desk_run):
    config, _ = desk_run
    manifest = run_command(config, 'ablate')
    return config, manifest, AblationResult.load(os.path.join(config.output_dir, 'ablation.json'))


# ---------------------------------------------------------------------------
# Splits and subsets
# ---------------------------------------------------------------------------

def test_split_is_disjoint_ordered_and_deterministic():
    triplets = fake_triplets(20)
    train_set, test_set = split_dataset(triplets, 5, rng_seed=3)
    assert len(train_set) == 15 and len(test_set) == 5
    assert {t.query.query_id for t in train_set}.isdisjoint(t.query.query_id for t in test_set)
    assert train_set == sorted(train_set, key=lambda t: t.query.query_id)
    assert test_set == sorted(test_set, key=lambda t: t.query.query_id)
    assert split_dataset(triplets, 5, rng_seed=3) == (train_set, test_set)


def test_split_edge_cases():
    triplets = fake_triplets(4)
    assert split_dataset(triplets, 0, rng_seed=0) == (triplets, [])
    with pytest.raises(ArgumentError):
        split_dataset(triplets, 4, rng_seed=0)
    with pytest.raises(ArgumentError):
        split_dataset(triplets, -1, rng_seed=0)


def test_nested_subsets_grow_by_inclusion():
    train_set = fake_triplets(30)
    subsets = make_nested_subsets(train_set, [5, 10, 30], rng_seed=1)
    assert [len(s) for s in subsets] == [5, 10, 30]
    for smaller, larger in zip(subsets, subsets[1:]):
        assert {t.query.query_id for t in smaller} < {t.query.query_id for t in larger}
    assert subsets[-1] == train_set
    assert make_nested_subsets(train_set, [5, 10, 30], rng_seed=1) == subsets


@pytest.mark.parametrize('sizes', [[], [0, 5], [10, 10], [10, 5], [5, 31]])
def test_nested_subsets_reject_bad_sizes(sizes):
    with pytest.raises(ArgumentError):
        make_nested_subsets(fake_triplets(30), sizes, rng_seed=0)


# ---------------------------------------------------------------------------
# Ablation on the desk run
# ---------------------------------------------------------------------------

def test_ablation_covers_every_size_epoch_and_domain(desk_ablation):
    config, manifest, result = desk_ablation
    assert result.sizes == [25, 50, 100]
    assert result.epochs == config.training.epochs
    assert result.domains == [IN_DOMAIN, OUT_DOMAIN]
    assert len(result.rows) == 3 * 5 * 2
    assert manifest.counts('ablate')['reports'] == 30
    result.validate()

    for size in result.sizes:
        for epoch in range(1, result.epochs + 1):
            for domain in result.domains:
                report = result.report(size, epoch, domain)
                assert report.dataset_tag == domain
                assert set(report.aggregate) == set(METRIC_NAMES)
                assert all(0.0 <= value <= 1.0 for value in report.aggregate.values())


def test_test_sets_are_fixed_across_the_ablation(desk_ablation):
    _, _, result = desk_ablation
    for row in result.rows:
        assert row.report.fingerprint == result.fingerprints[row.domain]
    assert result.report(100, 1, OUT_DOMAIN).n_queries == 20
    assert result.report(25, 5, IN_DOMAIN).n_queries == 50
    assert set(result.baseline) == {IN_DOMAIN, OUT_DOMAIN}
    assert result.baseline[OUT_DOMAIN].label_source == 'native'
    assert result.baseline[IN_DOMAIN].label_source == 'mined'


def test_subsets_are_nested_and_losses_recorded(desk_ablation):
    _, _, result = desk_ablation
    assert set(result.subset_fingerprints) == {25, 50, 100}
    assert len(set(result.subset_fingerprints.values())) == 3
    assert all(len(result.losses[size]) == result.epochs for size in result.sizes)


def test_ablation_tables(desk_ablation):
    _, _, result = desk_ablation
    table = result.first_epoch_table()
    assert list(table.columns) == ['metric', 'domain', 'Base', '25', '50', '100']
    assert len(table) == 6
    assert list(table['metric']) == ['MAP', 'MAP', 'MRR', 'MRR', 'NDCG', 'NDCG']

    summary = result.improvement_summary()
    assert len(summary) == 3 * 2 * len(METRIC_NAMES)
    row = summary[(summary['size'] == 50) & (summary['domain'] == OUT_DOMAIN) & (summary['metric'] == 'ndcg')]
    values = [result.report(50, e, OUT_DOMAIN).aggregate['ndcg'] - result.baseline[OUT_DOMAIN].aggregate['ndcg']
              for e in range(1, result.epochs + 1)]
    assert row['mean_improvement'].iloc[0] == pytest.approx(sum(values) / len(values))


def test_ablation_result_round_trip(desk_ablation, tmp_path):
    _, _, result = desk_ablation
    path = tmp_path / 'ablation.json'
    result.save(str(path))
    assert AblationResult.load(str(path)) == result


def test_report_command_after_ablation(desk_ablation):
    config, _, _ = desk_ablation
    manifest = run_command(config, 'report', fmt='csv')
    artifacts = manifest.stage('report')['artifacts']
    assert sorted(artifacts) == sorted(os.path.join('report', name) for name in
                                       ['per_epoch.csv', 'improvement.csv', 'first_epoch_table.csv'])
    assert all(os.path.exists(os.path.join(config.output_dir, a)) for a in artifacts)


# ---------------------------------------------------------------------------
# Argument checks
# ---------------------------------------------------------------------------

def test_ablation_argument_checks(desk_run):
    config, _ = desk_run
    manifest = RunManifest.load(config.output_dir)
    runner = PipelineRunner(config, manifest)
    train_set = read_triplets_jsonl(os.path.join(config.output_dir, 'train.jsonl'))
    test_sets, _ = runner.test_sets()

    with pytest.raises(ArgumentError):
        run_ablation(config, train_set, {IN_DOMAIN: []}, runner.corpus(), sizes=[5])
    with pytest.raises(ArgumentError):
        run_ablation(config, train_set, test_sets, runner.corpus(), sizes=[5], epochs=0)
    with pytest.raises(ArgumentError):
        run_ablation(config, train_set, test_sets, runner.corpus(), sizes=[len(train_set) + 1], epochs=1)


def test_small_ablation_with_custom_factory(desk_run):
    config, _ = desk_run
    manifest = RunManifest.load(config.output_dir)
    runner = PipelineRunner(config, manifest)
    train_set = read_triplets_jsonl(os.path.join(config.output_dir, 'train.jsonl'))
    test_sets, label_sources = runner.test_sets()
    built = []

    def factory(cfg):
        built.append(cfg)
        return make_model(cfg)

    result = run_ablation(config, train_set, {OUT_DOMAIN: test_sets[OUT_DOMAIN]}, runner.corpus(), sizes=[4, 8],
                          epochs=2, label_sources=label_sources, model_factory=factory)
    assert len(built) == 3
    assert result.domains == [OUT_DOMAIN]
    assert len(result.rows) == 4


def test_missing_rows_fail_validation():
    result = AblationResult(sizes=[10], epochs=2, domains=[IN_DOMAIN])
    with pytest.raises(StateError):
        result.validate()
