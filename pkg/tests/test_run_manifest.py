import json

import pytest

from src.errors import ConfigurationError
from src.run_manifest import (LOCK_FILE, MANIFEST_FILE, STATUS_COMPLETE, STATUS_FAILED, STATUS_PENDING, RunLock,
                              RunManifest)


def test_stage_lifecycle_is_persisted(tmp_path):
    manifest = RunManifest(str(tmp_path), 'fp1')
    assert manifest.stage('ingest') == {'status': STATUS_PENDING}

    manifest.start_stage('ingest')
    (tmp_path / 'corpus.jsonl').write_text('', encoding='utf-8')
    manifest.complete_stage('ingest', ['corpus.jsonl'], {'documents': 3}, duration_seconds=1.23456, memory_mb=10.0)

    reloaded = RunManifest.load(str(tmp_path))
    assert reloaded.config_fingerprint == 'fp1'
    assert reloaded.stage('ingest')['status'] == STATUS_COMPLETE
    assert reloaded.stage('ingest')['duration_seconds'] == 1.235
    assert reloaded.counts('ingest') == {'documents': 3}
    assert reloaded.is_complete('ingest')


def test_missing_artifact_means_incomplete(tmp_path):
    manifest = RunManifest(str(tmp_path), 'fp1')
    manifest.complete_stage('index', ['index.idx'])
    assert not manifest.is_complete('index')


def test_failure_and_invalidation(tmp_path):
    manifest = RunManifest(str(tmp_path), 'fp1')
    manifest.start_stage('score')
    manifest.fail_stage('score', RuntimeError('backend down'))
    assert manifest.stage('score')['status'] == STATUS_FAILED
    assert manifest.stage('score')['error'] == 'RuntimeError: backend down'

    manifest.complete_stage('mine', [])
    manifest.invalidate(['mine', 'never-ran'])
    assert manifest.stage('mine')['status'] == STATUS_PENDING
    assert 'never-ran' not in manifest.to_dict()['stages']


def test_open_resumes_matching_fingerprint(tmp_path):
    first = RunManifest(str(tmp_path), 'fp1')
    first.complete_stage('ingest', [])
    resumed = RunManifest.open(str(tmp_path), 'fp1', resume=True)
    assert resumed.stage('ingest')['status'] == STATUS_COMPLETE

    fresh = RunManifest.open(str(tmp_path), 'fp1', resume=False)
    assert fresh.stage('ingest')['status'] == STATUS_PENDING


def test_open_rejects_a_different_configuration(tmp_path):
    RunManifest(str(tmp_path), 'a' * 64).save()
    with pytest.raises(ConfigurationError):
        RunManifest.open(str(tmp_path), 'b' * 64, resume=True)


def test_load_absent_and_corrupt(tmp_path):
    assert RunManifest.load(str(tmp_path)) is None
    (tmp_path / MANIFEST_FILE).write_text('{oops', encoding='utf-8')
    with pytest.raises(ConfigurationError):
        RunManifest.load(str(tmp_path))


def test_remote_calls_are_saved(tmp_path):
    manifest = RunManifest(str(tmp_path), 'fp1')
    manifest.set_remote_calls({'/v1/complete': {'requests': 2, 'failures': 0, 'retries': 1}})
    manifest.save()
    data = json.loads((tmp_path / MANIFEST_FILE).read_text(encoding='utf-8'))
    assert data['remote_calls']['/v1/complete']['retries'] == 1
    assert not (tmp_path / (MANIFEST_FILE + '.tmp')).exists()


def test_lock_is_exclusive_and_released(tmp_path):
    with RunLock(str(tmp_path)):
        assert (tmp_path / LOCK_FILE).exists()
        with pytest.raises(ConfigurationError):
            RunLock(str(tmp_path)).acquire()
    assert not (tmp_path / LOCK_FILE).exists()


def test_lock_is_released_on_error(tmp_path):
    with pytest.raises(RuntimeError):
        with RunLock(str(tmp_path)):
            raise RuntimeError('boom')
    assert not (tmp_path / LOCK_FILE).exists()
