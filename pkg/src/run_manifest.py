import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, List, Optional

from src.errors import ConfigurationError

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
LOCK_FILE = 'run.lock'

STATUS_PENDING = 'pending'
STATUS_RUNNING = 'running'
STATUS_COMPLETE = 'complete'
STATUS_FAILED = 'failed'


class RunManifest:
    """Gestionnaire de l'état persistant d'un run (étapes, artefacts, compteurs)."""

    def __init__(self, output_dir: str, config_fingerprint: Optional[str] = None):
        self.output_dir = output_dir
        self.path = os.path.join(output_dir, MANIFEST_FILE)
        self.data: Dict[str, Any] = {
            'config_fingerprint': config_fingerprint,
            'created_at': datetime.now().isoformat(),
            'updated_at': None,
            'stages': {},
            'remote_calls': {},
        }

    @classmethod
    def load(cls, output_dir: str) -> Optional['RunManifest']:
        """Charge le manifeste existant, ou None s'il n'existe pas."""
        manifest = cls(output_dir)
        if not os.path.exists(manifest.path):
            return None
        try:
            with open(manifest.path, 'r', encoding='utf-8') as f:
                manifest.data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Corrupt manifest {manifest.path}: {e}") from e
        return manifest

    @classmethod
    def open(cls, output_dir: str, config_fingerprint: str, resume: bool) -> 'RunManifest':
        """Reuse the manifest on resume (fingerprints must match), otherwise start fresh."""
        existing = cls.load(output_dir) if resume else None
        if existing is None:
            return cls(output_dir, config_fingerprint)
        if existing.data.get('config_fingerprint') not in (None, config_fingerprint):
            raise ConfigurationError(
                f"Cannot resume {output_dir}: it was produced with a different configuration "
                f"({existing.data['config_fingerprint'][:12]} vs {config_fingerprint[:12]})")
        existing.data['config_fingerprint'] = config_fingerprint
        return existing

    @property
    def config_fingerprint(self) -> Optional[str]:
        return self.data.get('config_fingerprint')

    def stage(self, name: str) -> Dict[str, Any]:
        return self.data['stages'].get(name, {'status': STATUS_PENDING})

    def is_complete(self, name: str) -> bool:
        """Stage recorded complete and every artifact still on disk."""
        record = self.stage(name)
        if record.get('status') != STATUS_COMPLETE:
            return False
        return all(os.path.exists(os.path.join(self.output_dir, artifact)) for artifact in record.get('artifacts', []))

    def start_stage(self, name: str):
        self.data['stages'][name] = {
            'status': STATUS_RUNNING,
            'started_at': datetime.now().isoformat(),
            'artifacts': [],
            'counts': {},
        }
        self.save()

    def complete_stage(self, name: str, artifacts: List[str], counts: Optional[Dict[str, Any]] = None,
                       duration_seconds: float = 0.0, memory_mb: float = 0.0):
        record = self.data['stages'].setdefault(name, {})
        record.update({
            'status': STATUS_COMPLETE,
            'finished_at': datetime.now().isoformat(),
            'duration_seconds': round(duration_seconds, 3),
            'memory_mb': memory_mb,
            'artifacts': list(artifacts),
            'counts': counts or {},
        })
        self.save()

    def fail_stage(self, name: str, error: BaseException, duration_seconds: float = 0.0):
        record = self.data['stages'].setdefault(name, {})
        record.update({
            'status': STATUS_FAILED,
            'finished_at': datetime.now().isoformat(),
            'duration_seconds': round(duration_seconds, 3),
            'error': f"{type(error).__name__}: {error}",
        })
        self.save()

    def invalidate(self, names: List[str]):
        """Marque des étapes comme à refaire."""
        for name in names:
            if name in self.data['stages']:
                self.data['stages'][name]['status'] = STATUS_PENDING
        self.save()

    def counts(self, name: str) -> Dict[str, Any]:
        return self.stage(name).get('counts', {})

    def set_remote_calls(self, stats: Dict[str, Dict[str, float]]):
        self.data['remote_calls'] = stats

    def save(self):
        """Sauvegarde atomique sur disque."""
        os.makedirs(self.output_dir, exist_ok=True)
        self.data['updated_at'] = datetime.now().isoformat()
        tmp_path = self.path + '.tmp'
        with open(tmp_path, 'w', encoding='utf-8') as f:
            json.dump(self.data, f, indent=2, ensure_ascii=False)
        os.replace(tmp_path, self.path)

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(self.data))


class RunLock:
    """Exclusive ownership of an output directory for the duration of a command."""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.path = os.path.join(output_dir, LOCK_FILE)
        self._held = False

    def acquire(self):
        os.makedirs(self.output_dir, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise ConfigurationError(f"Output directory {self.output_dir} is locked by another run "
                                     f"(remove {self.path} if that run is gone)") from e
        with os.fdopen(fd, 'w') as f:
            f.write(f"{os.getpid()}\n")
        self._held = True
        logger.debug(f"Acquired {self.path}")

    def release(self):
        if self._held:
            try:
                os.remove(self.path)
            except FileNotFoundError:
                pass
            self._held = False

    def __enter__(self) -> 'RunLock':
        self.acquire()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release()
        return False
