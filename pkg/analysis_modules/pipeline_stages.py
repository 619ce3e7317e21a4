"""
Pipeline stages persisted under the run's output directory.

Each stage reads its inputs from earlier stages' artifacts and writes its own,
so any stage can be resumed or rerun on its own.
"""

import json
import logging
import os
import time
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from analysis_modules.ablation_study import AblationResult, make_model, run_ablation, split_dataset
from analysis_modules.reporting import emit_report
from src.api_monitor import request_monitor
from src.candidate_retriever import (DenseIndex, build_index, create_embedding_backend, read_candidates_jsonl,
                                     retrieve_batch, write_candidates_jsonl)
from src.config import RunConfig, resolve_path
from src.corpus_store import Corpus, load_corpus, sample_seed_documents, write_corpus_jsonl
from src.cross_encoder_trainer import (OptimizerState, TrainConfig, arrays_path, load_checkpoint, save_checkpoint,
                                        train)
from src.errors import ArgumentError, CapabilityError, StageError, StateError
from src.llm_gateway import DecodeParams, create_llm_backend, load_template
from src.performance_optimizer import PerformanceOptimizer, performance_optimizer
from src.query_generator import (generate_query_batch, read_queries_jsonl, write_failures_jsonl,
                                 write_queries_jsonl)
from src.ranking_evaluator import (IN_DOMAIN, OUT_DOMAIN, EvalQuery, build_in_domain_eval_set, evaluate_model,
                                   load_eval_set_jsonl, rescore_eval_set)
from src.relevance_miner import (TrainingTriplet, TripletRejection, assemble_triplet, read_judgments_jsonl,
                                 read_triplets_jsonl, score_candidates, write_judgments_jsonl,
                                 write_rejections_jsonl, write_triplets_jsonl)
from src.run_manifest import RunLock, RunManifest

logger = logging.getLogger(__name__)

STAGES = ('ingest', 'sample', 'genqueries', 'index', 'retrieve', 'score', 'mine', 'split')
POST_STAGES = ('train', 'eval', 'ablate', 'report')

STAGE_INPUTS = {
    'ingest': (),
    'sample': ('ingest',),
    'genqueries': ('sample',),
    'index': ('ingest', 'sample'),
    'retrieve': ('genqueries', 'index'),
    'score': ('retrieve',),
    'mine': ('score',),
    'split': ('mine',),
    'train': ('split',),
    'eval': ('train',),
    'ablate': ('split',),
    'report': ('ablate',),
}

ARTIFACTS = {
    'ingest': ['corpus.jsonl'],
    'sample': ['seeds.json'],
    'genqueries': ['queries.jsonl', 'query_failures.jsonl'],
    'index': ['index.json'],
    'retrieve': ['candidates.jsonl'],
    'score': ['judgments.jsonl'],
    'mine': ['triplets.jsonl', 'rejections.jsonl'],
    'split': ['train.jsonl', 'test.jsonl'],
    'train': ['checkpoint.ckpt', 'history.jsonl'],
    'ablate': ['ablation.json'],
}

# CLI subcommand -> stages it runs
COMMAND_STAGES = {
    'ingest': ('ingest',),
    'genqueries': ('sample', 'genqueries'),
    'index': ('index',),
    'retrieve': ('retrieve',),
    'mine': ('score', 'mine'),
    'split': ('split',),
    'train': ('train',),
    'eval': ('eval',),
    'ablate': ('ablate',),
    'report': ('report',),
}

RESOLVED_CONFIG_FILE = 'resolved_config.json'
DUPLICATE_QUERY = 'duplicate_query'


def downstream_stages(name: str) -> List[str]:
    """Every stage that reads, directly or transitively, what `name` writes."""
    result: List[str] = []
    frontier = [name]
    while frontier:
        current = frontier.pop()
        for stage, inputs in STAGE_INPUTS.items():
            if current in inputs and stage not in result:
                result.append(stage)
                frontier.append(stage)
    order = STAGES + POST_STAGES
    return sorted(result, key=order.index)


class PipelineRunner:
    """Runs stages against one output directory, recording each in the run manifest."""

    def __init__(self, config: RunConfig, manifest: RunManifest, backends: Optional[Dict[str, Any]] = None,
                 progress: bool = False):
        self.config = config
        self.manifest = manifest
        self.output_dir = manifest.output_dir
        self.progress = progress
        self._backends = dict(backends or {})
        self._corpus: Optional[Corpus] = None
        self._out_domain: Optional[Tuple[List[EvalQuery], str]] = None

    # -- lazily created collaborators ---------------------------------------

    @property
    def llm_backend(self):
        if 'llm' not in self._backends:
            self._backends['llm'] = create_llm_backend(self.config.llm)
        return self._backends['llm']

    @property
    def embedding_backend(self):
        if 'embedding' not in self._backends:
            self._backends['embedding'] = create_embedding_backend(self.config.embedding)
        return self._backends['embedding']

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def require(self, name: str) -> str:
        path = self.path(name)
        if not os.path.exists(path):
            raise StateError(f"Missing artifact {path}; run the stage that produces it first")
        return path

    def corpus(self) -> Corpus:
        if self._corpus is None:
            p = self.config.pipeline
            self._corpus, _ = load_corpus(self.require('corpus.jsonl'), max_tokens=p.max_tokens,
                                          tokenizer_spec=p.tokenizer)
        return self._corpus

    def seed_doc_ids(self) -> List[str]:
        with open(self.require('seeds.json'), 'r', encoding='utf-8') as f:
            return json.load(f)['doc_ids']

    # -- stage execution ------------------------------------------------------

    def run_stage(self, name: str, resume: bool = False, **options) -> Dict[str, Any]:
        """
        Execute one stage and record it in the manifest.

        Args:
            name: Stage name
            resume: Skip the stage when the manifest already has it complete with its artifacts on disk
            **options: Stage-specific options (sizes, epochs, fmt, checkpoint_path)

        Returns:
            The stage's manifest record

        Raises:
            StageError: wraps whatever the stage raised, naming the stage
        """
        if resume and self.manifest.is_complete(name):
            logger.info(f"Stage '{name}' already complete, skipping")
            return self.manifest.stage(name)

        handler: Callable[..., Tuple[List[str], Dict[str, Any]]] = getattr(self, f"stage_{name}")
        logger.info(f"Stage '{name}' starting")
        self.manifest.start_stage(name)
        started = time.perf_counter()
        try:
            artifacts, counts = handler(**options)
        except Exception as e:
            duration = time.perf_counter() - started
            logger.error(f"Stage '{name}' failed after {duration:.2f}s: {type(e).__name__}: {e}")
            self.manifest.fail_stage(name, e, duration_seconds=duration)
            raise StageError(name, e) from e

        duration = time.perf_counter() - started
        memory_mb = performance_optimizer.get_performance_metrics()['memory_mb']
        self.manifest.complete_stage(name, artifacts, counts, duration_seconds=duration, memory_mb=memory_mb)
        stale = [stage for stage in downstream_stages(name) if self.manifest.stage(stage).get('status') == 'complete']
        if stale:
            logger.info(f"Stage '{name}' reran; invalidating {', '.join(stale)}")
            self.manifest.invalidate(stale)
        logger.info(f"Stage '{name}' complete in {duration:.2f}s: {counts}")
        return self.manifest.stage(name)

    def stage_ingest(self) -> Tuple[List[str], Dict[str, Any]]:
        p = self.config.pipeline
        corpus_path = resolve_path(self.config.corpus_path)
        corpus, skipped = load_corpus(corpus_path, max_tokens=p.max_tokens, tokenizer_spec=p.tokenizer)
        if len(corpus) == 0:
            raise ArgumentError(f"No document of {corpus_path} survived ingestion")
        write_corpus_jsonl(corpus, self.path('corpus.jsonl'))
        self._corpus = corpus
        return ARTIFACTS['ingest'], {'documents': len(corpus), 'skipped_too_long': skipped,
                                     'rejected_empty': corpus.empty_rejected}

    def stage_sample(self) -> Tuple[List[str], Dict[str, Any]]:
        p = self.config.pipeline
        seeds = sample_seed_documents(self.corpus(), p.n_seeds, p.rng_seed)
        with open(self.path('seeds.json'), 'w', encoding='utf-8', newline='\n') as f:
            json.dump({'n_seeds': p.n_seeds, 'rng_seed': p.rng_seed, 'doc_ids': [d.doc_id for d in seeds]}, f,
                      indent=2)
            f.write('\n')
        return ARTIFACTS['sample'], {'seeds': len(seeds)}

    def stage_genqueries(self) -> Tuple[List[str], Dict[str, Any]]:
        corpus = self.corpus()
        seeds = [corpus.get(doc_id) for doc_id in self.seed_doc_ids()]
        if any(seed is None for seed in seeds):
            raise StateError("seeds.json names documents missing from corpus.jsonl")

        llm, p = self.config.llm, self.config.pipeline
        template = load_template(resolve_path(self.config.generation_template_path))
        decode_params = DecodeParams(max_tokens=llm.max_tokens, temperature=llm.temperature, rng_seed=llm.rng_seed)
        result = generate_query_batch(self.llm_backend, template, seeds, decode_params, dedupe=p.dedupe,
                                      max_query_tokens=p.max_query_tokens, max_workers=llm.max_in_flight,
                                      progress=self.progress)

        write_queries_jsonl(result.queries, self.path('queries.jsonl'))
        write_failures_jsonl(result.failures, self.path('query_failures.jsonl'))
        return ARTIFACTS['genqueries'], {'seeds': len(seeds), 'generated': len(result.queries),
                                         'generation_failures': len(result.failures),
                                         DUPLICATE_QUERY: len(result.duplicates)}

    def stage_index(self) -> Tuple[List[str], Dict[str, Any]]:
        corpus = self.corpus()
        if self.config.pipeline.search_pool == 'seeds':
            documents = [corpus.get(doc_id) for doc_id in self.seed_doc_ids()]
        else:
            documents = list(corpus)
        index = build_index(self.embedding_backend, documents, max_workers=self.config.embedding.max_workers,
                            progress=self.progress)
        index.save(self.path('index.json'))
        return ARTIFACTS['index'], {'documents': len(index), 'dim': index.dim, 'backend_id': index.backend_id}

    def stage_retrieve(self) -> Tuple[List[str], Dict[str, Any]]:
        queries = read_queries_jsonl(self.require('queries.jsonl'))
        index = DenseIndex.load(self.require('index.json'))
        candidate_sets = retrieve_batch(index, self.embedding_backend, queries, k=self.config.pipeline.k_candidates,
                                        max_workers=self.config.embedding.max_workers, progress=self.progress)
        write_candidates_jsonl(candidate_sets, self.path('candidates.jsonl'))
        return ARTIFACTS['retrieve'], {'queries': len(candidate_sets),
                                       'candidates': sum(len(c) for c in candidate_sets)}

    def stage_score(self) -> Tuple[List[str], Dict[str, Any]]:
        backend = self.llm_backend
        if not backend.supports_label_logits:
            raise CapabilityError(f"LLM backend '{backend.backend_id}' cannot report label logits")

        corpus = self.corpus()
        queries = {q.query_id: q for q in read_queries_jsonl(self.require('queries.jsonl'))}
        candidate_sets = read_candidates_jsonl(self.require('candidates.jsonl'))
        template = load_template(resolve_path(self.config.relevance_template_path))
        labels = tuple(self.config.llm.labels)

        optimizer = PerformanceOptimizer(progress=self.progress)
        outcomes = optimizer.parallel_map(
            lambda c: score_candidates(backend, template, queries[c.query_id], c, corpus, labels,
                                       max_workers=self.config.llm.max_in_flight),
            candidate_sets, max_workers=1, desc="Scoring candidates")

        judgments_by_query = {}
        for candidates, outcome in zip(candidate_sets, outcomes):
            if not outcome['success']:
                raise outcome['error']
            judgments_by_query[candidates.query_id] = outcome['result']
        write_judgments_jsonl(judgments_by_query, self.path('judgments.jsonl'))
        return ARTIFACTS['score'], {'queries': len(judgments_by_query),
                                    'judgments': sum(len(j) for j in judgments_by_query.values())}

    def stage_mine(self) -> Tuple[List[str], Dict[str, Any]]:
        p = self.config.pipeline
        queries = read_queries_jsonl(self.require('queries.jsonl'))
        judgments_by_query = read_judgments_jsonl(self.require('judgments.jsonl'))

        triplets: List[TrainingTriplet] = []
        rejections: List[TripletRejection] = []
        for query in queries:
            outcome = assemble_triplet(query, judgments_by_query.get(query.query_id, []), t=p.threshold,
                                       min_negatives=p.min_negatives, min_positive_score=p.min_positive_score)
            if isinstance(outcome, TripletRejection):
                logger.debug(f"Rejected query '{query.query_id}': {outcome.reason}")
                rejections.append(outcome)
            else:
                triplets.append(outcome)

        write_triplets_jsonl(triplets, self.path('triplets.jsonl'))
        write_rejections_jsonl(rejections, self.path('rejections.jsonl'))

        generation = self.manifest.counts('genqueries')
        rejected: Dict[str, int] = {}
        for rejection in rejections:
            rejected[rejection.reason] = rejected.get(rejection.reason, 0) + 1
        if generation.get(DUPLICATE_QUERY):
            rejected[DUPLICATE_QUERY] = generation[DUPLICATE_QUERY]
        if rejections:
            logger.warning(f"Rejected {len(rejections)} of {len(queries)} queries: {rejected}")

        counts = {
            'n_seeds': generation.get('seeds', self.config.pipeline.n_seeds),
            'accepted': len(triplets),
            'rejected': dict(sorted(rejected.items())),
            'generation_failures': generation.get('generation_failures', 0),
        }
        return ARTIFACTS['mine'], counts

    def stage_split(self) -> Tuple[List[str], Dict[str, Any]]:
        triplets = read_triplets_jsonl(self.require('triplets.jsonl'))
        train_set, test_set = split_dataset(triplets, self.config.evaluation.test_size,
                                            self.config.evaluation.rng_seed)
        write_triplets_jsonl(train_set, self.path('train.jsonl'))
        write_triplets_jsonl(test_set, self.path('test.jsonl'))
        return ARTIFACTS['split'], {'train': len(train_set), 'test': len(test_set)}

    # -- training and evaluation ---------------------------------------------

    def test_sets(self) -> Tuple[Dict[str, List[EvalQuery]], Dict[str, str]]:
        """In-domain pools from test.jsonl, plus the configured out-domain file."""
        test_sets: Dict[str, List[EvalQuery]] = {}
        label_sources: Dict[str, str] = {}

        test_triplets = read_triplets_jsonl(self.require('test.jsonl'))
        if test_triplets:
            test_sets[IN_DOMAIN] = build_in_domain_eval_set(test_triplets, self.corpus(), self.config.pipeline.threshold)
            label_sources[IN_DOMAIN] = 'mined'
        else:
            logger.warning("test.jsonl is empty, no in-domain evaluation")

        if self.config.evaluation.out_domain_path:
            test_sets[OUT_DOMAIN], label_sources[OUT_DOMAIN] = self.out_domain_set()
        return test_sets, label_sources

    def out_domain_set(self) -> Tuple[List[EvalQuery], str]:
        """
        The configured out-domain pools and their label source.

        With evaluation.rescore_out_domain the pool labels are replaced by the LLM
        judge's verdicts at the pipeline threshold; the result is cached per runner.
        """
        if self._out_domain is None:
            ev = self.config.evaluation
            eval_set, label_source = load_eval_set_jsonl(resolve_path(ev.out_domain_path))
            if ev.rescore_out_domain:
                backend = self.llm_backend
                if not backend.supports_label_logits:
                    raise CapabilityError(f"LLM backend '{backend.backend_id}' cannot report label logits")
                template = load_template(resolve_path(self.config.relevance_template_path))
                logger.info(f"Rescoring {len(eval_set)} out-domain queries with the LLM judge")
                eval_set = rescore_eval_set(eval_set, backend, template, self.config.pipeline.threshold,
                                            labels=tuple(self.config.llm.labels))
                label_source = 'rescored'
            self._out_domain = (eval_set, label_source)
        return self._out_domain

    def _evaluate_all(self, model, test_sets: Dict[str, List[EvalQuery]],
                      label_sources: Dict[str, str]) -> Dict[str, Any]:
        ev = self.config.evaluation
        return {tag: evaluate_model(model, eval_set, k=ev.k, max_pool=ev.max_pool, dataset_tag=tag,
                                    label_source=label_sources.get(tag))
                for tag, eval_set in test_sets.items()}

    def stage_train(self) -> Tuple[List[str], Dict[str, Any]]:
        train_set = read_triplets_jsonl(self.require('train.jsonl'))
        test_sets, label_sources = self.test_sets()
        eval_hook = None
        if test_sets:
            eval_hook = lambda snapshot, epoch: self._evaluate_all(snapshot, test_sets, label_sources)

        model = make_model(self.config)
        optimizer_state = OptimizerState()
        model, history = train(model, train_set, self.corpus(),
                               TrainConfig.from_params(self.config.training, self.config.pipeline.m),
                               eval_hook=eval_hook, optimizer_state=optimizer_state)

        save_checkpoint(model, self.path('checkpoint.ckpt'), optimizer_state,
                        config_fingerprint=self.manifest.config_fingerprint)
        history.write_jsonl(self.path('history.jsonl'))
        artifacts = list(ARTIFACTS['train'])
        if os.path.exists(arrays_path(self.path('checkpoint.ckpt'))):
            artifacts.append(os.path.basename(arrays_path('checkpoint.ckpt')))
        losses = history.losses
        return artifacts, {'train_triplets': len(train_set), 'epochs': len(history),
                                    'first_loss': losses[0] if losses else None,
                                    'final_loss': losses[-1] if losses else None,
                                    'truncated_pairs': model.stats['truncated_pairs']}

    def stage_eval(self, checkpoint_path: Optional[str] = None) -> Tuple[List[str], Dict[str, Any]]:
        checkpoint_path = checkpoint_path or self.require('checkpoint.ckpt')
        model, _, metadata = load_checkpoint(checkpoint_path)
        if metadata.get('config_fingerprint') not in (None, self.manifest.config_fingerprint):
            logger.warning(f"Checkpoint {checkpoint_path} was trained under a different configuration")

        test_sets, label_sources = self.test_sets()
        if not test_sets:
            raise ArgumentError("No evaluation set available (empty test split and no out_domain_path)")

        artifacts, counts = [], {}
        for tag, report in self._evaluate_all(model, test_sets, label_sources).items():
            name = f"eval_{tag}.json"
            report.save(self.path(name))
            artifacts.append(name)
            counts[tag] = report.aggregate
        return artifacts, counts

    def stage_ablate(self, sizes: Optional[Sequence[int]] = None,
                     epochs: Optional[int] = None) -> Tuple[List[str], Dict[str, Any]]:
        train_set = read_triplets_jsonl(self.require('train.jsonl'))
        test_sets, label_sources = self.test_sets()
        result = run_ablation(self.config, train_set, test_sets, self.corpus(), sizes=sizes, epochs=epochs,
                              label_sources=label_sources)
        result.save(self.path('ablation.json'))
        return ARTIFACTS['ablate'], {'sizes': result.sizes, 'epochs': result.epochs, 'domains': result.domains,
                                     'reports': len(result.rows)}

    def stage_report(self, fmt: str = 'all') -> Tuple[List[str], Dict[str, Any]]:
        result = AblationResult.load(self.require('ablation.json'))
        written = emit_report(result, self.path('report'), fmt)
        artifacts = [os.path.relpath(path, self.output_dir) for path in written]
        return artifacts, {'files': len(artifacts), 'format': fmt}


@contextmanager
def open_run(config: RunConfig, resume: bool = False, fresh: bool = False,
             check_paths: bool = True) -> Iterator[RunManifest]:
    """
    Validate the config, lock the output directory and open its manifest.

    Args:
        config: Run configuration
        resume: Reuse the existing manifest (its fingerprint must match)
        fresh: Start a new manifest even when one exists
        check_paths: Require the configured input paths to exist
    """
    config.validate(check_paths=check_paths)
    output_dir = config.output_dir
    fingerprint = config.fingerprint()

    with RunLock(output_dir):
        manifest = RunManifest.open(output_dir, fingerprint, resume=resume or not fresh)
        # remote_calls in the manifest cover this invocation only
        request_monitor.clear_history()
        config.save_config(os.path.join(output_dir, RESOLVED_CONFIG_FILE))
        try:
            yield manifest
        finally:
            manifest.set_remote_calls(request_monitor.snapshot())
            manifest.save()


def run_stages(config: RunConfig, stages: Sequence[str], backends: Optional[Dict[str, Any]] = None,
               resume: bool = False, fresh: bool = False, progress: bool = False,
               check_paths: bool = True, **options) -> RunManifest:
    """Run the named stages in order under one lock; options go to every stage that accepts them."""
    with open_run(config, resume=resume, fresh=fresh, check_paths=check_paths) as manifest:
        runner = PipelineRunner(config, manifest, backends=backends, progress=progress)
        for name in stages:
            stage_options = {key: value for key, value in options.items() if key in _STAGE_OPTIONS.get(name, ())}
            runner.run_stage(name, resume=resume, **stage_options)
    return manifest


_STAGE_OPTIONS = {
    'eval': ('checkpoint_path',),
    'ablate': ('sizes', 'epochs'),
    'report': ('fmt',),
}


def run_pipeline(config: RunConfig, backends: Optional[Dict[str, Any]] = None, resume: bool = False,
                 until: Optional[str] = None, progress: bool = False) -> RunManifest:
    """
    Run ingest through split, persisting every stage's artifacts and the manifest.

    Args:
        config: Run configuration
        backends: Injected backends by role ('llm', 'embedding'); missing roles come from the config
        resume: Skip stages already complete in the manifest with their artifacts present
        until: Last stage to run (default 'split')
        progress: Show progress bars

    Returns:
        The run manifest

    Raises:
        StageError: a stage failed; earlier artifacts stay on disk for a resume
    """
    if until is not None and until not in STAGES:
        raise ArgumentError(f"Unknown stage '{until}', expected one of {', '.join(STAGES)}")
    stages = STAGES[:STAGES.index(until) + 1] if until else STAGES

    manifest = run_stages(config, stages, backends=backends, resume=resume, fresh=not resume, progress=progress)
    mined = manifest.counts('mine')
    if mined:
        logger.info(f"Pipeline finished: {mined['accepted']} triplets accepted of {mined['n_seeds']} seeds, "
                    f"rejected {mined['rejected']}, {mined['generation_failures']} generation failures")
    return manifest


def run_command(config: RunConfig, command: str, backends: Optional[Dict[str, Any]] = None,
                resume: bool = False, progress: bool = False, **options) -> RunManifest:
    """Run the stages behind one CLI subcommand."""
    if command == 'run':
        return run_pipeline(config, backends=backends, resume=resume, until=options.get('until'), progress=progress)
    if command not in COMMAND_STAGES:
        raise ArgumentError(f"Unknown command '{command}'")
    check_paths = command not in POST_STAGES
    return run_stages(config, COMMAND_STAGES[command], backends=backends, resume=resume, progress=progress,
                      check_paths=check_paths, **options)

