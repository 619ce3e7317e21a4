import json
import math

import pytest
import requests

from src.api_monitor import RequestMonitor
from src.config import LLMBackendConfig, resolve_path
from src.errors import ArgumentError, CapabilityError, GatewayError, GenerationError, TemplateError
from src.llm_gateway import (MOCK_QUERY_FRAMES, DecodeParams, HTTPLLMBackend, LLMBackend, MockLLMBackend,
                             PromptTemplate, complete, create_llm_backend, label_logits, load_template,
                             mock_jaccard, render_prompt)
from src.relevance_miner import relevance_probability


def make_response(status: int, body) -> requests.models.Response:
    response = requests.models.Response()
    response.status_code = status
    response.reason = 'OK' if status < 400 else 'Error'
    response.url = 'http://llm.test'
    response._content = body.encode('utf-8') if isinstance(body, str) else json.dumps(body).encode('utf-8')
    return response


class FakeSession:
    """Stands in for requests.Session: replays canned responses or raises canned exceptions."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.headers = {}
        self.calls = []

    def post(self, url, json=None, timeout=None):
        self.calls.append({'url': url, 'json': json, 'timeout': timeout})
        outcome = self.responses.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def http_backend(responses, max_retries=2, token=None, max_in_flight=4):
    config = LLMBackendConfig(backend='http', base_url='http://llm.test/', max_retries=max_retries,
                              backoff_seconds=0.0, max_in_flight=max_in_flight)
    session = FakeSession(responses)
    monitor = RequestMonitor()
    return HTTPLLMBackend(config, token=token or '', session=session, monitor=monitor), session, monitor


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

def test_shipped_templates_load():
    generation = load_template(resolve_path('prompts/query_generation.json'))
    relevance = load_template(resolve_path('prompts/relevance_classification.json'))
    assert generation.required_bindings() == ['seed_document']
    assert len(generation.few_shot_examples) == 3
    assert relevance.required_bindings() == ['query', 'document']


def test_few_shot_examples_precede_the_bound_content():
    template = PromptTemplate('t', "Write a query.\n\n{few_shot}Passage: {seed_document}\nQuery:",
                              few_shot_examples=[('Doc one.', 'query one'), ('Doc two.', 'query two')])
    prompt = render_prompt(template, {'seed_document': 'The seed text.'})
    assert prompt.index('Doc one.') < prompt.index('Doc two.') < prompt.index('The seed text.')
    assert prompt.endswith("Passage: The seed text.\nQuery:")


def test_few_shot_block_is_prepended_without_slot():
    template = PromptTemplate('t', "Passage: {seed_document}\nQuery:", few_shot_examples=[('Ex.', 'q')])
    prompt = render_prompt(template, {'seed_document': 'Seed.'})
    assert prompt == "Passage: Ex.\nQuery: q\n\nPassage: Seed.\nQuery:"


def test_missing_binding_names_the_placeholder():
    template = PromptTemplate('t', "Query: {query}\nDocument: {document}")
    with pytest.raises(TemplateError) as info:
        render_prompt(template, {'query': 'q'})
    assert info.value.placeholder == 'document'


def test_unknown_placeholder_is_rejected():
    with pytest.raises(TemplateError):
        PromptTemplate('t', "Passage: {passage}")


def test_few_shot_slot_after_data_is_rejected():
    with pytest.raises(TemplateError):
        PromptTemplate('t', "Passage: {seed_document}\n{few_shot}")


def test_template_save_load_round_trip(tmp_path):
    template = PromptTemplate('t', "{few_shot}Passage: {seed_document}\nQuery:", [('d', 'q')])
    path = tmp_path / 'template.json'
    template.save(str(path))
    assert PromptTemplate.load(str(path)) == template


def test_load_missing_template(tmp_path):
    with pytest.raises(TemplateError):
        load_template(str(tmp_path / 'absent.json'))


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

def test_mock_completion_reformulates_the_seed_head():
    template = load_template(resolve_path('prompts/query_generation.json'))
    prompt = render_prompt(template, {'seed_document': "Asthma causes airway inflammation and wheezing."})
    assert complete(MockLLMBackend(), prompt) == "What is asthma causes airway?"


def test_mock_completion_is_deterministic_when_sampling():
    prompt = "Passage: Migraine brings throbbing headache.\nQuery:"
    params = DecodeParams(max_tokens=64, temperature=0.7, rng_seed=5)
    first = complete(MockLLMBackend(), prompt, params)
    assert first == complete(MockLLMBackend(), prompt, params)
    assert any(first == frame.format('migraine brings throbbing') for frame in MOCK_QUERY_FRAMES)


def test_mock_completion_respects_max_tokens():
    prompt = "Passage: Migraine brings throbbing headache.\nQuery:"
    assert complete(MockLLMBackend(), prompt, DecodeParams(max_tokens=2)) == "What is"


def test_empty_generation_is_an_error():
    with pytest.raises(GenerationError):
        complete(MockLLMBackend(), "Passage: the of and\nQuery:")


def test_empty_prompt_is_an_argument_error():
    with pytest.raises(ArgumentError):
        complete(MockLLMBackend(), "   ")


def test_mock_label_logits_follow_word_overlap():
    backend = MockLLMBackend(alpha=10.0)
    prompt = "Query: What is kidney stone pain?\nDocument: Kidney stone pain radiates.\nRelevant:"
    logits = label_logits(backend, prompt)
    jaccard = mock_jaccard("What is kidney stone pain?", "Kidney stone pain radiates.")
    assert jaccard == pytest.approx(0.75)
    assert logits['Yes'] == pytest.approx(10.0 * (2 * jaccard - 1))
    assert logits['No'] == 0.0


def test_half_overlap_gives_even_odds():
    prompt = "Query: alpha beta\nDocument: alpha gamma beta delta\nRelevant:"
    logits = label_logits(MockLLMBackend(), prompt)
    assert relevance_probability(logits['Yes'], logits['No']) == 0.5


def test_custom_labels_are_returned():
    prompt = "Query: a b\nDocument: a b\nRelevant:"
    logits = label_logits(MockLLMBackend(), prompt, labels=('Oui', 'Non'))
    assert logits.labels() == ['Oui', 'Non']


def test_backend_without_label_logits():
    with pytest.raises(CapabilityError):
        label_logits(MockLLMBackend(supports_label_logits=False), "Query: a\nDocument: b\nRelevant:")


@pytest.mark.parametrize('labels', [('Yes', 'Yes'), ('Yes',), ('Yes', 'No', 'Maybe'), ('Yes', '')])
def test_label_validation(labels):
    with pytest.raises(ArgumentError):
        label_logits(MockLLMBackend(), "Query: a\nDocument: b\nRelevant:", labels=labels)


class ExtraLabelBackend(LLMBackend):
    backend_id = 'extra'
    supports_label_logits = True

    def label_logits(self, prompt, labels):
        return {'Yes': 1.0, 'No': 0.0, 'Maybe': 0.5}


class NaNBackend(LLMBackend):
    backend_id = 'nan'
    supports_label_logits = True

    def label_logits(self, prompt, labels):
        return {labels[0]: math.nan, labels[1]: 0.0}


def test_extra_labels_are_a_capability_error():
    with pytest.raises(CapabilityError):
        label_logits(ExtraLabelBackend(), "prompt")


def test_non_finite_logits_are_rejected():
    with pytest.raises(GatewayError):
        label_logits(NaNBackend(), "prompt")


def test_create_backend_from_config():
    assert isinstance(create_llm_backend(LLMBackendConfig(backend='mock')), MockLLMBackend)
    with pytest.raises(ArgumentError):
        create_llm_backend(LLMBackendConfig(backend='smoke-signals'))


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------

def test_http_completion_success():
    backend, session, monitor = http_backend([make_response(200, {'text': 'What is gout?'})])
    assert complete(backend, "Passage: x\nQuery:", DecodeParams(max_tokens=16, temperature=0.0, rng_seed=3)) \
        == 'What is gout?'
    call = session.calls[0]
    assert call['url'] == 'http://llm.test/v1/complete'
    assert call['json'] == {'prompt': "Passage: x\nQuery:", 'max_tokens': 16, 'temperature': 0.0, 'seed': 3}
    assert monitor.snapshot()['/v1/complete']['requests'] == 1


def test_http_retries_server_errors_then_succeeds():
    backend, session, monitor = http_backend([make_response(503, {}), make_response(200, {'text': 'ok'})])
    assert complete(backend, "prompt") == 'ok'
    assert len(session.calls) == 2
    stats = monitor.snapshot()['/v1/complete']
    assert stats['retries'] == 1
    assert stats['failures'] == 0


def test_http_gives_up_after_max_retries():
    failures = [requests.exceptions.ConnectionError('refused')] * 3
    backend, session, monitor = http_backend(failures, max_retries=2)
    with pytest.raises(GatewayError) as info:
        complete(backend, "prompt")
    assert info.value.retryable
    assert len(session.calls) == 3
    assert monitor.snapshot()['/v1/complete']['failures'] == 1


def test_backoff_does_not_hold_the_in_flight_slot(monkeypatch):
    failures = [requests.exceptions.ConnectionError('refused')] * 2
    backend, session, _ = http_backend(failures + [make_response(200, {'text': 'ok'})], max_in_flight=1)
    slot_free = []

    def sleep(seconds):
        acquired = backend._in_flight.acquire(blocking=False)
        slot_free.append(acquired)
        if acquired:
            backend._in_flight.release()

    monkeypatch.setattr('src.llm_gateway.time.sleep', sleep)
    assert complete(backend, "prompt") == 'ok'
    assert slot_free == [True, True]
    assert len(session.calls) == 3


def test_failed_requests_give_back_every_slot():
    backend, _, _ = http_backend([requests.exceptions.ConnectionError('refused')] * 3, max_in_flight=2)
    with pytest.raises(GatewayError):
        complete(backend, "prompt")
    assert all(backend._in_flight.acquire(blocking=False) for _ in range(2))
    assert not backend._in_flight.acquire(blocking=False)


def test_http_client_errors_are_not_retried():
    backend, session, _ = http_backend([make_response(400, {'error': 'bad'})])
    with pytest.raises(GatewayError) as info:
        complete(backend, "prompt")
    assert not info.value.retryable
    assert info.value.status_code == 400
    assert len(session.calls) == 1


def test_http_non_json_body():
    backend, _, _ = http_backend([make_response(200, '<html>oops</html>')])
    with pytest.raises(GatewayError):
        complete(backend, "prompt")


def test_http_label_logits_success():
    backend, session, _ = http_backend([make_response(200, {'logits': {'Yes': 2.5, 'No': -1.0}})])
    logits = label_logits(backend, "Query: q\nDocument: d\nRelevant:")
    assert logits['Yes'] == 2.5 and logits['No'] == -1.0
    assert session.calls[0]['json']['labels'] == ['Yes', 'No']


@pytest.mark.parametrize('response', [make_response(404, {}), make_response(501, {}),
                                      make_response(200, {'text': 'Yes'})])
def test_http_label_logits_unsupported(response):
    backend, _, _ = http_backend([response])
    with pytest.raises(CapabilityError):
        label_logits(backend, "Query: q\nDocument: d\nRelevant:")


def test_http_bearer_token():
    backend, session, _ = http_backend([], token='secret')
    assert session.headers['Authorization'] == 'Bearer secret'
