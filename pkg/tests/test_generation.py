import logging

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ward.corpus import DischargeRecord
from ward.errors import ConfigurationError, GenerationError, ServerError, StagedFailureError, TransportError
from ward.generation import (
    RULES,
    GenerationConfig,
    PipelineArtifacts,
    generate_section,
    run_corpus,
    run_pipeline,
    validate_and_repair,
)
from ward.promptkit import render_prompt
from ward.retrieval import HashingEmbedder, TaskContextSpec, WordCountTarget, build_index
from ward.stub import StubOptions, StubServer
from ward.transport import post_json

CANNED_BHC = "Brief hospital course:\n# Introduction\nPatient did well."


def bundle(task="BHC", words="420"):
    return render_prompt(task, "Chief Complaint:\nchest pain", WordCountTarget(words, "fixed"))


def cfg(url, **kw):
    return GenerationConfig(base_url=url, backoff_s=0.01, **kw)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        GenerationConfig(base_url="localhost:11434")
    with pytest.raises(ConfigurationError):
        GenerationConfig(timeout_s=0)
    assert GenerationConfig().model_id == "llama3:8b-instruct-q8_0"


def test_canned_bhc_and_exact_body():
    with StubServer(options=StubOptions(canned={"BHC": CANNED_BHC})) as s:
        b = bundle()
        r = generate_section(cfg(s.url), b)
        assert r.text.startswith("Brief hospital course:")
        assert r.latency_s >= 0 and r.prompt_chars == len(b.rendered) and not r.repaired
        path, body = s.requests[0]
        assert path == "/api/generate"
        assert body == {
            "model": "llama3:8b-instruct-q8_0",
            "prompt": b.rendered,
            "stream": False,
            "options": {"temperature": 0.0, "seed": 0},
        }


def test_empty_completion_is_generation_error():
    with StubServer(options=StubOptions(empty=True)) as s:
        with pytest.raises(GenerationError):
            generate_section(cfg(s.url), bundle())


def test_retries_after_injected_failures():
    with StubServer(options=StubOptions(fail_first=2)) as s:
        r = generate_section(cfg(s.url, max_retries=3), bundle())
        assert r.retries == 2
        assert len(s.requests) == 3


def test_persistent_5xx_reports_status_and_body():
    with StubServer(options=StubOptions(fail_first=99)) as s:
        with pytest.raises(ServerError) as exc:
            generate_section(cfg(s.url, max_retries=1), bundle())
        assert exc.value.status == 503 and "injected failure" in exc.value.body_excerpt
        assert len(s.requests) == 2


def test_4xx_not_retried():
    with StubServer() as s, httpx.Client() as c:
        with pytest.raises(ServerError) as exc:
            post_json(c, s.url + "/nowhere", {}, attempts=3, backoff_s=0.01)
        assert exc.value.status == 404 and len(s.requests) == 1


def test_timeout_becomes_transport_error():
    calls = []

    def handler(request):
        calls.append(request)
        raise httpx.ReadTimeout("slow", request=request)

    with httpx.Client(transport=httpx.MockTransport(handler)) as c:
        with pytest.raises(TransportError, match="timeout"):
            post_json(c, "http://model/api/generate", {}, attempts=3, backoff_s=0.0)
    assert len(calls) == 3


# -- validate_and_repair ---------------------------------------------------------------


def test_missing_lead_in_prepended():
    text, rep = validate_and_repair("# Introduction\nok", "BHC")
    assert text == "Brief hospital course:\n# Introduction\nok"
    assert any("lead_in" in a for a in rep.repair_actions)


def test_markup_repairs():
    raw = "Brief hospital course:\n**Active Issues**\n* started heparin\n+ held metformin\n# Chronic Issues (Optional)\n- stable"
    text, rep = validate_and_repair(raw, "BHC")
    assert text == "Brief hospital course:\n# Active Issues\n- started heparin\n- held metformin\n# Chronic Issues\n- stable"
    assert rep.passed and len(rep.repair_actions) == 3


def test_optional_in_prose_flagged():
    text, rep = validate_and_repair("Brief hospital course:\nFollow-up is optional.", "BHC")
    assert text.endswith("optional.")
    assert [c.rule_id for c in rep.checks if not c.passed] == ["bhc.no_optional"]


def test_di_bracket_placeholder_flagged_not_changed():
    raw = "Dear Ms. ___,\nYou came in for [ReasonForAdmission]."
    text, rep = validate_and_repair(raw, "DI")
    assert text == raw and not rep.repair_actions
    assert [c.rule_id for c in rep.checks if not c.passed] == ["di.no_bracket_placeholders"]


def test_di_missing_greeting_flagged():
    text, rep = validate_and_repair("You were admitted for pneumonia.", "DI")
    assert not text.startswith("Dear")
    assert not next(c for c in rep.checks if c.rule_id == "di.greeting").passed


def test_compliant_text_is_untouched():
    for task, raw in (("BHC", CANNED_BHC + "\n- item"), ("DI", "Dear Mr. ___,\nAll the best.")):
        text, rep = validate_and_repair(raw, task)
        assert text == raw and rep.passed and rep.repair_actions == ()


def test_repair_can_be_disabled():
    text, rep = validate_and_repair("* a", "BHC", repair=False)
    assert text == "* a" and not rep.passed and rep.repair_actions == ()


def test_rule_ids_from_registry():
    for task, raw in (("BHC", "x {words} optional"), ("DI", "[x] {context}")):
        _, rep = validate_and_repair(raw, task)
        assert {c.rule_id for c in rep.checks} <= set(RULES)


markup = st.lists(
    st.sampled_from(["* ", "+ ", "- ", "**", "# ", "Optional", "(optional)", "Brief hospital course:", "\n", " ", "x", "Dear", ",", "[a]"]),
    max_size=25,
).map("".join)


@settings(max_examples=400, deadline=None)
@given(markup, st.sampled_from(["BHC", "DI"]))
def test_repair_is_idempotent(raw, task):
    once, _ = validate_and_repair(raw, task)
    twice, rep2 = validate_and_repair(once, task)
    assert once == twice
    assert rep2.repair_actions == ()


# -- pipeline ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def artifacts(request):
    from ward.synthetic import generate_synthetic_corpus
    from ward.segmenter import segment

    sc = generate_synthetic_corpus(7, 30)
    letters = {r.hadm_id: segment(r.text) for r in sc.corpus}
    emb = HashingEmbedder()
    idx = {t: build_index(sc.corpus, TaskContextSpec.default(t), emb, letters) for t in ("BHC", "DI")}
    return sc, letters, PipelineArtifacts(indexes=idx, provider=emb, exclude_self=True)


def test_pipeline_order_and_di_context(artifacts, caplog):
    sc, letters, art = artifacts
    rec = sc.corpus.records[0]
    with StubServer() as s, caplog.at_level(logging.INFO, logger="ward.generation"):
        out = run_pipeline(rec, art, "retrieved", cfg(s.url), letters[rec.hadm_id])
        prompts = [b["prompt"] for p, b in s.requests if p == "/api/generate"]
    assert len(prompts) == 2
    assert "BHC Instructions:" in prompts[0] and "DI Instructions:" in prompts[1]
    assert out.bhc.text in prompts[1]
    assert out.di.context.startswith(out.bhc.text)
    assert out.bhc.word_target.source == "retrieved" and out.bhc.word_target.neighbor_id != rec.hadm_id
    logged = "\n".join(r.getMessage() for r in caplog.records)
    assert out.bhc.text in logged
    assert out.bhc.latency_s + out.di.latency_s <= out.wall_s


def test_fallback_when_retrieval_sections_missing(artifacts):
    sc, letters, art = artifacts
    rec = DischargeRecord("999", "Past Medical History:\nHTN\nBrief Hospital Course:\nok\n")
    with StubServer() as s:
        out = run_pipeline(rec, art, "retrieved", cfg(s.url))
    assert out.di.word_target.words_text == "100-200" and out.di.word_target.fallback
    assert out.bhc.word_target.words_text == "420" and out.bhc.word_target.fallback
    no_fallback = PipelineArtifacts(indexes=art.indexes, provider=art.provider, fallback_words=None)
    with StubServer() as s:
        with pytest.raises(StagedFailureError):
            run_pipeline(rec, no_fallback, "retrieved", cfg(s.url))


def test_bhc_failure_aborts_di(artifacts):
    sc, letters, art = artifacts
    with StubServer(options=StubOptions(empty=True)) as s:
        with pytest.raises(StagedFailureError) as exc:
            run_pipeline(sc.corpus.records[0], art, "fixed", cfg(s.url))
        assert exc.value.stage == "BHC"
        assert len(s.requests) == 1


def test_fixed_strategy_is_deterministic(artifacts):
    sc, letters, art = artifacts
    recs = list(sc.corpus.records[:6])
    runs = []
    for _ in range(2):
        with StubServer() as s:
            out = run_corpus(recs, art, "fixed", cfg(s.url), letters, concurrency=3)
        runs.append([(h, o.bhc.text, o.di.text, o.di.context) for h, o in out])
    assert runs[0] == runs[1]
    assert [h for h, *_ in runs[0]] == [r.hadm_id for r in recs]
    assert all(t.startswith("Brief hospital course:") for _, t, _, _ in runs[0])
