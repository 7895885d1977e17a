"""Two-stage generation against a local model server, plus output repair."""
from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping
from urllib.parse import urlparse

import httpx

from .corpus import DischargeRecord
from .errors import (
    ConfigurationError,
    EmptyContextError,
    EmptyIndexError,
    GenerationError,
    StagedFailureError,
)
from .promptkit import PromptBundle, TaskTemplates, context_for_generation, load_templates, render_prompt
from .retrieval import EmbeddingProvider, RetrievalIndex, TaskContextSpec, WordCountTarget, context_config, normalize_task
from .segmenter import SectionedLetter, segment
from .transport import post_json
from .wordcount import ForestModel, LogNormalFit, extract_features, predict_word_count

log = logging.getLogger(__name__)

DEFAULT_MODEL = "llama3:8b-instruct-q8_0"
BHC_LEAD = "Brief hospital course:"

RULES = {
    "bhc.lead_in": 'output starts with "Brief hospital course:"',
    "bhc.hash_headers": "section headers start with #, not *",
    "bhc.hyphen_bullets": "bullets start with -, not * or +",
    "bhc.no_optional": 'the word "optional" does not appear',
    "di.greeting": 'output opens with a "Dear ...," greeting',
    "di.no_bracket_placeholders": 'no "[...]" template placeholders remain',
    "common.non_empty": "output is not blank",
    "common.no_placeholder_braces": "no {words}/{structure}/{context} tokens remain",
}


@dataclass(frozen=True)
class GenerationConfig:
    base_url: str = "http://127.0.0.1:11434"
    model_id: str = DEFAULT_MODEL
    temperature: float = 0.0
    seed: int | None = 0
    timeout_s: float = 120.0
    max_retries: int = 3
    backoff_s: float = 1.0
    repair: bool = True

    def __post_init__(self):
        parsed = urlparse(self.base_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ConfigurationError(f"base_url must be an absolute http(s) URL, got {self.base_url!r}")
        if self.timeout_s <= 0:
            raise ConfigurationError("timeout_s must be > 0")
        if self.temperature < 0:
            raise ConfigurationError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be >= 0")


@dataclass(frozen=True)
class Check:
    rule_id: str
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...]
    repair_actions: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "checks": [{"rule_id": c.rule_id, "passed": c.passed, "detail": c.detail} for c in self.checks],
            "repair_actions": list(self.repair_actions),
        }


_LEAD_RX = re.compile(r"\A\s*[#*]*[ \t]*brief[ \t]+hospital[ \t]+course[ \t]*:?[ \t]*\**", re.IGNORECASE)
_STAR_HEADER_RX = re.compile(r"^([ \t]*)\*{1,2}(?=\S)([^*\n]+?)\*{1,2}[ \t]*$", re.MULTILINE)
_BULLET_RX = re.compile(r"^([ \t]*)[*+][ \t]+(?=\S)", re.MULTILINE)
_OPTIONAL_TAG_RX = re.compile(r"[ \t]*\(optional\)", re.IGNORECASE)
_OPTIONAL_WORD_RX = re.compile(r"\boptional\b", re.IGNORECASE)
_HEADER_LINE_RX = re.compile(r"^[ \t]*#.*$", re.MULTILINE)
_GREETING_RX = re.compile(r"\A\s*Dear\b[^\n]*,")
_BRACKET_RX = re.compile(r"\[[^\[\]\n]*\]")
_BRACE_RX = re.compile(r"\{(?:words|structure|context)\}")


def _fix_lead_in(text: str) -> str:
    m = _LEAD_RX.match(text)
    return BHC_LEAD + text[m.end():] if m else f"{BHC_LEAD}\n{text}"


def _fix_optional(text: str) -> str:
    text = _OPTIONAL_TAG_RX.sub("", text)
    return _HEADER_LINE_RX.sub(lambda m: re.sub(r"[ \t]*\boptional\b", "", m.group(0), flags=re.I), text)


# rule id -> (violation count, fixer, what the fixer does)
_BHC_RULES = {
    "bhc.no_optional": (
        lambda t: len(_OPTIONAL_WORD_RX.findall(t)),
        _fix_optional,
        "removed 'optional' section tags",
    ),
    "bhc.lead_in": (lambda t: 0 if t.startswith(BHC_LEAD) else 1, _fix_lead_in, "added or normalized lead-in"),
    "bhc.hash_headers": (
        lambda t: len(_STAR_HEADER_RX.findall(t)),
        lambda t: _STAR_HEADER_RX.sub(lambda m: f"{m.group(1)}# {m.group(2).strip()}", t),
        "converted '*' header lines to '#'",
    ),
    "bhc.hyphen_bullets": (
        lambda t: len(_BULLET_RX.findall(t)),
        lambda t: _BULLET_RX.sub(r"\1- ", t),
        "converted '*'/'+' bullets to '-'",
    ),
}


def _bhc_rules(text: str, repair: bool, checks: list, actions: list) -> str:
    acted: set[str] = set()
    if repair:
        # One fix can expose another (dropping a tag may leave a "* " bullet),
        # so repeat until nothing changes; every fix shrinks a violation count.
        for _ in range(20):
            changed = False
            for rule_id, (count, fix, what) in _BHC_RULES.items():
                if count(text):
                    fixed = fix(text)
                    if fixed != text:
                        text, changed = fixed, True
                        if rule_id not in acted:
                            acted.add(rule_id)
                            actions.append(f"{rule_id}: {what}")
            if not changed:
                break
    for rule_id, (count, _, _) in _BHC_RULES.items():
        n = count(text)
        if n:
            checks.append(Check(rule_id, False, f"{n} violation(s) remain"))
        else:
            checks.append(Check(rule_id, True, "repaired" if rule_id in acted else ""))
    return text


def _di_rules(text: str, checks: list) -> None:
    if _GREETING_RX.match(text):
        checks.append(Check("di.greeting", True))
    else:
        checks.append(Check("di.greeting", False, "no 'Dear ...,' greeting"))
    found = _BRACKET_RX.findall(text)
    if found:
        checks.append(Check("di.no_bracket_placeholders", False, ", ".join(sorted(set(found)))))
    else:
        checks.append(Check("di.no_bracket_placeholders", True))


def validate_and_repair(text: str, task: str, repair: bool = True) -> tuple[str, ValidationReport]:
    """Check generated text against the prompt's formatting rules.

    Mechanical BHC issues (lead-in, header and bullet markers, "optional"
    tags) are fixed when ``repair`` is set. DI greeting and bracket
    placeholders are only flagged. Never raises on bad text.
    """
    task = normalize_task(task)
    checks: list[Check] = []
    actions: list[str] = []
    checks.append(Check("common.non_empty", bool(text.strip()), "" if text.strip() else "blank output"))
    if task == "BHC":
        text = _bhc_rules(text, repair, checks, actions)
    else:
        _di_rules(text, checks)
    braces = _BRACE_RX.findall(text)
    checks.append(Check("common.no_placeholder_braces", not braces, ", ".join(braces)))
    return text, ValidationReport(checks=tuple(checks), repair_actions=tuple(actions))


@dataclass(frozen=True)
class GenerationResult:
    task: str
    text: str
    latency_s: float
    prompt_chars: int
    repaired: bool
    validation: ValidationReport
    retries: int = 0
    word_target: WordCountTarget | None = None
    context: str = ""

    def to_dict(self, hadm_id: str) -> dict:
        return {
            "hadm_id": hadm_id,
            "task": self.task,
            "text": self.text,
            "latency_s": self.latency_s,
            "repaired": self.repaired,
            "validation": self.validation.to_dict(),
        }


def request_body(config: GenerationConfig, prompt: str) -> dict:
    options: dict = {"temperature": config.temperature}
    if config.seed is not None:
        options["seed"] = config.seed
    return {"model": config.model_id, "prompt": prompt, "stream": False, "options": options}


def generate_section(
    config: GenerationConfig,
    prompt: PromptBundle,
    client: httpx.Client | None = None,
) -> GenerationResult:
    """One non-streaming completion, validated (and optionally repaired)."""
    own = client is None
    client = client or httpx.Client()
    url = config.base_url.rstrip("/") + "/api/generate"
    try:
        t0 = time.perf_counter()
        res = post_json(
            client,
            url,
            request_body(config, prompt.rendered),
            attempts=config.max_retries + 1,
            backoff_s=config.backoff_s,
            timeout_s=config.timeout_s,
        )
        latency = time.perf_counter() - t0
    finally:
        if own:
            client.close()
    raw = res.data.get("response")
    if not isinstance(raw, str):
        raise GenerationError(f"model server reply lacks a 'response' string: {str(res.data)[:200]}")
    if not raw.strip():
        raise GenerationError(f"model server returned an empty {prompt.task} completion")
    # Surrounding whitespace is dropped so the text is reused verbatim downstream.
    text, report = validate_and_repair(raw.strip(), prompt.task, repair=config.repair)
    return GenerationResult(
        task=prompt.task,
        text=text.strip(),
        latency_s=latency,
        prompt_chars=len(prompt.rendered),
        repaired=bool(report.repair_actions),
        validation=report,
        retries=res.retries,
        word_target=prompt.word_target,
    )


@dataclass
class PipelineArtifacts:
    """Everything ``run_pipeline`` may need, depending on the strategy."""

    templates: Mapping[str, TaskTemplates] = field(default_factory=load_templates)
    indexes: Mapping[str, RetrievalIndex] = field(default_factory=dict)
    provider: EmbeddingProvider | None = None
    models: Mapping[str, ForestModel] = field(default_factory=dict)
    fits: Mapping[str, LogNormalFit] = field(default_factory=dict)
    fixed_words: Mapping[str, str] = field(default_factory=dict)
    fallback_words: Mapping[str, str] | None = field(default_factory=lambda: dict(context_config()["default_words"]))
    exclude_self: bool = False


@dataclass(frozen=True)
class PipelineOutcome:
    bhc: GenerationResult
    di: GenerationResult
    wall_s: float


def resolve_word_target(
    task: str,
    strategy: str,
    record: DischargeRecord,
    letter: SectionedLetter,
    artifacts: PipelineArtifacts,
) -> WordCountTarget:
    if strategy == "retrieved":
        index = artifacts.indexes.get(task)
        try:
            if index is None or artifacts.provider is None:
                raise ConfigurationError(f"retrieved strategy needs a {task} index and an embedding provider")
            return predict_word_count(
                "retrieved", task, index=index, record=record, provider=artifacts.provider,
                spec=TaskContextSpec.default(task), letter=letter, exclude_self=artifacts.exclude_self,
            )
        except (EmptyContextError, EmptyIndexError, ConfigurationError) as exc:
            if artifacts.fallback_words is None:
                raise
            words = artifacts.fallback_words[task]
            log.warning("%s %s: retrieval unavailable (%s); falling back to fixed %s", record.hadm_id, task, exc, words)
            return WordCountTarget(words_text=words, source="fixed", fallback=True)
    if strategy == "fixed":
        return predict_word_count("fixed", task, fixed_words=artifacts.fixed_words.get(task))
    if strategy == "classifier":
        model = artifacts.models.get(task)
        feats = extract_features(record, letter) if model is not None else None
        return predict_word_count("classifier", task, model=model, features=feats)
    if strategy in ("distribution", "distribution_median"):
        return predict_word_count("distribution_median", task, fit=artifacts.fits.get(task))
    raise ConfigurationError(f"unknown word-count strategy {strategy!r}")


def run_pipeline(
    record: DischargeRecord,
    artifacts: PipelineArtifacts,
    strategy: str,
    config: GenerationConfig,
    letter: SectionedLetter | None = None,
    client: httpx.Client | None = None,
) -> PipelineOutcome:
    """Generate BHC, then DI with the generated BHC at the head of its context."""
    letter = letter if letter is not None else segment(record.text)
    t0 = time.perf_counter()
    results = {}
    for task in ("BHC", "DI"):
        try:
            target = resolve_word_target(task, strategy, record, letter, artifacts)
            generated = results["BHC"].text if task == "DI" else None
            context = context_for_generation(task, letter, record.admission, generated_bhc=generated)
            log.info("%s %s context:\n%s", record.hadm_id, task, context)
            bundle = render_prompt(task, context, target, artifacts.templates)
            result = generate_section(config, bundle, client)
        except Exception as exc:
            if task == "BHC":
                raise StagedFailureError("BHC", exc) from exc
            raise
        results[task] = replace(result, context=context)
    return PipelineOutcome(bhc=results["BHC"], di=results["DI"], wall_s=time.perf_counter() - t0)


def run_corpus(
    records,
    artifacts: PipelineArtifacts,
    strategy: str,
    config: GenerationConfig,
    letters: Mapping[str, SectionedLetter] | None = None,
    concurrency: int = 2,
    client: httpx.Client | None = None,
) -> list[tuple[str, PipelineOutcome]]:
    """Run the pipeline over many records, at most ``concurrency`` in flight.

    Results come back in input order regardless of completion order.
    """
    if concurrency < 1:
        raise ConfigurationError("concurrency must be >= 1")
    own = client is None
    client = client or httpx.Client()
    letters = letters or {}
    try:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            outcomes = pool.map(
                lambda r: run_pipeline(r, artifacts, strategy, config, letters.get(r.hadm_id), client), records
            )
            return [(r.hadm_id, o) for r, o in zip(records, outcomes)]
    finally:
        if own:
            client.close()


__all__ = [
    "DEFAULT_MODEL",
    "GenerationConfig",
    "GenerationResult",
    "PipelineArtifacts",
    "PipelineOutcome",
    "RULES",
    "ValidationReport",
    "generate_section",
    "request_body",
    "resolve_word_target",
    "run_corpus",
    "run_pipeline",
    "validate_and_repair",
]
