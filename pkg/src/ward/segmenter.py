"""Split discharge letters into canonical sections.

Headers are matched at line start, case-insensitively, and must end in a
colon. Every byte of the source ends up in exactly one of: the unmatched
prefix, a header, or a section body, so letters can be rebuilt exactly.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ConfigurationError, ValidationError

BHC = "brief_hospital_course"
DI = "discharge_instructions"
TARGET_SECTIONS = (BHC, DI)
DUPLICATE_SEPARATOR = "\n"


@dataclass(frozen=True)
class SectionSpec:
    canonical_name: str
    header_patterns: tuple[str, ...]
    rank_bhc: int | None = None
    rank_di: int | None = None
    title: str | None = None

    @property
    def display_title(self) -> str:
        return self.title or self.canonical_name.replace("_", " ").title()

    def to_dict(self) -> dict:
        out = {
            "canonical_name": self.canonical_name,
            "title": self.display_title,
            "header_patterns": list(self.header_patterns),
            "rank_bhc": self.rank_bhc,
            "rank_di": self.rank_di,
        }
        return out


@dataclass(frozen=True)
class Span:
    name: str
    header: str
    body: str


@dataclass(frozen=True)
class SectionedLetter:
    sections: dict[str, str]
    unmatched_prefix: str = ""
    spans: tuple[Span, ...] = field(default=(), compare=False, repr=False)

    def get(self, name: str) -> str | None:
        return self.sections.get(name)

    def reconstruct(self) -> str:
        return self.unmatched_prefix + "".join(s.header + s.body for s in self.spans)

    def with_section(self, name: str, text: str) -> "SectionedLetter":
        sections = dict(self.sections)
        sections[name] = text
        return replace(self, sections=sections)

    def to_dict(self) -> dict:
        return {"sections": dict(self.sections), "unmatched_prefix": self.unmatched_prefix}

    @classmethod
    def from_dict(cls, data: Mapping) -> "SectionedLetter":
        return cls(sections=dict(data["sections"]), unmatched_prefix=data.get("unmatched_prefix", ""))


def _validate_specs(specs: Sequence[SectionSpec]) -> None:
    if not specs:
        raise ConfigurationError("section spec list is empty")
    seen = set()
    for spec in specs:
        if spec.canonical_name in seen:
            raise ConfigurationError(f"duplicate canonical_name {spec.canonical_name!r}")
        seen.add(spec.canonical_name)
        if not spec.header_patterns:
            raise ConfigurationError(f"{spec.canonical_name}: no header patterns")
        for pat in spec.header_patterns:
            if not pat.startswith("^") or not pat.endswith(":"):
                raise ConfigurationError(
                    f"{spec.canonical_name}: pattern {pat!r} must start with '^' and end with ':'"
                )
            try:
                re.compile(pat)
            except re.error as exc:
                raise ConfigurationError(f"{spec.canonical_name}: invalid regex {pat!r}: {exc}") from exc


@lru_cache(maxsize=32)
def _compile(specs: tuple[SectionSpec, ...]) -> tuple[re.Pattern, tuple[str, ...]]:
    _validate_specs(specs)
    names = []
    parts = []
    for spec in specs:
        for pat in spec.header_patterns:
            parts.append(f"(?P<h{len(names)}>{pat})")
            names.append(spec.canonical_name)
    try:
        rx = re.compile("|".join(parts), re.IGNORECASE | re.MULTILINE)
    except re.error as exc:
        raise ConfigurationError(f"section patterns do not combine: {exc}") from exc
    return rx, tuple(names)


def segment(text: str, specs: Sequence[SectionSpec] | None = None) -> SectionedLetter:
    """Segment ``text`` into sections using line-anchored header patterns.

    A section repeated later in the letter keeps its first position; the later
    bodies are appended to it. Text before the first header is returned as
    ``unmatched_prefix``.
    """
    specs = tuple(specs) if specs is not None else default_specs()
    rx, names = _compile(specs)

    matches = [(m.start(), m.end(), names[int(m.lastgroup[1:])]) for m in rx.finditer(text)]
    if not matches:
        return SectionedLetter(sections={}, unmatched_prefix=text, spans=())

    spans = []
    for i, (start, end, name) in enumerate(matches):
        stop = matches[i + 1][0] if i + 1 < len(matches) else len(text)
        spans.append(Span(name=name, header=text[start:end], body=text[end:stop]))

    bodies: dict[str, list[str]] = {}
    for span in spans:
        bodies.setdefault(span.name, []).append(span.body.strip())
    sections = {
        name: DUPLICATE_SEPARATOR.join([parts[0]] + [p for p in parts[1:] if p])
        for name, parts in bodies.items()
    }
    return SectionedLetter(sections=sections, unmatched_prefix=text[: matches[0][0]], spans=tuple(spans))


def extract_targets(sectioned: SectionedLetter) -> tuple[str | None, str | None]:
    return sectioned.sections.get(BHC), sectioned.sections.get(DI)


def word_count(text: str) -> int:
    return len(text.split())


def _cut_after_tokens(text: str, n: int) -> str:
    """Prefix of ``text`` ending right after its ``n``-th whitespace token."""
    if n <= 0:
        return ""
    count = 0
    in_token = False
    for i, ch in enumerate(text):
        if ch.isspace():
            if in_token:
                count += 1
                if count == n:
                    return text[:i]
            in_token = False
        else:
            in_token = True
    return text


def nearest_rank(values: Sequence[float], percentile: float) -> float:
    """Nearest-rank percentile: the value at 1-based position ceil(p/100 * n)."""
    if not 0 < percentile <= 100:
        raise ValidationError(f"percentile must be in (0, 100], got {percentile}")
    if not values:
        raise ValidationError("nearest_rank of an empty sample")
    ordered = sorted(values)
    rank = max(1, math.ceil(percentile / 100 * len(ordered)))
    return ordered[rank - 1]


def truncation_bounds(
    corpus_sections: Mapping[str, Sequence[tuple[str, str]]], percentile: float = 95
) -> dict[str, int]:
    if not 0 < percentile <= 100:
        raise ValidationError(f"percentile must be in (0, 100], got {percentile}")
    return {
        name: int(nearest_rank([word_count(t) for _, t in items], percentile))
        for name, items in corpus_sections.items()
        if items
    }


def truncate_corpus_sections(
    corpus_sections: Mapping[str, Sequence[tuple[str, str]]], percentile: float = 95
) -> dict[str, list[tuple[str, str]]]:
    bounds = truncation_bounds(corpus_sections, percentile)
    out: dict[str, list[tuple[str, str]]] = {}
    for name, items in corpus_sections.items():
        if name not in bounds:
            out[name] = list(items)
            continue
        bound = bounds[name]
        out[name] = [
            (hid, _cut_after_tokens(text, bound) if word_count(text) > bound else text)
            for hid, text in items
        ]
    return out


def truncate_letters(
    letters: Mapping[str, SectionedLetter],
    percentile: float = 95,
    exclude: Iterable[str] = TARGET_SECTIONS,
) -> dict[str, SectionedLetter]:
    """Apply corpus-level truncation to every section except ``exclude``."""
    exclude = set(exclude)
    grouped: dict[str, list[tuple[str, str]]] = {}
    for hid, letter in letters.items():
        for name, text in letter.sections.items():
            if name not in exclude:
                grouped.setdefault(name, []).append((hid, text))
    cut = truncate_corpus_sections(grouped, percentile)
    new_sections = {hid: dict(letter.sections) for hid, letter in letters.items()}
    for name, items in cut.items():
        for hid, text in items:
            new_sections[hid][name] = text
    return {hid: replace(letter, sections=new_sections[hid]) for hid, letter in letters.items()}


def load_specs(path: str | Path | None = None) -> tuple[SectionSpec, ...]:
    if path is None:
        raw = resources.files("ward").joinpath("data/sections.json").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    try:
        items = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"section spec file is not valid JSON: {exc}") from exc
    specs = tuple(
        SectionSpec(
            canonical_name=item["canonical_name"],
            header_patterns=tuple(item["header_patterns"]),
            rank_bhc=item.get("rank_bhc"),
            rank_di=item.get("rank_di"),
            title=item.get("title"),
        )
        for item in items
    )
    _validate_specs(specs)
    return specs


@lru_cache(maxsize=1)
def default_specs() -> tuple[SectionSpec, ...]:
    return load_specs()


def section_titles(specs: Sequence[SectionSpec] | None = None) -> dict[str, str]:
    specs = specs if specs is not None else default_specs()
    return {s.canonical_name: s.display_title for s in specs}


def canonical_names(specs: Sequence[SectionSpec] | None = None) -> tuple[str, ...]:
    specs = specs if specs is not None else default_specs()
    return tuple(s.canonical_name for s in specs)
