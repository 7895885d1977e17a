"""Curated structure templates and prompts for BHC and DI generation."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .corpus import PatientAdmissionSummary, resolve_section
from .errors import ContractError, ValidationError
from .retrieval import WordCountTarget, context_config, normalize_task, render_blocks
from .segmenter import BHC, SectionedLetter, section_titles

PLACEHOLDERS = ("words", "structure", "context")
_PLACEHOLDER_RX = re.compile(r"\{(words|structure|context)\}")
_INSTRUCTION_RX = re.compile(r"^(\d+)\. (.+)$", re.MULTILINE)
REQUIRED_PARTS = {
    "BHC": ("Introduction", "Active Issues", "Chronic Issues", "Transitional Issues", "Additional Notes"),
    "DI": ("Greeting", "AdmissionReason", "InHospitalActivities", "DischargeAdvice", "Closing"),
}
START_INSTRUCTION = {
    "BHC": 'Start the output with "Brief hospital course:"',
    "DI": "Start the output with a polite greeting",
}
FILES = {
    ("BHC", "prompt"): "bhc_prompt.txt",
    ("BHC", "structure"): "bhc_structure.json",
    ("DI", "prompt"): "di_prompt.txt",
    ("DI", "structure"): "di_structure.json",
}


@dataclass(frozen=True)
class StructureTemplate:
    task: str
    body: str

    def __post_init__(self):
        try:
            doc = json.loads(self.body)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{self.task} structure template is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValidationError(f"{self.task} structure template must be a JSON object")
        for part in REQUIRED_PARTS[self.task]:
            if not any(key == part or key.startswith(part + " ") for key in doc):
                raise ValidationError(f"{self.task} structure template lacks part {part!r}")


@dataclass(frozen=True)
class PromptTemplate:
    task: str
    text: str

    def __post_init__(self):
        for name in PLACEHOLDERS:
            if "{" + name + "}" not in self.text:
                raise ValidationError(f"{self.task} prompt template lacks placeholder {name!r}")
        numbers = [int(m.group(1)) for m in _INSTRUCTION_RX.finditer(self.text)]
        if not numbers:
            raise ValidationError(f"{self.task} prompt template has no numbered instructions")
        if numbers != list(range(1, len(numbers) + 1)):
            raise ValidationError(f"{self.task} prompt instructions are not numbered 1..n: {numbers}")

    @property
    def instructions(self) -> list[str]:
        return [m.group(2) for m in _INSTRUCTION_RX.finditer(self.text)]

    @property
    def preamble(self) -> str:
        first = _INSTRUCTION_RX.search(self.text)
        return self.text[: first.start()] if first else self.text

    @property
    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RX.findall(self.text))


@dataclass(frozen=True)
class TaskTemplates:
    structure: StructureTemplate
    prompt: PromptTemplate


@dataclass(frozen=True)
class PromptBundle:
    task: str
    rendered: str
    word_target: WordCountTarget
    context_chars: int


def _default_text(filename: str) -> str:
    return resources.files("ward").joinpath(f"data/templates/{filename}").read_text(encoding="utf-8")


def load_templates(path: str | Path | None = None) -> dict[str, TaskTemplates]:
    """Load templates for both tasks; files found in ``path`` override defaults.

    Override file names: ``bhc_prompt.txt``, ``bhc_structure.json``,
    ``di_prompt.txt``, ``di_structure.json``.
    """
    texts = {}
    for key, filename in FILES.items():
        override = Path(path) / filename if path is not None else None
        if override is not None and override.exists():
            with open(override, encoding="utf-8", newline="") as fh:
                texts[key] = fh.read()
        else:
            texts[key] = _default_text(filename)
    return {
        task: TaskTemplates(
            structure=StructureTemplate(task, texts[(task, "structure")]),
            prompt=PromptTemplate(task, texts[(task, "prompt")]),
        )
        for task in ("BHC", "DI")
    }


def save_templates(templates: Mapping[str, TaskTemplates], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for (task, kind), filename in FILES.items():
        t = templates[task]
        text = t.prompt.text if kind == "prompt" else t.structure.body
        with open(directory / filename, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _neutralize(value: str) -> str:
    # Injected text must not smuggle placeholder tokens into the final prompt.
    return _PLACEHOLDER_RX.sub(r"(\1)", value)


def render_prompt(
    task: str,
    context: str,
    word_target: WordCountTarget,
    templates: Mapping[str, TaskTemplates] | None = None,
) -> PromptBundle:
    task = normalize_task(task)
    if not context or not context.strip():
        raise ValidationError("cannot render a prompt with an empty context")
    templates = templates or load_templates()
    t = templates[task]
    values = {
        "words": _neutralize(word_target.words_text),
        "structure": _neutralize(t.structure.body.strip()),
        "context": _neutralize(context),
    }
    rendered = _PLACEHOLDER_RX.sub(lambda m: values[m.group(1)], t.prompt.text)
    if _PLACEHOLDER_RX.search(rendered):
        raise ValidationError("rendered prompt still contains a placeholder")
    return PromptBundle(task=task, rendered=rendered, word_target=word_target, context_chars=len(context))


def context_for_generation(
    task: str,
    sectioned: SectionedLetter,
    admission: PatientAdmissionSummary | None = None,
    generated_bhc: str | None = None,
) -> str:
    """Patient-information block for the generation prompt.

    The DI context opens with the generated BHC. Gold target sections are
    never included.
    """
    task = normalize_task(task)
    cfg = context_config()
    titles = section_titles()
    blocks: list[tuple[str, str]] = []
    if task == "DI":
        if not generated_bhc or not generated_bhc.strip():
            raise ContractError("DI context requires the generated BHC")
    names = [n for n in cfg["generation"][task] if n not in ("brief_hospital_course", "discharge_instructions")]
    if task == "DI":
        names = [n for n in names if n not in cfg["di_excluded"]]
    for name in names:
        body = resolve_section(name, sectioned, admission)
        if body and body.strip():
            blocks.append((titles.get(name, name), body.strip()))
    rendered = render_blocks(blocks)
    if task == "DI":
        bhc = generated_bhc.strip()
        if not bhc.lower().startswith("brief hospital course"):
            bhc = f"{titles[BHC]}:\n{bhc}"
        rendered = bhc + ("\n\n" + rendered if rendered else "")
    return rendered
