"""Similar-patient retrieval of target-section word counts.

Contexts built from a few letter sections are embedded, stored unit-normalized
in an exhaustive inner-product index, and the nearest training record's
target word count becomes the generation length target.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np

from .corpus import Corpus, DischargeRecord, PatientAdmissionSummary, resolve_section
from .errors import ContractError, EmptyContextError, EmptyIndexError, TransportError, ValidationError
from .segmenter import BHC, DI, SectionedLetter, segment, section_titles, word_count
from .transport import post_json

log = logging.getLogger(__name__)

TASKS = ("BHC", "DI")
TARGET_OF = {"BHC": BHC, "DI": DI}
DEFAULT_DIMENSION = 384
MAGIC = b"WSIX"
VERSION = 1
_TOKEN = re.compile(r"\w+")
_CHUNK = 8192


def normalize_task(task: str) -> str:
    t = task.upper()
    if t not in TASKS:
        raise ValidationError(f"task must be one of {TASKS}, got {task!r}")
    return t


@lru_cache(maxsize=1)
def context_config() -> dict:
    return json.loads(resources.files("ward").joinpath("data/context.json").read_text(encoding="utf-8"))


@dataclass(frozen=True)
class TaskContextSpec:
    task: str
    section_names: tuple[str, ...]

    @classmethod
    def default(cls, task: str) -> "TaskContextSpec":
        task = normalize_task(task)
        return cls(task=task, section_names=tuple(context_config()["retrieval"][task]))


@dataclass(frozen=True)
class WordCountTarget:
    words_text: str
    source: str
    neighbor_id: str | None = None
    similarity: float | None = None
    fallback: bool = False

    def __post_init__(self):
        if not self.words_text:
            raise ValidationError("words_text must be non-empty")
        if self.source not in ("retrieved", "fixed", "classifier", "distribution"):
            raise ValidationError(f"unknown word-count source {self.source!r}")
        if self.source == "retrieved" and (self.neighbor_id is None or self.similarity is None):
            raise ValidationError("retrieved word-count target needs neighbor_id and similarity")

    def to_dict(self) -> dict:
        return {
            "words_text": self.words_text,
            "source": self.source,
            "neighbor_id": self.neighbor_id,
            "similarity": self.similarity,
            "fallback": self.fallback,
        }


def render_blocks(blocks: Sequence[tuple[str, str]]) -> str:
    return "\n\n".join(f"{title}:\n{body}" for title, body in blocks)


def build_task_context(
    letter: SectionedLetter,
    spec: TaskContextSpec,
    admission: PatientAdmissionSummary | None = None,
) -> str:
    """Titled blocks of the listed sections, in listed order, absent ones skipped."""
    titles = section_titles()
    blocks = []
    for name in spec.section_names:
        if name in (BHC, DI):
            continue
        body = resolve_section(name, letter, admission)
        if body is None or not body.strip():
            continue
        blocks.append((titles.get(name, name), body))
    if not blocks:
        raise EmptyContextError(f"none of the {spec.task} context sections are present: {list(spec.section_names)}")
    return render_blocks(blocks)


# -- embedding providers -------------------------------------------------------


class EmbeddingProvider(Protocol):
    def embed(self, text: str) -> Sequence[float]: ...


class HashingEmbedder:
    """Offline embedder: signed feature hashing of lowercase word tokens."""

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for tok in _TOKEN.findall(text.lower()):
            h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")
            vec[h % self.dimension] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ContractError("hashing embedder produced a zero vector (no word tokens?)")
        return vec / norm


class HttpEmbedder:
    """Remote embeddings: ``POST <base>/api/embeddings`` with ``{model, prompt}``."""

    def __init__(
        self,
        base_url: str,
        model: str = "all-minilm",
        timeout_s: float = 30.0,
        attempts: int = 3,
        backoff_s: float = 0.5,
        client: httpx.Client | None = None,
    ):
        self.url = base_url.rstrip("/") + "/api/embeddings"
        self.model = model
        self.timeout_s = timeout_s
        self.attempts = attempts
        self.backoff_s = backoff_s
        self.client = client or httpx.Client()

    def embed(self, text: str) -> list[float]:
        res = post_json(
            self.client,
            self.url,
            {"model": self.model, "prompt": text},
            attempts=self.attempts,
            backoff_s=self.backoff_s,
            timeout_s=self.timeout_s,
        )
        emb = res.data.get("embedding")
        if not isinstance(emb, list) or not emb:
            raise ContractError(f"embedding endpoint returned no 'embedding' list: {str(res.data)[:200]}")
        return emb


def _unit(values: Sequence[float], dimension: int | None = None) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ContractError("embedding must be a flat vector")
    if dimension is not None and v.shape[0] != dimension:
        raise ContractError(f"embedding dimension {v.shape[0]} != expected {dimension}")
    if not np.all(np.isfinite(v)):
        raise ContractError("embedding contains non-finite values")
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ContractError("cannot normalize a zero embedding")
    return v / norm


def embed_texts(
    provider: EmbeddingProvider,
    items: Sequence[tuple[str, str]],
    concurrency: int = 4,
) -> list[np.ndarray]:
    """Embed ``(record_id, text)`` pairs; output order follows input order."""

    def one(item):
        rid, text = item
        try:
            return _unit(provider.embed(text))
        except TransportError as exc:
            raise TransportError(f"embedding failed for record {rid}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        vectors = list(pool.map(one, items))
    dims = {v.shape[0] for v in vectors}
    if len(dims) > 1:
        raise ContractError(f"embedding provider returned mixed dimensions {sorted(dims)}")
    return vectors


# -- index ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    ids: tuple[str, ...]
    vectors: np.ndarray  # float32, (count, dimension), unit rows, rows sorted by id
    target_word_counts: np.ndarray  # uint32
    task: str | None = None
    skipped: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("index hadm_ids must be unique")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ContractError("vector matrix shape does not match id count")
        self.vectors.setflags(write=False)
        self.target_word_counts.setflags(write=False)
        object.__setattr__(self, "_pos", {rid: i for i, rid in enumerate(self.ids)})

    @classmethod
    def from_entries(cls, entries: Sequence[tuple[str, Sequence[float], int]], task: str | None = None, skipped: int = 0):
        entries = sorted(entries, key=lambda e: e[0])
        dims = {len(v) for _, v, _ in entries}
        if len(dims) > 1:
            raise ContractError(f"index vectors have mixed dimensions {sorted(dims)}")
        dim = dims.pop() if dims else DEFAULT_DIMENSION
        mat = np.array([_unit(v) for _, v, _ in entries], dtype=np.float32).reshape(len(entries), dim)
        counts = np.array([c for _, _, c in entries], dtype=np.uint32)
        return cls(ids=tuple(e[0] for e in entries), vectors=mat, target_word_counts=counts, task=task, skipped=skipped)

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def word_count_of(self, hadm_id: str) -> int:
        return int(self.target_word_counts[self._pos[hadm_id]])

    def search(self, query: Sequence[float], k: int, exclude: str | None = None) -> list[tuple[str, float]]:
        """Exact top-``k`` by inner product; ties resolved by ascending id."""
        if k < 1:
            raise ValidationError("k must be >= 1")
        if len(self) == 0:
            raise EmptyIndexError("index is empty")
        q = _unit(query, self.dimension)
        scores = np.concatenate(
            [self.vectors[i : i + _CHUNK].astype(np.float64) @ q for i in range(0, len(self), _CHUNK)]
        )
        order = np.argsort(-scores, kind="stable")
        out = []
        for i in order:
            rid = self.ids[i]
            if rid == exclude:
                continue
            out.append((rid, float(scores[i])))
            if len(out) == k:
                break
        return out

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<4sIIQ", MAGIC, VERSION, self.dimension, len(self))]
        vec_bytes = self.vectors.astype("<f4")
        for i, rid in enumerate(self.ids):
            raw = rid.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(vec_bytes[i].tobytes())
            parts.append(struct.pack("<I", int(self.target_word_counts[i])))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, task: str | None = None) -> "RetrievalIndex":
        head = struct.calcsize("<4sIIQ")
        if len(data) < head:
            raise ValidationError("index file truncated (header)")
        magic, version, dim, count = struct.unpack_from("<4sIIQ", data, 0)
        if magic != MAGIC:
            raise ValidationError(f"bad index magic {magic!r}")
        if version != VERSION:
            raise ValidationError(f"unsupported index version {version}")
        off = head
        ids, rows, counts = [], [], []
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<H", data, off)
                off += 2
                ids.append(data[off : off + n].decode("utf-8"))
                off += n
                rows.append(np.frombuffer(data, dtype="<f4", count=dim, offset=off))
                off += 4 * dim
                (c,) = struct.unpack_from("<I", data, off)
                off += 4
                counts.append(c)
        except struct.error as exc:
            raise ValidationError(f"index file truncated: {exc}") from exc
        if off != len(data):
            raise ValidationError("trailing bytes after index entries")
        mat = np.array(rows, dtype=np.float32).reshape(count, dim)
        return cls(ids=tuple(ids), vectors=mat, target_word_counts=np.array(counts, dtype=np.uint32), task=task)

    @classmethod
    def load(cls, path: str | Path, task: str | None = None) -> "RetrievalIndex":
        return cls.from_bytes(Path(path).read_bytes(), task=task)


def search(index: RetrievalIndex, query: Sequence[float], k: int) -> list[tuple[str, float]]:
    return index.search(query, k)


def _letters_for(corpus: Corpus, letters: Mapping[str, SectionedLetter] | None) -> dict[str, SectionedLetter]:
    if letters is not None:
        return dict(letters)
    return {r.hadm_id: segment(r.text) for r in corpus}


def build_index(
    corpus: Corpus,
    spec: TaskContextSpec,
    provider: EmbeddingProvider,
    letters: Mapping[str, SectionedLetter] | None = None,
    concurrency: int = 4,
) -> RetrievalIndex:
    """Embed every record that has a gold target for ``spec.task``.

    Records without the target (or without any context section) are skipped
    and counted in ``RetrievalIndex.skipped``. ``letters`` may carry
    pre-segmented (e.g. truncated) letters keyed by hadm_id.
    """
    letters = _letters_for(corpus, letters)
    target = TARGET_OF[spec.task]
    items, counts = [], []
    skipped = 0
    for rec in corpus:
        letter = letters[rec.hadm_id]
        gold = letter.sections.get(target)
        if gold is None or not gold.strip():
            skipped += 1
            continue
        try:
            ctx = build_task_context(letter, spec, rec.admission)
        except EmptyContextError:
            log.warning("record %s has no %s retrieval context; skipped", rec.hadm_id, spec.task)
            skipped += 1
            continue
        items.append((rec.hadm_id, ctx))
        counts.append(word_count(gold))
    if skipped:
        log.info("%s index: skipped %d records", spec.task, skipped)
    vectors = embed_texts(provider, items, concurrency)
    entries = [(rid, v, c) for (rid, _), v, c in zip(items, vectors, counts)]
    return RetrievalIndex.from_entries(entries, task=spec.task, skipped=skipped)


def nearest_neighbor(
    index: RetrievalIndex,
    record: DischargeRecord,
    spec: TaskContextSpec,
    provider: EmbeddingProvider,
    exclude_self: bool,
    letter: SectionedLetter | None = None,
) -> tuple[str, float]:
    letter = letter if letter is not None else segment(record.text)
    ctx = build_task_context(letter, spec, record.admission)
    query = _unit(provider.embed(ctx))
    exclude = record.hadm_id if exclude_self else None
    if len(index) == 0:
        raise EmptyIndexError("index is empty; use a fixed or distribution word-count strategy instead")
    hits = index.search(query, 1, exclude=exclude)
    if not hits:
        raise EmptyIndexError(
            "index is empty after excluding the query record; use a fixed or distribution word-count strategy instead"
        )
    return hits[0]


def retrieve_word_count(
    index: RetrievalIndex,
    record: DischargeRecord,
    spec: TaskContextSpec,
    provider: EmbeddingProvider,
    exclude_self: bool,
    letter: SectionedLetter | None = None,
) -> WordCountTarget:
    neighbor, sim = nearest_neighbor(index, record, spec, provider, exclude_self, letter)
    return WordCountTarget(
        words_text=str(index.word_count_of(neighbor)),
        source="retrieved",
        neighbor_id=neighbor,
        similarity=sim,
    )
