"""Lexical metrics, external scorer plug-in, report aggregation, section
ranking and baselines."""
from __future__ import annotations

import itertools
import logging
import math
import random
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from difflib import SequenceMatcher
from typing import Callable, Mapping, Sequence

import httpx

from .corpus import Corpus
from .errors import ConfigurationError, EmptyIndexError, TransportError, ValidationError
from .retrieval import (
    EmbeddingProvider,
    RetrievalIndex,
    TARGET_OF,
    TaskContextSpec,
    nearest_neighbor,
    normalize_task,
)
from .segmenter import SectionedLetter, default_specs, segment
from .transport import post_json

log = logging.getLogger(__name__)

TOKENIZER_VERSION = "lower-wordpunct-1"
NATIVE_METRICS = ("bleu", "rouge1", "rouge2", "rougel", "meteor")
EXTERNAL_METRICS = ("bertscore", "align", "medcon")
REPORT_COLUMNS = ("bleu", "rouge1", "rouge2", "rougel", "bertscore", "meteor", "align", "medcon", "overall")
BASELINES = ("random_shuffle", "retrieved_target", "fixed_word", "pipeline")
_TOKEN_RX = re.compile(r"\w+|[^\w\s]")
EXACT_ALIGNMENT_LIMIT = 5000


def tokenize(text: str) -> list[str]:
    """Lowercase; words and individual punctuation marks become tokens."""
    return _TOKEN_RX.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypothesis: str, reference: str, smoothing: str = "none") -> float:
    if smoothing not in ("none", "epsilon"):
        raise ConfigurationError(f"unknown BLEU smoothing {smoothing!r}")
    hyp, ref = tokenize(hypothesis), tokenize(reference)
    if not hyp or not ref:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        h = _ngrams(hyp, n)
        total = sum(h.values())
        r = _ngrams(ref, n)
        clipped = sum(min(c, r[g]) for g, c in h.items())
        p = clipped / total if total else 0.0
        if p == 0.0:
            if smoothing == "none":
                return 0.0
            p = 1e-9
        log_sum += math.log(p) / 4
    c, r_len = len(hyp), len(ref)
    bp = 1.0 if c > r_len else math.exp(1 - r_len / c)
    return min(1.0, bp * math.exp(log_sum))


def _f_score(p: float, r: float, beta: float = 1.0) -> float:
    if p == 0 or r == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Bit-parallel LCS length (one big-int update per token of ``a``)."""
    if not a or not b:
        return 0
    masks: dict[str, int] = defaultdict(int)
    for j, tok in enumerate(b):
        masks[tok] |= 1 << j
    full = (1 << len(b)) - 1
    v = full
    for tok in a:
        u = v & masks.get(tok, 0)
        v = ((v + u) | (v - u)) & full
    return len(b) - bin(v).count("1")


def rouge(hypothesis: str, reference: str, variant: str = "rouge1", beta: float = 1.0) -> float:
    hyp, ref = tokenize(hypothesis), tokenize(reference)
    if not hyp or not ref:
        return 0.0
    v = variant.lower()
    if v in ("rouge1", "rouge2"):
        n = int(v[-1])
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        th, tr = sum(h.values()), sum(r.values())
        if not th or not tr:
            return 0.0
        overlap = sum(min(c, r[g]) for g, c in h.items())
        return _f_score(overlap / th, overlap / tr, beta)
    if v == "rougel":
        lcs = lcs_length(hyp, ref)
        return _f_score(lcs / len(hyp), lcs / len(ref), beta)
    raise ConfigurationError(f"unknown ROUGE variant {variant!r}")


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    """Runs of alignment pairs contiguous in both hypothesis and reference."""
    if not pairs:
        return 0
    pairs = sorted(pairs)
    return 1 + sum(
        1 for (h0, r0), (h1, r1) in zip(pairs, pairs[1:]) if not (h1 == h0 + 1 and r1 == r0 + 1)
    )


def _type_options(hpos: list[int], rpos: list[int]) -> list[list[tuple[int, int]]]:
    if len(hpos) <= len(rpos):
        return [list(zip(hpos, perm)) for perm in itertools.permutations(rpos, len(hpos))]
    return [list(zip(perm, rpos)) for perm in itertools.permutations(hpos, len(rpos))]


def _alignment_count(groups: Mapping[str, tuple[list[int], list[int]]]) -> int:
    total = 1
    for hpos, rpos in groups.values():
        big, small = max(len(hpos), len(rpos)), min(len(hpos), len(rpos))
        total *= math.perm(big, small)
        if total > EXACT_ALIGNMENT_LIMIT:
            break
    return total


def _exact_alignment(groups) -> list[tuple[int, int]]:
    fixed, choices = [], []
    for hpos, rpos in groups.values():
        if len(hpos) == 1 and len(rpos) == 1:
            fixed.append((hpos[0], rpos[0]))
        else:
            choices.append(_type_options(hpos, rpos))
    best, best_chunks = None, None
    for combo in itertools.product(*choices):
        pairs = fixed + [p for part in combo for p in part]
        ch = count_chunks(pairs)
        if best_chunks is None or ch < best_chunks:
            best, best_chunks = pairs, ch
    return best or fixed


def _greedy_alignment(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    # Longest common blocks first (order-preserving), then remaining
    # same-token pairs in order of appearance so the match count is maximal.
    sm = SequenceMatcher(None, hyp, ref, autojunk=False)
    pairs = []
    for blk in sm.get_matching_blocks():
        pairs.extend((blk.a + k, blk.b + k) for k in range(blk.size))
    used_h = {h for h, _ in pairs}
    used_r = {r for _, r in pairs}
    free_r: dict[str, list[int]] = defaultdict(list)
    for j, tok in enumerate(ref):
        if j not in used_r:
            free_r[tok].append(j)
    for i, tok in enumerate(hyp):
        if i not in used_h and free_r.get(tok):
            pairs.append((i, free_r[tok].pop(0)))
    return pairs


def meteor_alignment(hyp: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact-match alignment with maximal matches and (near-)minimal chunks.

    Small problems are solved exhaustively; large ones use the greedy
    longest-block heuristic, which still attains the maximal match count.
    """
    hp: dict[str, list[int]] = defaultdict(list)
    rp: dict[str, list[int]] = defaultdict(list)
    for i, t in enumerate(hyp):
        hp[t].append(i)
    for j, t in enumerate(ref):
        rp[t].append(j)
    groups = {t: (hp[t], rp[t]) for t in hp if t in rp}
    if not groups:
        return []
    if _alignment_count(groups) <= EXACT_ALIGNMENT_LIMIT:
        return _exact_alignment(groups)
    return _greedy_alignment(hyp, ref)


def meteor_from_tokens(hyp: Sequence[str], ref: Sequence[str]) -> float:
    if not hyp or not ref:
        return 0.0
    pairs = meteor_alignment(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return fmean * (1 - penalty)


def meteor(hypothesis: str, reference: str) -> float:
    return meteor_from_tokens(tokenize(hypothesis), tokenize(reference))


def native_scores(hypothesis: str, reference: str, smoothing: str = "none", rougel_beta: float = 1.0) -> dict[str, float]:
    return {
        "bleu": bleu4(hypothesis, reference, smoothing),
        "rouge1": rouge(hypothesis, reference, "rouge1"),
        "rouge2": rouge(hypothesis, reference, "rouge2"),
        "rougel": rouge(hypothesis, reference, "rougeL", beta=rougel_beta),
        "meteor": meteor(hypothesis, reference),
    }


METRIC_FUNCS: dict[str, Callable[[str, str], float]] = {
    "bleu": bleu4,
    "rouge1": lambda h, r: rouge(h, r, "rouge1"),
    "rouge2": lambda h, r: rouge(h, r, "rouge2"),
    "rougel": lambda h, r: rouge(h, r, "rougeL"),
    "meteor": meteor,
}


# -- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    scores: dict[str, float]
    missing: tuple[str, ...] = ()

    def __post_init__(self):
        overlap = set(self.scores) & set(self.missing)
        if overlap:
            raise ValidationError(f"metrics both scored and missing: {sorted(overlap)}")
        for k, v in self.scores.items():
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"score {k}={v} outside [0, 1]")

    @property
    def overall(self) -> float:
        return math.fsum(self.scores.values()) / len(self.scores) if self.scores else 0.0

    def to_dict(self) -> dict:
        return {"scores": dict(self.scores), "overall": self.overall, "missing": list(self.missing)}


@dataclass(frozen=True)
class ExternalScorer:
    name: str
    url: str
    timeout_s: float = 60.0
    attempts: int = 2

    def score(self, hypothesis: str, reference: str, client: httpx.Client) -> float:
        res = post_json(
            client,
            self.url.rstrip("/") + "/score",
            {"hypothesis": hypothesis, "reference": reference},
            attempts=self.attempts,
            backoff_s=0.2,
            timeout_s=self.timeout_s,
        )
        value = res.data.get("score")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
            raise TransportError(f"scorer {self.name} returned an invalid score: {str(res.data)[:200]}")
        return float(value)


def score_record(
    hypothesis: str,
    reference: str,
    external_scorers: Sequence[ExternalScorer] | None = None,
    client: httpx.Client | None = None,
    smoothing: str = "none",
) -> MetricReport:
    scores = native_scores(hypothesis, reference, smoothing)
    external = {s.name: s for s in external_scorers or ()}
    own = client is None and bool(external)
    if own:
        client = httpx.Client()
    try:
        for name, scorer in external.items():
            try:
                scores[name] = scorer.score(hypothesis, reference, client)
            except TransportError as exc:
                log.warning("external scorer %s unavailable: %s", name, exc)
    finally:
        if own:
            client.close()
    missing = tuple(m for m in EXTERNAL_METRICS if m not in scores)
    return MetricReport(scores=scores, missing=missing)


@dataclass(frozen=True)
class CorpusReport:
    task: str
    n: int
    means: dict[str, float]
    missing: tuple[str, ...]
    per_record: dict[str, MetricReport] = field(repr=False, default_factory=dict)
    aggregation: str = "mean-of-scores"

    @property
    def overall(self) -> float:
        return math.fsum(self.means.values()) / len(self.means) if self.means else 0.0

    def to_dict(self, include_records: bool = False) -> dict:
        d = {
            "task": self.task,
            "n": self.n,
            "aggregation": self.aggregation,
            "tokenizer": TOKENIZER_VERSION,
            "scores": dict(self.means),
            "overall": self.overall,
            "missing": list(self.missing),
        }
        if include_records:
            d["records"] = {k: v.to_dict() for k, v in sorted(self.per_record.items())}
        return d


def score_corpus(
    predictions: Mapping[str, str],
    gold: Mapping[str, str],
    task: str = "BHC",
    external_scorers: Sequence[ExternalScorer] | None = None,
    concurrency: int = 1,
    smoothing: str = "none",
) -> CorpusReport:
    """Score every gold record; a metric is kept only if every record has it."""
    missing_ids = sorted(set(gold) - set(predictions))
    if missing_ids:
        raise ValidationError(f"{len(missing_ids)} gold records have no prediction, e.g. {missing_ids[:5]}")
    extra = set(predictions) - set(gold)
    if extra:
        log.warning("ignoring %d predictions without gold text", len(extra))
    ids = sorted(gold)
    if not ids:
        raise ValidationError("no gold records to score")
    with httpx.Client() as client:
        def one(hid):
            return score_record(predictions[hid], gold[hid], external_scorers, client, smoothing)

        if concurrency > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                reports = list(pool.map(one, ids))
        else:
            reports = [one(h) for h in ids]
    per_record = dict(zip(ids, reports))
    present = [m for m in REPORT_COLUMNS[:-1] if all(m in r.scores for r in reports)]
    means = {m: math.fsum(r.scores[m] for r in reports) / len(reports) for m in present}
    missing = tuple(m for m in REPORT_COLUMNS[:-1] if m not in means)
    return CorpusReport(task=normalize_task(task), n=len(ids), means=means, missing=missing, per_record=per_record)


def combined_overall(reports: Sequence[CorpusReport]) -> float:
    return math.fsum(r.overall for r in reports) / len(reports) if reports else 0.0


def report_table(rows: Sequence[tuple[str, Mapping[str, float]]]) -> str:
    """Aligned text table in REPORT_COLUMNS order; absent metrics show '-'."""
    label_w = max([len("method")] + [len(label) for label, _ in rows])
    widths = [max(len(c), 6) for c in REPORT_COLUMNS]
    head = "method".ljust(label_w) + "  " + "  ".join(c.rjust(w) for c, w in zip(REPORT_COLUMNS, widths))
    lines = [head]
    for label, vals in rows:
        cells = [(f"{vals[c]:.4f}" if c in vals else "-").rjust(w) for c, w in zip(REPORT_COLUMNS, widths)]
        lines.append(label.ljust(label_w) + "  " + "  ".join(cells))
    return "\n".join(lines)


def report_row(report: CorpusReport) -> dict[str, float]:
    return {**report.means, "overall": report.overall}


# -- section ranking -------------------------------------------------------------


@dataclass(frozen=True)
class RankingRow:
    section_name: str
    per_metric_mean: dict[str, float]
    per_metric_rank: dict[str, float]
    avg_rank: float
    final_rank: int

    def to_dict(self) -> dict:
        return {
            "section_name": self.section_name,
            "per_metric_mean": dict(self.per_metric_mean),
            "per_metric_rank": dict(self.per_metric_rank),
            "avg_rank": self.avg_rank,
            "final_rank": self.final_rank,
        }


@dataclass(frozen=True)
class RankingTable:
    task: str
    metrics: tuple[str, ...]
    n_records: int
    rows: tuple[RankingRow, ...]

    def rank_of(self, section: str) -> int:
        for row in self.rows:
            if row.section_name == section:
                return row.final_rank
        raise KeyError(section)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "metrics": list(self.metrics),
            "n_records": self.n_records,
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_text(self) -> str:
        w = max(len("section"), *(len(r.section_name) for r in self.rows))
        head = "section".ljust(w) + "  " + "  ".join(m.rjust(7) for m in self.metrics) + "  avg_rank  rank"
        lines = [head]
        for r in self.rows:
            cells = "  ".join(f"{r.per_metric_mean[m]:.4f}".rjust(7) for m in self.metrics)
            lines.append(f"{r.section_name.ljust(w)}  {cells}  {r.avg_rank:8.3f}  {r.final_rank:4d}")
        return "\n".join(lines)


def default_candidates(task: str) -> tuple[str, ...]:
    key = "rank_bhc" if normalize_task(task) == "BHC" else "rank_di"
    return tuple(s.canonical_name for s in default_specs() if getattr(s, key) is not None)


def _fractional_ranks(values: Mapping[str, float]) -> dict[str, float]:
    # 1 = highest value; tied values share the mean of their rank positions.
    ordered = sorted(values.items(), key=lambda kv: -kv[1])
    ranks: dict[str, float] = {}
    i = 0
    while i < len(ordered):
        j = i
        while j + 1 < len(ordered) and ordered[j + 1][1] == ordered[i][1]:
            j += 1
        for k in range(i, j + 1):
            ranks[ordered[k][0]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


@dataclass(frozen=True)
class SectionScores:
    """Per-candidate mean metric values against one target section."""

    task: str
    n_records: int
    means: dict[str, dict[str, float]]

    def rank(self, metrics: Sequence[str] | None = None) -> RankingTable:
        """Rank on any subset of the scored metrics without rescoring."""
        scored = next(iter(self.means.values()))
        metrics = tuple(m.lower() for m in (metrics or tuple(scored)))
        bad = [m for m in metrics if m not in scored]
        if not metrics or bad:
            raise ValidationError(f"metric subset must be non-empty and already scored; bad: {bad}")
        cands = tuple(self.means)
        per_metric_rank: dict[str, dict[str, float]] = {c: {} for c in cands}
        for m in metrics:
            for c, r in _fractional_ranks({c: self.means[c][m] for c in cands}).items():
                per_metric_rank[c][m] = r
        avg = {c: math.fsum(per_metric_rank[c].values()) / len(metrics) for c in cands}
        order = sorted(cands, key=lambda c: (avg[c], c))
        rows = tuple(
            RankingRow(c, {m: self.means[c][m] for m in metrics}, per_metric_rank[c], avg[c], i + 1)
            for i, c in enumerate(order)
        )
        return RankingTable(task=self.task, metrics=metrics, n_records=self.n_records, rows=rows)


def section_scores(
    letters: Mapping[str, SectionedLetter],
    target: str,
    metrics: Sequence[str] = NATIVE_METRICS,
    candidates: Sequence[str] | None = None,
) -> SectionScores:
    """Mean metric value of each candidate section vs the gold target.

    Records lacking a candidate section score 0 for it, so every mean has
    the same support.
    """
    task = normalize_task(target)
    target_name = TARGET_OF[task]
    metrics = tuple(m.lower() for m in metrics)
    unknown = [m for m in metrics if m not in METRIC_FUNCS]
    if not metrics or unknown:
        raise ValidationError(f"metric subset must be non-empty and drawn from {NATIVE_METRICS}; bad: {unknown}")
    cands = tuple(c for c in (candidates or default_candidates(task)) if c != target_name)
    if len(cands) < 2:
        raise ValidationError("ranking needs at least 2 candidate sections")
    usable = {hid: l for hid, l in letters.items() if (l.sections.get(target_name) or "").strip()}
    if not usable:
        raise ValidationError(f"no records carry the {task} target section")
    sums: dict[str, dict[str, list[float]]] = {c: {m: [] for m in metrics} for c in cands}
    for hid in sorted(usable):
        gold_text = usable[hid].sections[target_name]
        gold_tokens = tokenize(gold_text)
        for c in cands:
            body = usable[hid].sections.get(c)
            for m in metrics:
                if not body or not body.strip():
                    score = 0.0
                elif m == "meteor":
                    score = meteor_from_tokens(tokenize(body), gold_tokens)
                else:
                    score = METRIC_FUNCS[m](body, gold_text)
                sums[c][m].append(score)
    n = len(usable)
    means = {c: {m: math.fsum(sums[c][m]) / n for m in metrics} for c in cands}
    return SectionScores(task=task, n_records=n, means=means)


def rank_sections(
    letters: Mapping[str, SectionedLetter],
    target: str,
    metrics: Sequence[str] = NATIVE_METRICS,
    candidates: Sequence[str] | None = None,
) -> RankingTable:
    """Rank candidate sections by average per-metric rank against the gold target."""
    return section_scores(letters, target, metrics, candidates).rank()


# -- baselines --------------------------------------------------------------------


def gold_targets(letters: Mapping[str, SectionedLetter], task: str) -> dict[str, str]:
    name = TARGET_OF[normalize_task(task)]
    return {hid: l.sections[name] for hid, l in letters.items() if (l.sections.get(name) or "").strip()}


def run_baseline(
    kind: str,
    corpus: Corpus,
    task: str,
    seed: int = 0,
    index: RetrievalIndex | None = None,
    fixed_words: str | None = None,
    *,
    letters: Mapping[str, SectionedLetter] | None = None,
    provider: EmbeddingProvider | None = None,
    index_targets: Mapping[str, str] | None = None,
    exclude_self: bool = True,
    generate: Callable[[str, str | None], Mapping[str, str]] | None = None,
) -> dict[str, str]:
    """Predictions ``hadm_id -> text`` for one baseline.

    ``random_shuffle`` permutes gold targets among records with ``seed``.
    ``retrieved_target`` copies the nearest indexed record's gold target
    (``index_targets`` maps index ids to their gold text). ``fixed_word`` and
    ``pipeline`` delegate to ``generate(strategy, fixed_words)``, which must
    return predictions for ``task``.
    """
    task = normalize_task(task)
    if kind not in BASELINES:
        raise ConfigurationError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    letters = dict(letters) if letters is not None else {r.hadm_id: segment(r.text) for r in corpus}
    gold = gold_targets(letters, task)
    if kind == "random_shuffle":
        ids = sorted(gold)
        donors = list(ids)
        random.Random(seed).shuffle(donors)
        return {hid: gold[d] for hid, d in zip(ids, donors)}
    if kind == "retrieved_target":
        if index is None or len(index) == 0:
            raise EmptyIndexError("retrieved_target baseline needs a non-empty index")
        if provider is None:
            raise ConfigurationError("retrieved_target baseline needs an embedding provider")
        targets = index_targets if index_targets is not None else gold
        spec = TaskContextSpec.default(task)
        out = {}
        for rec in sorted(corpus, key=lambda r: r.hadm_id):
            if rec.hadm_id not in gold:
                continue
            neighbor, _ = nearest_neighbor(index, rec, spec, provider, exclude_self, letters[rec.hadm_id])
            if neighbor not in targets:
                raise ValidationError(f"no gold {task} text for index entry {neighbor}")
            out[rec.hadm_id] = targets[neighbor]
        return out
    if generate is None:
        raise ConfigurationError(f"{kind} baseline needs a generation callback")
    strategy = "fixed" if kind == "fixed_word" else "retrieved"
    preds = generate(strategy, fixed_words if kind == "fixed_word" else None)
    return {hid: preds[hid] for hid in sorted(preds) if hid in gold}


__all__ = [
    "BASELINES",
    "CorpusReport",
    "EXTERNAL_METRICS",
    "ExternalScorer",
    "MetricReport",
    "NATIVE_METRICS",
    "REPORT_COLUMNS",
    "RankingRow",
    "RankingTable",
    "SectionScores",
    "bleu4",
    "combined_overall",
    "count_chunks",
    "default_candidates",
    "gold_targets",
    "lcs_length",
    "meteor",
    "meteor_alignment",
    "rank_sections",
    "report_table",
    "rouge",
    "run_baseline",
    "score_corpus",
    "score_record",
    "section_scores",
    "tokenize",
]
