"""Alternative predictors for the target-section word count.

Three approaches besides retrieval: a fixed number, the median of a fitted
log-normal, and a random-forest classifier that predicts whether the target
exceeds a threshold (450 words for BHC, 280 for DI).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import DischargeRecord
from .errors import ConfigurationError, ContractError, DomainError, ValidationError
from .retrieval import WordCountTarget, context_config, normalize_task
from .segmenter import TARGET_SECTIONS, SectionedLetter, canonical_names, word_count

DEFAULT_THRESHOLDS = {"BHC": 450, "DI": 280}
AUX_FEATURES = ("n_diagnoses", "n_transfers", "stay_duration_hours", "n_radiology_notes")


# -- log-normal ----------------------------------------------------------------


@dataclass(frozen=True)
class LogNormalFit:
    mu: float
    sigma: float
    n: int

    @property
    def median(self) -> float:
        return math.exp(self.mu)

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "n": self.n, "median": self.median}


def fit_lognormal(samples: Sequence[float]) -> LogNormalFit:
    """Maximum-likelihood log-normal fit: mean and population std of ln(x)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("cannot fit a log-normal to an empty sample")
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("log-normal samples must be finite and > 0")
    logs = np.log(x)
    mu = float(logs.mean())
    sigma = 0.0 if logs.max() == logs.min() else float(logs.std())
    return LogNormalFit(mu=mu, sigma=sigma, n=int(x.size))


# -- features ------------------------------------------------------------------


def default_feature_names() -> tuple[str, ...]:
    sections = [n for n in canonical_names() if n not in TARGET_SECTIONS]
    return tuple(f"wc_{n}" for n in sections) + AUX_FEATURES


@dataclass(frozen=True)
class FeatureVector:
    values: Mapping[str, float]

    def __post_init__(self):
        for k, v in self.values.items():
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"feature {k!r} must be finite and >= 0, got {v}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.values)

    def as_array(self, names: Sequence[str]) -> np.ndarray:
        missing = [n for n in names if n not in self.values]
        if missing:
            raise ContractError(f"feature vector is missing features: {', '.join(missing)}")
        return np.array([self.values[n] for n in names], dtype=np.float64)


def extract_features(
    record: DischargeRecord,
    letter: SectionedLetter,
    extra: Mapping[str, float] | None = None,
) -> FeatureVector:
    """Section word counts plus counts from the aggregated admission summary.

    Target sections are never used as features. ``extra`` adds user-supplied
    features (for example a lab-test count) under their own names.
    """
    values: dict[str, float] = {}
    for name in canonical_names():
        if name in TARGET_SECTIONS:
            continue
        values[f"wc_{name}"] = float(word_count(letter.sections.get(name, "")))
    adm = record.admission
    values["n_diagnoses"] = float(len(adm.diagnoses)) if adm else 0.0
    values["n_transfers"] = float(len(adm.transfer_summary)) if adm else 0.0
    values["stay_duration_hours"] = float(adm.stay_duration_hours) if adm else 0.0
    values["n_radiology_notes"] = float(len(record.radiology_notes))
    if extra:
        for k, v in extra.items():
            if k in values:
                raise ValidationError(f"extra feature {k!r} collides with a built-in feature")
            values[k] = float(v)
    return FeatureVector(values)


# -- random forest -------------------------------------------------------------


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    features_per_split: int | None = None  # None -> floor(sqrt(d))
    min_samples_split: int = 2
    seed: int = 0
    n_jobs: int = 1


def _leaf(counts: np.ndarray) -> dict:
    return {"leaf": [int(counts[0]), int(counts[1])]}


def _best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int]):
    n = y.size
    total1 = int(y.sum())
    parent = 1.0 - (total1 / n) ** 2 - ((n - total1) / n) ** 2
    best = None
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    for f in features:
        xs = X[:, f]
        order = np.argsort(xs, kind="stable")
        xs_s = xs[order]
        valid = xs_s[1:] > xs_s[:-1]
        if not valid.any():
            continue
        left1 = np.cumsum(y[order])[:-1].astype(np.float64)
        left0 = nl - left1
        right1 = total1 - left1
        right0 = nr - right1
        gini_l = 1.0 - (left0 / nl) ** 2 - (left1 / nl) ** 2
        gini_r = 1.0 - (right0 / nr) ** 2 - (right1 / nr) ** 2
        weighted = np.where(valid, (nl * gini_l + nr * gini_r) / n, np.inf)
        i = int(np.argmin(weighted))
        if weighted[i] < parent - 1e-12 and (best is None or weighted[i] < best[0]):
            best = (float(weighted[i]), f, float((xs_s[i] + xs_s[i + 1]) / 2.0))
    return best


def _grow(X, y, depth, cfg: ForestConfig, m: int, rng: np.random.Generator, names) -> dict:
    counts = np.bincount(y, minlength=2)
    if depth >= cfg.max_depth or counts.min() == 0 or y.size < cfg.min_samples_split:
        return _leaf(counts)
    d = X.shape[1]
    perm = rng.permutation(d)
    best = _best_split(X, y, perm[:m])
    if best is None and m < d:
        best = _best_split(X, y, perm[m:])
    if best is None:
        return _leaf(counts)
    _, f, thr = best
    go_left = X[:, f] <= thr
    return {
        "feature": names[f],
        "threshold": thr,
        "left": _grow(X[go_left], y[go_left], depth + 1, cfg, m, rng, names),
        "right": _grow(X[~go_left], y[~go_left], depth + 1, cfg, m, rng, names),
    }


def _tree_counts(node: dict, row: Mapping[str, float]) -> list[int]:
    while "leaf" not in node:
        node = node["left"] if row[node["feature"]] <= node["threshold"] else node["right"]
    return node["leaf"]


@dataclass
class ForestModel:
    trees: list[dict]
    feature_names: tuple[str, ...]
    threshold_label: int
    config: ForestConfig = field(default_factory=ForestConfig)
    class_medians: dict[int, float] = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def max_depth(self) -> int:
        return self.config.max_depth

    @property
    def features_per_split(self) -> int:
        return self.config.features_per_split or max(1, int(math.isqrt(len(self.feature_names))))

    @property
    def seed(self) -> int:
        return self.config.seed

    def to_json(self) -> str:
        doc = {
            "config": {
                "n_trees": self.config.n_trees,
                "max_depth": self.config.max_depth,
                "features_per_split": self.features_per_split,
                "min_samples_split": self.config.min_samples_split,
                "seed": self.config.seed,
                "threshold_label": self.threshold_label,
                "feature_names": list(self.feature_names),
                "class_medians": {str(k): v for k, v in sorted(self.class_medians.items())},
            },
            "trees": self.trees,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        doc = json.loads(text)
        c = doc["config"]
        cfg = ForestConfig(
            n_trees=c["n_trees"],
            max_depth=c["max_depth"],
            features_per_split=c["features_per_split"],
            min_samples_split=c.get("min_samples_split", 2),
            seed=c["seed"],
        )
        return cls(
            trees=doc["trees"],
            feature_names=tuple(c["feature_names"]),
            threshold_label=c["threshold_label"],
            config=cfg,
            class_medians={int(k): float(v) for k, v in c.get("class_medians", {}).items()},
        )


def _as_matrix(features: Sequence[FeatureVector], names: Sequence[str]) -> np.ndarray:
    return np.vstack([fv.as_array(names) for fv in features]) if features else np.zeros((0, len(names)))


def train_forest(
    features: Sequence[FeatureVector],
    word_counts: Sequence[int],
    threshold: int,
    config: ForestConfig | None = None,
) -> ForestModel:
    """Fit a Gini random forest on ``word_count > threshold`` labels.

    Each tree sees a bootstrap sample of the training set and a random subset
    of ``features_per_split`` features at every split. Per-tree generators are
    spawned from ``config.seed``, so results do not depend on ``n_jobs``.
    """
    cfg = config or ForestConfig()
    if len(features) != len(word_counts):
        raise ValidationError("features and word_counts differ in length")
    if len(features) < 2:
        raise ValidationError("need at least 2 training samples")
    names = tuple(features[0].names)
    X = _as_matrix(features, names)
    counts = np.asarray(word_counts)
    y = (counts > threshold).astype(np.int64)
    if y.min() == y.max():
        raise ValidationError(f"all training labels fall on one side of threshold {threshold}")
    m = cfg.features_per_split or max(1, int(math.isqrt(len(names))))
    m = min(m, len(names))
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)

    def fit_one(ss):
        rng = np.random.default_rng(ss)
        idx = rng.integers(0, y.size, y.size)
        return _grow(X[idx], y[idx], 0, cfg, m, rng, names)

    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            trees = list(pool.map(fit_one, children))
    else:
        trees = [fit_one(ss) for ss in children]
    medians = {c: float(np.median(counts[y == c])) for c in (0, 1)}
    return ForestModel(trees=trees, feature_names=names, threshold_label=threshold, config=cfg, class_medians=medians)


@dataclass(frozen=True)
class Prediction:
    cls: bool
    votes: float


def predict_class(model: ForestModel, features: FeatureVector) -> Prediction:
    """Majority vote over trees; a tied vote goes to class 0."""
    row = dict(zip(model.feature_names, features.as_array(model.feature_names)))
    ones = 0
    for tree in model.trees:
        c0, c1 = _tree_counts(tree, row)
        ones += c1 > c0
    votes = ones / len(model.trees)
    return Prediction(cls=votes > 0.5, votes=votes)


# -- evaluation report ---------------------------------------------------------


@dataclass(frozen=True)
class ClassRow:
    label: str
    precision: float
    recall: float
    f1: float
    support: int
    undefined: tuple[str, ...] = ()


@dataclass(frozen=True)
class ClassifierReport:
    rows: tuple[ClassRow, ...]

    def row(self, label: str) -> ClassRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            r.label: {
                "precision": r.precision,
                "recall": r.recall,
                "f1-score": r.f1,
                "support": r.support,
                "undefined": list(r.undefined),
            }
            for r in self.rows
        }

    def to_text(self) -> str:
        width = max(12, *(len(r.label) for r in self.rows))
        lines = [f"{'':<{width}} {'precision':>10} {'recall':>10} {'f1-score':>10} {'support':>10}"]
        for r in self.rows:
            lines.append(f"{r.label:<{width}} {r.precision:>10.3f} {r.recall:>10.3f} {r.f1:>10.3f} {r.support:>10d}")
        return "\n".join(lines) + "\n"


def _class_row(label: str, tp: int, fp: int, fn: int) -> ClassRow:
    undefined = []
    if tp + fp == 0:
        precision = 0.0
        undefined.append("precision")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        undefined.append("recall")
    else:
        recall = tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return ClassRow(label=label, precision=precision, recall=recall, f1=f1, support=tp + fn, undefined=tuple(undefined))


def report_from_confusion(tp: int, fp: int, fn: int, tn: int, threshold: int) -> ClassifierReport:
    """Per-class report where tp/fp/fn/tn are counted for the ">threshold" class."""
    return ClassifierReport(
        rows=(
            _class_row(f"<{threshold}", tn, fn, fp),
            _class_row(f">{threshold}", tp, fp, fn),
        )
    )


def report_from_labels(y_true: Sequence[bool], y_pred: Sequence[bool], threshold: int) -> ClassifierReport:
    t = np.asarray(y_true, dtype=bool)
    p = np.asarray(y_pred, dtype=bool)
    tp = int(np.sum(t & p))
    fp = int(np.sum(~t & p))
    fn = int(np.sum(t & ~p))
    tn = int(np.sum(~t & ~p))
    return report_from_confusion(tp, fp, fn, tn, threshold)


def evaluate_classifier(
    model: ForestModel,
    eval_features: Sequence[FeatureVector],
    eval_counts: Sequence[int],
    threshold: int | None = None,
) -> ClassifierReport:
    if not eval_features:
        raise ValidationError("evaluation set is empty")
    threshold = model.threshold_label if threshold is None else threshold
    truth = [c > threshold for c in eval_counts]
    preds = [predict_class(model, fv).cls for fv in eval_features]
    return report_from_labels(truth, preds, threshold)


# -- strategy dispatch ---------------------------------------------------------

STRATEGIES = ("fixed", "retrieved", "classifier", "distribution_median")


def predict_word_count(strategy: str, task: str, **inputs) -> WordCountTarget:
    """Resolve a word-count target for ``task`` using ``strategy``.

    Inputs by strategy: ``fixed`` takes optional ``fixed_words``;
    ``retrieved`` takes ``index``, ``record``, ``provider`` and optionally
    ``spec``, ``letter``, ``exclude_self``; ``classifier`` takes ``model`` and
    ``features``; ``distribution_median`` takes ``fit`` or ``samples``.
    """
    task = normalize_task(task)
    if strategy == "distribution":
        strategy = "distribution_median"
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown word-count strategy {strategy!r}")

    def need(*keys):
        missing = [k for k in keys if inputs.get(k) is None]
        if missing:
            raise ConfigurationError(f"strategy {strategy!r} needs inputs: {', '.join(missing)}")

    if strategy == "fixed":
        words = inputs.get("fixed_words") or context_config()["default_words"][task]
        return WordCountTarget(words_text=str(words), source="fixed")
    if strategy == "retrieved":
        from .retrieval import TaskContextSpec, retrieve_word_count

        need("index", "record", "provider")
        spec = inputs.get("spec") or TaskContextSpec.default(task)
        return retrieve_word_count(
            inputs["index"], inputs["record"], spec, inputs["provider"],
            exclude_self=bool(inputs.get("exclude_self", False)), letter=inputs.get("letter"),
        )
    if strategy == "classifier":
        need("model", "features")
        model: ForestModel = inputs["model"]
        pred = predict_class(model, inputs["features"])
        median = model.class_medians.get(int(pred.cls))
        if median is None:
            raise ConfigurationError("classifier model carries no class medians")
        return WordCountTarget(words_text=str(int(round(median))), source="classifier")
    if inputs.get("fit") is None:
        need("samples")
        fit = fit_lognormal(inputs["samples"])
    else:
        fit = inputs["fit"]
    return WordCountTarget(words_text=str(int(round(fit.median))), source="distribution")
