"""Command-line entry point: ``ward <subcommand> [options]``.

Every subcommand reads its inputs from, and writes its outputs atomically to,
the configured output directory, then prints a one-line JSON summary.
Exit codes: 0 ok, 1 validation error, 2 transport error, 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

import httpx

from . import evaluation as ev
from .config import RunConfig, load_config
from .corpus import Corpus, DischargeRecord, backfill_imaging, load_column_mapping, load_corpus, read_corpus_jsonl, read_csv_rows
from .errors import GenerationError, StagedFailureError, TransportError, ValidationError
from .generation import PipelineArtifacts, run_corpus
from .promptkit import load_templates
from .retrieval import HashingEmbedder, HttpEmbedder, RetrievalIndex, TARGET_OF, TaskContextSpec, build_index
from .segmenter import BHC, DI, SectionedLetter, segment, truncate_letters, truncation_bounds, word_count
from .wordcount import (
    ForestConfig,
    ForestModel,
    LogNormalFit,
    evaluate_classifier,
    extract_features,
    fit_lognormal,
    train_forest,
)

log = logging.getLogger("ward")

EXIT_OK, EXIT_VALIDATION, EXIT_TRANSPORT, EXIT_USAGE = 0, 1, 2, 64
AUX_TABLES = ("patients", "admissions", "diagnoses", "transfers", "radiology")
PRED_COLUMNS = {"BHC": BHC, "DI": DI}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- file helpers -------------------------------------------------------------------


def atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def jsonl_text(items) -> str:
    return "".join(json.dumps(i, sort_keys=True, ensure_ascii=False) + "\n" for i in items)


def _read_json(path: Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"missing input {path}; run the producing subcommand first") from None


# -- shared loaders -----------------------------------------------------------------


def corpus_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.corpus or cfg.paths.out_dir)


def load_segmented(cfg: RunConfig) -> tuple[Corpus, dict[str, SectionedLetter], dict]:
    base = corpus_dir(cfg)
    meta = _read_json(base / "segment_meta.json")
    if not (base / "corpus.jsonl").exists():
        raise ValidationError(f"missing input {base / 'corpus.jsonl'}; run segment first")
    corpus = read_corpus_jsonl(base / "corpus.jsonl", split_label=meta["split"])
    letters = {}
    with open(base / "sections.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                letters[d["hadm_id"]] = SectionedLetter.from_dict(d)
    return corpus, letters, meta


def make_provider(cfg: RunConfig, client: httpx.Client | None = None):
    r = cfg.retrieval
    if r.embedder == "hashing":
        return HashingEmbedder(r.dimension)
    return HttpEmbedder(
        r.embed_url or cfg.generation.base_url,
        model=r.embed_model,
        timeout_s=cfg.generation.timeout_s,
        attempts=cfg.generation.max_retries + 1,
        backoff_s=cfg.generation.backoff_s,
        client=client,
    )


def index_path(cfg: RunConfig, task: str, base: Path | None = None) -> Path:
    return (base or Path(cfg.paths.out_dir)) / f"index_{task.lower()}.wsix"


def load_artifacts(cfg: RunConfig, meta: dict, index_dir: Path | None, need_index: bool) -> PipelineArtifacts:
    base = index_dir or Path(cfg.paths.out_dir)
    indexes = {}
    for task in ("BHC", "DI"):
        p = index_path(cfg, task, base)
        if p.exists():
            indexes[task] = RetrievalIndex.load(p, task)
        elif need_index:
            log.warning("no %s index at %s", task, p)
    models = {}
    for task in ("BHC", "DI"):
        p = base / f"wc_model_{task.lower()}.json"
        if p.exists():
            models[task] = ForestModel.from_json(p.read_text(encoding="utf-8"))
    fits = {}
    fp = base / "wc_lognormal.json"
    if fp.exists():
        for task, d in json.loads(fp.read_text(encoding="utf-8")).items():
            fits[task] = LogNormalFit(mu=d["mu"], sigma=d["sigma"], n=d["n"])
    else:
        for task, idx in indexes.items():
            fits[task] = fit_lognormal([int(c) for c in idx.target_word_counts])
    fixed = {"BHC": cfg.wordcount.fixed_bhc, "DI": cfg.wordcount.fixed_di}
    return PipelineArtifacts(
        templates=load_templates(cfg.paths.templates or None),
        indexes=indexes,
        provider=make_provider(cfg),
        models=models,
        fits=fits,
        fixed_words=fixed,
        fallback_words=dict(fixed) if cfg.wordcount.fallback else None,
        exclude_self=meta["split"] == "train",
    )


# -- subcommands --------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> dict:
    from .synthetic import generate_synthetic_corpus

    sc = generate_synthetic_corpus(cfg.seed, args.n, twins=args.twins)
    out = Path(cfg.paths.out_dir)
    atomic_write(out / "discharge.csv", csv_text(["hadm_id", "text"], [(r.hadm_id, r.text) for r in sc.corpus]))
    for table, rows in sc.aux.items():
        header = list(rows[0].keys()) if rows else []
        atomic_write(out / "aux" / f"{table}.csv", csv_text(header, [[r[h] for h in header] for r in rows]))
    return {"records": len(sc.corpus), "discharge": str(out / "discharge.csv"), "aux_tables": sorted(sc.aux)}


def cmd_segment(cfg: RunConfig, args) -> dict:
    out = Path(cfg.paths.out_dir)
    discharge = Path(cfg.paths.discharge or out / "discharge.csv")
    aux_dir = Path(cfg.paths.aux_dir or out / "aux")
    aux_paths = {}
    for t in AUX_TABLES:
        for suffix in (".csv", ".csv.gz"):
            if (aux_dir / f"{t}{suffix}").exists():
                aux_paths[t] = aux_dir / f"{t}{suffix}"
                break
    mapping = load_column_mapping(cfg.paths.column_mapping or None)
    corpus = load_corpus(discharge, aux_paths or None, mapping, split_label=args.split)
    letters = {}
    for rec in corpus:
        letters[rec.hadm_id] = backfill_imaging(segment(rec.text), rec.radiology_notes)
    percentile = cfg.retrieval.percentile
    grouped: dict[str, list] = {}
    for hid, letter in letters.items():
        for name, text in letter.sections.items():
            if name not in (BHC, DI):
                grouped.setdefault(name, []).append((hid, text))
    bounds = truncation_bounds(grouped, percentile)
    letters = truncate_letters(letters, percentile)
    ids = [r.hadm_id for r in corpus]
    atomic_write(out / "corpus.jsonl", corpus.to_jsonl())
    atomic_write(out / "sections.jsonl", jsonl_text({"hadm_id": h, **letters[h].to_dict()} for h in ids))
    gold_rows = [(h, letters[h].sections.get(BHC, ""), letters[h].sections.get(DI, "")) for h in ids]
    atomic_write(out / "gold.csv", csv_text(["hadm_id", BHC, DI], gold_rows))
    meta = {
        "split": args.split,
        "records": len(corpus),
        "skipped_empty": corpus.skipped_empty,
        "percentile": percentile,
        "bounds": dict(sorted(bounds.items())),
        "with_bhc": sum(1 for h in ids if letters[h].sections.get(BHC, "").strip()),
        "with_di": sum(1 for h in ids if letters[h].sections.get(DI, "").strip()),
    }
    atomic_write(out / "segment_meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {k: meta[k] for k in ("split", "records", "skipped_empty", "with_bhc", "with_di")}


def cmd_build_index(cfg: RunConfig, args) -> dict:
    corpus, letters, _ = load_segmented(cfg)
    provider = make_provider(cfg)
    result = {}
    for task in cfg.tasks:
        idx = build_index(corpus, TaskContextSpec.default(task), provider, letters, cfg.retrieval.concurrency)
        path = index_path(cfg, task)
        atomic_write(path, idx.to_bytes())
        result[task] = {"entries": len(idx), "skipped": idx.skipped, "path": str(path)}
    return {"indexes": result}


def _index_dir(cfg: RunConfig, args) -> Path | None:
    return Path(args.index_dir) if getattr(args, "index_dir", None) else None


def cmd_predict_wc(cfg: RunConfig, args) -> dict:
    from .generation import resolve_word_target

    corpus, letters, meta = load_segmented(cfg)
    art = load_artifacts(cfg, meta, _index_dir(cfg, args), need_index=cfg.strategy == "retrieved")
    rows = []
    fallbacks = 0
    for rec in sorted(corpus, key=lambda r: r.hadm_id):
        for task in cfg.tasks:
            t = resolve_word_target(task, cfg.strategy, rec, letters[rec.hadm_id], art)
            fallbacks += t.fallback
            rows.append({"hadm_id": rec.hadm_id, "task": task, **t.to_dict()})
    path = Path(cfg.paths.out_dir) / f"word_targets_{cfg.strategy}.jsonl"
    atomic_write(path, jsonl_text(rows))
    return {"strategy": cfg.strategy, "targets": len(rows), "fallbacks": fallbacks, "path": str(path)}


def _select(corpus: Corpus, limit: int | None) -> list[DischargeRecord]:
    recs = sorted(corpus, key=lambda r: r.hadm_id)
    return recs[:limit] if limit else recs


def _generate(cfg: RunConfig, args, corpus, letters, meta, strategy: str, fixed_words: str | None = None):
    art = load_artifacts(cfg, meta, _index_dir(cfg, args), need_index=strategy == "retrieved")
    if fixed_words is not None:
        art.fixed_words = {**art.fixed_words, **{t: fixed_words for t in ("BHC", "DI")}}
    gen_cfg = cfg.generation.build()
    with httpx.Client() as client:
        return run_corpus(
            _select(corpus, getattr(args, "limit", None)), art, strategy, gen_cfg, letters,
            cfg.generation.concurrency, client,
        )


def cmd_generate(cfg: RunConfig, args) -> dict:
    corpus, letters, meta = load_segmented(cfg)
    outcomes = _generate(cfg, args, corpus, letters, meta, cfg.strategy)
    out = Path(cfg.paths.out_dir)
    gens, contexts, preds = [], [], []
    repaired = flagged = 0
    for hid, o in outcomes:
        for r in (o.bhc, o.di):
            gens.append(r.to_dict(hid))
            contexts.append({
                "hadm_id": hid,
                "task": r.task,
                "context": r.context,
                "word_target": r.word_target.to_dict() if r.word_target else None,
            })
            repaired += r.repaired
            flagged += not r.validation.passed
        preds.append((hid, o.bhc.text, o.di.text))
    atomic_write(out / "generations.jsonl", jsonl_text(gens))
    atomic_write(out / "contexts.jsonl", jsonl_text(contexts))
    atomic_write(out / "predictions.csv", csv_text(["hadm_id", BHC, DI], preds))
    return {
        "strategy": cfg.strategy,
        "records": len(outcomes),
        "repaired": repaired,
        "flagged": flagged,
        "predictions": str(out / "predictions.csv"),
    }


def cmd_baseline(cfg: RunConfig, args) -> dict:
    corpus, letters, meta = load_segmented(cfg)
    provider = make_provider(cfg)
    out = Path(cfg.paths.out_dir)
    cache: dict = {}

    def generate(strategy, fixed_words):
        key = (strategy, fixed_words)
        if key not in cache:
            outcomes = _generate(cfg, args, corpus, letters, meta, strategy, fixed_words)
            cache[key] = {task: {h: getattr(o, task.lower()).text for h, o in outcomes} for task in ("BHC", "DI")}
        return cache[key]

    written = {}
    for task in cfg.tasks:
        index = None
        if args.kind == "retrieved_target":
            p = index_path(cfg, task, _index_dir(cfg, args))
            index = RetrievalIndex.load(p, task) if p.exists() else None
        preds = ev.run_baseline(
            args.kind, corpus, task, cfg.seed, index=index,
            fixed_words=args.fixed_words, letters=letters, provider=provider,
            exclude_self=meta["split"] == "train",
            generate=lambda s, fw, t=task: generate(s, fw)[t],
        )
        written[task] = preds
    ids = sorted(set().union(*[set(p) for p in written.values()]))
    cols = [PRED_COLUMNS[t] for t in cfg.tasks]
    rows = [[h] + [written[t].get(h, "") for t in cfg.tasks] for h in ids]
    path = out / f"baseline_{args.kind}.csv"
    atomic_write(path, csv_text(["hadm_id", *cols], rows))
    return {"kind": args.kind, "tasks": cfg.tasks, "records": len(ids), "path": str(path)}


def _read_prediction_csv(path: Path) -> tuple[list[str], dict[str, dict[str, str]]]:
    rows = read_csv_rows(path, required=("hadm_id",))
    header = list(rows[0].keys()) if rows else []
    return header, {r["hadm_id"]: r for r in rows}


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    out = Path(cfg.paths.out_dir)
    pred_path = Path(args.pred or out / "predictions.csv")
    gold_path = Path(args.gold or corpus_dir(cfg) / "gold.csv")
    pheader, preds = _read_prediction_csv(pred_path)
    gheader, gold = _read_prediction_csv(gold_path)
    scorers = [ev.ExternalScorer(s["name"], s["url"]) for s in cfg.evaluation.scorers]
    reports = []
    for task in cfg.tasks:
        col = PRED_COLUMNS[task]
        if col not in pheader or col not in gheader:
            log.warning("skipping %s: column %s absent from predictions or gold", task, col)
            continue
        g = {h: r[col] for h, r in gold.items() if r[col].strip() and h in preds}
        if not g:
            continue
        p = {h: preds[h][col] for h in g}
        reports.append(ev.score_corpus(p, g, task, scorers, cfg.evaluation.concurrency, cfg.evaluation.smoothing))
    if not reports:
        raise ValidationError("no overlapping records with gold text to evaluate")
    rows = [(r.task, ev.report_row(r)) for r in reports]
    overall = ev.combined_overall(reports)
    if len(reports) > 1:
        keys = [k for k in ev.REPORT_COLUMNS[:-1] if all(k in r.means for r in reports)]
        mean = {k: sum(r.means[k] for r in reports) / len(reports) for k in keys}
        rows.append(("overall", {**mean, "overall": overall}))
    doc = {"tasks": [r.to_dict() for r in reports], "overall": overall, "pred": str(pred_path), "gold": str(gold_path)}
    atomic_write(out / "eval_report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    atomic_write(out / "eval_report.txt", ev.report_table(rows) + "\n")
    return {"overall": overall, **{r.task: r.overall for r in reports}, "report": str(out / "eval_report.json")}


def cmd_rank(cfg: RunConfig, args) -> dict:
    _, letters, _ = load_segmented(cfg)
    metrics = tuple(m.strip().lower() for m in args.metrics.split(",") if m.strip())
    out = Path(cfg.paths.out_dir)
    top = {}
    for task in cfg.tasks:
        table = ev.rank_sections(letters, task, metrics)
        atomic_write(out / f"ranking_{task.lower()}.json", json.dumps(table.to_dict(), indent=2) + "\n")
        atomic_write(out / f"ranking_{task.lower()}.txt", table.to_text() + "\n")
        top[task] = table.rows[0].section_name
    return {"top_section": top, "metrics": list(metrics)}


def cmd_train_wc(cfg: RunConfig, args) -> dict:
    import random

    corpus, letters, _ = load_segmented(cfg)
    out = Path(cfg.paths.out_dir)
    thresholds = {"BHC": cfg.wordcount.bhc_threshold, "DI": cfg.wordcount.di_threshold}
    fits, summary = {}, {}
    for task in cfg.tasks:
        target = TARGET_OF[task]
        rows = [
            (extract_features(r, letters[r.hadm_id]), word_count(letters[r.hadm_id].sections[target]))
            for r in sorted(corpus, key=lambda r: r.hadm_id)
            if letters[r.hadm_id].sections.get(target, "").strip()
        ]
        if len(rows) < 5:
            raise ValidationError(f"need at least 5 records with {task} targets to train, got {len(rows)}")
        order = list(range(len(rows)))
        random.Random(cfg.seed).shuffle(order)
        cut = int(round(len(rows) * cfg.train_fraction))
        train, held = [rows[i] for i in order[:cut]], [rows[i] for i in order[cut:]]
        fc = ForestConfig(n_trees=cfg.wordcount.n_trees, max_depth=cfg.wordcount.max_depth, seed=cfg.seed)
        model = train_forest([f for f, _ in train], [c for _, c in train], thresholds[task], fc)
        report = evaluate_classifier(model, [f for f, _ in held], [c for _, c in held])
        fits[task] = fit_lognormal([c for _, c in rows])
        atomic_write(out / f"wc_model_{task.lower()}.json", model.to_json())
        atomic_write(out / f"wc_report_{task.lower()}.txt", report.to_text() + "\n")
        atomic_write(out / f"wc_report_{task.lower()}.json", json.dumps(report.to_dict(), indent=2) + "\n")
        summary[task] = {"train": len(train), "held_out": len(held), "threshold": thresholds[task]}
    atomic_write(out / "wc_lognormal.json", json.dumps({t: f.to_dict() for t, f in fits.items()}, indent=2) + "\n")
    return {"models": summary}


def cmd_stub_server(cfg: RunConfig, args) -> dict:
    from .stub import StubOptions, StubServer

    server = StubServer(args.host, args.port, StubOptions(fail_first=args.fail_first))
    print(json.dumps({"command": "stub-server", "status": "serving", "url": server.url}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return {"url": server.url, "requests": len(server.requests)}


COMMANDS = {
    "synth": cmd_synth,
    "segment": cmd_segment,
    "build-index": cmd_build_index,
    "predict-wc": cmd_predict_wc,
    "generate": cmd_generate,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "rank": cmd_rank,
    "train-wc-classifier": cmd_train_wc,
    "stub-server": cmd_stub_server,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--task", help="bhc, di or both (comma separated)")
    common.add_argument("--strategy", choices=("fixed", "retrieved", "classifier", "distribution"))
    common.add_argument("--out", help="output directory")
    common.add_argument("--corpus-dir", help="directory holding segment outputs (default: --out)")
    common.add_argument("--base-url", help="model server base URL")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ward", description="Discharge-letter section generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--twins", action="store_true")
    p = sub.add_parser("segment", parents=[common], help="segment, backfill and truncate letters")
    p.add_argument("--split", choices=("train", "validation", "test"), default="train")
    sub.add_parser("build-index", parents=[common], help="embed contexts into flat indexes")
    for name in ("predict-wc", "generate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--index-dir")
        if name == "generate":
            p.add_argument("--limit", type=int)
    p = sub.add_parser("baseline", parents=[common])
    p.add_argument("--kind", choices=ev.BASELINES, required=True)
    p.add_argument("--index-dir")
    p.add_argument("--fixed-words")
    p.add_argument("--limit", type=int)
    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--pred")
    p.add_argument("--gold")
    p = sub.add_parser("rank", parents=[common])
    p.add_argument("--metrics", default=",".join(ev.NATIVE_METRICS))
    sub.add_parser("train-wc-classifier", parents=[common])
    p = sub.add_parser("stub-server", parents=[common])
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=11434)
    p.add_argument("--fail-first", type=int, default=0)
    return parser


def flag_overrides(args) -> dict[str, Any]:
    flags: dict[str, Any] = {
        "seed": args.seed,
        "strategy": args.strategy,
        "paths.out_dir": args.out,
        "paths.corpus": args.corpus_dir,
        "generation.base_url": args.base_url,
    }
    if args.task:
        flags["tasks"] = [t.strip().upper() for t in args.task.split(",") if t.strip()]
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v
    return flags


def _setup_logging(cfg: RunConfig, verbose: bool) -> logging.Handler:
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    Path(cfg.paths.out_dir).mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(Path(cfg.paths.out_dir) / "run.log", encoding="utf-8")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(fh)
    if verbose and not any(getattr(h, "_ward_console", False) for h in root.handlers):
        sh = logging.StreamHandler(sys.stderr)
        sh.setLevel(logging.INFO)
        sh._ward_console = True
        root.addHandler(sh)
    return fh


def _exit_for(exc: BaseException) -> int:
    if isinstance(exc, StagedFailureError):
        return _exit_for(exc.cause) if exc.cause is not None else EXIT_VALIDATION
    if isinstance(exc, TransportError):
        return EXIT_TRANSPORT
    return EXIT_VALIDATION


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        flags = flag_overrides(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    handler = None
    try:
        cfg = load_config(args.config, flags)
        handler = _setup_logging(cfg, args.verbose)
        log.info("command %s with resolved config %s", args.command, json.dumps(cfg.to_dict(), sort_keys=True))
        summary = COMMANDS[args.command](cfg, args)
    except (ValidationError, GenerationError, TransportError) as exc:
        code = _exit_for(exc)
        log.error("%s failed: %s", args.command, exc)
        print(json.dumps({"command": args.command, "status": "error", "error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return code
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()
    print(json.dumps({"command": args.command, "status": "ok", **summary}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
