import csv
import json
import os

import pytest

from ward.cli import main
from ward.config import load_config
from ward.errors import ConfigurationError
from ward.retrieval import RetrievalIndex
from ward.stub import StubServer


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# -- config -------------------------------------------------------------------------


def test_empty_file_gives_defaults(tmp_path):
    cfg = load_config(write(tmp_path / "c.toml", ""), environ={})
    assert cfg.generation.model_id == "llama3:8b-instruct-q8_0"
    assert cfg.strategy == "retrieved" and cfg.tasks == ["BHC", "DI"]
    assert cfg.wordcount.fixed_bhc == "420" and cfg.wordcount.fixed_di == "100-200"


def test_precedence_flag_env_file(tmp_path):
    path = write(tmp_path / "c.toml", 'seed = 1\n[generation]\nmodel_id = "from-file"\ntemperature = 0.3\n')
    cfg = load_config(path, environ={})
    assert (cfg.seed, cfg.generation.model_id, cfg.generation.temperature) == (1, "from-file", 0.3)
    env = {"WARD_GENERATION__MODEL_ID": "from-env", "WARD_SEED": "2"}
    cfg = load_config(path, environ=env)
    assert (cfg.seed, cfg.generation.model_id) == (2, "from-env")
    cfg = load_config(path, flags={"seed": 3, "generation.model_id": "from-flag"}, environ=env)
    assert (cfg.seed, cfg.generation.model_id) == (3, "from-flag")
    assert cfg.generation.temperature == 0.3


def test_unknown_key_rejected_by_name(tmp_path):
    with pytest.raises(ConfigurationError, match="modle"):
        load_config(write(tmp_path / "c.toml", '[generation]\nmodle = "x"\n'), environ={})
    with pytest.raises(ConfigurationError, match="modle"):
        load_config(environ={"WARD_GENERATION__MODLE": "x"})


def test_type_mismatch_names_expected_type(tmp_path):
    with pytest.raises(ConfigurationError, match="integer"):
        load_config(write(tmp_path / "c.toml", 'seed = "seven"\n'), environ={})
    with pytest.raises(ConfigurationError, match="number"):
        load_config(flags={"generation.temperature": "warm"}, environ={})
    with pytest.raises(ConfigurationError):
        load_config(flags={"strategy": "oracle"}, environ={})


def test_invalid_toml(tmp_path):
    with pytest.raises(ConfigurationError, match="TOML"):
        load_config(write(tmp_path / "c.toml", "seed = = 1"), environ={})


# -- cli ----------------------------------------------------------------------------


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    lines = [l for l in out.out.splitlines() if l.strip()]
    summary = json.loads(lines[-1]) if lines else None
    return code, summary, out.err


@pytest.fixture
def workdir(tmp_path, capsys, monkeypatch):
    for k in [k for k in os.environ if k.startswith("WARD_")]:
        monkeypatch.delenv(k)
    out = tmp_path / "out"
    assert run(capsys, "synth", "--seed", "7", "--n", "50", "--out", str(out))[0] == 0
    assert run(capsys, "segment", "--out", str(out))[0] == 0
    return out


def test_synth_segment_build_index(workdir, capsys):
    code, summary, _ = run(capsys, "build-index", "--task", "bhc", "--out", str(workdir))
    assert code == 0 and summary["status"] == "ok"
    assert summary["indexes"]["BHC"]["entries"] == 50
    assert len(RetrievalIndex.load(workdir / "index_bhc.wsix")) == 50
    assert not (workdir / "index_di.wsix").exists()
    assert "resolved config" in (workdir / "run.log").read_text()


def test_generate_without_server_exits_transport(workdir, capsys):
    code, _, err = run(
        capsys, "generate", "--strategy", "fixed", "--out", str(workdir), "--limit", "1",
        "--base-url", "http://127.0.0.1:1", "--set", "generation.max_retries=0",
    )
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"] in ("TransportError", "StagedFailureError")


def test_evaluate_identity(workdir, capsys):
    gold = workdir / "gold.csv"
    code, summary, _ = run(capsys, "evaluate", "--pred", str(gold), "--gold", str(gold), "--out", str(workdir))
    assert code == 0
    report = json.loads((workdir / "eval_report.json").read_text())
    for task in report["tasks"]:
        for m in ("bleu", "rouge1", "rouge2", "rougel"):
            assert task["scores"][m] == pytest.approx(1.0, abs=1e-12)
        assert task["scores"]["meteor"] > 0.999
    assert summary["overall"] == pytest.approx(1.0, abs=1e-4)


def test_usage_errors_exit_64(capsys):
    assert main(["frobnicate"]) == 64
    assert main(["synth", "--no-such-flag"]) == 64
    assert main(["synth", "--set", "novalue"]) == 64
    capsys.readouterr()


def test_bad_config_exits_validation(tmp_path, capsys):
    cfg = write(tmp_path / "c.toml", "modle = 1\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "modle" in capsys.readouterr().err


def test_rerun_is_byte_identical(workdir, capsys):
    names = ["corpus.jsonl", "sections.jsonl", "gold.csv", "segment_meta.json", "index_bhc.wsix", "index_di.wsix"]
    assert run(capsys, "build-index", "--out", str(workdir))[0] == 0
    first = {n: (workdir / n).read_bytes() for n in names}
    assert run(capsys, "segment", "--out", str(workdir))[0] == 0
    assert run(capsys, "build-index", "--out", str(workdir))[0] == 0
    assert {n: (workdir / n).read_bytes() for n in names} == first
    assert not list(workdir.rglob("*.tmp*"))


def read_predictions(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_end_to_end_with_stub(workdir, capsys):
    assert run(capsys, "build-index", "--out", str(workdir))[0] == 0
    outputs = []
    with StubServer() as s:
        for _ in range(2):
            code, summary, _ = run(capsys, "generate", "--out", str(workdir), "--base-url", s.url, "--limit", "10")
            assert code == 0 and summary["records"] == 10
            outputs.append(((workdir / "predictions.csv").read_bytes(), (workdir / "contexts.jsonl").read_bytes()))
    assert outputs[0] == outputs[1]
    preds = read_predictions(workdir / "predictions.csv")
    assert all(r["brief_hospital_course"].startswith("Brief hospital course:") for r in preds)
    contexts = [json.loads(l) for l in (workdir / "contexts.jsonl").read_text().splitlines()]
    bhc = {r["hadm_id"]: r["brief_hospital_course"] for r in preds}
    di = [c for c in contexts if c["task"] == "DI"]
    assert len(di) == 10 and all(c["context"].startswith(bhc[c["hadm_id"]]) for c in di)
    log_text = (workdir / "run.log").read_text()
    assert all(b in log_text for b in bhc.values())
    code, summary, _ = run(capsys, "evaluate", "--out", str(workdir))
    assert code == 0 and 0.0 < summary["overall"] < 1.0


def test_rank_and_baselines(workdir, capsys):
    assert run(capsys, "build-index", "--out", str(workdir))[0] == 0
    code, summary, _ = run(capsys, "rank", "--task", "bhc", "--metrics", "rouge1,bleu", "--out", str(workdir))
    assert code == 0 and summary["metrics"] == ["rouge1", "bleu"]
    table = json.loads((workdir / "ranking_bhc.json").read_text())
    assert sorted(r["final_rank"] for r in table["rows"]) == list(range(1, len(table["rows"]) + 1))
    for kind in ("random_shuffle", "retrieved_target"):
        code, summary, _ = run(capsys, "baseline", "--kind", kind, "--out", str(workdir))
        assert code == 0 and summary["records"] == 50
    rows = read_predictions(workdir / "baseline_random_shuffle.csv")
    gold = read_predictions(workdir / "gold.csv")
    assert sorted(r["brief_hospital_course"] for r in rows) == sorted(r["brief_hospital_course"] for r in gold)


def test_word_count_commands(workdir, capsys):
    code, summary, _ = run(capsys, "train-wc-classifier", "--out", str(workdir), "--set", "wordcount.n_trees=5")
    assert code == 0 and summary["models"]["BHC"]["train"] == 40
    assert (workdir / "wc_model_bhc.json").exists() and (workdir / "wc_lognormal.json").exists()
    for strategy in ("classifier", "distribution", "fixed"):
        code, _, _ = run(capsys, "predict-wc", "--strategy", strategy, "--out", str(workdir))
        assert code == 0
        lines = (workdir / f"word_targets_{strategy}.jsonl").read_text().splitlines()
        assert len(lines) == 100
