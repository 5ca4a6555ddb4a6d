import json

import numpy as np
import pandas as pd
import pytest

from src.embeddings.store import EmbeddingMatrix, PairedCorpus
from src.ingestion.load_embeddings import save, save_pairs
from src.metrics.metric_vector import MetricVector
from src.metrics.summarize_runs import summarize
from src.pipeline.run_pipeline import EXIT_CONTRACT, EXIT_DATA, EXIT_OK, EXIT_USAGE, run


@pytest.fixture
def emb_files(tmp_path):
    rng = np.random.default_rng(0)
    images = EmbeddingMatrix(tuple(f"i{k}" for k in range(12)), rng.standard_normal((12, 5)), "image")
    texts = EmbeddingMatrix(tuple(f"t{k}" for k in range(9)), rng.standard_normal((9, 5)), "text")
    return save(images, tmp_path / "imgs.emb"), save(texts, tmp_path / "txts.emb")


def _run(tmp_path, *args):
    return run(["--metrics-dir", str(tmp_path / "metrics"), *map(str, args)])


def _records(tmp_path):
    return [json.loads(p.read_text(encoding="utf-8")) for p in sorted((tmp_path / "metrics").glob("run_*.json"))]


def test_kl_writes_one_row_per_query(tmp_path, emb_files):
    imgs, txts = emb_files
    out = tmp_path / "m.csv"
    code = _run(tmp_path, "kl", "--metric", "d_klr", "--queries", imgs, "--refs", txts, "--scale", 100, "--out", out)

    assert code == EXIT_OK
    metric = MetricVector.read_csv(out)
    assert len(metric) == 12
    assert metric.params["model"]["logit_scale"] == 100.0


def test_every_run_leaves_a_provenance_record(tmp_path, emb_files):
    imgs, txts = emb_files
    _run(tmp_path, "--seed", 5, "kl", "--metric", "d_kl", "--queries", imgs, "--refs", txts, "--out", tmp_path / "m.csv")

    (record,) = _records(tmp_path)
    assert record["run"]["command"] == "kl"
    assert record["run"]["exit_code"] == 0
    assert record["seeds"] == {"seed": 5, "source": "flag"}
    assert set(record["inputs"]) == {str(imgs), str(txts)}
    assert all(len(h) == 64 for h in record["inputs"].values())
    assert record["params"]["scale"] == 100.0


def test_seed_falls_back_to_environment(tmp_path, emb_files, monkeypatch):
    monkeypatch.setenv("DENSRATIO_SEED", "11")
    imgs, txts = emb_files
    _run(tmp_path, "moments", "--texts", txts, "--images", imgs, "--out", tmp_path / "moments.json")

    (record,) = _records(tmp_path)
    assert record["seeds"] == {"seed": 11, "source": "env"}


def test_unknown_flag_is_usage_error(tmp_path, emb_files):
    imgs, txts = emb_files
    code = _run(tmp_path, "kl", "--metric", "d_kl", "--queries", imgs, "--bogus", "--out", tmp_path / "m.csv")
    assert code == EXIT_USAGE


def test_missing_reference_set_is_contract_error(tmp_path, emb_files):
    imgs, _ = emb_files
    code = _run(tmp_path, "kl", "--metric", "d_kl", "--queries", imgs, "--out", tmp_path / "m.csv")
    assert code == EXIT_CONTRACT
    assert _records(tmp_path)[0]["run"]["exit_code"] == EXIT_CONTRACT


def test_non_finite_input_is_data_error(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1.0,2.0\ninf,1.0\n", encoding="utf-8")
    code = _run(tmp_path, "ingest", "--input", bad, "--out", tmp_path / "out.jsonl")
    assert code == EXIT_DATA


def test_missing_input_is_data_error(tmp_path):
    code = _run(tmp_path, "ingest", "--input", tmp_path / "nope.csv", "--out", tmp_path / "out.jsonl")
    assert code == EXIT_DATA


def test_ingest_quarantine_records_metrics(tmp_path):
    src = tmp_path / "raw.csv"
    src.write_text("id:a,1.0,2.0\nid:b,nan,1.0\nid:c,0.0,1.0\n", encoding="utf-8")
    code = _run(tmp_path, "ingest", "--input", src, "--quarantine", "--normalize", "--out", tmp_path / "clean.jsonl")

    assert code == EXIT_OK
    record = _records(tmp_path)[0]
    assert record["ingestion"]["quarantined_rows"] == 1
    assert len((tmp_path / "clean.jsonl").read_text(encoding="utf-8").splitlines()) == 2


def test_curate_keeps_a_quarter(tmp_path):
    n = 1000
    rng = np.random.default_rng(1)
    ids = tuple(f"p{k:04d}" for k in range(n))
    images = EmbeddingMatrix(ids, rng.standard_normal((n, 3)), "image")
    texts = EmbeddingMatrix(ids, rng.standard_normal((n, 3)), "text")
    pool = save_pairs(PairedCorpus(images, texts), tmp_path / "pool.jsonl")
    metric = MetricVector(ids, rng.uniform(size=n), "d_kl", "image").write_csv(tmp_path / "m.csv")

    out = tmp_path / "keep.jsonl"
    code = _run(tmp_path, "curate", "--metric", metric, "--keep", 0.25, "--pairs", pool, "--out", out)

    assert code == EXIT_OK
    assert len(out.read_text(encoding="utf-8").splitlines()) == 250


def test_toy_train_is_byte_identical_across_runs(tmp_path):
    world = tmp_path / "world.json"
    world.write_text(json.dumps({"K": 4, "d": 2, "seed": 0}), encoding="utf-8")
    outs = []
    for name in ("a.enc", "b.enc"):
        out = tmp_path / name
        code = _run(tmp_path, "--seed", 7, "toy-train", "--config", world, "--objective", "clip", "--steps", 5,
                    "--batch-size", 16, "--out", out)
        assert code == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_toy_train_then_eval(tmp_path):
    world = tmp_path / "world.json"
    world.write_text(json.dumps({"K": 3, "d": 2}), encoding="utf-8")
    params = tmp_path / "p.enc"
    assert _run(tmp_path, "toy-train", "--config", world, "--steps", 3, "--batch-size", 8, "--out", params,
                "--losses-out", tmp_path / "losses.csv") == EXIT_OK

    out = tmp_path / "eval.json"
    grid = tmp_path / "grid.csv"
    assert _run(tmp_path, "toy-eval", "--params", params, "--n-test", 50, "--out", out, "--grid-out", grid) == EXIT_OK

    result = json.loads(out.read_text(encoding="utf-8"))
    assert {"r2", "mse", "pearson"} <= set(result)
    assert len(pd.read_csv(tmp_path / "losses.csv")) == 3
    assert set(pd.read_csv(grid)["label"]) == {0, 1, 2}


def test_toy_gen_writes_pairs(tmp_path):
    out = tmp_path / "pairs.jsonl"
    assert _run(tmp_path, "toy-gen", "--n", 20, "--out", out, "--world-out", tmp_path / "w.json") == EXIT_OK
    df = pd.read_json(out, lines=True)
    assert len(df) == 20
    assert df["label"].between(0, 7).all()


def test_correlate_and_summarize(tmp_path, emb_files):
    imgs, txts = emb_files
    for metric in ("d_kl", "d_klr"):
        _run(tmp_path, "kl", "--metric", metric, "--queries", imgs, "--refs", txts, "--out", tmp_path / f"{metric}.csv")
    out = tmp_path / "corr.json"
    code = _run(tmp_path, "correlate", "--metrics", tmp_path / "d_kl.csv", tmp_path / "d_klr.csv", "--out", out)

    assert code == EXIT_OK
    assert json.loads(out.read_text(encoding="utf-8"))["labels"] == ["d_kl(image)", "d_klr(image)"]

    table = summarize(tmp_path / "metrics", n=10)
    assert len(table) == 3
    assert set(table["command"]) == {"kl", "correlate"}


def test_bootstrap_subcommand(tmp_path, emb_files):
    imgs, txts = emb_files
    out = tmp_path / "boot.csv"
    code = _run(tmp_path, "--seed", 1, "bootstrap", "--metric", "d_kl", "--queries", imgs, "--refs", txts,
                "--B", 5, "--out", out)
    assert code == EXIT_OK
    assert len(pd.read_csv(out, skiprows=1)) == 12


def test_iwl_weights_subcommand(tmp_path, emb_files):
    imgs, txts = emb_files
    out = tmp_path / "w.csv"
    code = _run(tmp_path, "iwl-weights", "--images", imgs, "--prompt", txts, "--prompt-id", "t3", "--out", out)
    assert code == EXIT_OK
    weights = MetricVector.read_csv(out)
    assert weights.kind == "iwl_weight"
    assert weights.params == {"a": 10.0}


def test_ngram_subcommand(tmp_path):
    captions = tmp_path / "captions.jsonl"
    with captions.open("w", encoding="utf-8") as f:
        for k in range(20):
            f.write(json.dumps({"id": f"c{k}", "text": f"a small dog number {k}"}) + "\n")
    ids = tuple(f"c{k}" for k in range(20))
    metric = MetricVector(ids, np.arange(20.0), "d_kl", "text").write_csv(tmp_path / "m.csv")

    out = tmp_path / "curves.csv"
    code = _run(tmp_path, "ngram", "--metric", metric, "--captions", captions, "--orders", 1, 3, "--out", out)
    assert code == EXIT_OK
    table = pd.read_csv(out)
    assert set(table["n"]) == {1, 3}
    assert (table.groupby(["group", "n"])["coverage"].max() == 1.0).all()


def test_iwl_demo_uses_capacity_limited_trial_recipe(tmp_path):
    world = tmp_path / "world.json"
    world.write_text(json.dumps({"world": {"K": 4, "d": 2}, "train": {"steps": 30, "batch_size": 16}}), encoding="utf-8")
    out = tmp_path / "iwl.json"
    code = _run(tmp_path, "iwl-demo", "--config", world, "--prompt-label", 1, "--trials", 1, "--steps", 5,
                "--out", out)

    assert code == EXIT_OK
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["reference"]["steps"] == 30
    assert report["reference"]["embed_dim"] == 16
    assert len(report["trials"]) == 1
    assert report["a"] > 0


def test_non_numeric_metric_value_is_data_error_with_record(tmp_path):
    ids = ("a", "b")
    rng = np.random.default_rng(2)
    images = EmbeddingMatrix(ids, rng.standard_normal((2, 3)), "image")
    texts = EmbeddingMatrix(ids, rng.standard_normal((2, 3)), "text")
    pool = save_pairs(PairedCorpus(images, texts), tmp_path / "pool.jsonl")
    metric = tmp_path / "m.csv"
    metric.write_text('# {"kind": "d_kl", "modality": "image", "params": {}}\nid,value\na,0.5\nb,oops\n',
                      encoding="utf-8")

    code = _run(tmp_path, "curate", "--metric", metric, "--keep", 0.5, "--pairs", pool, "--out", tmp_path / "k.jsonl")

    assert code == EXIT_DATA
    (record,) = _records(tmp_path)
    assert record["run"]["exit_code"] == EXIT_DATA
    assert "oops" in record["run"]["error"]


def test_headerless_metric_file_is_data_error(tmp_path):
    metric = tmp_path / "m.csv"
    metric.write_text("id,value\nc0,1.0\n", encoding="utf-8")
    captions = tmp_path / "captions.jsonl"
    captions.write_text('{"id": "c0", "text": "a dog"}\n', encoding="utf-8")

    code = _run(tmp_path, "ngram", "--metric", metric, "--captions", captions, "--out", tmp_path / "curves.csv")
    assert code == EXIT_DATA


def test_malformed_captions_are_data_error(tmp_path):
    ids = tuple(f"c{k}" for k in range(3))
    metric = MetricVector(ids, np.arange(3.0), "d_kl", "text").write_csv(tmp_path / "m.csv")
    captions = tmp_path / "captions.jsonl"
    captions.write_text('{"id": "c0", "text": "a dog"}\n{not json\n', encoding="utf-8")

    code = _run(tmp_path, "ngram", "--metric", metric, "--captions", captions, "--out", tmp_path / "curves.csv")

    assert code == EXIT_DATA
    assert _records(tmp_path)[0]["run"]["exit_code"] == EXIT_DATA


def test_malformed_yaml_config_is_data_error_with_record(tmp_path, emb_files):
    imgs, txts = emb_files
    config = tmp_path / "bad.yml"
    config.write_text("defaults: [unclosed\n", encoding="utf-8")

    code = _run(tmp_path, "--config", config, "moments", "--texts", txts, "--images", imgs,
                "--out", tmp_path / "moments.json")

    assert code == EXIT_DATA
    (record,) = _records(tmp_path)
    assert record["run"]["exit_code"] == EXIT_DATA
    assert "YAML" in record["run"]["error"]


def test_missing_config_file_still_writes_record(tmp_path, emb_files):
    imgs, txts = emb_files
    code = _run(tmp_path, "--config", tmp_path / "nope.yml", "moments", "--texts", txts, "--images", imgs,
                "--out", tmp_path / "moments.json")

    assert code == EXIT_DATA
    assert _records(tmp_path)[0]["run"]["exit_code"] == EXIT_DATA


def test_scale_defaults_to_config_value(tmp_path, emb_files):
    imgs, txts = emb_files
    config = tmp_path / "c.yml"
    config.write_text("defaults:\n  seed: 0\n  scale: 25.0\n", encoding="utf-8")
    out = tmp_path / "m.csv"
    code = _run(tmp_path, "--config", config, "kl", "--metric", "d_kl", "--queries", imgs, "--refs", txts, "--out", out)

    assert code == EXIT_OK
    assert MetricVector.read_csv(out).params["model"]["logit_scale"] == 25.0
    assert _records(tmp_path)[0]["params"]["scale"] == 25.0
