import logging

import numpy as np
import pytest

from src.embeddings.store import EmbeddingMatrix, PairedCorpus, normalize, raw_norms, subset
from src.ingestion.load_embeddings import load, load_captions, load_pairs, save, save_pairs
from src.validation.validate_embeddings import ContractError, DataError, FormatError


def _matrix(rows, modality="image", ids=None):
    rows = np.asarray(rows, dtype=float)
    ids = ids or tuple(f"r{k}" for k in range(len(rows)))
    return EmbeddingMatrix(ids, rows, modality)


def test_normalize_gives_unit_rows_and_keeps_norms():
    m = _matrix([[3.0, 4.0], [0.0, 2.0]])
    out = normalize(m)

    assert out.normalized
    np.testing.assert_allclose(np.linalg.norm(out.rows, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(raw_norms(out).values, [5.0, 2.0])


def test_normalize_zero_row_raises_data_error():
    with pytest.raises(DataError, match="r1"):
        normalize(_matrix([[1.0, 0.0], [0.0, 0.0]]))


def test_nan_row_is_rejected_with_its_id():
    with pytest.raises(DataError, match="bad"):
        _matrix([[1.0, 2.0], [np.nan, 1.0]], ids=("ok", "bad"))


def test_empty_matrix_is_a_contract_error():
    with pytest.raises(ContractError, match="empty matrix"):
        EmbeddingMatrix((), np.zeros((0, 3)), "image")


def test_duplicate_ids_rejected():
    with pytest.raises(ContractError, match="Duplicate"):
        _matrix([[1.0], [2.0]], ids=("a", "a"))


def test_subset_follows_requested_order():
    m = _matrix([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], ids=("a", "b", "c"))
    out = subset(m, ["c", "a"])

    assert out.ids == ("c", "a")
    np.testing.assert_array_equal(out.rows, [[1.0, 1.0], [1.0, 0.0]])


def test_subset_unknown_id_raises():
    m = _matrix([[1.0, 0.0]], ids=("a",))
    with pytest.raises(ContractError):
        subset(m, ["z"])


def test_rows_are_read_only():
    m = _matrix([[1.0, 0.0]])
    with pytest.raises(ValueError):
        m.rows[0, 0] = 2.0


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_text_formats_round_trip_exactly(tmp_path, fmt):
    rng = np.random.default_rng(0)
    m = EmbeddingMatrix(("x", "y", "z"), rng.standard_normal((3, 5)), "text")
    path = save(m, tmp_path / f"m.{fmt}")

    back = load(path, modality="text")
    assert back.ids == m.ids
    np.testing.assert_array_equal(back.rows, m.rows)


def test_emb1_round_trip_and_precision_warning(tmp_path, caplog):
    m = EmbeddingMatrix(("a", "b"), np.array([[0.1, 0.2], [0.5, 0.25]]), "text")
    with caplog.at_level(logging.WARNING, logger="densratio"):
        path = save(m, tmp_path / "m.emb")
    assert "loses precision" in caplog.text

    back = load(path)
    assert back.modality == "text"
    assert back.ids == ("a", "b")
    np.testing.assert_array_equal(back.rows, m.rows.astype(np.float32).astype(np.float64))


def test_emb1_bad_magic(tmp_path):
    path = tmp_path / "bad.emb"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(FormatError, match="magic"):
        load(path)


def test_csv_dimension_mismatch_names_row(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("1.0,2.0\n3.0,4.0,5.0\n", encoding="utf-8")
    with pytest.raises(FormatError, match="Row 1"):
        load(path)


def test_csv_nan_entry_is_data_error(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("id:a,1.0,2.0\nid:b,nan,4.0\n", encoding="utf-8")
    with pytest.raises(DataError, match="'b'"):
        load(path)


def test_quarantine_drops_non_finite_rows(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(
        '{"id": "a", "vec": [1.0, 0.0]}\n{"id": "b", "vec": [null, 1.0]}\n{"id": "c", "vec": [0.0, 1.0]}\n',
        encoding="utf-8",
    )
    m, metrics = load(path, quarantine=True, return_metrics=True)

    assert m.ids == ("a", "c")
    assert metrics["input_rows"] == 3
    assert metrics["clean_rows"] == 2
    assert metrics["quarantined_rows"] == 1


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load(tmp_path / "missing.csv")


def test_pairs_round_trip(tmp_path):
    images = _matrix([[1.0, 0.0], [0.0, 1.0]], "image", ids=("p0", "p1"))
    texts = _matrix([[0.5, 0.5], [1.0, 2.0]], "text", ids=("p0", "p1"))
    corpus = PairedCorpus(images, texts, captions=("a cat", "a dog"))

    back = load_pairs(save_pairs(corpus, tmp_path / "pairs.jsonl"))
    assert back.ids == ("p0", "p1")
    assert back.captions == ("a cat", "a dog")
    np.testing.assert_array_equal(back.texts.rows, texts.rows)


def test_paired_corpus_needs_bijection():
    images = _matrix([[1.0], [2.0]], "image")
    texts = _matrix([[1.0], [2.0]], "text")
    with pytest.raises(ContractError, match="bijection"):
        PairedCorpus(images, texts, pairing=[0, 0])


def test_aligned_texts_follows_pairing():
    images = _matrix([[1.0], [2.0]], "image", ids=("i0", "i1"))
    texts = _matrix([[10.0], [20.0]], "text", ids=("t0", "t1"))
    aligned = PairedCorpus(images, texts, pairing=[1, 0]).aligned_texts()

    assert aligned.ids == ("t1", "t0")
    np.testing.assert_array_equal(aligned.rows[:, 0], [20.0, 10.0])


def test_load_captions_indexes_by_id(tmp_path):
    path = tmp_path / "captions.jsonl"
    path.write_text('{"id": "c1", "text": "A dog", "image_id": "i1"}\n', encoding="utf-8")
    df = load_captions(path)

    assert df.loc["c1", "text"] == "A dog"
    assert df.loc["c1", "image_id"] == "i1"


def test_load_captions_malformed_line_is_format_error(tmp_path):
    path = tmp_path / "captions.jsonl"
    path.write_text('{"id": "c1", "text": "A dog"}\n{not json\n', encoding="utf-8")
    with pytest.raises(FormatError):
        load_captions(path)
