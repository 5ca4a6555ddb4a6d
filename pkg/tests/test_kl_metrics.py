import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import entropy, pearsonr

from src.embeddings.store import EmbeddingMatrix, normalize
from src.metrics.kl_metrics import (
    compute_metric,
    conformity,
    d_c,
    d_c_rows,
    d_kl,
    d_kl_rows,
    d_klr,
    d_klr_rows,
    d_w,
    d_w_rows,
    metric_correlations,
    moment_summary,
    write_correlations_json,
)
from src.metrics.metric_vector import JENSEN_SLACK, MetricVector
from src.ratio.ratio_core import ScoreModel
from src.validation.validate_embeddings import ContractError, DataError, FormatError
from tests.helpers import unit_matrix


def test_d_kl_matches_discrete_kl_of_induced_distributions():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 33))
        d = int(rng.integers(2, 9))
        refs = rng.standard_normal((n, d))
        refs /= np.linalg.norm(refs, axis=1, keepdims=True)
        q = rng.standard_normal(d)
        q /= np.linalg.norm(q)
        a = float(rng.uniform(0.5, 20.0))

        s = a * refs @ q
        p = np.exp(s - s.max())
        p /= p.sum()
        expected = entropy(p, np.full(n, 1.0 / n))

        got = d_kl_rows(q[None, :], refs, a)[0]
        assert got == pytest.approx(expected, abs=1e-12)


def test_d_kl_and_d_klr_vanish_for_constant_scores():
    refs = normalize(EmbeddingMatrix(("a", "b", "c"), [[0.0, 1.0], [0.0, -1.0], [0.0, 1.0]], "text"))
    q = np.array([1.0, 0.0])
    model = ScoreModel(100.0)

    assert d_kl(q, refs, model) == pytest.approx(0.0, abs=1e-12)
    assert d_klr(q, refs, model) == pytest.approx(0.0, abs=1e-12)


def test_single_reference_gives_zero():
    refs = normalize(EmbeddingMatrix(("a",), [[0.6, 0.8]], "text"))
    model = ScoreModel(100.0)
    assert d_kl([1.0, 0.0], refs, model) == pytest.approx(0.0, abs=1e-12)
    assert d_klr([1.0, 0.0], refs, model) == pytest.approx(0.0, abs=1e-12)


unit_rows = arrays(np.float64, (8, 3), elements=st.floats(-1, 1, allow_nan=False)).filter(
    lambda a: (np.linalg.norm(a, axis=1) > 1e-3).all()
)


@given(unit_rows, st.floats(0.01, 200.0))
def test_d_klr_respects_jensen_bound(rows, a):
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    values = d_klr_rows(rows[:2], rows[2:], a)
    assert (values >= -1e-9).all()


def test_d_klr_jensen_bound_on_near_constant_scores():
    rng = np.random.default_rng(1)
    base = np.array([1.0, 0.0, 0.0])
    refs = base + 1e-9 * rng.standard_normal((500, 3))
    refs /= np.linalg.norm(refs, axis=1, keepdims=True)
    queries = rng.standard_normal((50, 3))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)

    assert (d_klr_rows(queries, refs, 100.0) >= -1e-9).all()


def test_d_klr_nonnegative_over_many_random_draws():
    rng = np.random.default_rng(2024)
    worst = np.inf
    for _ in range(10_000):
        n = int(rng.integers(1, 65))
        d = int(rng.integers(2, 17))
        a = float(np.exp(rng.uniform(np.log(0.01), np.log(200.0))))
        rows = rng.standard_normal((n + 1, d))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        worst = min(worst, float(d_klr_rows(rows[:1], rows[1:], a)[0]))
    assert worst >= -JENSEN_SLACK


def test_d_w_with_identity_covariance_equals_d_c():
    rng = np.random.default_rng(8)
    for d in (2, 5, 16):
        queries = rng.standard_normal((30, d))
        queries /= np.linalg.norm(queries, axis=1, keepdims=True)
        mean = 0.1 * rng.standard_normal(d)
        for a in (1.0, 7.0, 100.0):
            np.testing.assert_allclose(
                d_w_rows(queries, mean, np.eye(d), a), d_c_rows(queries, mean, a), rtol=1e-12, atol=1e-12
            )


@given(st.permutations(list(range(10))))
def test_d_kl_is_permutation_invariant(order):
    refs = unit_matrix(10, 4, "text", seed=5).rows
    q = unit_matrix(1, 4, "image", seed=6).rows
    base = d_kl_rows(q, refs, 20.0)[0]
    assert d_kl_rows(q, refs[list(order)], 20.0)[0] == pytest.approx(base, rel=1e-12, abs=1e-12)


def test_moment_summary_is_symmetric_and_biased(texts, images):
    summary = moment_summary(texts, images)

    np.testing.assert_array_equal(summary.cov_text, summary.cov_text.T)
    np.testing.assert_allclose(summary.cov_image, np.cov(images.rows, rowvar=False, bias=True), atol=1e-12)
    np.testing.assert_allclose(summary.mean_text, texts.rows.mean(axis=0))
    assert summary.counts == {"text": texts.n, "image": images.n}
    assert set(summary.fingerprints) == {"text", "image"}


def test_d_c_and_d_w_single_queries_match_their_formulas(texts, images):
    summary = moment_summary(texts, images)
    q = images.rows[0]
    a = 7.0

    diff = q - images.rows.mean(axis=0)
    assert d_c(q, summary, "image", a) == pytest.approx(a**2 * diff @ diff)
    cov_t = np.cov(texts.rows, rowvar=False, bias=True)
    assert d_w(q, summary, a) == pytest.approx(a**2 * diff @ cov_t @ diff)


def test_d_w_for_text_queries_uses_image_covariance(texts, images):
    summary = moment_summary(texts, images)
    q = texts.rows[3]
    diff = q - texts.rows.mean(axis=0)
    cov_i = np.cov(images.rows, rowvar=False, bias=True)
    assert d_w(q, summary, 2.0, modality="text") == pytest.approx(4.0 * diff @ cov_i @ diff)


def test_compute_metric_batches_match_single_queries(texts, images):
    model = ScoreModel(30.0)
    batch = compute_metric("d_kl", images, model, other=texts, chunk_size=7)

    assert batch.ids == images.ids
    for k in (0, 13, 39):
        assert batch.values[k] == pytest.approx(d_kl(images.rows[k], texts, model), rel=1e-12)


def test_compute_metric_is_independent_of_thread_count(texts, images):
    model = ScoreModel(30.0)
    one = compute_metric("d_klr", images, model, other=texts, chunk_size=5, threads=1)
    many = compute_metric("d_klr", images, model, other=texts, chunk_size=5, threads=4)
    np.testing.assert_array_equal(one.values, many.values)


def test_compute_metric_needs_other_set_for_kl(images):
    with pytest.raises(ContractError, match="reference set"):
        compute_metric("d_kl", images, ScoreModel(1.0))


def test_compute_metric_rejects_wrong_modality(images):
    wrong = unit_matrix(5, 6, "image", seed=9, prefix="w")
    with pytest.raises(ContractError, match="text"):
        compute_metric("d_kl", images, ScoreModel(1.0), other=wrong)


def test_exclude_self_with_external_set_is_rejected(images):
    with pytest.raises(ContractError, match="exclude_self"):
        compute_metric("d_c", images, ScoreModel(1.0), same=images, exclude_self=True)


def test_conformity_hand_example():
    m = normalize(EmbeddingMatrix(("a", "b", "c"), [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], "image"))
    np.testing.assert_allclose(conformity(m).values, [0.5, 0.5, 0.0], atol=1e-15)


def test_conformity_needs_two_rows():
    m = normalize(EmbeddingMatrix(("a",), [[1.0, 0.0]], "image"))
    with pytest.raises(ContractError):
        conformity(m)


def test_d_c_and_conformity_are_perfectly_anticorrelated_with_matched_means():
    m = unit_matrix(200, 8, "image", seed=11)
    leave_one_out = compute_metric("d_c", m, ScoreModel(10.0), exclude_self=True)
    r, _ = pearsonr(leave_one_out.values, conformity(m).values)
    assert r == pytest.approx(-1.0, abs=1e-6)


def test_d_c_and_conformity_mixed_means_still_anticorrelated():
    m = unit_matrix(1000, 16, "image", seed=12)
    full_mean = compute_metric("d_c", m, ScoreModel(10.0))
    r, _ = pearsonr(full_mean.values, conformity(m).values)
    assert r <= -0.999


def test_metric_correlations_marks_constant_metric_undefined():
    ids = ("a", "b", "c", "d")
    x = MetricVector(ids, [1.0, 2.0, 3.0, 4.0], "d_kl", "image")
    y = MetricVector(ids, [2.0, 4.0, 6.0, 8.5], "d_klr", "image")
    flat = MetricVector(ids, [1.0, 1.0, 1.0, 1.0], "d_c", "image")

    corr = metric_correlations([x, y, flat])

    assert list(corr.columns) == ["d_kl(image)", "d_klr(image)", "d_c(image)"]
    assert str(corr.dtypes.iloc[0]) == "Float64"
    assert corr.iat[0, 0] == 1.0
    assert corr.iat[0, 1] == pytest.approx(corr.iat[1, 0])
    assert corr.iat[0, 1] > 0.99
    assert pd.isna(corr.iat[0, 2])
    assert corr.iat[2, 2] == 1.0


def test_metric_correlations_require_shared_ids():
    x = MetricVector(("a", "b"), [1.0, 2.0], "d_kl", "image")
    y = MetricVector(("b", "a"), [1.0, 2.0], "d_kl", "image")
    with pytest.raises(ContractError):
        metric_correlations([x, y])


def test_correlation_json_writes_null_for_undefined(tmp_path):
    ids = ("a", "b", "c")
    corr = metric_correlations(
        [MetricVector(ids, [1.0, 2.0, 3.0], "d_kl", "image"), MetricVector(ids, [0.0, 0.0, 0.0], "raw_norm", "image")]
    )
    path = write_correlations_json(corr, tmp_path / "corr.json")
    doc = json.loads(path.read_text(encoding="utf-8"))

    assert doc["labels"] == ["d_kl(image)", "raw_norm(image)"]
    assert doc["matrix"][0][1] is None
    assert doc["matrix"][1][1] == 1.0


def test_metric_vector_csv_round_trip(tmp_path, texts, images):
    metric = compute_metric("d_klr", images, ScoreModel(100.0), other=texts)
    back = MetricVector.read_csv(metric.write_csv(tmp_path / "m.csv"))

    assert back.ids == metric.ids
    assert back.kind == "d_klr"
    np.testing.assert_array_equal(back.values, metric.values)
    assert back.params["model"]["logit_scale"] == 100.0


def test_metric_vector_non_numeric_value_is_format_error(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text('# {"kind": "d_kl", "modality": "image", "params": {}}\nid,value\na,1.5\nb,oops\n', encoding="utf-8")
    with pytest.raises(FormatError, match="'b'"):
        MetricVector.read_csv(path)


def test_metric_vector_requires_header_line(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("id,value\na,1.5\nb,2.5\n", encoding="utf-8")
    with pytest.raises(FormatError, match="header"):
        MetricVector.read_csv(path)


def test_metric_vector_header_must_name_kind_and_modality(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text('# {"kind": "d_klr"}\nid,value\na,1.5\n', encoding="utf-8")
    with pytest.raises(FormatError, match="modality"):
        MetricVector.read_csv(path)


def test_metric_vector_empty_value_is_data_error(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text('# {"kind": "d_kl", "modality": "text"}\nid,value\na,1.5\nb,\n', encoding="utf-8")
    with pytest.raises(DataError, match="'b'"):
        MetricVector.read_csv(path)
