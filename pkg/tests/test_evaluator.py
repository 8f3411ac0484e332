import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perceptdist.data import ImageCache, load_manifest
from perceptdist.evaluator import (
    EvaluationError,
    MetricHandle,
    correlation_report,
    evaluate_2afc,
    evaluate_mos,
    format_table,
    get_metric,
    pearson,
    rankdata,
    spearman,
    twoafc_accuracy,
)
from perceptdist.synthetic import noise_amplitude_pairs, write_2afc_dataset, write_mos_dataset

from oracles import spearman_oracle, twoafc_oracle, pearson_oracle


def test_pearson_examples():
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(EvaluationError):
        pearson([1, 2], [1, 2])
    with pytest.raises(EvaluationError):
        pearson([1, 1, 1], [1, 2, 3])


def test_spearman_examples(rng):
    u = rng.standard_normal(20)
    assert spearman(u, np.exp(u)) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)
    v = [1.0, 2.0, 2.0, 5.0, 3.0]
    u = [0.3, 0.1, 0.7, 0.9, 0.2]
    assert spearman(u, v) == pytest.approx(spearman_oracle(u, v), abs=1e-12)
    with pytest.raises(EvaluationError):
        spearman([2, 2, 2], [1, 2, 3])


def test_rankdata_average_ties():
    np.testing.assert_array_equal(rankdata([10, 20, 20, 5, 20]), [2, 4, 4, 1, 4])


def test_oracles_on_random_instances():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n = int(rng.integers(3, 12))
        u = rng.integers(0, 5, n).astype(float)  # small alphabet forces ties
        v = rng.standard_normal(n)
        if len(set(u)) < 2:
            u[0] += 1
        assert abs(pearson(u, v) - pearson_oracle(u, v)) < 1e-9
        assert abs(spearman(u, v) - spearman_oracle(u, v)) < 1e-9


def test_twoafc_examples():
    d0 = np.arange(10, dtype=float) + 1
    d1 = np.zeros(10)
    p1 = np.full(10, 0.8)
    assert twoafc_accuracy(d0, d1, p1) == 1.0
    d1[3] = d0[3]
    assert twoafc_accuracy(d0, d1, p1) == 0.95
    assert twoafc_accuracy([1.0], [2.0], [0.5]) == 0.5
    with pytest.raises(EvaluationError):
        twoafc_accuracy([], [], [])


def test_twoafc_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = 8
        d0 = rng.integers(0, 4, n).astype(float)
        d1 = rng.integers(0, 4, n).astype(float)
        p1 = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], n)
        assert twoafc_accuracy(d0, d1, p1) == twoafc_oracle(d0, d1, p1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=15, unique=True),
       st.integers(0, 2**32 - 1))
def test_monotone_invariance(u, seed):
    # integer grid keeps the transformed values distinct in floating point
    u = np.array(u, dtype=float)
    v = np.random.default_rng(seed).standard_normal(len(u))
    for f in (np.exp, lambda x: x ** 3, lambda x: 2 * x + 7, np.arctan):
        assert spearman(f(u / 100), v) == spearman(u / 100, v)
    d0, d1 = u, np.roll(u, 1)
    p1 = np.abs(v) % 1
    base = twoafc_accuracy(d0, d1, p1)
    assert twoafc_accuracy(np.exp(d0 / 1e3), np.exp(d1 / 1e3), p1) == base
    assert 0 <= base <= 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=15), st.floats(0.01, 100),
       st.floats(-100, 100))
def test_pearson_affine_invariance(u, a, b):
    u = np.array(u)
    v = np.cos(np.arange(len(u)))
    if np.ptp(u) < 1e-3:
        return
    assert abs(pearson(a * u + b, v) - pearson(u, v)) < 1e-6


def test_sign_reversal_flips_2afc():
    rng = np.random.default_rng(0)
    for _ in range(20):
        d0, d1 = rng.random(9), rng.random(9)
        p1 = rng.choice([0.1, 0.3, 0.7, 0.9], 9)
        a = twoafc_accuracy(d0, d1, p1)
        assert twoafc_accuracy(-d0, -d1, p1) == pytest.approx(1 - a)


# metric plumbing ----------------------------------------------------------------


def test_get_metric():
    assert get_metric("ssim").name == "ssim"
    with pytest.raises(ValueError, match="unknown"):
        get_metric("lpips")
    with pytest.raises(ValueError, match="checkpoint"):
        get_metric("perceptnet")
    from perceptdist.baselines import NlapdGdnModel
    assert get_metric("nlapd-gdn", NlapdGdnModel()).name == "nlapd-gdn(ours)"


def test_similarity_metrics_become_distances(corpus):
    x = corpus[0]
    y = np.clip(x + 0.2, 0, 1)
    for name in ("ssim", "msssim"):
        m = get_metric(name)
        with pytest.warns(UserWarning) if name == "msssim" else _noop():
            assert m(x, x) == pytest.approx(0.0, abs=1e-12)
            assert m(x, y) > 0


class _noop:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _oracle_metric(manifest):
    cache = ImageCache()
    table = {cache(r.dist_path).tobytes(): r.dissimilarity for r in manifest.records}
    return MetricHandle("oracle", lambda ref, dist: table[np.asarray(dist).tobytes()])


def test_evaluate_mos_oracle(mos_dataset):
    m = load_manifest(mos_dataset)
    rep = evaluate_mos(_oracle_metric(m), m)
    assert rep.pearson == pytest.approx(1.0) and rep.spearman == pytest.approx(1.0)
    assert rep.n_samples == 12


def test_mse_is_monotone_in_noise_amplitude(tmp_path):
    # one reference, so every MOS value is distinct and mse order is forced
    pairs = noise_amplitude_pairs(n_images=1, amplitudes=(0.01, 0.03, 0.06, 0.1, 0.2))
    m = load_manifest(write_mos_dataset(tmp_path, pairs))
    rep = evaluate_mos(get_metric("mse"), m)
    assert rep.spearman == pytest.approx(1.0, abs=1e-12)
    assert 0 <= rep.pearson <= 1


def test_evaluate_mos_constant_metric_fails(mos_dataset):
    m = load_manifest(mos_dataset)
    with pytest.raises(EvaluationError, match="identical"):
        evaluate_mos(MetricHandle("const", lambda a, b: 1.0), m)


def test_report_outputs(tmp_path, mos_dataset):
    m = load_manifest(mos_dataset)
    rep = evaluate_mos(get_metric("mse"), m)
    d = json.loads(rep.to_json())
    assert set(d) == {"metric", "dataset", "pearson", "spearman", "n_samples"}
    rep.dump_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "ref,dist,distance,mos" and len(lines) == 13
    table = format_table([rep, correlation_report([1, 2, 4], [3, 2, 1], "x", "y")])
    assert table.splitlines()[0].split() == ["metric", "dataset", "n", "pearson", "spearman"]
    assert len(table.splitlines()) == 4


def test_evaluate_2afc(tmp_path):
    m = load_manifest(write_2afc_dataset(tmp_path, n=8))
    assert evaluate_2afc(get_metric("mse"), m) == 1.0
    flipped = MetricHandle("neg", lambda a, b: -get_metric("mse")(a, b))
    assert evaluate_2afc(flipped, m) == 0.0
