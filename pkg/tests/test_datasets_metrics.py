import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixsig.datasets import (
    MixtureDataset,
    ToyConfig,
    check_weights,
    generate_toy,
    load_csv,
    load_dataset,
    save_dataset,
    split,
    toy_signals,
)
from mixsig.errors import DimensionMismatch, ParseError, SimplexViolation, SingleClassTruth
from mixsig.metrics import binary_auc, classification_metrics, dirichlet_log_density, regression_metrics


# ---------------------------------------------------------------------------
# toy generator
# ---------------------------------------------------------------------------


def test_noiseless_pure_row_is_first_bump():
    cfg = ToyConfig(n_train=1, n_test=0, noise_sigma=0.0)
    lam = np.linspace(0, 1, cfg.M)
    f = toy_signals([0.0], lam, cfg)[0]
    row = np.sum(np.array([1.0, 0.0]) * f, axis=-1)
    np.testing.assert_array_equal(row, np.exp(-((lam - 0.3) ** 2) / (2 * 0.08**2)))


def test_toy_shapes_and_truth_reconstruction():
    data = generate_toy(ToyConfig(n_train=7, n_test=5, M=20, seed=4))
    assert data.Y_train.shape == (7, 20) and data.Y_test.shape == (5, 20)
    assert data.R_train.shape == (7, 2) and data.R_test_truth.shape == (5, 2)
    t = data.truth
    y = np.sum(t["R"][:, None, :] * t["F"], axis=-1) + t["noise"]
    np.testing.assert_array_equal(np.vstack([data.Y_train, data.Y_test]), y)
    np.testing.assert_array_equal(np.vstack([data.R_train, data.R_test_truth]), t["R"])
    check_weights(t["R"])


def test_toy_signals_follow_latent_shift_and_scale():
    cfg = ToyConfig()
    lam = np.array([0.3 + 0.05 * 2.0, 0.7 + 0.05 * 2.0])
    f = toy_signals([2.0], lam, cfg)[0]
    # each peak maximum moves with h and scales by 1 + 0.2 h
    assert f[0, 0] == pytest.approx(1.4, rel=1e-15)
    assert f[1, 1] == pytest.approx(1.4, rel=1e-15)


def test_toy_determinism():
    a = generate_toy(ToyConfig(n_train=6, n_test=3, seed=11))
    b = generate_toy(ToyConfig(n_train=6, n_test=3, seed=11))
    c = generate_toy(ToyConfig(n_train=6, n_test=3, seed=12))
    np.testing.assert_array_equal(a.Y_train, b.Y_train)
    np.testing.assert_array_equal(a.truth["h"], b.truth["h"])
    assert not np.array_equal(a.Y_train, c.Y_train)


def test_toy_weight_mean_is_half():
    n = 100_000
    data = generate_toy(ToyConfig(n_train=n, n_test=0, M=1, seed=0))
    r = data.R_train[:, 0]
    # Dirichlet(1, 1) first coordinate is uniform: variance 1/12
    se = np.sqrt(1 / 12 / n)
    assert abs(r.mean() - 0.5) <= 3 * se


def test_toy_config_validation():
    with pytest.raises(ValueError):
        ToyConfig(n_train=-1)
    with pytest.raises(ValueError):
        ToyConfig(M=0)
    with pytest.raises(ValueError):
        ToyConfig(peak_width=0.0)
    with pytest.raises(ValueError):
        ToyConfig(n_train=0, n_test=0)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_csv_zeros_with_identity_weights(tmp_path):
    y = _write(tmp_path / "y.csv", "\n".join(["0,0,0,0"] * 3) + "\n")
    r = _write(tmp_path / "r.csv", "a,b,c\n1,0,0\n0,1,0\n0,0,1\n")
    data = load_csv(y, r)
    assert data.n_train == 3 and data.n_locations == 4
    np.testing.assert_array_equal(data.lam, np.linspace(0, 1, 4))


def test_load_csv_rejects_off_simplex_rows(tmp_path):
    y = _write(tmp_path / "y.csv", "1,2\n3,4\n")
    r = _write(tmp_path / "r.csv", "0.5,0.5\n0.5,0.6\n")
    with pytest.raises(SimplexViolation) as err:
        load_csv(y, r)
    assert err.value.rows == [1]


def test_load_csv_reports_location(tmp_path):
    y = _write(tmp_path / "y.csv", "y0,y1\n1,2\n3,x\n")
    with pytest.raises(ParseError) as err:
        load_csv(y)
    assert err.value.row == 3 and err.value.col == 2
    ragged = _write(tmp_path / "ragged.csv", "1,2\n3\n")
    with pytest.raises(ParseError):
        load_csv(ragged)
    with pytest.raises(ParseError):
        load_csv(tmp_path / "missing.csv")


def test_load_csv_locations(tmp_path):
    y = _write(tmp_path / "y.csv", "1,2,3\n")
    lam = _write(tmp_path / "lam.csv", "400\n500\n600\n")
    data = load_csv(y, path_lambda=lam)
    np.testing.assert_array_equal(data.lam, [400, 500, 600])
    assert data.n_test == 1 and data.n_train == 0
    bad = _write(tmp_path / "bad.csv", "1\n3\n2\n")
    with pytest.raises(ParseError):
        load_csv(y, path_lambda=bad)


def test_classification_rows_must_be_one_hot():
    check_weights(np.eye(3), "classification")
    with pytest.raises(SimplexViolation):
        check_weights([[0.5, 0.5]], "classification")


def test_split_partition():
    g = np.random.default_rng(0)
    data = MixtureDataset(g.normal(size=(10, 3)), g.dirichlet(np.ones(2), 10), np.zeros((0, 3)), np.arange(3.0))
    a = split(data, 0.5, seed=7)
    b = split(data, 0.5, seed=7)
    assert a.n_train == 5 and a.n_test == 5
    np.testing.assert_array_equal(a.Y_test, b.Y_test)
    rows = {tuple(r) for r in np.vstack([a.Y_train, a.Y_test])}
    assert rows == {tuple(r) for r in data.Y_train}
    np.testing.assert_array_equal(np.vstack([a.R_train, a.R_test_truth]).sum(), data.R_train.sum())
    with pytest.raises(ValueError):
        split(a, 0.5, 1)


def test_save_load_round_trip(tmp_path):
    data = generate_toy(ToyConfig(n_train=5, n_test=3, M=7, seed=2))
    save_dataset(data, tmp_path)
    back = load_dataset(tmp_path)
    for key in ("Y_train", "R_train", "Y_test", "R_test_truth", "lam"):
        np.testing.assert_array_equal(getattr(back, key), getattr(data, key))


def test_round_trip_without_test_rows(tmp_path):
    data = generate_toy(ToyConfig(n_train=4, n_test=0, M=3, seed=2))
    save_dataset(data, tmp_path)
    back = load_dataset(tmp_path)
    assert back.n_test == 0
    np.testing.assert_array_equal(back.Y_train, data.Y_train)


@settings(max_examples=30, deadline=None)
@given(values=arrays(np.float64, (3, 4), elements=st.floats(-1e300, 1e300)))
def test_round_trip_is_bitwise(tmp_path_factory, values):
    d = tmp_path_factory.mktemp("rt")
    r = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    data = MixtureDataset(values, r, np.zeros((0, 4)), np.arange(4.0))
    save_dataset(data, d)
    np.testing.assert_array_equal(load_dataset(d).Y_train, values)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_regression_metrics_concentrated():
    truth = np.random.default_rng(0).dirichlet(np.ones(3), 6)
    m = regression_metrics(1e6 * truth + 1e-3, truth)
    assert m.mse <= 1e-6
    assert m.rmse == pytest.approx(np.sqrt(m.mse))


def test_regression_metrics_uniform():
    n = 4
    truth = np.full((n, 3), 1 / 3)
    m = regression_metrics(np.ones((n, 3)), truth)
    assert m.mse == 0.0
    # flat Dirichlet density is Gamma(C) = 2 everywhere
    assert m.nlpd == pytest.approx(-n * np.log(2), rel=1e-14)


def test_nlpd_finite_on_pure_rows():
    from scipy.stats import dirichlet

    m = regression_metrics(np.array([[5.0, 0.5]]), np.array([[1.0, 0.0]]))
    assert np.isfinite(m.nlpd)
    ref = -dirichlet.logpdf(np.array([1 - 1e-6, 1e-6]), [5.0, 0.5])
    assert m.nlpd == pytest.approx(ref, rel=1e-10)


def test_regression_metrics_shape_check():
    with pytest.raises(DimensionMismatch):
        regression_metrics(np.ones((2, 3)), np.ones((2, 2)) / 2)


def test_dirichlet_density_matches_scipy():
    from scipy.stats import dirichlet

    g = np.random.default_rng(3)
    a = g.uniform(0.3, 4, size=(5, 4))
    x = g.dirichlet(np.ones(4), 5)
    ref = [dirichlet.logpdf(xi, ai) for ai, xi in zip(a, x)]
    np.testing.assert_allclose(dirichlet_log_density(a, x), ref, rtol=1e-12)


def test_auc_examples():
    assert binary_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert binary_auc([0.1, 0.2, 0.9, 0.95], [0, 0, 1, 1]) == 1.0
    assert binary_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(SingleClassTruth):
        binary_auc([0.1, 0.2], [1, 1])


def test_uniform_probabilities():
    labels = np.array([0, 2, 1, 0, 2])
    m = classification_metrics(np.full((5, 3), 1 / 3), labels)
    assert m.accuracy == pytest.approx(np.mean(labels == 0))
    assert m.lpp == pytest.approx(5 * np.log(1 / 3), rel=1e-14)
    assert m.roc_auc == 0.5


def test_classification_metrics_binary_vector_and_clipping():
    m = classification_metrics(np.array([0.0, 1.0, 0.2]), np.array([1, 1, 0]))
    assert m.accuracy == pytest.approx(2 / 3)
    assert m.lpp == pytest.approx(np.log(1e-12) + np.log(0.8), rel=1e-12)
    with pytest.raises(DimensionMismatch):
        classification_metrics(np.full((2, 2), 0.5), np.array([0, 2]))
    with pytest.raises(SingleClassTruth):
        classification_metrics(np.full((2, 2), 0.5), np.array([1, 1]))


def test_absent_class_excluded_from_macro_auc():
    probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.1, 0.8, 0.1]])
    m = classification_metrics(probs, np.array([0, 1, 0, 1]))
    assert m.roc_auc == 1.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(4, 30))
def test_auc_inversion_and_permutation(seed, n):
    g = np.random.default_rng(seed)
    scores = g.permutation(n) / n
    labels = np.zeros(n, dtype=int)
    labels[g.choice(n, size=g.integers(1, n), replace=False)] = 1
    auc = binary_auc(scores, labels)
    assert binary_auc(-scores, labels) == pytest.approx(1 - auc, abs=1e-12)
    perm = g.permutation(n)
    assert binary_auc(scores[perm], labels[perm]) == auc


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metrics_permutation_invariant(seed):
    g = np.random.default_rng(seed)
    alpha = g.uniform(0.2, 5, size=(8, 3))
    truth = g.dirichlet(np.ones(3), 8)
    perm = g.permutation(8)
    a, b = regression_metrics(alpha, truth), regression_metrics(alpha[perm], truth[perm])
    assert a.mse == pytest.approx(b.mse, rel=1e-12)
    assert a.nlpd == pytest.approx(b.nlpd, rel=1e-12)
    probs = g.dirichlet(np.ones(3), 8)
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    c, d = classification_metrics(probs, labels), classification_metrics(probs[perm], labels[perm])
    assert c.accuracy == d.accuracy
    assert c.lpp == pytest.approx(d.lpp, rel=1e-12)
    assert c.roc_auc == pytest.approx(d.roc_auc, rel=1e-12)
