import numpy as np
import pytest

from wbmark.errors import FittingError, InputError
from wbmark.gmm import fit_gmm


def blobs(seed=0, n=600, centers=((-4.0, -4.0), (4.0, 4.0)), spread=0.4):
    rng = np.random.default_rng(seed)
    parts = [c + spread * rng.standard_normal((n // len(centers), 2))
             for c in np.asarray(centers)]
    return np.concatenate(parts)


def test_two_blob_centers_recovered():
    x = blobs()
    model = fit_gmm(x, 2, seed=1)
    got = model.means[np.argsort(model.means[:, 0])]
    expected = np.array([[-4.0, -4.0], [4.0, 4.0]])
    assert np.abs(got - expected).max() < 0.1
    assert model.converged


def test_single_component_is_global_mean():
    x = blobs(seed=3)
    model = fit_gmm(x, 1, seed=0)
    assert np.allclose(model.means[0], x.mean(axis=0), atol=1e-9)


def test_weights_sum_to_one():
    model = fit_gmm(blobs(seed=4), 3, seed=2)
    assert model.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert (model.weights > 0).all()


def test_deterministic_given_seed():
    x = blobs(seed=5)
    a = fit_gmm(x, 2, seed=7)
    b = fit_gmm(x, 2, seed=7)
    assert np.array_equal(a.means, b.means)
    assert np.array_equal(a.variances, b.variances)
    assert a.loglik_trace == b.loglik_trace


def test_predict_separates_blobs():
    x = blobs(seed=6)
    model = fit_gmm(x, 2, seed=1)
    labels = model.predict(x)
    first, second = labels[:300], labels[300:]
    assert len(set(first.tolist())) == 1
    assert len(set(second.tolist())) == 1
    assert first[0] != second[0]


def test_loglik_trace_monotone():
    model = fit_gmm(blobs(seed=8), 2, seed=3)
    trace = model.loglik_trace
    assert all(b >= a - 1e-6 for a, b in zip(trace, trace[1:]))


def test_non_convergence_raises_with_trace():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((400, 4))
    with pytest.raises(FittingError) as exc:
        fit_gmm(x, 3, seed=1, max_iter=2, tol=0.0)
    assert len(exc.value.loglik_trace) == 2


def test_input_validation():
    with pytest.raises(InputError):
        fit_gmm(np.zeros((2, 3)), 5, seed=0)
    with pytest.raises(InputError):
        fit_gmm(np.zeros(10), 2, seed=0)
