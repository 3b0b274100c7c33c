import numpy as np
import pytest

from smoothsep import autodiff as ad


def finite_difference(loss_fn, tensor: ad.Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient oracle; perturbs every element of
    ``tensor`` and re-evaluates ``loss_fn`` (float64 leaves expected)."""
    flat = tensor.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = loss_fn().item()
        flat[i] = orig - h
        minus = loss_fn().item()
        flat[i] = orig
        grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(tensor.shape)


def assert_grad_close(analytic: np.ndarray, expected: np.ndarray,
                      rel: float = 1e-4, small: float = 1e-3,
                      abs_tol: float = 1e-6) -> None:
    """Elementwise: relative error <= rel, except absolute <= abs_tol
    where the reference magnitude is below ``small``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    assert analytic.shape == expected.shape
    tiny = np.abs(expected) < small
    diff = np.abs(analytic - expected)
    if tiny.any():
        assert diff[tiny].max(initial=0.0) <= abs_tol, \
            f"absolute error {diff[tiny].max():.3e} on small entries"
    if (~tiny).any():
        relerr = (diff[~tiny] / np.abs(expected[~tiny])).max(initial=0.0)
        assert relerr <= rel, f"relative error {relerr:.3e}"


@pytest.fixture
def gen():
    return np.random.default_rng(1234)
