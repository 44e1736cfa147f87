import numpy as np
import pytest

from cloudseg import gradcheck
from cloudseg.errors import ArgumentError


def test_every_registered_check_passes():
    results = gradcheck.run_checks("all")
    assert len(results) >= 8
    for r in results:
        assert r.passed, f"{r.name}: {r.max_rel_error:.3e} >= {r.tolerance:.0e}"


def test_single_group_selection():
    results = gradcheck.run_checks("conv")
    assert all("conv" in r.name for r in results)


def test_unknown_group_rejected():
    with pytest.raises(ArgumentError):
        gradcheck.run_checks("softmax")


def test_relu_inputs_probe_away_from_zero():
    # the comparison set must exclude the subgradient point at exactly 0
    rng = np.random.Generator(np.random.PCG64(13))
    x = gradcheck._away_from_zero(rng, (2, 3, 6, 6))
    assert np.abs(x).min() >= 0.05 - 1e-12


def test_numeric_gradient_on_quadratic():
    # d/dx sum(x^2) = 2x, exactly recovered by central differences
    x = np.array([1.0, -2.0, 0.5])
    g = gradcheck.numeric_gradient(lambda: float((x ** 2).sum()), x)
    assert np.abs(g - 2 * x).max() < 1e-8


def test_rel_error_normalizes_by_gradient_scale():
    a = np.array([1e-12, 1.0])
    b = np.array([0.0, 1.0])
    # the 1e-12 disagreement is negligible relative to the tensor's scale
    assert gradcheck.rel_error(a, b) < 1e-11
