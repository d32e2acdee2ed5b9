import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bcde import _kernels
from bcde._kernels import _fallback

try:
    from bcde._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = [_fallback] + ([_ckernels] if _ckernels is not None else [])
finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
shapes = st.tuples(st.integers(1, 5), st.integers(1, 7))


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.BACKEND)
def test_reference_values(mod):
    x = np.array([[-800.0, -1.0, 0.0, 1.0, 800.0]])
    np.testing.assert_allclose(mod.sigmoid(x), [[0.0, 1 / (1 + np.e), 0.5, 1 / (1 + np.exp(-1)), 1.0]])
    np.testing.assert_allclose(mod.softplus(x), [[0.0, np.log1p(np.exp(-1)), np.log(2), 1 + np.log1p(np.exp(-1)), 800]])
    np.testing.assert_array_equal(mod.relu(x), [[0, 0, 0, 1, 800]])
    np.testing.assert_array_equal(mod.relu_backward(x, np.ones_like(x)), [[0, 0, 0, 1, 1]])


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.BACKEND)
def test_logmeanexp_is_shift_stable(mod):
    a = np.array([[1000.0, -1000.0], [1000.0, -1001.0]])
    np.testing.assert_allclose(mod.logmeanexp(a), [1000.0, -1000.0 + np.log((1 + np.exp(-1)) / 2)])
    one = np.array([[3.5, -2.0]])
    np.testing.assert_array_equal(mod.logmeanexp(one), [3.5, -2.0])


@pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")
@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, shapes, elements=finite), arrays(np.float64, shapes, elements=finite))
def test_backends_agree(x, g):
    if g.shape != x.shape:
        g = np.resize(g, x.shape)
    for name in ("softplus", "sigmoid", "relu"):
        np.testing.assert_allclose(getattr(_ckernels, name)(x), getattr(_fallback, name)(x), rtol=1e-14, atol=1e-300)
    y = _fallback.sigmoid(x)
    t = np.tanh(x)
    for name, arg in (("relu_backward", x), ("softplus_backward", x), ("sigmoid_backward", y), ("tanh_backward", t)):
        np.testing.assert_allclose(getattr(_ckernels, name)(arg, g), getattr(_fallback, name)(arg, g),
                                   rtol=1e-14, atol=1e-300)
    np.testing.assert_allclose(_ckernels.logmeanexp(x), _fallback.logmeanexp(x), rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.BACKEND)
def test_inputs_not_modified(mod):
    x = np.linspace(-3, 3, 12).reshape(3, 4)
    keep = x.copy()
    for name in ("softplus", "sigmoid", "relu"):
        getattr(mod, name)(x)
    mod.logmeanexp(x)
    np.testing.assert_array_equal(x, keep)


def test_env_var_forces_numpy_backend():
    code = "import bcde._kernels as k; print(k.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"BCDE_PURE_PYTHON": "1", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_default_backend_is_compiled_when_built():
    if os.environ.get("BCDE_PURE_PYTHON", "") not in ("", "0"):
        pytest.skip("numpy backend forced")
    assert _kernels.BACKEND == ("cython" if _ckernels is not None else "numpy")
