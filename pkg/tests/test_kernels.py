import os
import subprocess
import sys

import numpy as np
import pytest

from tokenattack import _kernels

pytestmark = pytest.mark.skipif(_kernels.numba_impl is None, reason="numba not installed")

NAMES = ["gelu_fwd", "gelu_bwd", "softmax_fwd", "softmax_bwd", "layernorm_fwd", "layernorm_bwd", "block_l2", "project"]


def _args(name, rng, dtype):
    x = rng.normal(size=(37, 24)).astype(dtype)
    dy = rng.normal(size=(37, 24)).astype(dtype)
    if name in ("gelu_fwd", "softmax_fwd"):
        return (x,)
    if name == "gelu_bwd":
        return (x, dy)
    if name == "softmax_bwd":
        return (_kernels.numpy_impl.softmax_fwd(x), dy)
    gamma = rng.normal(size=24).astype(dtype)
    beta = rng.normal(size=24).astype(dtype)
    if name == "layernorm_fwd":
        return (x, gamma, beta, 1e-5)
    if name == "layernorm_bwd":
        _, xhat, rstd = _kernels.numpy_impl.layernorm_fwd(x, gamma, beta, 1e-5)
        return (dy, xhat, rstd, gamma)
    if name == "block_l2":
        return (rng.normal(size=(3, 12, 8)).astype(dtype), 4)
    xo = rng.normal(size=(2, 3, 8, 8)).astype(dtype)
    xa = xo + rng.normal(scale=0.5, size=xo.shape).astype(dtype)
    mask = rng.random(xo.shape) < 0.3
    return (xa, xo, mask, xo - dtype(0.1), xo + dtype(0.1))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("name", NAMES)
def test_numba_matches_numpy(name, dtype, rng):
    args = _args(name, rng, dtype)
    a = getattr(_kernels.numpy_impl, name)(*args)
    b = getattr(_kernels.numba_impl, name)(*args)
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    for u, v in zip(a, b):
        assert u.shape == v.shape
        np.testing.assert_allclose(u, v, rtol=tol, atol=tol)


@pytest.mark.parametrize("name", ["block_l2", "project"])
def test_selection_kernels_bit_identical(name, rng):
    args = _args(name, rng, np.float32)
    np.testing.assert_array_equal(getattr(_kernels.numpy_impl, name)(*args), getattr(_kernels.numba_impl, name)(*args))


@pytest.mark.parametrize("flag, expected", [("1", "numpy"), ("", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, TOKENATTACK_DISABLE_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from tokenattack import _kernels; print(_kernels.backend_name())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
