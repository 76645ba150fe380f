import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ahmf import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not importable")


@st.composite
def conv_case(draw):
    groups = draw(st.sampled_from([1, 2]))
    c = groups * draw(st.integers(1, 3))
    o = groups * draw(st.integers(1, 3))
    k = draw(st.sampled_from([1, 3]))
    stride = draw(st.integers(1, 2))
    pad = draw(st.integers(0, 1))
    h = draw(st.integers(max(k, 2), 7))
    w = draw(st.integers(max(k, 2), 7))
    n = draw(st.integers(1, 2))
    seed = draw(st.integers(0, 2**16))
    return n, c, o, k, stride, pad, h, w, groups, seed


@needs_numba
@given(conv_case())
def test_backends_agree(case):
    n, c, o, k, stride, pad, h, w, groups, seed = case
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w))
    wt = r.standard_normal((o, c // groups, k, k))
    y_np = K.conv2d_forward_np(x, wt, stride, pad, groups)
    y_nb = K.conv2d_forward_nb(x, wt, stride, pad, groups)
    np.testing.assert_allclose(y_nb, y_np, atol=1e-10)
    gy = r.standard_normal(y_np.shape)
    for a, b in zip(K.conv2d_backward_np(x, wt, gy, stride, pad, groups),
                    K.conv2d_backward_nb(x, wt, gy, stride, pad, groups)):
        np.testing.assert_allclose(b, a, atol=1e-10)


@needs_numba
def test_float32_stays_float32():
    x = np.ones((1, 2, 4, 4), np.float32)
    w = np.ones((2, 1, 3, 3), np.float32)
    assert K.conv2d_forward_nb(x, w, 1, 1, 2).dtype == np.float32
    assert K.conv2d_forward_nb(x, np.ones((2, 2, 3, 3), np.float32), 1, 1, 1).dtype == np.float32


def test_env_flag_forces_numpy_backend():
    env = dict(os.environ, AHMF_KERNELS="numpy")
    out = subprocess.run([sys.executable, "-c", "from ahmf import _kernels as k; print(k.BACKEND, k.HAVE_NUMBA)"],
                         env=env, capture_output=True, text=True, check=True).stdout.split()
    assert out == ["numpy", "False"]
