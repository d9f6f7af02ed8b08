import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camlab import _backend, _pykernels

ck = pytest.importorskip("camlab._ckernels")

ROOT = Path(__file__).resolve().parents[1]


def _case(seed, B, C, S, O, K):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, C, S, S)).astype(np.float32)
    w = rng.normal(size=(O, C, K, K)).astype(np.float32)
    b = rng.normal(size=O).astype(np.float32)
    gy = rng.normal(size=(B, O, S, S)).astype(np.float32)
    return x, w, b, gy


shapes = st.tuples(st.integers(1, 3), st.integers(1, 3), st.sampled_from([2, 4, 6]),
                   st.integers(1, 4), st.sampled_from([1, 3, 5]))


class TestParity:
    """The compiled kernels agree with the numpy fallback to float32 rounding."""

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), shapes)
    def test_conv(self, seed, shape):
        x, w, b, gy = _case(seed, *shape)
        K = shape[-1]
        np.testing.assert_allclose(ck.conv2d_forward(x, w, b), _pykernels.conv2d_forward(x, w, b),
                                   rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(ck.conv2d_backward_input(gy, w), _pykernels.conv2d_backward_input(gy, w),
                                   rtol=1e-5, atol=1e-5)
        for got, want in zip(ck.conv2d_backward_params(x, gy, K), _pykernels.conv2d_backward_params(x, gy, K)):
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-4)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), shapes)
    def test_pool_exact(self, seed, shape):
        x, *_ = _case(seed, *shape)
        y_c, idx_c = ck.maxpool2x2_forward(x)
        y_p, idx_p = _pykernels.maxpool2x2_forward(x)
        np.testing.assert_array_equal(y_c, y_p)
        np.testing.assert_array_equal(np.asarray(idx_c), np.asarray(idx_p))
        gy = np.random.default_rng(seed).normal(size=y_c.shape).astype(np.float32)
        np.testing.assert_array_equal(ck.maxpool2x2_backward(gy, idx_c), _pykernels.maxpool2x2_backward(gy, idx_p))

    def test_pool_ties_pick_same_cell(self):
        x = np.ones((1, 1, 2, 2), np.float32)
        np.testing.assert_array_equal(np.asarray(ck.maxpool2x2_forward(x)[1]),
                                      np.asarray(_pykernels.maxpool2x2_forward(x)[1]))

    def test_output_dtype(self):
        x, w, b, _ = _case(0, 1, 1, 4, 2, 3)
        assert ck.conv2d_forward(x, w, b).dtype == np.float32


class TestSelection:
    def _name(self, env):
        code = "from camlab import _backend; print(_backend.NAME)"
        out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                             env={**os.environ, **env}, check=True)
        return out.stdout.strip()

    def test_env_forces_fallback(self):
        assert self._name({"CAMLAB_BACKEND": "python"}) == "python"

    def test_compiled_preferred(self):
        assert self._name({"CAMLAB_BACKEND": ""}) == "compiled"

    def test_module_matches_name(self):
        assert (_backend.kernels is _pykernels) == (_backend.NAME == "python")


def test_benchmark_smoke():
    out = subprocess.run([sys.executable, str(ROOT / "benchmarks" / "bench_kernels.py"), "--repeat", "1"],
                         capture_output=True, text=True, timeout=300)
    assert out.returncode == 0, out.stderr
    assert "conv fwd" in out.stdout and "speedup" in out.stdout
