import os
import subprocess
import sys

import numpy as np
import pytest

from drdselect import _kernels_py, kernels


def random_terms(seed, n=300, m=4, d=2):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, d, d))
    prec = A @ np.transpose(A, (0, 2, 1)) + np.eye(d)
    return rng.normal(size=(n, d)), rng.normal(size=(m, d)), prec, rng.normal(size=m)


def test_python_backend_always_available():
    args = random_terms(0)
    logp, grad = kernels.component_terms(*args, backend="python")
    ref_logp, ref_grad = _kernels_py.component_terms(*args)
    assert np.array_equal(logp, ref_logp) and np.array_equal(grad, ref_grad)


def test_python_backend_hand_value():
    # one 1D unit Gaussian at 0: log N(1; 0, 1) and its gradient -1
    logp, grad = _kernels_py.component_terms(np.array([[1.0]]), np.zeros((1, 1)), np.ones((1, 1, 1)),
                                             np.array([-0.5 * np.log(2 * np.pi)]))
    assert logp[0, 0] == pytest.approx(-0.5 * np.log(2 * np.pi) - 0.5)
    assert grad[0, 0, 0] == -1.0


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")
@pytest.mark.parametrize("d", [1, 2, 5])
def test_backends_agree(d):
    args = random_terms(d, d=d)
    for fast, ref in zip(kernels.component_terms(*args, backend="cython"),
                         kernels.component_terms(*args, backend="python")):
        assert fast.shape == ref.shape
        assert np.allclose(fast, ref, rtol=1e-12, atol=1e-12)


def test_env_var_forces_python():
    env = {**os.environ, "DRDSELECT_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "import drdselect.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_cython_request_without_extension(monkeypatch):
    monkeypatch.setattr(kernels, "_compiled", None)
    with pytest.raises(RuntimeError):
        kernels.component_terms(*random_terms(1), backend="cython")
