import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kolmo import _kernels_py, kernels

compiled = pytest.importorskip("kolmo._kernels")


@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_backends_agree(B, S, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((S, S)) < 0.6
    np.fill_diagonal(mask, False)
    src, dst = (a.astype(np.intp) for a in np.nonzero(mask))
    rates = rng.random((B, src.size))
    for impl in (_kernels_py, compiled):
        Q = impl.generator(rates, src, dst, S)
        assert np.allclose(Q.sum(-1), 0.0, atol=1e-14)
    Qp = _kernels_py.generator(rates, src, dst, S)
    assert np.array_equal(Qp, compiled.generator(rates, src, dst, S))
    gQ = rng.normal(size=(B, S, S))
    assert np.allclose(_kernels_py.generator_vjp(gQ, src, dst), compiled.generator_vjp(gQ, src, dst))
    Pf, Pb = rng.normal(size=(B, S, S)), rng.normal(size=(B, S, S))
    for a, b in zip(_kernels_py.kfe_kbe(Pf, Pb, Qp), compiled.kfe_kbe(Pf, Pb, Qp)):
        assert np.allclose(a, b, atol=1e-13)
    cf, cb = rng.normal(size=(B, S, S)), rng.normal(size=(B, S, S))
    for a, b in zip(_kernels_py.kfe_kbe_vjp(Pf, Pb, Qp, cf, cb), compiled.kfe_kbe_vjp(Pf, Pb, Qp, cf, cb)):
        assert np.allclose(a, b, atol=1e-13)


def test_kfe_kbe_definition():
    rng = np.random.default_rng(0)
    Pf, Pb, Q = (rng.normal(size=(2, 3, 3)) for _ in range(3))
    dPf, dPb = kernels.kfe_kbe(Pf, Pb, Q)
    assert np.allclose(dPf, Pf @ Q)
    assert np.allclose(dPb, -Q @ Pb)


def test_env_var_forces_fallback():
    env = dict(os.environ, KOLMO_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from kolmo import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_use_backend_switch():
    before = kernels.BACKEND
    try:
        kernels.use_backend("python")
        assert kernels.BACKEND == "python"
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        kernels.use_backend(before)
