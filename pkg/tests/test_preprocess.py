import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csialm import numerics as nx
from csialm import preprocess as pp
from csialm.numerics.gradcheck import gradcheck


def test_to_real_examples():
    h = np.arange(6, dtype=float).reshape(2, 3).astype(complex)
    x = pp.to_real(h)
    assert x.shape == (4, 3) and np.all(x[2:] == 0)
    x = pp.to_real(1j * np.ones((2, 3)))
    assert np.all(x[:2] == 0) and np.all(x[2:] == 1)


def test_real_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    h = (rng.normal(size=(3, 4, 5)) + 1j * rng.normal(size=(3, 4, 5))).astype(np.complex64)
    back = pp.from_real(pp.to_real(h))
    assert back.dtype == np.complex64 and back.tobytes() == h.tobytes()
    v = h[..., 0]
    assert np.array_equal(pp.complex_vector(pp.real_vector(v)), v)


def test_normalize_constant_batch_is_zero():
    out, (mu, sigma) = pp.normalize(np.full((4, 3), 2.5))
    assert np.all(out == 0) and sigma == 1e-8


def test_normalize_moments():
    x = np.random.default_rng(1).normal(5.0, 2.0, size=(64, 32))
    out, _ = pp.normalize(x)
    assert abs(out.mean()) < 0.05 and abs(out.std() - 1) < 0.05


def test_normalize_eval_uses_frozen_stats():
    norm = pp.Normalizer()
    rng = np.random.default_rng(2)
    norm(rng.normal(3.0, 1.0, size=(10, 4)))
    norm(rng.normal(3.0, 1.0, size=(10, 4)))
    norm.eval()
    x = rng.normal(size=(2, 4))
    a, sa = norm(x)
    b, sb = norm(x)
    assert np.array_equal(a, b) and sa == sb


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_normalize_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 5))
    perm = rng.permutation(6)
    _, s1 = pp.normalize(x)
    _, s2 = pp.normalize(x[perm])
    assert s1 == pytest.approx(s2, rel=1e-12)


def test_patch_examples():
    x = np.arange(32.0).reshape(2, 16)
    p = pp.patch(x, 4)
    assert p.values.shape == (2, 4, 4) and p.pad == 0
    assert p.values[1, 2, 3] == x[1, 3 * 4 + 2]
    p = pp.patch(np.ones((2, 10)), 4)
    assert p.values.shape == (2, 4, 3) and p.pad == 2
    assert np.all(p.values[:, 2:, 2] == 0)


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 20), n=st.integers(1, 8), seed=st.integers(0, 100))
def test_patch_unpatch_identity(t, n, seed):
    x = np.random.default_rng(seed).normal(size=(3, 2, t))
    p = pp.patch(x, n)
    assert p.values.shape[-1] == -(-t // n)
    assert np.array_equal(pp.unpatch(p), x)


def test_cssa_contract():
    rng = np.random.default_rng(3)
    block = pp.CSSA(6, rng)
    x = rng.normal(size=(2, 6, 10))
    p = pp.patch(nx.Tensor(x), 4)
    g = block.gains(p).data
    assert g.shape == (2, 6) and np.all((g > 0) & (g < 1))
    out = block(p)
    assert out.shape == (2, 6, 10)
    assert np.allclose(out.data, x * g[..., None], atol=1e-6)
    zero = block(pp.patch(nx.Tensor(np.zeros((6, 10))), 4))
    assert np.all(zero.data == 0)


def test_cssa_gradcheck():
    with nx.default_dtype(np.float64):
        rng = np.random.default_rng(4)
        block = pp.CSSA(4, rng, dim=4)
        x = nx.Tensor(rng.normal(size=(2, 4, 7)), requires_grad=True)
        w = nx.Tensor(rng.normal(size=(2, 4, 7)))
        params = block.parameters()
        assert gradcheck(lambda: block(pp.patch(x, 3)) * w, params + [x]) < 1e-4
