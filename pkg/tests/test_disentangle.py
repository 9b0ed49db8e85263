import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gensync.autodiff import Tensor, grad_check, tsum
from gensync.disentangle import (
    DisentangleParams, IdentityTable, bilinear_residual_check, disentangle, lookup_identity, scaling_check,
)
from gensync.errors import DimensionError, UnknownIdentityError


def params(seed=0, **dims):
    return DisentangleParams.init(np.random.default_rng(seed), **dims)


def test_zero_identity_leaves_audio_path():
    p = params()
    a = np.random.default_rng(1).normal(size=16)
    np.testing.assert_allclose(disentangle(a, np.zeros(8), p).data, p.W2.data @ a, atol=1e-15)


def test_zero_audio_leaves_identity_path():
    p = params()
    i = np.random.default_rng(2).normal(size=8)
    np.testing.assert_allclose(disentangle(np.zeros(16), i, p).data, p.W3.data @ i, atol=1e-15)


def test_pure_hadamard_hand_case():
    eye, zero = np.eye(2), np.zeros((2, 2))
    p = DisentangleParams(*(Tensor(m, True) for m in (eye, eye, eye, zero, zero)))
    assert disentangle(np.array([1.0, 2.0]), np.array([3.0, 4.0]), p).data.tolist() == [3.0, 8.0]


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        disentangle(np.zeros(15), np.zeros(8), params())
    with pytest.raises(DimensionError):
        DisentangleParams(*(Tensor(np.zeros(s), True) for s in ((4, 3), (5, 2), (6, 4), (6, 3), (6, 2))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_linearity_in_audio_and_identity(seed):
    rng = np.random.default_rng(seed)
    p = params(seed)
    a1, a2 = rng.normal(size=16), rng.normal(size=16)
    i1, i2 = rng.normal(size=8), rng.normal(size=8)
    assert bilinear_residual_check(a1, a2, i1, p, i2=i2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-2.0, 2.0))
def test_scaling_property(seed, lam):
    rng = np.random.default_rng(seed)
    assert scaling_check(rng.normal(size=16), rng.normal(size=8), lam, params(seed))


def test_residual_with_zero_second_audio():
    rng = np.random.default_rng(3)
    assert bilinear_residual_check(rng.normal(size=16), np.zeros(16), rng.normal(size=8), params())


def test_affine_when_c_is_zero():
    p = params(4)
    p.C.data[...] = 0.0
    rng = np.random.default_rng(4)
    assert bilinear_residual_check(rng.normal(size=16), rng.normal(size=16), rng.normal(size=8), p)


def test_checks_report_a_violation(monkeypatch):
    import gensync.disentangle as dis

    real = dis.disentangle
    monkeypatch.setattr(dis, "disentangle", lambda a, i, p: real(a, i, p) + Tensor(np.asarray(a)[:1] ** 2 *
                                                                                    np.ones(p.C.shape[0])))
    rng = np.random.default_rng(5)
    p = params(5)
    a1, a2, i = rng.normal(size=16), rng.normal(size=16), rng.normal(size=8)
    assert not bilinear_residual_check(a1, a2, i, p)
    assert not scaling_check(a1, i, 2.0, p)


def test_gradients_match_finite_differences():
    p = params(6, d_a=5, d_i=3, d_h=4, d_m=6)
    rng = np.random.default_rng(6)
    a, i = Tensor(rng.normal(size=5), True), Tensor(rng.normal(size=3), True)
    assert grad_check(lambda: tsum(disentangle(a, i, p)), p.parameters() + [a, i]) < 1e-5


def test_identity_table_lookup():
    t = IdentityTable(4)
    v = t.register("A", np.random.default_rng(0))
    assert lookup_identity(t, "A") is v
    assert abs(v.data).max() < 0.1


def test_unknown_identity_names_registered_labels():
    t = IdentityTable(2)
    t.register("A", vector=np.zeros(2))
    t.register("B", vector=np.ones(2))
    with pytest.raises(UnknownIdentityError, match=r"'A', 'B'"):
        lookup_identity(t, "Z")


def test_lookup_returns_live_vector():
    t = IdentityTable(2)
    t.register("A", vector=np.zeros(2))
    lookup_identity(t, "A").data += 1.0
    assert lookup_identity(t, "A").data.tolist() == [1.0, 1.0]


def test_register_rejects_wrong_width():
    with pytest.raises(DimensionError):
        IdentityTable(3).register("A", vector=np.zeros(2))
