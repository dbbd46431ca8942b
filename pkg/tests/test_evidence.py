import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tefn.evidence import (
    EvidenceError,
    MassFunction,
    NonPositiveSigma,
    NotNormalized,
    SpaceMismatch,
    TotalConflict,
    cardinality,
    dsr_combine,
    focal_set,
    gaussian_membership,
    pignistic,
    triangular_membership,
)

A, AB = 0b01, 0b11


def brute_force_combine(d1, d2):
    """Every (B, C) pair of a dense power-set vector, then conflict normalization."""
    size = d1.size
    out = np.zeros(size)
    for b in range(size):
        for c in range(size):
            out[b & c] += d1[b] * d2[c]
    out[0] = 0.0
    return None if out.sum() == 0 else out / out.sum()


def brute_force_pignistic(dense, n):
    p = np.zeros(n)
    for e in range(1, 1 << n):
        members = [x for x in range(n) if e >> x & 1]
        for x in members:
            p[x] += dense[e] / len(members)
    return p


def random_mass(rng, n, normalized=True):
    v = rng.random(1 << n) * (rng.random(1 << n) < 0.6)
    v[0] = 0.0
    if v.sum() == 0:
        v[-1] = 1.0
    if normalized:
        v = v / v.sum()
    return v


@st.composite
def masses(draw, n=None):
    n = draw(st.integers(1, 4)) if n is None else n
    vals = draw(st.lists(st.floats(0, 1), min_size=(1 << n) - 1, max_size=(1 << n) - 1))
    v = np.array([0.0] + vals)
    if v.sum() == 0:
        v[-1] = 1.0
    return MassFunction.from_dense(v / v.sum())


def test_worked_example_from_two_sources():
    m1 = MassFunction(2, {A: 0.7, AB: 0.2})
    m2 = MassFunction(2, {A: 0.4, AB: 0.7})
    m = dsr_combine(m1, m2)
    assert m[A] == pytest.approx(0.86, abs=0.005)
    assert m[AB] == pytest.approx(0.14, abs=0.005)
    # unnormalized inputs (0.9 and 1.1) still give a normalized result
    assert m.total() == pytest.approx(1.0, abs=1e-12)


def test_vacuous_mass_is_identity():
    m1 = MassFunction(3, {0b001: 0.3, 0b110: 0.5, 0b111: 0.4})
    out = dsr_combine(m1, MassFunction.vacuous(3))
    expected = m1.to_dense() / m1.total()
    np.testing.assert_allclose(out.to_dense(), expected, atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_combine_matches_exhaustive_enumeration(n):
    rng = np.random.default_rng(n)
    for _ in range(50):
        d1, d2 = random_mass(rng, n), random_mass(rng, n, normalized=False)
        expected = brute_force_combine(d1, d2)
        if expected is None:
            continue
        got = dsr_combine(MassFunction.from_dense(d1), MassFunction.from_dense(d2)).to_dense()
        assert np.max(np.abs(got - expected)) <= 1e-12


@given(masses(), st.data())
@settings(max_examples=200, deadline=None)
def test_combine_is_commutative(m1, data):
    m2 = data.draw(masses(m1.space_size))
    try:
        a = dsr_combine(m1, m2).to_dense()
    except TotalConflict:
        with pytest.raises(TotalConflict):
            dsr_combine(m2, m1)
        return
    b = dsr_combine(m2, m1).to_dense()
    assert np.max(np.abs(a - b)) <= 1e-12


def test_space_mismatch_and_total_conflict():
    with pytest.raises(SpaceMismatch):
        dsr_combine(MassFunction.vacuous(2), MassFunction.vacuous(3))
    with pytest.raises(TotalConflict):
        dsr_combine(MassFunction(2, {0b01: 1.0}), MassFunction(2, {0b10: 1.0}))


def test_mass_function_invariants():
    with pytest.raises(EvidenceError):
        MassFunction(2, {0: 0.5})
    with pytest.raises(EvidenceError):
        MassFunction(2, {A: -0.1})
    with pytest.raises(EvidenceError):
        MassFunction(2, {0b100: 0.1})
    with pytest.raises(EvidenceError):
        MassFunction(17, {})
    assert not MassFunction(2, {A: 0.7, AB: 0.2}).is_normalized()
    assert MassFunction(2, {A: 0.5, AB: 0.5 + 5e-10}).is_normalized()


def test_focal_set_bits():
    assert focal_set(3, 0, 2) == 0b101
    assert cardinality(0b1011) == 3
    with pytest.raises(EvidenceError):
        focal_set(2, 2)


def test_pignistic_simple_cases():
    np.testing.assert_allclose(pignistic(MassFunction(2, {AB: 1.0})), [0.5, 0.5])
    np.testing.assert_allclose(pignistic(MassFunction(2, {A: 1.0})), [1.0, 0.0])
    with pytest.raises(NotNormalized):
        pignistic(MassFunction(2, {A: 0.7, AB: 0.2}))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_pignistic_matches_subset_enumeration(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(50):
        d = random_mass(rng, n)
        got = pignistic(MassFunction.from_dense(d))
        assert np.max(np.abs(got - brute_force_pignistic(d, n))) <= 1e-12


@given(masses())
@settings(max_examples=200, deadline=None)
def test_pignistic_is_a_distribution(m):
    p = pignistic(m)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert (p >= 0).all()


@given(st.lists(st.floats(0.01, 1), min_size=3, max_size=3))
def test_pignistic_of_bayesian_mass_is_verbatim(vals):
    probs = np.array(vals) / sum(vals)
    m = MassFunction(3, {1 << i: probs[i] for i in range(3)})
    np.testing.assert_allclose(pignistic(m), probs, atol=1e-15)


def test_triangular_membership():
    assert triangular_membership(0.0, 2.0, 0.3) == 0.3
    assert triangular_membership(1.0, 0.5, 0.1) == pytest.approx(0.6)
    assert triangular_membership(-1.0, 1.0, 0.0) == -1.0


def test_gaussian_membership():
    peak = gaussian_membership(1.5, 1.5, 1.0)
    assert peak == pytest.approx(1 / math.sqrt(2 * math.pi))
    assert gaussian_membership(2.0 + 0.7, 2.0, 0.7) == pytest.approx(gaussian_membership(2.0, 2.0, 0.7) * math.exp(-0.5))
    with pytest.raises(NonPositiveSigma):
        gaussian_membership(0.0, 0.0, 0.0)


def test_gaussian_membership_against_mpmath():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 40
    rng = np.random.default_rng(7)
    for x, mu, sigma in zip(rng.normal(size=20), rng.normal(size=20), rng.uniform(0.1, 3, 20)):
        ref = mpmath.npdf(mpmath.mpf(float(x)), mpmath.mpf(float(mu)), mpmath.mpf(float(sigma)))
        assert gaussian_membership(x, mu, sigma) == pytest.approx(float(ref), rel=1e-13)
