import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evida.values import (
    DEFAULT_THRESHOLDS,
    LABEL_RANK,
    SUBINDEX_ORDER,
    EmptySupportError,
    LMHSignature,
    SubIndex,
    Thresholds,
    ValueDomainError,
    WelzelProfile,
    discretize_profile,
    discretize_scalar,
    mean_profile,
    signature_match_fraction,
)

unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)
profiles = st.lists(unit, min_size=8, max_size=8).map(WelzelProfile)


def test_subindex_order_is_fixed():
    assert SUBINDEX_ORDER == (
        "DEFIANCE", "DISBELIEF", "RELATIVISM", "SCEPTICISM",
        "AUTONOMY", "EQUALITY", "CHOICE", "VOICE",
    )
    assert [s.value for s in SubIndex] == list(range(1, 9))


def test_default_thresholds():
    assert (DEFAULT_THRESHOLDS.tau1, DEFAULT_THRESHOLDS.tau2) == (0.33, 0.67)


@pytest.mark.parametrize("t1,t2", [(0.0, 0.5), (0.5, 0.5), (0.7, 0.3), (0.2, 1.0)])
def test_bad_thresholds_rejected(t1, t2):
    with pytest.raises(ValueDomainError):
        Thresholds(t1, t2)


@pytest.mark.parametrize(
    "a,label",
    [(0.0, "low"), (0.3299, "low"), (0.33, "medium"), (0.5, "medium"), (0.67, "high"), (1.0, "high")],
)
def test_discretize_boundaries(a, label):
    assert discretize_scalar(a) == label


@pytest.mark.parametrize("bad", [-0.01, 1.01, float("nan"), float("inf"), True, "0.5", None])
def test_discretize_rejects_out_of_domain(bad):
    with pytest.raises(ValueDomainError):
        discretize_scalar(bad)


@given(unit, unit)
def test_discretize_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert LABEL_RANK[discretize_scalar(lo)] <= LABEL_RANK[discretize_scalar(hi)]


@given(unit, st.floats(0.01, 0.49), st.floats(0.51, 0.99))
def test_discretize_matches_piecewise_for_any_thresholds(a, t1, t2):
    t = Thresholds(t1, t2)
    expected = "low" if a < t1 else "medium" if a < t2 else "high"
    assert discretize_scalar(a, t) == expected


def test_profile_validation_and_access():
    p = WelzelProfile([0.1 * i for i in range(8)])
    assert p["VOICE"] == pytest.approx(0.7)
    assert p[SubIndex.DEFIANCE] == 0.0
    assert p[2] == pytest.approx(0.2)
    with pytest.raises(ValueDomainError):
        WelzelProfile([0.5] * 7)
    with pytest.raises(ValueDomainError):
        WelzelProfile([0.5] * 7 + [1.5])


def test_signature_validation():
    with pytest.raises(ValueDomainError):
        LMHSignature(("low",) * 7)
    with pytest.raises(ValueDomainError):
        LMHSignature(("low",) * 7 + ("Low",))
    assert LMHSignature.of(["high"] * 8).to_list() == ["high"] * 8


@given(st.lists(profiles, min_size=1, max_size=20), st.randoms())
@settings(max_examples=60)
def test_mean_profile_permutation_invariant(ps, rnd):
    shuffled = list(ps)
    rnd.shuffle(shuffled)
    assert mean_profile(ps) == mean_profile(shuffled)


@given(st.lists(profiles, min_size=1, max_size=20))
@settings(max_examples=60)
def test_mean_profile_within_bounds_and_close_to_naive(ps):
    m = mean_profile(ps)
    for d in range(8):
        col = [p.values[d] for p in ps]
        assert min(col) - 1e-15 <= m.values[d] <= max(col) + 1e-15
        assert math.isclose(m.values[d], sum(col) / len(col), abs_tol=1e-12)


def test_mean_profile_empty():
    with pytest.raises(EmptySupportError):
        mean_profile([])


@given(profiles)
def test_discretize_profile_componentwise(p):
    sig = discretize_profile(p)
    assert sig.labels == tuple(discretize_scalar(v) for v in p.values)


def test_signature_match_fraction():
    a = LMHSignature(("low",) * 8)
    b = LMHSignature(("low",) * 6 + ("high",) * 2)
    assert signature_match_fraction(a, b) == 0.75
    assert signature_match_fraction(a, a) == 1.0


def test_discretization_seeded_sweep():
    rng = random.Random(11)
    for _ in range(2000):
        a = rng.random()
        assert discretize_scalar(a) == ("low" if a < 0.33 else "medium" if a < 0.67 else "high")
