import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sps

from patchforge.errors import DegenerateVarianceError, InvalidParameterError
from patchforge.stats import paired_t_test, t_density, two_sided_p

reals = st.floats(-100, 100, allow_nan=False)


def test_equal_samples():
    assert paired_t_test([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)


def test_symmetric_differences():
    t, p = paired_t_test([1, -1, 1, -1], [0, 0, 0, 0])
    assert t == 0.0 and p == pytest.approx(1.0, abs=1e-12)


def test_one_to_five():
    t, p = paired_t_test([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert t == pytest.approx(3 * math.sqrt(5) / math.sqrt(2.5), rel=1e-12)
    assert t == pytest.approx(4.2426, abs=1e-4)
    assert p == pytest.approx(0.0132, abs=1e-4)
    ref = sps.ttest_rel([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert t == pytest.approx(ref.statistic, rel=1e-12)
    assert p == pytest.approx(ref.pvalue, abs=1e-8)


def test_table_value_df4():
    assert two_sided_p(2.776, 4) == pytest.approx(0.05, abs=5e-3)
    assert two_sided_p(2.776, 4) == pytest.approx(2 * sps.t.sf(2.776, 4), abs=1e-8)


@pytest.mark.parametrize("df", [1, 2, 5, 30, 200])
def test_density_integrates_to_one(df):
    from scipy import integrate
    total, _ = integrate.quad(t_density, -np.inf, np.inf, args=(df,))
    assert total == pytest.approx(1.0, abs=1e-8)
    assert t_density(0.7, df) == pytest.approx(sps.t.pdf(0.7, df), rel=1e-12)


@pytest.mark.parametrize("t,df", [(0.1, 3), (1.5, 7), (4.0, 2), (12.0, 9), (40.0, 3)])
def test_p_against_reference(t, df):
    assert two_sided_p(t, df) == pytest.approx(2 * sps.t.sf(t, df), abs=1e-6)


def test_degenerate_variance():
    with pytest.raises(DegenerateVarianceError):
        paired_t_test([2, 3, 4], [1, 2, 3])


@pytest.mark.parametrize("a,b", [([1, 2], [1]), ([1], [2])])
def test_bad_lengths(a, b):
    with pytest.raises(InvalidParameterError):
        paired_t_test(a, b)


@given(st.lists(st.tuples(reals, reals), min_size=2, max_size=12))
def test_symmetry_and_range(pairs):
    a = [x for x, _ in pairs]
    b = [y for _, y in pairs]
    try:
        t1, p1 = paired_t_test(a, b)
    except DegenerateVarianceError:
        return
    t2, p2 = paired_t_test(b, a)
    assert t1 == -t2 and p1 == p2
    assert 0.0 <= p1 <= 1.0
