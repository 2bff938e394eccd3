from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from shacira.entropy_model import (
    PMF_FLOOR,
    DensityModel,
    PmfTable,
    build_pmf_table,
    cdf,
    pmf,
    self_information_backward,
    self_information_loss,
)
from shacira.numerics import AdamState, ParamTensor, SeededRng, adam_step, finite_diff_check


def random_model(seed, channels=1, spread=0.5):
    m = DensityModel(channels, rng=SeededRng(seed), dtype=np.float64)
    rs = np.random.default_rng(seed)
    for p in m.params():
        p.values += rs.normal(0, spread, p.shape)
    return m


def fitted_model(samples, steps=600, seed=0):
    """Fit one density to integer samples through the noisy rate loss."""
    m = DensityModel(1, rng=SeededRng(seed), dtype=np.float64)
    states = {p.name: AdamState.for_param(p) for p in m.params()}
    rs = np.random.default_rng(seed)
    q = samples.astype(np.float64)[:, None]
    for _ in range(steps):
        _, ctx = self_information_loss(q, rs.uniform(-0.5, 0.5, q.shape), m)
        self_information_backward(ctx)
        for p in m.params():
            adam_step(p, states[p.name], 2e-2)
    return m


@pytest.fixture(scope="module")
def trained():
    rs = np.random.default_rng(1)
    samples = np.clip(np.rint(rs.laplace(1.0, 1.2, size=4000)), -8, 8).astype(int)
    return fitted_model(samples), samples


def test_parameter_count():
    # (1x3 + 3x3*3 + 3x1) weights + (3*4 + 1) biases + 3*4 gate factors
    assert DensityModel(1).param_count == 58
    assert DensityModel(3).param_count == 3 * 58


def test_cdf_saturates_and_is_monotone(trained):
    m, _ = trained
    assert cdf(1e6, 0, m)[0] >= 1 - 1e-6
    assert cdf(-1e6, 0, m)[0] <= 1e-6
    rs = np.random.default_rng(2)
    for model in (m, random_model(3, spread=2.0)):
        a, b = rs.uniform(-20, 20, 1000), rs.uniform(-20, 20, 1000)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        assert np.all(cdf(lo, 0, model) <= cdf(hi, 0, model))
        vals = cdf(np.linspace(-50, 50, 101), 0, model)
        assert np.all((vals >= 0) & (vals <= 1))


def test_effective_weights_positive():
    m = random_model(4, spread=5.0)
    for mat in m.matrices:
        assert np.all(np.logaddexp(0.0, mat.values) > 0)


def test_cdf_gradient_finite_diff():
    m = random_model(5)
    x = ParamTensor("x", np.random.default_rng(5).uniform(-3, 3, 8))
    lg, cache = m.logits(x.values[None, :])
    s = 1.0 / (1.0 + np.exp(-lg))
    dx = m.logits_backward(cache, s * (1 - s))[0]
    err = finite_diff_check(lambda: float(np.sum(cdf(x.values, 0, m))), x, dx, h=1e-5)
    assert err <= 1e-4


def test_cdf_parameter_gradients_finite_diff():
    m = random_model(6)
    x = np.random.default_rng(6).uniform(-3, 3, 8)
    for p in m.params():
        p.zero_grad()
    lg, cache = m.logits(x[None, :])
    s = 1.0 / (1.0 + np.exp(-lg))
    m.logits_backward(cache, s * (1 - s))
    for p in m.params():
        err = finite_diff_check(lambda: float(np.sum(cdf(x, 0, m))), p, p.grad.copy(), h=1e-5)
        assert err <= 1e-4, p.name


def test_pmf_with_ramp_cdf():
    ramp = lambda x: np.clip((x + 1) / 2, 0, 1)  # noqa: E731
    assert pmf(0.0, 0, ramp)[0] == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(5))
def test_pmf_telescopes(seed):
    m = random_model(seed)
    q = np.arange(-400, 401)
    total = pmf(q, 0, m).sum()
    assert 1 - 2e-6 <= total <= 1 + 1e-12


def test_trained_pmf_tracks_histogram(trained):
    m, samples = trained
    values, counts = np.unique(samples, return_counts=True)
    mode = values[np.argmax(counts)]
    p = pmf(np.arange(-8, 9), 0, m)
    assert np.arange(-8, 9)[np.argmax(p)] == mode
    assert pmf(mode, 0, m)[0] > pmf(30, 0, m)[0]


def test_self_information_stub_fair_coin():
    half = lambda x, d: np.full_like(x, 0.5)  # noqa: E731
    loss, ctx = self_information_loss(np.zeros((2, 1)), np.zeros((2, 1)), half)
    assert loss == 1.0 and ctx is None


def test_self_information_row_normalization():
    m = random_model(7, channels=2)
    rs = np.random.default_rng(7)
    q, n = rs.normal(size=(10, 2)), rs.uniform(-0.5, 0.5, (10, 2))
    a, _ = self_information_loss(q, n, m)
    b, _ = self_information_loss(np.vstack([q, q]), np.vstack([n, n]), m)
    assert a == pytest.approx(b, rel=1e-12)
    assert a >= 0


def test_self_information_gradients_finite_diff():
    m = random_model(8, channels=2)
    rs = np.random.default_rng(8)
    q = ParamTensor("q", rs.normal(0, 2, (6, 2)))
    noise = rs.uniform(-0.5, 0.5, q.shape)
    for p in m.params():
        p.zero_grad()
    _, ctx = self_information_loss(q.values, noise, m)
    dq = self_information_backward(ctx)
    f = lambda: self_information_loss(q.values, noise, m)[0]  # noqa: E731
    assert finite_diff_check(f, q, dq) <= 1e-3
    for p in m.params():
        assert finite_diff_check(f, p, p.grad.copy()) <= 1e-3, p.name


def test_floor_keeps_far_tail_finite():
    m = DensityModel(1, dtype=np.float64)
    q = np.array([[1e4]])
    loss, ctx = self_information_loss(q, np.zeros_like(q), m)
    assert loss == pytest.approx(-np.log2(PMF_FLOOR))
    assert np.all(self_information_backward(ctx) == 0)


# -- coder tables ----------------------------------------------------------


def test_single_symbol_table():
    t = build_pmf_table(lambda q: np.ones_like(q), 3, 3)
    assert t.freqs.tolist() == [2**16]


def test_uniform_four_symbols():
    t = build_pmf_table(lambda q: np.full_like(q, 0.25), 0, 3)
    assert t.freqs.tolist() == [16384] * 4


def largest_remainder_oracle(p, precision):
    """Exact-rational reimplementation: one count each, remainder by largest fraction."""
    n = len(p)
    spare = 2**precision - n
    total = sum(Fraction(x) for x in p)
    shares = [Fraction(x) / total * spare for x in p]
    base = [s.numerator // s.denominator for s in shares]
    short = spare - sum(base)
    order = sorted(range(n), key=lambda i: (-(shares[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return [b + 1 for b in base]


def test_largest_remainder_examples():
    assert build_pmf_table(lambda q: np.array([0.5, 0.3, 0.2]), 0, 2, precision=4).freqs.tolist() == [7, 5, 4]
    # three-way tie for one spare count goes to the lowest symbol
    assert build_pmf_table(lambda q: np.full(3, 1 / 3), 0, 2, precision=2).freqs.tolist() == [2, 1, 1]


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=40), st.integers(6, 16))
@settings(max_examples=200, deadline=None)
def test_table_matches_rational_oracle(p, precision):
    spare = 2**precision - len(p)
    total = sum(Fraction(x) for x in p)
    fracs = sorted(float(Fraction(x) / total * spare % 1) for x in p)
    # float apportionment can only disagree with exact arithmetic at near-ties
    assume(all(b - a > 1e-9 for a, b in zip(fracs, fracs[1:])) and fracs[0] > 1e-9)
    t = build_pmf_table(lambda q: np.array(p), 0, len(p) - 1, precision)
    assert t.freqs.tolist() == largest_remainder_oracle(p, precision)


def test_tables_sum_exactly_for_many_models():
    for seed in range(100):
        m = random_model(seed, spread=1.0)
        t = build_pmf_table(m, -20 + seed % 7, 15, precision=16)
        assert int(t.freqs.sum()) == 2**16
        assert t.freqs.min() >= 1


def test_table_validation():
    with pytest.raises(ValueError):
        build_pmf_table(lambda q: np.ones_like(q), 2, 1)
    with pytest.raises(ValueError):
        build_pmf_table(lambda q: np.ones_like(q), 0, 300, precision=8)
    with pytest.raises(ValueError):
        PmfTable(0, 1, [1, 2], precision=4)
    with pytest.raises(ValueError):
        PmfTable(0, 1, [0, 16], precision=4)


def test_table_ideal_bits():
    t = PmfTable(0, 1, [8, 8], precision=4)
    assert t.ideal_bits(np.array([0, 1, 1])) == pytest.approx(3.0)
