import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from nowflow.metrics import (
    SEVIR_THRESHOLDS,
    ContingencyTable,
    accumulate,
    binarize,
    build_report,
    check_thresholds,
    crps_ensemble,
    crps_gaussian,
    csi,
    far,
    fss,
    hss,
    maxpool,
    neighborhood_fractions,
    persistence_forecast,
)


def brute_table(p, o):
    h = m = f = c = 0
    for a, b in zip(p.ravel(), o.ravel()):
        if a and b:
            h += 1
        elif b:
            m += 1
        elif a:
            f += 1
        else:
            c += 1
    return h, m, f, c


def brute_fractions(mask, n):
    h, w = mask.shape
    lo, hi = n // 2, n - 1 - n // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            vals = [mask[a, b] for a in range(i - lo, i + hi + 1) for b in range(j - lo, j + hi + 1)
                    if 0 <= a < h and 0 <= b < w]
            out[i, j] = np.mean(vals)
    return out


# ------------------------------------------------------------------ contingency scores

def test_binarize_is_strict():
    np.testing.assert_array_equal(binarize(np.array([0.1, 0.2, 0.3]), 0.2), [False, False, True])


def test_perfect_forecast_scores():
    obs = np.zeros((4, 4), bool)
    obs[1:3, 1:3] = True
    t = accumulate(obs, obs)
    assert (t.H, t.M, t.F, t.C) == (4, 0, 0, 12)
    assert csi(t) == 1.0 and far(t) == 0.0 and hss(t) == 1.0


def test_score_examples():
    t = ContingencyTable(H=2, M=1, F=1, C=4)
    assert csi(t) == pytest.approx(0.5)
    assert far(t) == pytest.approx(1 / 3)
    assert hss(t) == pytest.approx(2 * (8 - 1) / (3 * 5 + 3 * 5))
    # a forecast that flags everything
    everywhere = ContingencyTable(H=3, M=0, F=5, C=0)
    assert hss(everywhere) == 0.0


def test_degenerate_denominators():
    empty = ContingencyTable(0, 0, 0, 10)
    assert math.isnan(csi(empty))
    assert far(empty) == 0.0
    assert hss(empty) == 0.0


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=100)
def test_accumulate_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 7, size=2))
    p, o = rng.random(shape) > 0.5, rng.random(shape) > 0.6
    t = accumulate(p, o)
    assert (t.H, t.M, t.F, t.C) == brute_table(p, o)
    assert t.total == p.size
    assert 0 <= far(t) <= 1 and -1 <= hss(t) <= 1
    c = csi(t)
    assert math.isnan(c) or 0 <= c <= 1


def test_accumulate_shape_mismatch():
    with pytest.raises(ValueError):
        accumulate(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


def test_threshold_validation():
    assert check_thresholds(SEVIR_THRESHOLDS) == SEVIR_THRESHOLDS
    assert SEVIR_THRESHOLDS[0] == pytest.approx(16 / 255)
    for bad in ((), (0.5, 0.5), (0.5, 0.2)):
        with pytest.raises(ValueError):
            check_thresholds(bad)


# ------------------------------------------------------------------ pooling and FSS

def test_maxpool_examples():
    x = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(maxpool(x, 2), [[5, 7], [13, 15]])
    assert maxpool(np.zeros((32, 32)), 16).shape == (2, 2)
    ragged = np.zeros((5, 3))
    ragged[4, 2] = 1.0
    np.testing.assert_array_equal(maxpool(ragged, 4), [[0], [1]])


def test_fractions_match_double_loop():
    rng = np.random.default_rng(0)
    for shape, n in (((7, 9), 4), ((6, 6), 3), ((5, 8), 1), ((4, 4), 16)):
        mask = rng.random(shape) > 0.5
        np.testing.assert_allclose(neighborhood_fractions(mask, n), brute_fractions(mask, n), atol=1e-12)


def test_fss_examples():
    a = np.zeros((8, 8), bool)
    a[2:4, 2:4] = True
    assert fss(a, a, 4) == 1.0
    assert math.isnan(fss(np.zeros((8, 8), bool), np.zeros((8, 8), bool), 4))
    assert fss(np.zeros((8, 8), bool), a, 4) == 0.0
    # pointwise limit: disjoint single pixels give 0
    b = np.zeros((8, 8), bool)
    b[6, 6] = True
    c = np.zeros((8, 8), bool)
    c[0, 0] = True
    assert fss(b, c, 1) == 0.0


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
@settings(max_examples=40)
def test_fss_symmetric_and_bounded(seed, n):
    rng = np.random.default_rng(seed)
    p, o = rng.random((6, 7)) > 0.5, rng.random((6, 7)) > 0.5
    s = fss(p, o, n)
    if not math.isnan(s):
        assert 0 <= s <= 1
        assert s == pytest.approx(fss(o, p, n), abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(-4, 4), st.integers(-4, 4))
@settings(max_examples=40)
def test_fss_invariant_under_joint_translation(seed, n, dy, dx):
    # features sit in an interior block far enough from the edge that no window is clipped before or after the shift
    rng = np.random.default_rng(seed)
    p = np.zeros((32, 32), bool)
    o = np.zeros((32, 32), bool)
    p[12:20, 12:20] = rng.random((8, 8)) > 0.5
    o[12:20, 12:20] = rng.random((8, 8)) > 0.5
    shifted = fss(np.roll(p, (dy, dx), (0, 1)), np.roll(o, (dy, dx), (0, 1)), n)
    base = fss(p, o, n)
    assert (math.isnan(base) and math.isnan(shifted)) or shifted == pytest.approx(base, abs=1e-12)


def test_fss_window_covering_both_features():
    # a shift well inside a large neighbourhood barely registers
    a = np.zeros((32, 32), bool)
    a[10:14, 10:14] = True
    b = np.roll(a, 1, axis=1)
    assert fss(a, b, 16) > 0.95
    assert fss(a, b, 1) < fss(a, b, 16)


# ------------------------------------------------------------------ CRPS

def crps_quad(x, mu, sigma):
    f = lambda y: stats.norm.cdf(y, mu, sigma) ** 2 if y < x else (1 - stats.norm.cdf(y, mu, sigma)) ** 2  # noqa: E731
    lo, hi = mu - 40 * sigma, mu + 40 * sigma
    return integrate.quad(f, min(lo, x), x, epsabs=1e-13)[0] + integrate.quad(f, x, max(hi, x), epsabs=1e-13)[0]


@pytest.mark.parametrize("x,mu,sigma", [(0.0, 0.0, 1.0), (1.3, -0.2, 0.7), (-2.0, 0.5, 2.5), (0.4, 0.4, 0.05)])
def test_crps_matches_quadrature(x, mu, sigma):
    assert crps_gaussian(x, mu, sigma) == pytest.approx(crps_quad(x, mu, sigma), abs=1e-8)


def test_crps_examples():
    assert crps_gaussian(0.0, 0.0, 1.0) == pytest.approx((math.sqrt(2) - 1) / math.sqrt(math.pi), abs=1e-12)
    assert crps_gaussian(0.7, 0.2, 0.0) == pytest.approx(0.5)
    assert crps_gaussian(0.7, 0.2, 1e-8) == pytest.approx(0.5, abs=1e-7)
    with pytest.raises(ValueError):
        crps_gaussian(0.0, 0.0, -1.0)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 5), st.floats(0.1, 10))
def test_crps_homogeneous_and_nonnegative(x, mu, sigma, c):
    v = crps_gaussian(x, mu, sigma)
    assert v >= 0
    assert crps_gaussian(c * x, c * mu, c * sigma) == pytest.approx(c * v, rel=1e-9, abs=1e-12)


def test_crps_ensemble_examples():
    ens = np.array([[0.1, 0.5], [0.3, 0.5]])
    obs = np.array([0.2, 0.5])
    expected = np.mean([crps_gaussian(0.2, 0.2, 0.1), 0.0])
    assert crps_ensemble(obs, ens) == pytest.approx(expected, abs=1e-12)
    assert crps_ensemble(obs, ens[:1]) == pytest.approx(np.mean(np.abs(obs - ens[0])), abs=1e-15)


# ------------------------------------------------------------------ report

def micro_case():
    truths = np.zeros((1, 2, 4, 4))
    truths[0, :, :2, :2] = 0.9
    fc = np.zeros((1, 2, 2, 4, 4))
    fc[0, :, 0, :2, :2] = 0.9  # both members hit at lead 0
    fc[0, :, 1, 2:, 2:] = 0.9  # and miss completely at lead 1
    return fc, truths


def test_report_micro_case():
    fc, truths = micro_case()
    r = build_report(fc, truths, thresholds=(0.5,), pool=2, fss_n=1)
    lead0, lead1 = r.per_lead[(0.5, 0)], r.per_lead[(0.5, 1)]
    assert lead0["CSI"] == 1.0 and lead0["FAR"] == 0.0
    assert lead1["CSI"] == 0.0 and lead1["FAR"] == 1.0
    tab = r.per_threshold[0.5]["table"]
    assert (tab.H, tab.M, tab.F, tab.C) == (4, 4, 4, 20)
    assert r.aggregates["CSI-M"] == pytest.approx(1 / 3)
    assert r.last_frame["CSI-M"] == 0.0 and r.last_frame["CSI-top"] == 0.0
    assert r.aggregates["CRPS"] == pytest.approx(0.9 * 8 / 32)
    assert r.per_lead[(0.5, 0)]["FSS-P16"] == 1.0


def test_report_drops_empty_thresholds_from_mean():
    fc, truths = micro_case()
    r = build_report(fc, truths, thresholds=(0.5, 0.95), pool=2, fss_n=1)
    assert math.isnan(r.per_threshold[0.95]["CSI"])
    assert r.aggregates["CSI-M"] == pytest.approx(1 / 3)
    assert r.aggregates["FAR-M"] == pytest.approx(0.25)


def test_report_shape_checks():
    with pytest.raises(ValueError):
        build_report(np.zeros((1, 2, 3, 4, 4)), np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        build_report(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 4)))


def test_report_csv():
    fc, truths = micro_case()
    text = build_report(fc, truths, thresholds=(0.5,), pool=2, fss_n=1).to_csv()
    lines = text.splitlines()
    assert lines[0] == "threshold,lead_time_minutes,metric,value"
    assert "0.5,5,CSI,1.0" in lines
    assert "0.5,10,CSI,0.0" in lines
    assert any(l.startswith("mean,all,CRPS,") for l in lines)


def test_persistence_forecast():
    past = np.arange(2 * 13 * 2 * 2, dtype=float).reshape(2, 13, 2, 2)
    p = persistence_forecast(past, 12)
    assert p.shape == (2, 1, 12, 2, 2)
    for k in range(12):
        np.testing.assert_array_equal(p[:, 0, k], past[:, -1])
    scaled = past / past.max()
    r = build_report(persistence_forecast(scaled, 12), np.repeat(scaled[:, -1:], 12, axis=1))
    assert r.aggregates["CRPS"] == 0.0
