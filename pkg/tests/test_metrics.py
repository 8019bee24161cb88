import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hicscan.errors import DomainError
from hicscan.metrics import (
    SSIM_C1,
    LoopSets,
    evaluate_patches,
    loop_table_csv,
    loop_table_text,
    loop_weighted_score,
    pcc,
    pcc_by_distance,
    psnr,
    srcc,
    ssim,
    undefined_reason,
)

import oracles

unit_maps = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s).random((8, 8)))


# --- SSIM ------------------------------------------------------------------------


def test_ssim_identity():
    x = np.random.default_rng(0).random((8, 8))
    assert ssim(x, x) == 1.0


def test_ssim_constant_maps():
    assert ssim(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(SSIM_C1 / (1 + SSIM_C1), rel=1e-12)
    assert ssim(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(9.999e-5, rel=1e-4)


def test_ssim_anticorrelated_is_negative():
    x = np.random.default_rng(1).random((8, 8))
    assert ssim(1 - x, x) < 0


@settings(max_examples=40, deadline=None)
@given(unit_maps, unit_maps)
def test_ssim_symmetric_bounded(a, b):
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert -1 <= ssim(a, b) <= 1


def test_ssim_clamps_predictions():
    t = np.random.default_rng(2).random((6, 6))
    assert ssim(t + 5, t) == ssim(np.ones_like(t), t)


def test_windowed_ssim():
    rng = np.random.default_rng(3)
    x = rng.random((20, 20))
    assert ssim(x, x, windowed=True) == pytest.approx(1.0, abs=1e-12)
    y = np.clip(x + 0.1 * rng.normal(size=x.shape), 0, 1)
    assert ssim(y, x, windowed=True) < 1
    with pytest.raises(DomainError):
        ssim(x[:8, :8], x[:8, :8], windowed=True)


def test_ssim_shape_mismatch():
    with pytest.raises(DomainError):
        ssim(np.zeros((2, 2)), np.zeros((2, 3)))


# --- PSNR ----------------------------------------------------------------------


def test_psnr_offsets():
    t = np.full((5, 5), 0.5)
    assert psnr(t + 0.1, t) == pytest.approx(20.0, abs=1e-9)
    assert psnr(t + 0.01, t) == pytest.approx(40.0, abs=1e-9)
    assert math.isinf(psnr(t, t))


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1.0))
def test_psnr_constant_offset_law(c):
    t = np.zeros((4, 4))
    assert psnr(t + c, t) == pytest.approx(-20 * math.log10(c), abs=1e-9)


def test_psnr_decreases_with_error():
    t = np.full((4, 4), 0.2)
    values = [psnr(t + e, t) for e in (0.01, 0.02, 0.1, 0.4)]
    assert values == sorted(values, reverse=True)


# --- correlations ----------------------------------------------------------------


def test_pcc_affine_and_sign():
    t = np.random.default_rng(4).normal(size=50)
    assert pcc(2 * t + 3, t, clamp=False) == pytest.approx(1.0, abs=1e-12)
    assert pcc(-t, t, clamp=False) == pytest.approx(-1.0, abs=1e-12)


def test_pcc_hand_value():
    p, t = np.array([1, 2, 3, 5.0]), np.array([1, 2, 3, 4.0])
    # means 2.75 and 2.5; sum of centred products 6.5; norms sqrt(8.75) and sqrt(5)
    assert pcc(p, t, clamp=False) == pytest.approx(6.5 / math.sqrt(8.75 * 5), abs=1e-15)


def test_constant_input_is_undefined():
    assert math.isnan(pcc(np.ones(5), np.arange(5.0), clamp=False))
    assert math.isnan(srcc(np.arange(5.0), np.ones(5), clamp=False))
    assert undefined_reason(np.ones(5), np.arange(5.0)) == "prediction is constant"
    assert undefined_reason(np.arange(5.0), np.ones(5)) == "target is constant"


def test_srcc_monotone_and_reversed():
    t = np.random.default_rng(5).normal(size=30)
    assert srcc(np.exp(t), t, clamp=False) == pytest.approx(1.0, abs=1e-12)
    s = np.arange(10.0)
    assert srcc(s[::-1], s, clamp=False) == pytest.approx(-1.0, abs=1e-12)


def test_srcc_ties_average_ranks():
    value = srcc(np.array([1.0, 1.0, 2.0]), np.array([1.0, 2.0, 3.0]), clamp=False)
    assert value == pytest.approx(oracles.spearman([1, 1, 2], [1, 2, 3]), abs=1e-15)
    assert value == pytest.approx(math.sqrt(3) / 2, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(unit_maps, unit_maps)
def test_metrics_match_brute_force(a, b):
    assert ssim(a, b) == pytest.approx(oracles.ssim(a, b), abs=1e-10)
    assert psnr(a, b) == pytest.approx(oracles.psnr(a, b), abs=1e-10)
    assert pcc(a, b) == pytest.approx(oracles.pearson(a, b), abs=1e-10)
    assert srcc(a, b) == pytest.approx(oracles.spearman(a, b), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
def test_correlation_invariances(seed, scale, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.random(20), rng.random(20)
    assert pcc(scale * a + shift, b, clamp=False) == pytest.approx(pcc(a, b, clamp=False), abs=1e-12)
    assert srcc(np.exp(3 * a), b, clamp=False) == pytest.approx(srcc(a, b, clamp=False), abs=1e-12)


# --- distance profile -----------------------------------------------------------


def test_distance_profile_identity():
    m = np.random.default_rng(6).random((12, 12))
    m = (m + m.T) / 2
    profile = pcc_by_distance(m, m, 20)
    ds = [d for d, _ in profile.rows]
    assert ds == [d for d in range(12) if d not in profile.skipped]
    assert all(v == pytest.approx(1.0) for _, v in profile.rows)
    assert profile.skipped == [11]  # single-pixel diagonal
    assert max(ds) <= 11


def test_distance_profile_skips_constant_diagonals():
    t = np.random.default_rng(7).random((6, 6))
    p = t.copy()
    np.fill_diagonal(p, 0.5)
    profile = pcc_by_distance(p, t, 3)
    assert 0 in profile.skipped
    assert profile.to_csv().splitlines()[0] == "distance_bins,pcc"


def test_distance_profile_decreases_with_shrinking_diagonals():
    n, seeds = 60, 40
    totals = np.zeros(n - 2)
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        signal = rng.random((n, n))
        noisy = signal + rng.normal(scale=0.3, size=(n, n))
        profile = dict(pcc_by_distance(noisy, signal, n - 3, clamp=False).rows)
        totals += np.array([profile[d] for d in range(n - 2)])
    # fewer pixels per diagonal -> noisier, smaller correlation on average
    mean = totals / seeds
    assert mean[:10].mean() > mean[-10:].mean()


# --- aggregation -------------------------------------------------------------


def test_patch_report_means_and_flags():
    rng = np.random.default_rng(8)
    t = rng.random((3, 8, 8))
    report = evaluate_patches(t, t)
    assert report.ssim == 1.0 and report.psnr_infinite and math.isinf(report.psnr)
    assert report.pcc == pytest.approx(1.0) and report.n_patches == 3
    p = np.clip(t + 0.05 * rng.normal(size=t.shape), 0, 1)
    report = evaluate_patches(p, t)
    assert report.ssim == pytest.approx(np.mean([ssim(a, b) for a, b in zip(p, t)]))
    assert report.psnr == pytest.approx(np.mean([psnr(a, b) for a, b in zip(p, t)]))
    assert "ssim" in report.to_text() and report.to_csv().startswith("metric,value")


def test_patch_report_notes_undefined_patches():
    t = np.random.default_rng(9).random((2, 8, 8))
    t[1] = 0.3
    report = evaluate_patches(t, t)
    assert any("undefined" in note for note in report.notes)
    assert report.pcc == pytest.approx(1.0)


# --- loop weighted score ---------------------------------------------------------


def _table(counts, totals):
    rows = loop_weighted_score(LoopSets.from_counts(counts, totals))
    return {(r.se, r.line): r for r in rows}


def test_reference_loop_scores():
    rows = _table([151, 67, 50, 44], [708, 344])
    assert rows["GM12878", "GM12878"].proportion == pytest.approx(0.213, abs=5e-4)
    assert rows["GM12878", "GM12878"].weight == pytest.approx(0.523, abs=1e-3)
    assert rows["GM12878", "K562"].proportion == pytest.approx(0.195, abs=5e-4)
    assert rows["GM12878", "K562"].weight == pytest.approx(0.477, abs=1e-3)
    assert rows["K562", "GM12878"].proportion == pytest.approx(0.071, abs=5e-4)
    assert rows["K562", "GM12878"].weight == pytest.approx(0.356, abs=1e-3)
    # 44 / 344 = 0.1279; the reference value is truncated to 0.127
    assert rows["K562", "K562"].proportion == pytest.approx(0.127, abs=1e-3)
    assert rows["K562", "K562"].weight == pytest.approx(0.644, abs=1e-3)


def test_symmetric_inputs_split_evenly():
    rows = _table([10, 10, 3, 3], [100, 100])
    assert all(r.weight == 0.5 for r in rows.values())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(1, 500), st.data())
def test_weights_sum_to_one(n1, n2, data):
    counts = [data.draw(st.integers(0, n)) for n in (n1, n2, n1, n2)]
    rows = loop_weighted_score(LoopSets.from_counts(counts, [n1, n2]))
    for se in ("GM12878", "K562"):
        pair = [r for r in rows if r.se == se]
        if pair[0].defined:
            assert pair[0].weight + pair[1].weight == pytest.approx(1.0, abs=1e-12)
        else:
            assert all(math.isnan(r.weight) for r in pair)


def test_loop_set_validation():
    with pytest.raises(DomainError):
        LoopSets.from_counts([1, 2, 3, 4], [0, 10])
    with pytest.raises(DomainError):
        LoopSets.from_counts([11, 2, 3, 4], [10, 10])
    with pytest.raises(DomainError):
        LoopSets.from_counts([1, 2, 3], [10, 10])


def test_zero_denominator_flagged():
    rows = loop_weighted_score(LoopSets.from_counts([0, 0, 1, 1], [5, 5]))
    assert [r.defined for r in rows] == [False, False, True, True]
    assert "nan" in loop_table_text(rows)
    assert loop_table_csv(rows).splitlines()[0] == "se_set,line,count,total,proportion,weight"
