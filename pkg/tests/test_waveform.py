import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qctrl.waveform import (
    KIND_PARAMS,
    Waveform,
    WaveformError,
    WaveKind,
    add,
    convolve,
    differentiate_numeric,
    generate,
    integrate,
    mul,
    pointwise,
    scale,
    sub,
)

FS = 1e9
finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)


def wave(values, fs=FS, t0=0.0):
    return Waveform(np.asarray(values, dtype=float), fs, t0)


def waves(min_size=1, max_size=200):
    return arrays(np.float64, st.integers(min_size, max_size), elements=finite).map(wave)


def test_exactly_eight_kinds():
    assert len(WaveKind) == 8
    assert set(KIND_PARAMS) == set(WaveKind)


def test_sample_times_exact():
    w = wave(np.zeros(5), fs=4.0, t0=1.5)
    assert list(w.times()) == [1.5, 1.75, 2.0, 2.25, 2.5]


@pytest.mark.parametrize("bad", [np.zeros(0), np.zeros((2, 2))])
def test_waveform_rejects_bad_shapes(bad):
    with pytest.raises(WaveformError):
        Waveform(bad)


def test_waveform_rejects_nonpositive_rate():
    with pytest.raises(WaveformError):
        Waveform(np.ones(3), 0.0)


# ---------------------------------------------------------------- closed forms


def test_dc():
    w = generate("dc", {"a": 0.3})
    assert len(w) == 6000 and w.sample_rate == 1e9
    assert np.all(w.samples == 0.3)


def test_sine_quarter_period():
    w = generate(WaveKind.SINE, {"a": 1, "f": 1e7, "phi": 0})
    assert w.samples[25] == pytest.approx(1.0, abs=1e-15)


def test_gaussian_peak_and_one_sigma():
    w = generate(WaveKind.GAUSSIAN, {"a": 1, "mu": 3e-6, "sigma": 0.5e-6})
    assert w.samples[3000] == 1.0
    assert w.samples[3500] == pytest.approx(math.exp(-0.5), rel=1e-12)
    assert w.samples[3500] == pytest.approx(0.60653, abs=1e-5)


def test_flattop_edge_is_half():
    w = generate(WaveKind.FLATTOP, {"a": 1, "sigma": 50e-9, "t1": 1e-6, "t2": 4e-6})
    assert w.samples[1000] == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("widths", [13, 20, 40])
def test_flattop_plateau_midpoint(widths):
    sigma = 50e-9
    w = generate(WaveKind.FLATTOP, {"a": 0.8, "sigma": sigma, "t1": 1e-6, "t2": 1e-6 + widths * sigma})
    mid = int(round((1e-6 + widths * sigma / 2) * FS))
    assert abs(w.samples[mid] - 0.8) < 1e-9


def test_flattop_plateau_at_ten_sigma_follows_erf_tail():
    # each edge sits 5 sigma from the midpoint, so the dip is a*erfc(5/sqrt 2)
    w = generate(WaveKind.FLATTOP, {"a": 0.8, "sigma": 100e-9, "t1": 1e-6, "t2": 2e-6})
    assert 0.8 - w.samples[1500] == pytest.approx(0.8 * math.erfc(5 / math.sqrt(2)), rel=1e-6)


def test_rect_half_open():
    w = generate(WaveKind.RECTANGLE, {"a": 2, "t1": 10e-9, "t2": 20e-9}, length=30)
    assert np.all(w.samples[10:20] == 2) and w.samples[9] == 0 and w.samples[20] == 0


def test_trapezoid_shape():
    w = generate(WaveKind.TRAPEZOID, {"a": 1, "t1": 0, "t2": 100e-9, "r": 20e-9}, length=120)
    s = w.samples
    assert s[0] == 0 and s[10] == pytest.approx(0.5) and np.allclose(s[20:81], 1, rtol=0, atol=1e-12)
    assert s[90] == pytest.approx(0.5) and s[100] == 0


def test_triangle_peaks_at_midpoint():
    w = generate(WaveKind.TRIANGLE, {"a": 1, "t1": 0, "t2": 100e-9}, length=120)
    assert np.argmax(w.samples) == 50 and w.samples[50] == 1.0
    assert w.samples[25] == pytest.approx(0.5) and w.samples[75] == pytest.approx(0.5)


def test_slope_clamped():
    w = generate(WaveKind.SLOPE, {"a": 0.5, "t0": 10e-9, "T": 40e-9}, length=100)
    assert w.samples[5] == 0 and w.samples[30] == pytest.approx(0.25) and np.all(w.samples[50:] == 0.5)


@pytest.mark.parametrize("kind,params", [
    (WaveKind.SINE, {"a": 1}),
    (WaveKind.GAUSSIAN, {"mu": 0, "sigma": 0}),
    (WaveKind.GAUSSIAN, {"mu": 0, "sigma": 1e-9, "bogus": 1}),
    (WaveKind.RECTANGLE, {"t1": 2e-9, "t2": 1e-9}),
    (WaveKind.FLATTOP, {"t1": 0, "t2": 1e-6, "sigma": -1}),
    (WaveKind.SLOPE, {"T": 0}),
    (WaveKind.TRAPEZOID, {"t1": 0, "t2": 1e-8, "r": 6e-9}),
])
def test_generate_rejects_bad_params(kind, params):
    with pytest.raises(WaveformError):
        generate(kind, params)


def test_generate_rejects_zero_length_and_unknown_kind():
    with pytest.raises(WaveformError):
        generate("dc", {}, length=0)
    with pytest.raises(WaveformError):
        generate("square", {})


@given(st.sampled_from(list(WaveKind)), st.integers(1, 500))
def test_generate_deterministic(kind, n):
    params = {
        WaveKind.DC: {}, WaveKind.SINE: {"f": 3e7}, WaveKind.RECTANGLE: {"t1": 1e-8, "t2": 2e-7},
        WaveKind.GAUSSIAN: {"mu": 1e-7, "sigma": 2e-8}, WaveKind.TRAPEZOID: {"t1": 0, "t2": 2e-7, "r": 5e-8},
        WaveKind.TRIANGLE: {"t1": 0, "t2": 2e-7}, WaveKind.SLOPE: {"T": 1e-7},
        WaveKind.FLATTOP: {"t1": 5e-8, "t2": 3e-7, "sigma": 1e-8},
    }[kind]
    assert generate(kind, params, n).identical(generate(kind, params, n))


# ---------------------------------------------------------------- algebra


def test_pointwise_examples():
    assert np.all(add(generate("dc", {"a": 0.2}), generate("dc", {"a": 0.3})).samples == 0.5)
    z = mul(generate("sine", {"f": 1e7}), generate("dc", {"a": 0.0}))
    assert not np.any(z.samples)
    a, b = wave([1, 2, 3, 4]), wave([10, 20, 30, 40, 50, 60])
    out = add(a, b)
    assert len(out) == 6 and list(out.samples[4:]) == [50, 60]
    assert list(sub(a, b).samples) == [-9, -18, -27, -36, -50, -60]


def test_pointwise_keeps_first_t0_and_rejects_rate_mismatch():
    assert add(wave([1], t0=5e-9), wave([1], t0=7e-9)).t0 == 5e-9
    with pytest.raises(WaveformError):
        add(wave([1]), wave([1], fs=2e9))
    with pytest.raises(WaveformError):
        pointwise("div", wave([1]), wave([1]))


def same_length(k):
    return st.integers(1, 200).flatmap(
        lambda n: st.tuples(*[arrays(np.float64, n, elements=finite).map(wave) for _ in range(k)]))


@given(same_length(2))
def test_add_commutes_and_zero_identity(pair):
    a, b = pair
    assert add(a, b).identical(add(b, a))
    assert mul(a, b).identical(mul(b, a))
    z = wave(np.zeros(len(a)))
    # value-exact; -0.0 + 0.0 is +0.0 under IEEE rounding
    assert np.array_equal(add(a, z).samples, a.samples)


@given(same_length(3))
def test_add_associative_within_ulp(triple):
    a, b, c = (w.samples for w in triple)
    left = add(add(*triple[:2]), triple[2]).samples
    right = add(triple[0], add(*triple[1:])).samples
    # two roundings per side, each at most half an ulp of |a|+|b|+|c|
    bound = 2 * np.spacing(np.abs(a) + np.abs(b) + np.abs(c))
    assert np.all(np.abs(left - right) <= bound)


@given(same_length(2))
def test_integrate_linear(pair):
    a, b = pair
    lhs = integrate(add(a, b)).samples
    rhs = add(integrate(a), integrate(b)).samples
    scale_ = np.cumsum(np.abs(add(a, b).samples) + 1) / FS
    assert np.all(np.abs(lhs - rhs) <= 1e-12 * scale_)


def test_scale():
    assert list(scale(wave([1, -2]), 3).samples) == [3, -6]


# ---------------------------------------------------------------- calculus


def test_integrate_rect():
    w = generate("rect", {"a": 1, "t1": 0, "t2": 1e-6}, length=1000)
    assert integrate(w).samples[999] == pytest.approx(1e-6, rel=1e-12)


def test_integrate_zero_and_full_period_sine():
    assert not np.any(integrate(wave(np.zeros(50))).samples)
    w = generate("sine", {"f": 1e7}, length=6000)
    oracle = math.fsum(w.samples) / FS
    out = integrate(w).samples[-1]
    assert abs(out) < 1e-9 * len(w)
    assert out == pytest.approx(oracle, abs=1e-18)


def test_integrate_left_riemann_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=64)
    out = integrate(wave(x, fs=8.0)).samples
    for n in range(64):
        assert out[n] == pytest.approx(math.fsum(x[: n + 1]) / 8.0, rel=1e-12, abs=1e-15)


def test_differentiate_slope_and_dc():
    n = 100
    w = generate("slope", {"a": 1, "t0": 0, "T": n / FS}, length=n)
    d = differentiate_numeric(w).samples
    assert d[0] == 0
    assert np.allclose(d[1:], FS / n, rtol=1e-9)
    assert not np.any(differentiate_numeric(generate("dc", {"a": 0.4}, length=10)).samples)


@given(waves(2, 300))
def test_differentiate_inverts_integrate(w):
    back = differentiate_numeric(integrate(w)).samples
    x = w.samples
    mag = np.maximum(np.abs(np.cumsum(x)), 1.0)
    assert np.all(np.abs(back[1:] - x[1:]) <= 1e-9 * mag[1:])


def test_convolve_identity_kernel():
    w = generate("gauss", {"mu": 5e-8, "sigma": 1e-8}, length=100)
    out = convolve(w, wave([FS]))
    assert len(out) == len(w)
    assert np.allclose(out.samples, w.samples, rtol=0, atol=1e-15)


def test_convolve_rect_rect_brute_force():
    a = generate("rect", {"a": 0.7, "t1": 0, "t2": 40e-9}, length=40)
    out = convolve(a, a)
    assert len(out) == 79
    brute = np.zeros(79)
    for i in range(40):
        for j in range(40):
            brute[i + j] += a.samples[i] * a.samples[j] / FS
    assert np.allclose(out.samples, brute, atol=1e-20)
    assert out.samples.max() == pytest.approx(40e-9 * 0.7 ** 2, rel=1e-12)


def test_convolve_rate_mismatch():
    with pytest.raises(WaveformError):
        convolve(wave([1]), wave([1], fs=2.0))
