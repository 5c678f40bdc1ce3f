import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from renfdi import signals as sg

from oracles import multisine_value


def test_single_tone_peak_is_its_amplitude():
    draw = sg.MultisineDraw(np.array([0.05]), np.array([2.0]), np.array([0.3]))
    t = np.linspace(0, 20, 20001)
    s = sg.evaluate_multisine(draw, t)
    np.testing.assert_allclose(s, 0.05 * np.sin(2.0 * t + 0.3), rtol=0, atol=1e-17)
    assert abs(np.abs(s).max() - 0.05) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_peak_bounded_by_largest_amplitude(seed):
    s, draw = sg.multisine(sg.ROAD_SPEC, seed, 0, return_draw=True)
    assert np.abs(s).max() <= draw.amplitudes.max() + 1e-15
    assert draw.amplitudes.max() <= 0.1


def test_draw_ranges():
    for seed in range(50):
        d = sg.draw_multisine(sg.FAULT_SPEC, sg.make_rng(seed, 1))
        assert 2 <= d.amplitudes.size <= 10
        assert np.all((d.amplitudes >= 0.01) & (d.amplitudes <= 0.1))
        assert np.all((d.frequencies >= 0.6 * np.pi) & (d.frequencies <= 5 * np.pi))
        assert np.all((d.phases >= 0) & (d.phases <= 0.94 * np.pi))


def test_matches_scalar_reimplementation():
    s, d = sg.multisine(sg.ROAD_SPEC, 123, 4, 1, return_draw=True)
    t = np.arange(sg.ROAD_SPEC.n_samples) / sg.ROAD_SPEC.sample_rate
    ref = [multisine_value(d.amplitudes, d.frequencies, d.phases, tk) for tk in t]
    np.testing.assert_allclose(s, ref, rtol=0, atol=1e-15)


def test_streams_are_independent_and_reproducible():
    a = sg.multisine(sg.ROAD_SPEC, 7, 0, 0)
    np.testing.assert_array_equal(a, sg.multisine(sg.ROAD_SPEC, 7, 0, 0))
    assert not np.array_equal(a, sg.multisine(sg.ROAD_SPEC, 7, 0, 1))
    assert not np.array_equal(a, sg.multisine(sg.ROAD_SPEC, 8, 0, 0))


def test_draw_round_trip():
    d = sg.draw_multisine(sg.ROAD_SPEC, sg.make_rng(3))
    again = sg.MultisineDraw.from_dict(d.to_dict())
    for f in ("amplitudes", "frequencies", "phases"):
        np.testing.assert_array_equal(getattr(d, f), getattr(again, f))


def test_fault_onset_at_end_is_all_zero():
    f = sg.synth_fault(sg.FAULT_SPEC, 1, sg.FAULT_SPEC.n_samples, 0, 1)
    assert not f.signal.any()


def test_fault_onset_zero_is_pure_multisine():
    f = sg.synth_fault(sg.FAULT_SPEC, 1, 0, 0, 1)
    np.testing.assert_array_equal(f.signal, sg.multisine(sg.FAULT_SPEC, 0, 1))


def test_fault_default_onset_zeroes_first_half():
    f = sg.synth_fault(sg.FAULT_SPEC, 2, None, 5, 2, n_samples=80)
    assert f.signal.shape == (80,) and f.onset_sample == 40
    assert not f.signal[:40].any() and f.signal[40:].any()


def test_fault_onset_outside_horizon():
    with pytest.raises(ValueError, match="outside"):
        sg.synth_fault(sg.FAULT_SPEC, 1, 81, 0, n_samples=80)


def test_spec_validation():
    with pytest.raises(ValueError):
        sg.MultisineSpec(amp_range=(0.2, 0.1))
