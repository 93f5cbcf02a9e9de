import math

import numpy as np
import pytest
from scipy import ndimage

from dsaflow.imageio import Polarity, load_series
from dsaflow.phantom import (
    Bolus,
    PhantomError,
    PhantomSpec,
    PhantomTruth,
    PhaseSpec,
    generate_phantom,
    gamma_variate,
    load_truth,
    overlap_fraction,
    render_geometry,
    render_sources,
    write_phantom,
)
from dsaflow.phases import Phase


def test_gamma_variate_examples():
    assert gamma_variate(2.0, 2.0, 3.0, 1.5, 0.7) == 0.0
    assert gamma_variate(-1.0, 0.0, 3.0, 1.5, 0.7) == 0.0
    assert gamma_variate(2.0 + 4.5, 2.0, 3.0, 1.5, 0.7) == pytest.approx(0.7, abs=1e-15)
    # alpha=2, beta=1.5, t-t0=1: (1/3)^2 * e^(2 - 2/3)
    expected = (1.0 / 3.0) ** 2 * math.exp(2.0 - 1.0 / 1.5)
    assert gamma_variate(1.0, 0.0, 2.0, 1.5, 1.0) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.421519, abs=1e-6)
    with pytest.raises(PhantomError):
        gamma_variate(1.0, 0.0, 0.0, 1.5, 1.0)


def test_gamma_variate_mode_is_peak():
    t = np.linspace(0, 30, 30001)
    y = gamma_variate(t, 3.0, 2.5, 1.2, 1.0)
    assert t[np.argmax(y)] == pytest.approx(3.0 + 2.5 * 1.2, abs=1e-3)
    assert y.max() == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("kind", ["curve_artery", "blob_nidus", "curve_vein"])
def test_render_deterministic(kind):
    assert np.array_equal(render_geometry(kind, 128, 128, 5), render_geometry(kind, 128, 128, 5))


def test_blob_is_single_4_connected_component():
    for seed in range(10):
        blob = render_geometry("blob_nidus", 128, 128, seed)
        _, n = ndimage.label(blob, structure=ndimage.generate_binary_structure(2, 1))
        assert n == 1


def test_tube_borders():
    for seed in range(10):
        artery = render_geometry("curve_artery", 128, 128, seed)
        vein = render_geometry("curve_vein", 128, 128, seed)
        assert artery[:, 0].any()
        assert vein[0, :].any()


def test_overlap_constraint():
    for seed in range(20):
        imgs = render_sources(["curve_artery", "blob_nidus", "curve_vein"], 128, 128, seed)
        masks = [i > 0 for i in imgs]
        for i in range(3):
            for j in range(i + 1, 3):
                a, b = masks[i], masks[j]
                direct = (a & b).sum() / min(a.sum(), b.sum())
                assert direct < 0.10
                assert overlap_fraction(a, b) == direct


def test_spec_validation():
    with pytest.raises(PhantomError):
        PhantomSpec(d=5)
    with pytest.raises(PhantomError):
        PhantomSpec(noise_sigma=-0.1)
    swapped = (PhaseSpec("curve_artery", Bolus(5.0)), PhaseSpec("curve_vein", Bolus(1.0)))
    with pytest.raises(PhantomError):
        PhantomSpec(phases=swapped)
    with pytest.raises(PhantomError):
        PhantomSpec(phases=(PhaseSpec("curve_artery", Bolus(1.0, amplitude=0.0)),
                            PhaseSpec("curve_vein", Bolus(4.0))))


def test_spec_dict_round_trip():
    spec = PhantomSpec(seed=3, d=20)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec


def test_generate_defaults():
    series, truth = generate_phantom(PhantomSpec())
    assert series.d == 24 and series.shape == (128, 128)
    assert series.fps == 3.0
    assert series.polarity is Polarity.BRIGHT
    assert truth.mixing.shape == (24, 3)
    assert truth.phase_order == [Phase.ARTERIAL, Phase.NIDAL, Phase.VENOUS]
    assert np.array_equal(truth.vessel_mask, truth.masks.any(axis=0))


def test_determinism():
    a, ta = generate_phantom(PhantomSpec(seed=9))
    b, tb = generate_phantom(PhantomSpec(seed=9))
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(ta.sources, tb.sources)
    c, _ = generate_phantom(PhantomSpec(seed=10))
    assert not np.array_equal(a.frames, c.frames)


def test_zero_noise_exact_linearity():
    series, truth = generate_phantom(PhantomSpec(noise_sigma=0.0))
    p, h, w = truth.sources.shape
    for t in range(series.d):
        direct = sum(truth.mixing[t, j] * truth.sources[j] for j in range(p)) + truth.background
        assert np.max(np.abs(series.frames[t] - direct)) <= 1e-12
    # no clamping happened
    assert series.frames.max() < 1.0


def test_constant_bolus_reproduces_source():
    src = np.random.default_rng(0).random((1, 16, 16))
    truth = PhantomTruth(src, np.ones((4, 1)), src[0] > 0, [Phase.ARTERIAL], background=0.0)
    for frame in truth.clean_frames():
        assert np.array_equal(frame, src[0])


def test_peak_order_follows_onsets():
    _, truth = generate_phantom(PhantomSpec())
    peaks = np.argmax(truth.mixing, axis=0)
    assert list(peaks) == sorted(peaks)
    assert len(set(peaks)) == 3


def test_two_phase_spec():
    phases = (PhaseSpec("curve_artery", Bolus(1.0)), PhaseSpec("curve_vein", Bolus(6.0)))
    series, truth = generate_phantom(PhantomSpec(phases=phases, d=16))
    assert truth.phase_order == [Phase.ARTERIAL, Phase.VENOUS]
    assert series.d == 16


def test_write_and_load(tmp_path):
    spec = PhantomSpec(h=64, w=64, d=12)
    series, truth = generate_phantom(spec)
    write_phantom(series, truth, tmp_path, spec)
    back = load_series(tmp_path)
    assert back.d == 12
    assert back.polarity is Polarity.BRIGHT
    assert np.max(np.abs(back.frames - series.frames)) <= 1 / 65535
    info = load_truth(tmp_path)
    assert info["phases"] == truth.phase_order
    np.testing.assert_array_equal(info["mixing_array"], truth.mixing)
    for got, want in zip(info["mask_arrays"], truth.masks):
        assert np.array_equal(got, want)
    assert np.array_equal(info["vessel_mask_array"], truth.vessel_mask)
    with pytest.raises(PhantomError):
        load_truth(tmp_path / "truth")
