import numpy as np
import pytest

from unfoldls.perfusion import (POPULATION_INIT, RoiReport, fit_maps, fit_pixel,
                                roi_relative_error, to_concentration)
from unfoldls.simulate import (MAP_NAMES, Perfusion, PerfusionMaps, aif, default_phantom,
                               frame_times, render_sequence, signal_model, tissue_curve)

T = frame_times(64, 0.96)
AIF = aif(T)
TRUE = Perfusion(Fp=0.6, E=0.2, Tc=4.0, ve=0.35)


def test_to_concentration_linear():
    rng = np.random.default_rng(0)
    C = rng.uniform(0, 2, 50)
    back, flags = to_concentration(signal_model(C, 0.04, scale=0.5), 0.04, scale=0.5)
    np.testing.assert_allclose(back, C, atol=1e-12)
    assert not flags.any()
    assert not np.any(to_concentration(np.full(10, 0.04), 0.04)[0])


def test_to_concentration_spgr():
    C = np.linspace(0, 5, 200)
    back, flags = to_concentration(signal_model(C, 0.04, "spgr"), 0.04, "spgr")
    np.testing.assert_allclose(back, C, rtol=1e-6, atol=1e-9)
    low, flag = to_concentration(np.array([0.01]), 0.04, "spgr")
    assert low[0] == 0 and flag[0]


def test_fit_pixel_recovers_from_perturbed_init():
    curve = tissue_curve(TRUE, AIF, T)
    fit = fit_pixel(curve, AIF, T, init=TRUE.as_array() * 1.5)
    assert fit.converged
    np.testing.assert_allclose(fit.params, TRUE.as_array(), rtol=0.01)
    assert fit.residual <= fit.init_residual


def test_fit_pixel_zero_curve():
    fit = fit_pixel(np.zeros_like(T), AIF, T)
    assert fit.params[0] < 1e-6 and not fit.converged


def test_fit_pixel_validation():
    with pytest.raises(ValueError):
        fit_pixel(np.zeros(3), AIF, T)
    bad = tissue_curve(TRUE, AIF, T)
    bad[4] = np.nan
    with pytest.raises(ValueError):
        fit_pixel(bad, AIF, T)


def test_fit_pixel_noisy_monte_carlo():
    curve = tissue_curve(TRUE, AIF, T)
    sigma = 0.01 * curve.max()
    errs = []
    for seed in range(100):
        noisy = curve + sigma * np.random.default_rng(seed).standard_normal(T.size)
        fit = fit_pixel(noisy, AIF, T)
        assert fit.residual <= fit.init_residual
        errs.append(np.abs(fit.params / TRUE.as_array() - 1))
    assert np.all(np.median(errs, axis=0) <= 0.10)


@pytest.fixture(scope="module")
def phantom():
    spec = default_phantom(16, 16, nt_full=64)
    frames, baseline, maps, masks = render_sequence(spec, T, AIF)
    return frames, baseline, maps, masks


def test_fit_maps_on_noiseless_phantom(phantom):
    frames, baseline, maps, masks = phantom
    est = fit_maps(frames, masks, AIF, T, baseline=baseline)
    inside = masks.any(axis=0)
    assert np.all(est.converged[inside])
    for name in MAP_NAMES:
        for m in masks:
            err = np.median(np.abs(est.get(name)[m] / maps.get(name)[m] - 1))
            assert err <= 0.01
    assert np.all(np.isnan(est.Fp[~inside]))
    np.testing.assert_array_equal(est.Ktrans[inside], est.E[inside] * est.Fp[inside])


def test_fit_maps_constant_sequence(phantom):
    _, baseline, _, masks = phantom
    est = fit_maps(np.repeat(baseline[None], 64, axis=0), masks, AIF, T)
    assert np.all(est.Fp[masks.any(axis=0)] < 1e-6)


def _maps(value, shape=(4, 4)):
    return PerfusionMaps(**{n: np.full(shape, value) for n in MAP_NAMES})


def test_roi_report_examples(tmp_path):
    masks = np.zeros((2, 4, 4), bool)
    masks[0, :2] = True
    masks[1, 2:] = True
    ref = _maps(0.3)
    assert all(v == 0 for v in roi_relative_error(ref, ref, masks).errors.values())
    rep = roi_relative_error(_maps(0.45), ref, masks, roi_names=("a", "b"))
    assert all(v == pytest.approx(50.0) for v in rep.errors.values())
    rep.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "roi,parameter,mean_rel_err_pct"
    assert len(lines) == 1 + 2 * len(MAP_NAMES) and lines[1].startswith("a,Fp,")
    diff = rep.difference(roi_relative_error(ref, ref, masks))
    assert diff[(1, "Fp")] == pytest.approx(50.0)


def test_roi_report_invariances():
    rng = np.random.default_rng(1)
    masks = np.ones((1, 4, 4), bool)
    est = PerfusionMaps(**{n: rng.uniform(0.1, 1, (4, 4)) for n in MAP_NAMES})
    ref = PerfusionMaps(**{n: rng.uniform(0.1, 1, (4, 4)) for n in MAP_NAMES})
    a = roi_relative_error(est, ref, masks)
    scaled = roi_relative_error(PerfusionMaps(**{n: 3 * est.get(n) for n in MAP_NAMES}),
                                PerfusionMaps(**{n: 3 * ref.get(n) for n in MAP_NAMES}), masks)
    perm = rng.permutation(16)
    shuf = roi_relative_error(
        PerfusionMaps(**{n: est.get(n).ravel()[perm].reshape(4, 4) for n in MAP_NAMES}),
        PerfusionMaps(**{n: ref.get(n).ravel()[perm].reshape(4, 4) for n in MAP_NAMES}), masks)
    for k in a.errors:
        assert scaled.errors[k] == pytest.approx(a.errors[k], rel=1e-12)
        assert shuf.errors[k] == pytest.approx(a.errors[k], rel=1e-12)
        assert a.errors[k] >= 0


def test_roi_report_exclusion():
    masks = np.ones((1, 2, 2), bool)
    ref = _maps(1.0, (2, 2))
    ref.Fp[0, 0] = 0.0
    rep = roi_relative_error(_maps(2.0, (2, 2)), ref, masks)
    assert rep.excluded[(1, "Fp")] == 1 and rep.get(1, "Fp") == pytest.approx(100.0)
    with pytest.raises(ValueError):
        roi_relative_error(ref, _maps(0.0, (2, 2)), masks)


def test_population_init_is_valid():
    Perfusion(*POPULATION_INIT)
    assert isinstance(RoiReport().errors, dict)


def test_fit_stays_inside_physiological_box():
    from unfoldls.perfusion import FIT_UPPER

    rng = np.random.default_rng(8)
    t = frame_times(16, 0.96)
    a = aif(t)
    for _ in range(20):
        fit = fit_pixel(0.01 * rng.standard_normal(t.size), a, t)
        assert np.all(fit.params > 0) and np.all(fit.params < FIT_UPPER)
