import math

import numpy as np
import pytest
from scipy import ndimage

from vascldm.metrics import (
    ROWS,
    ExtractorConfig,
    FeatureExtractor,
    MetricsReport,
    comparison_table,
    evaluate,
    fourg_r_ssim,
    frechet_distance,
    frechet_from_moments,
    gaussian_window,
    gradient_regions,
    ms_ssim,
    n_scales,
    ssim,
)


def _brute_ssim(a, b, data_range=1.0):
    # window-by-window loop oracle for single-scale SSIM
    win = gaussian_window()
    k = win.shape[0]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(a.shape[0] - k + 1):
        for j in range(a.shape[1] - k + 1):
            pa, pb = a[i : i + k, j : j + k], b[i : i + k, j : j + k]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


@pytest.fixture(scope="module")
def phantom():
    from vascldm.phantom import PhantomSpec, generate_phantom, mip_render

    return mip_render(generate_phantom(PhantomSpec(class_label=1, seed=42))).astype(np.float64)


def test_ssim_matches_window_loop(rng):
    a, b = rng.random((20, 24)), rng.random((20, 24))
    assert ssim(a, b) == pytest.approx(_brute_ssim(a, b), abs=1e-10)


def test_ms_ssim_identity(phantom, rng):
    assert ms_ssim(phantom, phantom) == pytest.approx(1.0, abs=1e-9)
    x = rng.random((64, 64))
    assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_ms_ssim_anticorrelated_binary(rng):
    x = (rng.random((64, 64)) < 0.5).astype(float)
    assert abs(x.mean() - 0.5) < 0.05
    assert ms_ssim(x, 1 - x) < 0.2
    assert _brute_ssim(x, 1 - x) < 0


def test_ms_ssim_monotone_in_noise(phantom):
    g = np.random.default_rng(5)
    noise = g.normal(size=phantom.shape)
    scores = [ms_ssim(phantom, phantom + s * noise) for s in (0.05, 0.1, 0.2)]
    assert scores[0] > scores[1] > scores[2]
    assert all(0 <= s <= 1 for s in scores)


def test_scale_count():
    assert n_scales((64, 64)) == 3
    assert n_scales((256, 256)) == 5
    assert n_scales((32, 32)) == 2
    with pytest.raises(ValueError):
        n_scales((10, 64))


def test_ms_ssim_errors(rng):
    with pytest.raises(ValueError):
        ms_ssim(rng.random((64, 64)), rng.random((64, 32)))
    with pytest.raises(ValueError):
        ms_ssim(rng.random((8, 8)), rng.random((8, 8)))
    with pytest.raises(ValueError):
        ms_ssim(rng.random((2, 64, 64)), rng.random((2, 64, 64)))


def test_fourg_r_identity_and_constant(phantom):
    assert fourg_r_ssim(phantom, phantom) == pytest.approx(1.0, abs=1e-6)
    const = np.full((32, 32), 0.4)
    assert fourg_r_ssim(const, const) == pytest.approx(1.0, abs=1e-12)


def test_fourg_r_blur_monotone(phantom):
    light = ndimage.gaussian_filter(phantom, 0.7)
    heavy = ndimage.gaussian_filter(phantom, 3.0)
    assert fourg_r_ssim(phantom, heavy) < fourg_r_ssim(phantom, light) < 1.0


def test_gradient_regions_partition(phantom):
    from vascldm.metrics import gradient_magnitude

    ga = gradient_magnitude(phantom)
    gb = gradient_magnitude(ndimage.gaussian_filter(phantom, 1.0))
    regions = gradient_regions(ga, gb)
    total = sum(m.astype(int) for m in regions.values())
    assert np.all(total == 1)
    assert regions["edge"].any() and regions["smooth"].any()


# --- Frechet -------------------------------------------------------------------------------


def test_frechet_identity(rng):
    f = rng.normal(size=(100, 8))
    assert frechet_distance(f, f) == pytest.approx(0.0, abs=1e-6)


def test_frechet_one_dimensional_closed_form():
    g = np.random.default_rng(0)
    a = g.normal(0, 1, size=10_000)
    b = g.normal(3, 2, size=10_000)
    assert frechet_distance(a, b) == pytest.approx(10.0, rel=0.1)
    # population parameters give the closed form exactly
    assert frechet_from_moments(0.0, 1.0, 3.0, 4.0) == pytest.approx(10.0, abs=1e-12)


def test_frechet_symmetric(rng):
    a = rng.normal(size=(50, 5))
    b = rng.normal(1, 2, size=(60, 5)) @ rng.normal(size=(5, 5))
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-9)


def test_frechet_diagonal_closed_form(rng):
    da, db = rng.random(6) + 0.1, rng.random(6) + 0.1
    mu_a, mu_b = rng.normal(size=6), rng.normal(size=6)
    expected = ((mu_a - mu_b) ** 2).sum() + ((np.sqrt(da) - np.sqrt(db)) ** 2).sum()
    assert frechet_from_moments(mu_a, np.diag(da), mu_b, np.diag(db)) == pytest.approx(expected, abs=1e-9)


def test_frechet_needs_two_samples(rng):
    with pytest.raises(ValueError):
        frechet_distance(rng.normal(size=(1, 3)), rng.normal(size=(5, 3)))


# --- extractor and evaluation -------------------------------------------------------------------


@pytest.fixture(scope="module")
def extractor():
    return FeatureExtractor(ExtractorConfig())


def test_extractor_features(extractor, phantom):
    f = extractor.features(np.stack([phantom, phantom]))
    assert f.shape == (2, 64)
    assert np.array_equal(f, extractor.features(np.stack([phantom, phantom])))
    assert set(extractor.predict(np.stack([phantom]))) <= {1, 2, 3}


def test_self_evaluation(extractor, phantom_mips):
    imgs, labels = phantom_mips
    rep = evaluate(imgs, labels, imgs, labels, extractor, "abc")
    assert list(rep.rows) == list(ROWS)
    for row in rep.rows.values():
        assert row.present
        assert row.frechet == pytest.approx(0.0, abs=1e-6)
        assert row.ms_ssim == pytest.approx(1.0, abs=1e-9)
        assert row.fourg_r_ssim == pytest.approx(1.0, abs=1e-6)


def test_missing_class_is_isolated(extractor, phantom_mips):
    imgs, labels = phantom_mips
    g = np.random.default_rng(2)
    synth = np.clip(imgs + 0.05 * g.normal(size=imgs.shape), 0, 1)
    full = evaluate(imgs, labels, synth, labels, extractor)
    keep = labels != 2
    part = evaluate(imgs, labels, synth[keep], labels[keep], extractor)
    assert not part.rows["class2"].present
    assert part.rows["overall"].present
    for name in ("class1", "class3"):
        a, b = full.rows[name], part.rows[name]
        assert (a.frechet, a.ms_ssim, a.fourg_r_ssim) == (b.frechet, b.ms_ssim, b.fourg_r_ssim)
    assert "absent" in part.table()


def test_report_text_round_trip(extractor, phantom_mips):
    imgs, labels = phantom_mips
    keep = labels != 3
    rep = evaluate(imgs, labels, imgs[keep], labels[keep], extractor, "0123456789abcdef")
    text = rep.to_text()
    assert text.splitlines()[1].startswith("# features: task-trained")
    back = MetricsReport.from_text(text)
    assert back.config_hash == rep.config_hash
    for name in ROWS:
        a, b = rep.rows[name], back.rows[name]
        assert a.present == b.present and a.n_synth == b.n_synth
        if a.present:
            assert math.isclose(a.frechet, b.frechet, rel_tol=1e-9, abs_tol=1e-12)
            assert math.isclose(a.ms_ssim, b.ms_ssim, rel_tol=1e-9)


def test_comparison_table(extractor, phantom_mips):
    imgs, labels = phantom_mips
    rep = evaluate(imgs, labels, imgs, labels, extractor)
    table = comparison_table({"class_only": rep, "shape": rep, "full": rep})
    lines = table.splitlines()
    assert len(lines) == 5
    assert "Frechet" in lines[0] and "MS-SSIM" in lines[0] and "4-G-R SSIM" in lines[0]


def test_evaluate_rejects_empty(extractor, phantom_mips):
    imgs, labels = phantom_mips
    with pytest.raises(ValueError):
        evaluate(imgs, labels, imgs[:0], labels[:0], extractor)
