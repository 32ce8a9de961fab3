import math

import numpy as np
import pytest
from scipy.special import eval_jacobi

from vascldm.descriptors import (
    ShapeConditions,
    ZeroMassError,
    build_shape_condition,
    build_shape_conditions,
    central_moment,
    compress_hu,
    hu_moments,
    image_descriptor,
    normalized_moments,
    zernike_basis,
    zernike_indices,
    zernike_moments,
    zernike_radial,
    zernike_reconstruct,
)
from vascldm.phantom import DatasetManifest, ManifestEntry, PhantomSpec, generate_dataset, generate_phantom, mip_render


def disk(size=64, r=20.0, centre=None):
    c = (size - 1) / 2 if centre is None else centre
    ys, xs = np.indices((size, size))
    return ((xs - c) ** 2 + (ys - c) ** 2 <= r**2).astype(float)


def test_centering_identity(rng):
    img = rng.random((20, 30))
    assert central_moment(img, 1, 0) == pytest.approx(0.0, abs=1e-9)
    assert central_moment(img, 0, 1) == pytest.approx(0.0, abs=1e-9)


def test_single_pixel():
    img = np.zeros((9, 9))
    img[4, 2] = 1.0
    assert central_moment(img, 0, 0) == 1.0
    assert central_moment(img, 2, 0) == 0.0


def test_x_is_column_index():
    img = np.zeros((9, 9))
    img[4, 2] = img[4, 6] = 1.0  # spread along x only
    assert central_moment(img, 2, 0) == pytest.approx(8.0)
    assert central_moment(img, 0, 2) == 0.0


def test_zero_mass():
    with pytest.raises(ZeroMassError):
        hu_moments(np.zeros((8, 8)))
    with pytest.raises(ZeroMassError):
        zernike_moments(np.zeros((8, 8)))


def test_disk_eta20_against_pixel_sum():
    img = disk()
    # brute-force pixel sum oracle, independent of the module code
    ys, xs = np.nonzero(img)
    m00 = len(xs)
    mu20 = ((xs - xs.mean()) ** 2).sum()
    eta20 = mu20 / m00**2
    assert eta20 == pytest.approx(1 / (4 * math.pi), rel=0.02)
    assert normalized_moments(img)[2, 0] == pytest.approx(eta20, rel=1e-12)


def test_disk_hu_values():
    phi = hu_moments(disk())
    assert phi[0] == pytest.approx(1 / (2 * math.pi), rel=0.02)
    assert np.all(np.abs(phi[1:]) < 1e-4)


@pytest.fixture(scope="module")
def phantom_set():
    return [mip_render(generate_phantom(PhantomSpec(class_label=1 + i % 3, seed=900 + i))) for i in range(100)]


def test_hu_translation_invariance(phantom_set):
    for img in phantom_set:
        a = np.zeros((80, 80))
        b = np.zeros((80, 80))
        a[:64, :64] = img
        b[3:67, 5:69] = img  # (+5, +3) in (x, y)
        assert np.allclose(hu_moments(a), hu_moments(b), rtol=0, atol=1e-9)


def test_hu_rotation_invariance(phantom_set):
    for img in phantom_set:
        assert np.allclose(hu_moments(img), hu_moments(np.rot90(img)), rtol=0, atol=1e-9)


def test_hu_scale_robustness(phantom_set):
    for img in phantom_set[:20]:
        up = np.kron(img, np.ones((2, 2)))
        a, b = hu_moments(img), hu_moments(up)
        nz = np.abs(a) > 1e-12
        la, lb = np.log(np.abs(a[nz])), np.log(np.abs(b[nz]))
        assert np.all(np.abs(lb - la) < 0.05 * np.abs(la))


def test_zernike_indices_count():
    assert len(zernike_indices(8)) == 25
    assert all((n - m) % 2 == 0 and m >= 0 for n, m in zernike_indices(8))


@pytest.mark.parametrize("n,m", zernike_indices(8))
def test_radial_against_jacobi(n, m):
    rho = np.linspace(0, 1, 101)
    k = (n - m) // 2
    oracle = (-1) ** k * rho**m * eval_jacobi(k, m, 0, 1 - 2 * rho**2)
    assert np.allclose(zernike_radial(n, m, rho), oracle, atol=1e-10)


def test_constant_disk_moments():
    # disk centred on pixel (32, 32); half-pixel centring raises the n=8 residual to ~0.055
    img = disk(64, 30.0, centre=32)
    mags = zernike_moments(img, 8)
    assert mags[0] == pytest.approx(1.0, abs=1e-2)
    assert np.all(mags[1:] < 5e-2)
    assert np.all(mags >= 0)


def test_zernike_rotation_invariance(phantom_set):
    for img in phantom_set[:20]:
        a, b = zernike_moments(img), zernike_moments(np.rot90(img))
        assert np.allclose(a, b, rtol=1e-3, atol=1e-12)


def test_discrete_orthogonality_256():
    size = 256
    c = (size - 1) / 2
    ys, xs = np.indices((size, size), dtype=float)
    dx, dy = (xs - c) / c, (ys - c) / c
    rho, theta = np.hypot(dx, dy), np.arctan2(dy, dx)
    inside = rho <= 1
    idx = [(n, m) for n, m0 in zernike_indices(8) for m in {m0, -m0}]
    basis = np.stack([zernike_basis(n, m, rho[inside], theta[inside]) for n, m in idx])
    gram = basis @ basis.conj().T
    norms = np.sqrt(np.abs(np.diag(gram)))
    corr = np.abs(gram) / np.outer(norms, norms)
    np.fill_diagonal(corr, 0.0)
    assert corr.max() < 0.02


def test_reconstruction_error_non_increasing(phantom_set):
    img = phantom_set[0]
    errs = []
    for order in range(0, 9):
        rec, inside = zernike_reconstruct(img, order)
        errs.append(np.linalg.norm((rec - img)[inside]) / np.linalg.norm(img[inside]))
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_compress_hu():
    assert compress_hu(np.array([0.0]))[0] == 0.0
    assert compress_hu(np.array([1.0]))[0] == pytest.approx(math.log10(1 + 1e12) / 12)
    assert compress_hu(np.array([-1e-6]))[0] == pytest.approx(-0.5, abs=1e-6)


def test_descriptor_length():
    assert image_descriptor(disk()).shape == (32,)


# --- class vectors ---------------------------------------------------------------------


def test_single_image_class(tmp_path):
    man = generate_dataset(tmp_path, 1, train_fraction=1.0)
    vec = build_shape_condition(man, 2)
    img = man.load_mips(man.select("train", 2))[0]
    assert np.array_equal(vec.values, image_descriptor(img))


def test_duplicate_image_is_idempotent(tmp_path):
    man = generate_dataset(tmp_path, 1, train_fraction=1.0)
    e = man.select("train", 1)[0]
    dup = DatasetManifest([e, ManifestEntry(e.path, 1, e.seed + 99, "train")], man.generator_hash, tmp_path)
    assert np.allclose(build_shape_condition(dup, 1).values, build_shape_condition(man, 1).values, rtol=1e-12)


def test_empty_class_errors(tmp_path):
    man = generate_dataset(tmp_path, 1, train_fraction=1.0)
    only1 = DatasetManifest(man.select("train", 1), man.generator_hash, tmp_path)
    with pytest.raises(ValueError):
        build_shape_condition(only1, 3)


def test_standardization_statistics():
    from vascldm.descriptors import ShapeConditionVector

    vecs = {c: ShapeConditionVector(c, np.full(32, float(c))) for c in (1, 2, 3)}
    sc = ShapeConditions.from_vectors(vecs)
    z = np.stack([sc.standardized(c) for c in (1, 2, 3)])
    assert np.allclose(z.mean(axis=0), 0.0)
    assert np.allclose(z[:, 7:].std(axis=0), 1.0)
    assert sc.length == 32


def test_class_vectors_discriminate(tmp_path):
    man = generate_dataset(tmp_path, 50)
    sc = build_shape_conditions(man)
    d = np.abs(sc.standardized(1) - sc.standardized(3))
    assert d.max() >= 0.5
    assert all(np.all(np.isfinite(v.values)) and len(v.values) == 32 for v in sc.vectors.values())
