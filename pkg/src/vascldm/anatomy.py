"""Per-class PCA over training MIPs and the 8-token anatomy condition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import CowClass, DatasetManifest

N_COMPONENTS = 7
_EIG_RTOL = 1e-10


@dataclass(frozen=True)
class PcaModel:
    class_label: int
    image_shape: tuple[int, int]
    mean_image: np.ndarray  # (H*W,)
    components: np.ndarray  # (k, H*W), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing

    @property
    def k(self) -> int:
        return len(self.explained_variance)


def _fix_signs(components: np.ndarray) -> np.ndarray:
    idx = np.abs(components).argmax(axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    return components * np.where(signs == 0, 1.0, signs)[:, None]


def _complete_basis(basis: np.ndarray, k: int, dim: int) -> np.ndarray:
    """Extend orthonormal rows ``basis`` to ``k`` rows with canonical directions."""
    need = k - len(basis)
    if need <= 0:
        return basis
    cand = np.concatenate([basis, np.eye(dim)[: len(basis) + need]], axis=0)
    q, _ = np.linalg.qr(cand.T)
    extra = q[:, len(basis) : k].T
    return np.concatenate([basis, extra], axis=0)


def fit_pca(images, k: int = N_COMPONENTS, class_label: int = 0) -> PcaModel:
    """Top-``k`` principal axes of a stack of images.

    Covariance is the maximum-likelihood estimate (normalised by n). When
    n < H*W the eigenvectors are recovered from the n x n Gram matrix. Zero-
    variance directions are filled with an arbitrary orthonormal completion.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len(images) < 2:
        raise ValueError(f"fit_pca needs at least 2 images, got {len(images)}")
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise ValueError("all images must have the same shape")
    n, dim = len(images), int(np.prod(shape))
    if not 1 <= k <= min(n - 1, dim):
        raise ValueError(f"k={k} must be in [1, min(n-1, H*W)] = [1, {min(n - 1, dim)}]")

    x = np.stack([im.ravel() for im in images])
    mean = x.mean(axis=0)
    xc = x - mean
    if n < dim:
        gram = xc @ xc.T / n
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1][:k]
        evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
        keep = evals > _EIG_RTOL * max(evals.max(), 1e-300)
        comps = (xc.T @ evecs[:, keep]).T
        comps /= np.linalg.norm(comps, axis=1, keepdims=True)
    else:
        cov = xc.T @ xc / n
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][:k]
        evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
        keep = evals > _EIG_RTOL * max(evals.max(), 1e-300)
        comps = evecs[:, keep].T
    comps = _complete_basis(_fix_signs(comps), k, dim)
    evals = np.where(np.arange(k) < keep.sum(), evals, 0.0)
    return PcaModel(int(class_label), shape, mean, comps, evals)


def project(model: PcaModel, img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != model.image_shape:
        raise ValueError(f"image shape {img.shape} does not match model shape {model.image_shape}")
    return model.components @ (img.ravel() - model.mean_image)


def area_downsample(img: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    h, w = img.shape
    oh, ow = out_shape
    if h % oh or w % ow:
        raise ValueError(f"cannot area-downsample {img.shape} to {out_shape}")
    return img.reshape(oh, h // oh, ow, w // ow).mean(axis=(1, 3))


@dataclass(frozen=True)
class AnatomyConditionVector:
    class_label: int
    tokens: np.ndarray  # (8, h*w): [mean, comp1..comp7] at conditioning resolution


def build_anatomy_condition(model: PcaModel, latent_shape: tuple[int, int]) -> AnatomyConditionVector:
    rows = [model.mean_image, *model.components]
    tokens = np.stack([area_downsample(r.reshape(model.image_shape), latent_shape).ravel() for r in rows])
    return AnatomyConditionVector(model.class_label, tokens)


def fit_class_models(
    manifest: DatasetManifest, k: int = N_COMPONENTS, split: str = "train"
) -> dict[int, PcaModel]:
    models = {}
    for c in CowClass:
        entries = manifest.select(split, int(c))
        if len(entries) < k + 1:
            raise ValueError(f"class {int(c)} has {len(entries)} {split} images; PCA with k={k} needs {k + 1}")
        models[int(c)] = fit_pca(manifest.load_mips(entries), k, int(c))
    return models
