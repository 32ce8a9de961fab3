"""Image-quality metrics: MS-SSIM, 4-G-R SSIM and Frechet distance on learned features.

The Frechet distance uses a small CNN classifier trained on the phantom
classes as its feature extractor, so its values are only comparable between
runs of this package.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage, signal

from . import numcore as nc

log = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
EDGE_FRAC, SMOOTH_FRAC = 0.12, 0.06
REGION_WEIGHTS = {"edge": 0.25, "changed": 0.25, "smooth": 0.25, "texture": 0.25}
ROWS = ("class1", "class2", "class3", "overall")


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"expected 2D images, got shape {a.shape}")
    return a, b


def _ssim_terms(a, b, win, data_range=1.0, mode="valid"):
    """Luminance and contrast-structure maps of SSIM."""
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    if mode == "valid":
        filt = lambda x: signal.convolve2d(x, win, mode="valid")  # noqa: E731
    else:
        filt = lambda x: ndimage.correlate(x, win, mode="reflect")  # noqa: E731
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim(a, b, data_range: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    lum, cs = _ssim_terms(a, b, gaussian_window(), data_range)
    return float((lum * cs).mean())


def n_scales(shape: tuple[int, int], win_size: int = WIN_SIZE) -> int:
    """Scales such that the coarsest image still holds one window (max 5)."""
    side = min(shape)
    if side < win_size:
        raise ValueError(f"image side {side} is smaller than the {win_size}-pixel window")
    return int(min(len(MS_SSIM_WEIGHTS), math.floor(math.log2(side / win_size)) + 1))


def ms_ssim(a, b, data_range: float = 1.0) -> float:
    """Multi-scale SSIM with the standard weights renormalized to the scale count.

    Contrast-structure terms at every scale, luminance at the coarsest; 2x2
    average pooling between scales. Negative terms are clamped to zero.
    """
    a, b = _check_pair(a, b)
    m = n_scales(a.shape)
    weights = MS_SSIM_WEIGHTS[:m] / MS_SSIM_WEIGHTS[:m].sum()
    win = gaussian_window()
    result = 1.0
    for j in range(m):
        lum, cs = _ssim_terms(a, b, win, data_range)
        if j == m - 1:
            result *= max(float((lum * cs).mean()), 0.0) ** weights[j]
        else:
            result *= max(float(cs.mean()), 0.0) ** weights[j]
            h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
            a = a[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            b = b[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return float(result)


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(img, axis=1, mode="reflect") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="reflect") / 8.0
    return np.hypot(gx, gy)


def gradient_regions(ga: np.ndarray, gb: np.ndarray) -> dict[str, np.ndarray]:
    """Four pixel classes from the gradient magnitudes of reference ``ga`` and test ``gb``."""
    gmax = ga.max()
    th1, th2 = EDGE_FRAC * gmax, SMOOTH_FRAC * gmax
    ea, eb = ga > th1, gb > th1
    edge = ea & eb
    changed = ea ^ eb
    smooth = (ga <= th2) & (gb <= th2) & ~edge & ~changed
    texture = ~(edge | changed | smooth)
    return {"edge": edge, "changed": changed, "smooth": smooth, "texture": texture}


def fourg_r_ssim(a, b) -> float:
    """Four-component, gradient-region-weighted SSIM.

    The SSIM map of the two Sobel gradient-magnitude images is averaged inside
    each region (edge, changed edge, smooth, texture) and the region means are
    combined with equal weights over the nonempty regions.
    """
    a, b = _check_pair(a, b)
    ga, gb = gradient_magnitude(a), gradient_magnitude(b)
    lum, cs = _ssim_terms(ga, gb, gaussian_window(), mode="same")
    smap = lum * cs
    total = wsum = 0.0
    for name, mask in gradient_regions(ga, gb).items():
        if mask.any():
            total += REGION_WEIGHTS[name] * smap[mask].mean()
            wsum += REGION_WEIGHTS[name]
    return float(total / wsum)


# --- Frechet distance ---------------------------------------------------------------


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh((mat + mat.T) / 2)
    return (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), clamped at 0."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    evals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(evals, 0.0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(d, 0.0)


def feature_moments(feats: np.ndarray, ridge: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if len(feats) < 2:
        raise ValueError(f"need at least 2 feature vectors, got {len(feats)}")
    cov = np.atleast_2d(np.cov(feats, rowvar=False)) + ridge * np.eye(feats.shape[1])
    return feats.mean(axis=0), cov


def frechet_distance(feats_a, feats_b) -> float:
    mu_a, cov_a = feature_moments(feats_a)
    mu_b, cov_b = feature_moments(feats_b)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


# --- feature extractor ------------------------------------------------------------------


class ExtractorRejected(RuntimeError):
    def __init__(self, accuracy: float, floor: float):
        super().__init__(
            f"feature extractor reached validation accuracy {accuracy:.3f} < {floor:.2f}; "
            "features unfit for Frechet evaluation"
        )
        self.accuracy = accuracy


@dataclass(frozen=True)
class ExtractorConfig:
    image_size: int = 64
    channels: tuple[int, int, int] = (8, 16, 16)
    feature_dim: int = 64
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    min_accuracy: float = 0.9


class FeatureExtractor:
    """Three conv stages (conv, silu, stride-2 conv) and a dense head over 3 classes."""

    def __init__(self, config: ExtractorConfig = ExtractorConfig()):
        self.config = config
        c = config.channels
        ps = nc.ParamSet(config.seed)
        cin = 1
        for i, ch in enumerate(c):
            nc.init_conv(ps, f"stage{i + 1}.conv", cin, ch)
            nc.init_conv(ps, f"stage{i + 1}.down", ch, ch)
            cin = ch
        side = config.image_size // 8
        nc.init_dense(ps, "feat", c[-1] * side * side, config.feature_dim)
        nc.init_dense(ps, "head", config.feature_dim, 3)
        self.params = ps

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 1, H, W) -> (features, logits)."""
        h = x
        for i in range(len(self.config.channels)):
            h = nc.silu(nc.conv2d(self.params.scope(f"stage{i + 1}.conv"), h))
            h = nc.silu(nc.down2(self.params.scope(f"stage{i + 1}.down"), h))
        feats = nc.silu(nc.dense(self.params.scope("feat"), h.flatten(1)))
        return feats, nc.dense(self.params.scope("head"), feats)

    def features(self, images) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images, dtype=np.float32)[:, None])
        with torch.no_grad():
            return self.forward(x)[0].numpy().astype(np.float64)

    def predict(self, images) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images, dtype=np.float32)[:, None])
        with torch.no_grad():
            return self.forward(x)[1].argmax(dim=1).numpy() + 1


def train_feature_extractor(
    images,
    labels,
    val_images,
    val_labels,
    config: ExtractorConfig = ExtractorConfig(),
    shuffle_labels: bool = False,
) -> tuple[FeatureExtractor, float]:
    """Train the classifier and return it with its validation accuracy.

    Raises :class:`ExtractorRejected` below ``config.min_accuracy``. With
    ``shuffle_labels`` the training labels are permuted (a sanity control).
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=int)
    if len(images) == 0:
        raise ValueError("train_feature_extractor needs a nonempty train split")
    if shuffle_labels:
        labels = np.random.default_rng([config.seed, 7]).permutation(labels)
    net = FeatureExtractor(config)
    state = nc.AdamState.for_params(net.params, lr=config.lr)
    x_all = torch.as_tensor(images[:, None])
    y_all = torch.as_tensor(labels - 1, dtype=torch.long)
    n = len(images)
    bs = min(config.batch_size, n)
    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, step])
        idx = torch.as_tensor(np.sort(rng.choice(n, size=bs, replace=False)))
        _, logits = net.forward(x_all[idx])
        loss = torch.nn.functional.cross_entropy(logits, y_all[idx])
        nc.adam_step(net.params, nc.grad(loss, net.params), state)
    acc = float((net.predict(val_images) == np.asarray(val_labels)).mean())
    log.info("extractor validation accuracy=%.3f", acc)
    if acc < config.min_accuracy:
        raise ExtractorRejected(acc, config.min_accuracy)
    return net, acc


# --- evaluation report --------------------------------------------------------------------


@dataclass
class MetricsRow:
    present: bool
    n_real: int = 0
    n_synth: int = 0
    frechet: float = float("nan")
    ms_ssim: float = float("nan")
    fourg_r_ssim: float = float("nan")


@dataclass
class MetricsReport:
    rows: dict[str, MetricsRow]
    config_hash: str = ""
    notes: list[str] = field(default_factory=list)

    HEADER = (
        "# features: task-trained CNN classifier (penultimate layer); "
        "Frechet values are comparable only within this package"
    )

    def to_text(self) -> str:
        lines = ["# vascldm metrics report", self.HEADER, f"config_hash = {self.config_hash}"]
        for name in ROWS:
            row = self.rows[name]
            lines.append(f"{name}.present = {str(row.present).lower()}")
            lines.append(f"{name}.n_real = {row.n_real}")
            lines.append(f"{name}.n_synth = {row.n_synth}")
            if row.present:
                lines.append(f"{name}.frechet = {row.frechet:.10g}")
                lines.append(f"{name}.ms_ssim = {row.ms_ssim:.10g}")
                lines.append(f"{name}.fourg_r_ssim = {row.fourg_r_ssim:.10g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = {}
        for line in text.splitlines():
            if line.startswith("#") or "=" not in line:
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v
        rows = {}
        for name in ROWS:
            present = kv.get(f"{name}.present") == "true"
            row = MetricsRow(present, int(kv.get(f"{name}.n_real", 0)), int(kv.get(f"{name}.n_synth", 0)))
            if present:
                row.frechet = float(kv[f"{name}.frechet"])
                row.ms_ssim = float(kv[f"{name}.ms_ssim"])
                row.fourg_r_ssim = float(kv[f"{name}.fourg_r_ssim"])
            rows[name] = row
        return cls(rows, kv.get("config_hash", ""))

    def table(self) -> str:
        head = f"{'Class':<10}{'Frechet':>12}{'MS-SSIM':>10}{'4-G-R SSIM':>12}{'n':>6}"
        lines = [head, "-" * len(head)]
        for name in ROWS:
            row = self.rows[name]
            label = "Overall" if name == "overall" else f"Class {name[-1]}"
            if row.present:
                lines.append(
                    f"{label:<10}{row.frechet:>12.4f}{row.ms_ssim:>10.4f}{row.fourg_r_ssim:>12.4f}{row.n_synth:>6}"
                )
            else:
                lines.append(f"{label:<10}{'absent':>12}{'-':>10}{'-':>12}{row.n_synth:>6}")
        return "\n".join(lines)


def _pair_scores(real_imgs, real_feats, synth_imgs, synth_feats) -> tuple[list[float], list[float]]:
    ms, gr = [], []
    for img, f in zip(synth_imgs, synth_feats):
        j = int(((real_feats - f) ** 2).sum(axis=1).argmin())
        ms.append(ms_ssim(img, real_imgs[j]))
        gr.append(fourg_r_ssim(real_imgs[j], img))
    return ms, gr


def evaluate(real_images, real_labels, synth_images, synth_labels, extractor: FeatureExtractor, config_hash=""):
    """Per-class and pooled Frechet / MS-SSIM / 4-G-R SSIM.

    Each synthetic image is paired with its nearest real image of the same
    class in extractor feature space; the SSIM-family scores are averaged over
    these pairs. A class with fewer than two images in either set is marked
    absent; the overall row pools whatever is present.
    """
    real_images = np.asarray(real_images, dtype=np.float64)
    synth_images = np.asarray(synth_images, dtype=np.float64)
    real_labels = np.asarray(real_labels, dtype=int)
    synth_labels = np.asarray(synth_labels, dtype=int)
    if len(real_images) == 0 or len(synth_images) == 0:
        raise ValueError("evaluate needs nonempty real and synthetic sets")
    real_feats = extractor.features(real_images)
    synth_feats = extractor.features(synth_images)
    rows = {}
    all_ms, all_gr = [], []
    for c in (1, 2, 3):
        rm, sm = real_labels == c, synth_labels == c
        row = MetricsRow(False, int(rm.sum()), int(sm.sum()))
        if rm.sum() >= 2 and sm.sum() >= 2:
            ms, gr = _pair_scores(real_images[rm], real_feats[rm], synth_images[sm], synth_feats[sm])
            row.present = True
            row.frechet = frechet_distance(real_feats[rm], synth_feats[sm])
            row.ms_ssim, row.fourg_r_ssim = float(np.mean(ms)), float(np.mean(gr))
            all_ms += ms
            all_gr += gr
        rows[f"class{c}"] = row
    overall = MetricsRow(False, len(real_images), len(synth_images))
    if all_ms and len(real_images) >= 2 and len(synth_images) >= 2:
        overall.present = True
        overall.frechet = frechet_distance(real_feats, synth_feats)
        overall.ms_ssim, overall.fourg_r_ssim = float(np.mean(all_ms)), float(np.mean(all_gr))
    rows["overall"] = overall
    return MetricsReport(rows, config_hash)


ABLATION_LABELS = {
    "class_only": "LDM",
    "shape": "LDM + shape guidance",
    "full": "LDM + shape & anatomy guidance",
}


def comparison_table(reports: dict[str, MetricsReport]) -> str:
    """One row per model variant with the pooled metrics."""
    head = f"{'Model':<34}{'Frechet (lower)':>16}{'MS-SSIM (higher)':>18}{'4-G-R SSIM (higher)':>21}"
    lines = [head, "-" * len(head)]
    for key, rep in reports.items():
        row = rep.rows["overall"]
        label = ABLATION_LABELS.get(key, key)
        lines.append(f"{label:<34}{row.frechet:>16.4f}{row.ms_ssim:>18.4f}{row.fourg_r_ssim:>21.4f}")
    return "\n".join(lines)
