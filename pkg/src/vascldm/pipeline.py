"""Orchestration of the six pipeline stages over a work directory.

Layout under ``paths.work_dir``::

    data/                  phantom volumes, manifest.tsv, run_config.toml
    ae.ckpt                autoencoder + latent statistics
    ldm_<variant>.ckpt     eps-network, optimizer state, conditioning, loss history
    extractor.ckpt         feature extractor for Frechet evaluation
    samples/<variant>/     latents/, decoded/, images/, manifest.tsv, sample_info.toml
    reports/               metrics_<variant>.txt, comparison.txt
"""
from __future__ import annotations

import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import toml

from . import numcore as nc
from .anatomy import build_anatomy_condition, fit_class_models
from .autoencoder import AeNetwork, LatentStats, decode, encode, train_autoencoder
from .checkpoint import CheckpointContainer, load_checkpoint, save_checkpoint
from .config import RunConfig, ablation_matrix
from .descriptors import build_shape_conditions
from .diffusion import ConditionTable, EpsNetwork, LdmTrainResult, sample, train_ldm
from .metrics import (
    FeatureExtractor,
    MetricsReport,
    comparison_table,
    evaluate,
    train_feature_extractor,
)
from .phantom import (
    DatasetManifest,
    ManifestEntry,
    generate_dataset,
    mip_render,
    read_volume,
    save_image,
    tile_grid,
    write_volume,
)

log = logging.getLogger(__name__)


class ValidationError(ValueError):
    """Inputs or artifacts are inconsistent; the CLI maps this to exit code 1."""


def data_dir(cfg: RunConfig) -> Path:
    return cfg.work_dir / "data"


def ldm_path(cfg: RunConfig, variant: str) -> Path:
    return cfg.work_dir / f"ldm_{variant}.ckpt"


def samples_dir(cfg: RunConfig, variant: str) -> Path:
    return cfg.work_dir / "samples" / variant


def _write_provenance(path: Path, cfg: RunConfig, **extra) -> None:
    text = f"# config_hash {cfg.config_hash}\n" + cfg.to_toml()
    if extra:
        text += "\n" + toml.dumps({"artifact": extra})
    path.write_text(text)


def load_manifest(cfg: RunConfig) -> DatasetManifest:
    path = data_dir(cfg) / "manifest.tsv"
    if not path.exists():
        raise ValidationError(f"no dataset manifest at {path}; run gen-data first")
    return DatasetManifest.read(path)


# --- gen-data ---------------------------------------------------------------------


def run_gen_data(cfg: RunConfig) -> DatasetManifest:
    d = cfg["data"]
    t0 = time.perf_counter()
    man = generate_dataset(data_dir(cfg), d["n_per_class"], cfg.phantom_spec(), d["base_seed"], d["train_fraction"])
    _write_provenance(data_dir(cfg) / "run_config.toml", cfg, generator_hash=man.generator_hash)
    log.info("gen-data n=%d generator=%s time=%.1fs", len(man.entries), man.generator_hash, time.perf_counter() - t0)
    return man


# --- train-ae ---------------------------------------------------------------------


def run_train_ae(cfg: RunConfig) -> Path:
    man = load_manifest(cfg)
    imgs = man.load_mips(man.select("train"))
    result = train_autoencoder(imgs, cfg.ae_config())
    ckpt = CheckpointContainer(cfg.config_hash)
    ckpt.add(
        "ae",
        result.net.params.to_numpy(),
        config=cfg["ae"],
        image_size=cfg["data"]["image_size"],
        latent_mean=result.stats.mean,
        latent_std=result.stats.std,
        generator_hash=man.generator_hash,
    )
    ckpt.add("history", {"losses": np.array(result.losses)})
    path = cfg.work_dir / "ae.ckpt"
    save_checkpoint(ckpt, path)
    log.info("train-ae wrote %s", path)
    return path


def load_ae(cfg: RunConfig, man: DatasetManifest | None = None) -> tuple[AeNetwork, LatentStats, dict]:
    path = cfg.work_dir / "ae.ckpt"
    if not path.exists():
        raise ValidationError(f"no autoencoder checkpoint at {path}; run train-ae first")
    blk = load_checkpoint(path).block("ae")
    if man is not None and blk.meta["generator_hash"] != man.generator_hash:
        raise ValidationError(
            f"autoencoder was trained on dataset {blk.meta['generator_hash']}, manifest is {man.generator_hash}"
        )
    ae_cfg = replace(cfg.ae_config(), channels=tuple(blk.meta["config"]["channels"]), heads=blk.meta["config"]["heads"])
    net = AeNetwork(ae_cfg)
    net.params.load_numpy(blk.tensors)
    return net, LatentStats(blk.meta["latent_mean"], blk.meta["latent_std"]), blk.meta


# --- conditioning -----------------------------------------------------------------


def build_conditioning(cfg: RunConfig, man: DatasetManifest) -> tuple[ConditionTable, dict[str, np.ndarray]]:
    """Shape and anatomy conditions from the train split, plus their tensors for the checkpoint."""
    dsc = cfg["descriptors"]
    shapes = build_shape_conditions(man, dsc["max_order"], "train")
    pcas = fit_class_models(man, dsc["pca_components"], "train")
    hw = cfg["data"]["image_size"] // 4
    table = ConditionTable(
        {c: shapes.standardized(c) for c in (1, 2, 3)},
        {c: build_anatomy_condition(pcas[c], (hw, hw)).tokens for c in (1, 2, 3)},
    )
    tensors = {"shape.mean": shapes.mean, "shape.std": shapes.std}
    for c in (1, 2, 3):
        tensors[f"shape.raw.{c}"] = shapes.vectors[c].values
        tensors[f"shape.standardized.{c}"] = table.shape[c]
        tensors[f"anatomy.{c}"] = table.anatomy[c]
        tensors[f"pca.{c}.mean"] = pcas[c].mean_image
        tensors[f"pca.{c}.components"] = pcas[c].components
        tensors[f"pca.{c}.explained_variance"] = pcas[c].explained_variance
    return table, tensors


def table_from_tensors(tensors: dict[str, np.ndarray]) -> ConditionTable:
    return ConditionTable(
        {c: tensors[f"shape.standardized.{c}"] for c in (1, 2, 3)},
        {c: tensors[f"anatomy.{c}"] for c in (1, 2, 3)},
    )


# --- train-ldm --------------------------------------------------------------------


def _ldm_container(cfg: RunConfig, variant: str, res: LdmTrainResult, cond: dict, gen_hash: str) -> CheckpointContainer:
    lc = cfg.ldm_config()
    ckpt = CheckpointContainer(cfg.config_hash)
    ckpt.add(
        "ldm",
        res.net.params.to_numpy(),
        variant=variant,
        config=cfg["ldm"],
        shape_on=lc.shape_on,
        anatomy_on=lc.anatomy_on,
        step=res.state.step,
        generator_hash=gen_hash,
    )
    ckpt.add("optimizer", nc.adam_state_arrays(res.state), lr=res.state.lr)
    ckpt.add("conditioning", cond)
    ckpt.add("history", {"losses": np.array(res.losses)})
    return ckpt


def run_train_ldm(cfg: RunConfig, variant: str | None = None, resume: bool = False) -> Path:
    if variant is not None:
        cfg = ablation_matrix(cfg)[variant]
    variant = cfg.variant
    man = load_manifest(cfg)
    net, stats, _ = load_ae(cfg, man)
    entries = man.select("train")
    latents = stats.normalize(encode(net, man.load_mips(entries)))
    labels = [e.class_label for e in entries]
    table, cond = build_conditioning(cfg, man)
    lc = cfg.ldm_config()
    path = ldm_path(cfg, variant)

    prior = None
    if resume and path.exists():
        prior = load_ldm(cfg, variant)
        log.info("resuming %s from step %d", path, prior.state.step)

    def checkpoint(res: LdmTrainResult) -> None:
        save_checkpoint(_ldm_container(cfg, variant, res, cond, man.generator_hash), path)

    res = train_ldm(latents, labels, table, lc, resume=prior, on_checkpoint=checkpoint,
                    checkpoint_every=cfg["ldm"]["checkpoint_every"])
    checkpoint(res)
    log.info("train-ldm variant=%s wrote %s", variant, path)
    return path


def load_ldm(cfg: RunConfig, variant: str) -> LdmTrainResult:
    path = ldm_path(cfg, variant)
    if not path.exists():
        raise ValidationError(f"no diffusion checkpoint at {path}; run train-ldm first")
    ckpt = load_checkpoint(path)
    blk = ckpt.block("ldm")
    lc = cfg.ldm_config()
    net = EpsNetwork(replace(lc.unet, channels=tuple(blk.meta["config"]["channels"])))
    net.params.load_numpy(blk.tensors)
    opt = ckpt.block("optimizer")
    state = nc.adam_state_from_arrays(opt.tensors, net.params, lr=opt.meta["lr"])
    return LdmTrainResult(net, state, [float(x) for x in ckpt.block("history").tensors["losses"]])


# --- sample -----------------------------------------------------------------------


def run_sample(
    cfg: RunConfig,
    variant: str | None = None,
    classes: list[int] | None = None,
    n: int | None = None,
    seed: int | None = None,
    out: Path | None = None,
) -> Path:
    """Draw ``n`` samples per class; write latents, decoded volumes, PNG MIPs and a manifest."""
    if variant is not None:
        cfg = ablation_matrix(cfg)[variant]
    variant = cfg.variant
    classes = classes or [1, 2, 3]
    n = cfg["sample"]["n_per_class"] if n is None else n
    seed = cfg["sample"]["seed"] if seed is None else seed
    if n < 1:
        raise ValidationError(f"--n must be >= 1, got {n}")
    out = Path(out) if out is not None else samples_dir(cfg, variant)
    path = ldm_path(cfg, variant)
    if not path.exists():
        raise ValidationError(f"no diffusion checkpoint at {path}; run train-ldm first")
    ckpt = load_checkpoint(path)
    gen_hash = ckpt.block("ldm").meta["generator_hash"]
    ae, stats, ae_meta = load_ae(cfg)
    if ae_meta["generator_hash"] != gen_hash:
        raise ValidationError("autoencoder and diffusion checkpoints come from different datasets")
    res = load_ldm(cfg, variant)
    lc = cfg.ldm_config()
    table = table_from_tensors(ckpt.block("conditioning").tensors).with_flags(lc.shape_on, lc.anatomy_on)
    schedule = lc.schedule()
    for sub in ("latents", "decoded", "images"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    t0 = time.perf_counter()
    for c in classes:
        # one stream per class so a class's samples do not depend on the others requested
        z = stats.denormalize(sample(res.net, table.bundle(c), n, seed * 10 + c, schedule))
        imgs = decode(ae, z)
        for i in range(n):
            stem = f"c{c}_{i:04d}"
            write_volume(out / "latents" / f"{stem}.vol", z[i, :, :, 0])
            write_volume(out / "decoded" / f"{stem}.vol", imgs[i])
            save_image(out / "images" / f"{stem}.png", imgs[i])
            entries.append(ManifestEntry(f"decoded/{stem}.vol", c, i, "synth"))
        save_image(out / f"grid_c{c}.png", tile_grid(list(imgs[: min(n, 10)]), min(n, 10)))
        log.info("sample class=%d n=%d time=%.1fs", c, n, time.perf_counter() - t0)
    DatasetManifest(entries, gen_hash, root=out).write()
    _write_provenance(out / "sample_info.toml", cfg, variant=variant, seed=seed, n_per_class=n,
                      ldm_config_hash=ckpt.config_hash)
    return out


# --- evaluate ---------------------------------------------------------------------


def extractor_from_checkpoint(path: Path, cfg: RunConfig) -> tuple[FeatureExtractor, dict]:
    blk = load_checkpoint(path).block("extractor")
    want = cfg["extractor"]["feature_dim"]
    if blk.meta["feature_dim"] != want:
        raise ValidationError(
            f"extractor checkpoint {path} has feature_dim {blk.meta['feature_dim']}, config expects {want}"
        )
    ext = FeatureExtractor(replace(cfg.extractor_config(), channels=tuple(blk.meta["channels"])))
    ext.params.load_numpy(blk.tensors)
    return ext, blk.meta


def get_extractor(cfg: RunConfig, man: DatasetManifest, path: Path | None = None) -> FeatureExtractor:
    """Load the cached extractor, or train and cache it when absent."""
    path = Path(path) if path is not None else cfg.work_dir / "extractor.ckpt"
    if path.exists():
        ext, meta = extractor_from_checkpoint(path, cfg)
        if meta["generator_hash"] != man.generator_hash:
            raise ValidationError(f"extractor {path} was trained on a different dataset")
        return ext
    tr, va = man.select("train"), man.select("val")
    if not va:
        raise ValidationError("extractor training needs a nonempty val split")
    ec = cfg.extractor_config()
    ext, acc = train_feature_extractor(
        man.load_mips(tr), [e.class_label for e in tr], man.load_mips(va), [e.class_label for e in va], ec
    )
    ckpt = CheckpointContainer(cfg.config_hash)
    ckpt.add("extractor", ext.params.to_numpy(), feature_dim=ec.feature_dim, channels=list(ec.channels),
             val_accuracy=acc, generator_hash=man.generator_hash)
    save_checkpoint(ckpt, path)
    return ext


def _evaluate_dir(cfg: RunConfig, man: DatasetManifest, ext: FeatureExtractor, synth: Path) -> MetricsReport:
    syn_path = Path(synth) / "manifest.tsv"
    if not syn_path.exists():
        raise ValidationError(f"no sample manifest at {syn_path}; run sample first")
    syn = DatasetManifest.read(syn_path)
    if syn.generator_hash != man.generator_hash:
        raise ValidationError(
            f"samples in {synth} come from dataset {syn.generator_hash}, real data is {man.generator_hash}"
        )
    real = man.entries
    synth_imgs = np.stack([syn.load(e)[0] for e in syn.entries])
    return evaluate(
        man.load_mips(real), [e.class_label for e in real],
        synth_imgs, [e.class_label for e in syn.entries], ext, cfg.config_hash,
    )


def run_evaluate(
    cfg: RunConfig,
    variant: str | None = None,
    synth: Path | None = None,
    ablation: bool = False,
    extractor: Path | None = None,
) -> dict[str, MetricsReport]:
    man = load_manifest(cfg)
    ext = get_extractor(cfg, man, extractor)
    reports_dir = cfg.work_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    if ablation:
        targets = {v: (c, samples_dir(c, v)) for v, c in ablation_matrix(cfg).items()}
    else:
        vcfg = ablation_matrix(cfg)[variant] if variant else cfg
        targets = {vcfg.variant: (vcfg, Path(synth) if synth else samples_dir(vcfg, vcfg.variant))}
    reports = {}
    for name, (vcfg, sdir) in targets.items():
        rep = _evaluate_dir(vcfg, man, ext, sdir)
        (reports_dir / f"metrics_{name}.txt").write_text(rep.to_text())
        print(f"[{name}]\n{rep.table()}\n")
        reports[name] = rep
    if ablation:
        table = comparison_table(reports)
        (reports_dir / "comparison.txt").write_text(
            f"# config_hash {cfg.config_hash}\n# features: task-trained CNN; values comparable only within this package\n"
            + table + "\n"
        )
        print(table)
    return reports


# --- render-mip -------------------------------------------------------------------


def run_render_mip(inputs: list[Path], out: Path, axis: str = "z") -> list[Path]:
    """One PNG per volume file, or a single grid when ``out`` names a .png/.pgm file and several inputs are given."""
    out = Path(out)
    mips = []
    for p in inputs:
        try:
            mips.append(mip_render(read_volume(p), axis))
        except (OSError, ValueError) as exc:
            raise ValidationError(f"cannot render {p}: {exc}") from exc
    if out.suffix.lower() in (".png", ".pgm"):
        out.parent.mkdir(parents=True, exist_ok=True)
        img = mips[0] if len(mips) == 1 else tile_grid(mips, min(len(mips), 8))
        save_image(out, img)
        return [out]
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p, m in zip(inputs, mips):
        target = out / (Path(p).stem + ".png")
        save_image(target, m)
        written.append(target)
    return written

