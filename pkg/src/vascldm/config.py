"""Run configuration: one TOML file with sections, overrides via ``section.key=value``."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import toml

from .autoencoder import AeConfig
from .diffusion import LdmConfig, UNetConfig
from .metrics import ExtractorConfig
from .phantom import PhantomSpec

DEFAULTS: dict[str, dict] = {
    "data": {
        "n_per_class": 50,
        "base_seed": 0,
        "train_fraction": 0.8,
        "image_size": 64,
        "depth": 1,
        "tube_sigma": 2.0,
        "jitter_amplitude": 1.5,
        "noise_sigma": 0.03,
    },
    "descriptors": {"max_order": 8, "pca_components": 7},
    "ae": {
        "channels": [8, 16, 32],
        "heads": 4,
        "steps": 1000,
        "batch_size": 8,
        "lr": 5e-4,
        "seed": 0,
        "log_every": 100,
    },
    "ldm": {
        "T": 200,
        "beta_start": 1e-4,
        "beta_end": 2e-2,
        "reference_steps": 1000,
        "steps": 2000,
        "batch_size": 16,
        "lr": 5e-4,
        "seed": 0,
        "shape_on": True,
        "anatomy_on": True,
        "log_every": 100,
        "checkpoint_every": 500,
        "channels": [16, 32, 32, 64, 64],
        "emb_dim": 64,
        "heads": 4,
    },
    "extractor": {
        "channels": [8, 16, 16],
        "feature_dim": 64,
        "steps": 300,
        "batch_size": 32,
        "lr": 1e-3,
        "seed": 0,
        "min_accuracy": 0.9,
    },
    "sample": {"n_per_class": 20, "seed": 1},
    "paths": {"work_dir": "run"},
}

VARIANTS = {"class_only": (False, False), "shape": (True, False), "full": (True, True)}


class ConfigError(ValueError):
    pass


def _check_type(key: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        values = copy.deepcopy(DEFAULTS)
        for section, entries in raw.items():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(entries, dict):
                raise ConfigError(f"[{section}] must be a table")
            for key, value in entries.items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                values[section][key] = _check_type(f"{section}.{key}", DEFAULTS[section][key], value)
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: list[str] = ()) -> "RunConfig":
        try:
            raw = toml.loads(Path(path).read_text())
        except (OSError, toml.TomlDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for item in overrides:
            apply_override(raw, item)
        return cls.from_dict(raw)

    def validate(self) -> None:
        d = self.values["data"]
        if d["n_per_class"] < 1:
            raise ConfigError("data.n_per_class must be >= 1")
        if not 0 < d["train_fraction"] <= 1:
            raise ConfigError("data.train_fraction must be in (0, 1]")
        self.phantom_spec().validate()
        ldm = self.values["ldm"]
        if ldm["T"] < 2 or not 0 < ldm["beta_start"] <= ldm["beta_end"] < 1:
            raise ConfigError("ldm schedule needs T >= 2 and 0 < beta_start <= beta_end < 1")
        if len(ldm["channels"]) != 5:
            raise ConfigError("ldm.channels must list 5 widths")
        if len(self.values["ae"]["channels"]) != 3:
            raise ConfigError("ae.channels must list 3 widths")
        if len(self.values["extractor"]["channels"]) != 3:
            raise ConfigError("extractor.channels must list 3 widths")

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def to_toml(self) -> str:
        return toml.dumps(self.values)

    def canonical_json(self) -> str:
        """Everything except [paths], so moving a run does not change its identity."""
        body = {k: v for k, v in self.values.items() if k != "paths"}
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def replace(self, section: str, **kw) -> "RunConfig":
        raw = copy.deepcopy(self.values)
        raw[section].update(kw)
        return RunConfig.from_dict(raw)

    @property
    def work_dir(self) -> Path:
        return Path(self.values["paths"]["work_dir"])

    @property
    def variant(self) -> str:
        flags = (self["ldm"]["shape_on"], self["ldm"]["anatomy_on"])
        for name, f in VARIANTS.items():
            if f == flags:
                return name
        return "anatomy_only"

    # typed views for the modules

    def phantom_spec(self) -> PhantomSpec:
        d = self.values["data"]
        return PhantomSpec(
            image_size=d["image_size"],
            depth=d["depth"],
            tube_sigma=d["tube_sigma"],
            jitter_amplitude=d["jitter_amplitude"],
            noise_sigma=d["noise_sigma"],
        )

    def ae_config(self) -> AeConfig:
        a = self.values["ae"]
        return AeConfig(
            image_size=self["data"]["image_size"],
            channels=tuple(a["channels"]),
            heads=a["heads"],
            steps=a["steps"],
            batch_size=a["batch_size"],
            lr=a["lr"],
            seed=a["seed"],
            log_every=a["log_every"],
        )

    def ldm_config(self) -> LdmConfig:
        m = self.values["ldm"]
        unet = UNetConfig(
            latent_hw=self["data"]["image_size"] // 4,
            channels=tuple(m["channels"]),
            emb_dim=m["emb_dim"],
            heads=m["heads"],
            shape_dim=shape_dim(self["descriptors"]["max_order"]),
            anatomy_tokens=self["descriptors"]["pca_components"] + 1,
            seed=m["seed"],
        )
        return LdmConfig(
            T=m["T"],
            beta_start=m["beta_start"],
            beta_end=m["beta_end"],
            reference_steps=m["reference_steps"],
            steps=m["steps"],
            batch_size=m["batch_size"],
            lr=m["lr"],
            seed=m["seed"],
            shape_on=m["shape_on"],
            anatomy_on=m["anatomy_on"],
            log_every=m["log_every"],
            unet=unet,
        )

    def extractor_config(self) -> ExtractorConfig:
        e = self.values["extractor"]
        return ExtractorConfig(
            image_size=self["data"]["image_size"],
            channels=tuple(e["channels"]),
            feature_dim=e["feature_dim"],
            steps=e["steps"],
            batch_size=e["batch_size"],
            lr=e["lr"],
            seed=e["seed"],
            min_accuracy=e["min_accuracy"],
        )


def shape_dim(max_order: int) -> int:
    """7 Hu values plus one Zernike magnitude per (n, m >= 0) with n - m even."""
    return 7 + sum(n // 2 + 1 for n in range(max_order + 1))


def apply_override(raw: dict, item: str) -> None:
    """Apply ``section.key=value`` to a raw config dict; the value is parsed as TOML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    path, text = (s.strip() for s in item.split("=", 1))
    if path.count(".") != 1:
        raise ConfigError(f"override key {path!r} must be section.key")
    section, key = path.split(".")
    try:
        value = toml.loads(f"v = {text}")["v"]
    except toml.TomlDecodeError:
        value = text
    raw.setdefault(section, {})[key] = value


def ablation_matrix(config: RunConfig) -> dict[str, RunConfig]:
    """Three configs identical except for the guidance flags."""
    return {
        name: config.replace("ldm", shape_on=s, anatomy_on=a) for name, (s, a) in VARIANTS.items()
    }
