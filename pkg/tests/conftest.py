import numpy as np
import pytest
import torch

from vascldm import numcore as nc
from vascldm.phantom import PhantomSpec, generate_phantom, mip_render

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session", autouse=True)
def _deterministic():
    nc.configure_determinism(force=True)
    nc.set_finite_checks(True)
    yield


@pytest.fixture
def record_criterion():
    """Record one acceptance line; all lines are repeated in the terminal summary."""

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        print(line)
        _ACCEPTANCE.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def phantom_mips():
    """Twelve default phantoms (four per class) as 64x64 MIPs, with labels."""
    imgs, labels = [], []
    for i in range(12):
        c = 1 + i % 3
        imgs.append(mip_render(generate_phantom(PhantomSpec(class_label=c, seed=100 + i))))
        labels.append(c)
    return np.stack(imgs), np.array(labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    return torch.float64


TINY_TOML = """\
[data]
n_per_class = 10
[ae]
channels = [8, 8, 8]
steps = 20
log_every = 10
[ldm]
steps = 20
T = 20
log_every = 10
checkpoint_every = 10
channels = [8, 8, 8, 8, 8]
emb_dim = 16
[extractor]
steps = 20
min_accuracy = 0.0
[sample]
n_per_class = 3
[paths]
work_dir = "{work_dir}"
"""

TINY_STEPS = [
    ["gen-data"],
    ["train-ae"],
    ["train-ldm", "--variant", "all"],
    *[["sample", "--variant", v] for v in ("class_only", "shape", "full")],
    ["evaluate", "--ablation"],
]


def write_tiny_config(path, work_dir):
    """A seconds-scale run configuration exercising every pipeline stage."""
    path.write_text(TINY_TOML.format(work_dir=work_dir))
    return path


def run_tiny_pipeline(config_path) -> list[int]:
    from vascldm.cli import main

    return [main([*step, "--config", str(config_path)]) for step in TINY_STEPS]
