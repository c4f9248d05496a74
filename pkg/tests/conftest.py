from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

from factorlab.diffusion.backbone import Backbone, BackboneConfig
from factorlab.diffusion.denoiser import DenoiserConfig
from factorlab.factorspace import smoke_registry
from factorlab.synthworld.dataset import build_world, group_by_dataset

settings.register_profile("factorlab", deadline=None, max_examples=40)
settings.load_profile("factorlab")
torch.set_num_threads(1)


def tiny_backbone(control: bool = False, resolution: int = 16, seed: int = 0) -> Backbone:
    cfg = BackboneConfig(resolution=resolution, denoiser=DenoiserConfig(widths=(8, 16, 16), control=control, groups=4))
    return Backbone(cfg, seed=seed).freeze()


@pytest.fixture(scope="session")
def smoke_world():
    from factorlab.synthworld.render import RenderConfig

    registry = smoke_registry(8)
    samples = build_world(registry, RenderConfig(16, 16), seed=0)
    return registry, samples, group_by_dataset(samples)


@pytest.fixture()
def backbone():
    return tiny_backbone()


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one acceptance verdict; the terminal summary prints them in order."""
    _CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
