from dataclasses import replace

import numpy as np
import pytest

from desktrack.config import ModelConfig
from desktrack.model import init_params
from desktrack.tokens import BoundingBox


def tiny_config(**overrides) -> ModelConfig:
    """8x8 search grid, 4x4 templates, three layers; small enough for exhaustive checks."""
    base = ModelConfig(
        patch_size=4,
        template_size=16,
        search_size=32,
        embed_dim=8,
        num_heads=2,
        num_layers=3,
        tpe_layer=1,
        cz_size=5,
        scz_size=3,
        prune_count=10,
    )
    return replace(base, **overrides).validate()


def random_inputs(cfg: ModelConfig, rng: np.random.Generator, batch: int = 1):
    t, s = cfg.template_size, cfg.search_size
    zi = rng.random((batch, t, t, 3))
    zd = rng.random((batch, t, t, 3))
    x = rng.random((batch, s, s, 3))
    boxes = [BoundingBox(*rng.uniform(0.35, 0.65, 2), *rng.uniform(0.3, 0.6, 2)) for _ in range(batch)]
    boxes_d = [BoundingBox(*rng.uniform(0.35, 0.65, 2), *rng.uniform(0.3, 0.6, 2)) for _ in range(batch)]
    gts = [BoundingBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.2, 0.5, 2)) for _ in range(batch)]
    return zi, zd, x, boxes, boxes_d, gts


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny):
    return init_params(tiny, seed=3)


_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def record():
    """record(criterion, title, passed, detail) -> passed; the summary prints one line per criterion."""

    def _record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title} {detail}".rstrip())
