import contextlib
import os
import time
from pathlib import Path

import pytest
import torch

from toyhoi import rng, scenes
from toyhoi.backbone import Denoiser, DenoiserConfig, base_checksum, default_base_path, load_base
from toyhoi.inversion import TrainConfig, invert

ACCEPTANCE_LINES: list[str] = []


def fresh_denoiser(seed: int = 0, cfg: DenoiserConfig = DenoiserConfig()) -> Denoiser:
    """Randomly initialised, frozen denoiser (no pretraining)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
        model = Denoiser(cfg)
    model.requires_grad_(False)
    return model.eval()


@pytest.fixture
def tiny_model():
    return fresh_denoiser(0)


@pytest.fixture(scope="session")
def pretrained():
    if not default_base_path().is_file():
        pytest.fail(f"packaged base checkpoint missing at {default_base_path()}")
    return load_base()


@pytest.fixture(scope="session")
def fixture_spec():
    return scenes.random_spec(rng.stream(7, "fixture-scene"), subject="man", obj="horse",
                              background="grass", verb="ride")


@pytest.fixture(scope="session")
def fixture_scene(fixture_spec):
    return scenes.render(fixture_spec)


@pytest.fixture(scope="session")
def cache_root(tmp_path_factory) -> Path:
    env = os.environ.get("TOYHOI_CACHE")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("toyhoi-cache")


@contextlib.contextmanager
def single_thread():
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(n)


@pytest.fixture(scope="session")
def fixture_labels(fixture_spec):
    return scenes.scene_meta(fixture_spec)["labels"]


@pytest.fixture(scope="session")
def full_run(pretrained, fixture_scene, fixture_labels):
    """Default-config inversion of the fixture scene on the packaged base, timed on one thread."""
    img, masks = fixture_scene
    before = {k: v.clone() for k, v in pretrained.base_state().items()}
    checksum = base_checksum(pretrained)
    with single_thread():
        t0 = time.perf_counter()
        art = invert(img, masks, fixture_labels, pretrained, TrainConfig())
        elapsed = time.perf_counter() - t0
    return {"art": art, "before": before, "checksum": checksum, "elapsed": elapsed}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
