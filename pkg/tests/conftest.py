import hypothesis
import numpy as np
import pytest
import torch

from dfft.params import ParamStore

hypothesis.settings.register_profile("default", deadline=None, max_examples=60)
hypothesis.settings.load_profile("default")


@pytest.fixture
def store():
    return ParamStore(seed=0, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize(store: ParamStore, scale: float = 0.3, seed: int = 0) -> None:
    """Overwrite every parameter with N(0, scale^2) noise so no weight is trivially zero/one."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, t in store.items():
            t.copy_(torch.randn(t.shape, generator=g, dtype=t.dtype) * scale)


def as_numpy(store: ParamStore, prefix: str = "") -> dict:
    return {k[len(prefix):]: v.detach().numpy() for k, v in store.items() if k.startswith(prefix)}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
