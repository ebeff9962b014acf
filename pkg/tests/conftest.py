import numpy as np
import pytest

from fgakit import experiments, numkit, synthdata
from fgakit.config import RunConfig
from fgakit.models import ImageEncoder, TextEncoder, train_itc
from helpers import ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(s.split()[1].rstrip("ab")), s)):
            terminalreporter.write_line(line)


@pytest.fixture
def f64():
    with numkit.float64_mode():
        yield


@pytest.fixture(scope="session")
def toy():
    """Small trained encoder pair on a 4-class synthetic set (session cached)."""
    data = synthdata.gen_dataset(4, 12, (3, 8, 8), 0.1, seed=5, contrast=0.3)
    img = ImageEncoder((3, 8, 8), dim=16, hidden=(32,), seed=1)
    txt = TextEncoder(len(data.vocab), dim=16, token_dim=16, hidden=(16,), seed=1)
    train_itc(img, txt, data, epochs=10, lr=0.5, temperature=0.1, batch_size=16, seed=1)
    return data, img, txt


@pytest.fixture(scope="session")
def default_run():
    """(train, test, image encoder, text encoder) under the default run config."""
    cfg = RunConfig(seed=0)
    train, test, (img, txt, _), _ = experiments.setup(cfg)
    return cfg, train, test, img, txt
