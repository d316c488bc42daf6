import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dualfuse.synth import SynthConfig, make_pair, synth_dataset  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pairs():
    cfg = SynthConfig(count=8, image_size=32, seed=11)
    return [make_pair(cfg, i) for i in range(cfg.count)]


@pytest.fixture(scope="session")
def pairs64():
    cfg = SynthConfig(count=16, image_size=64, seed=5)
    return [make_pair(cfg, i) for i in range(cfg.count)]


@pytest.fixture
def dataset(tmp_path):
    return synth_dataset(SynthConfig(count=4, image_size=32, seed=3), tmp_path / "data")


@pytest.fixture(scope="session")
def smoke_train():
    cfg = SynthConfig(count=64, image_size=64, seed=1)
    return [make_pair(cfg, i) for i in range(cfg.count)]


@pytest.fixture(scope="session")
def smoke_val():
    cfg = SynthConfig(count=50, image_size=64, seed=2, split="val")
    return [make_pair(cfg, i) for i in range(cfg.count)]


@pytest.fixture(scope="session")
def ct_state(smoke_train):
    from dualfuse.trainloop import TrainConfig, train_ct

    torch.set_num_threads(1)
    return train_ct(TrainConfig(strategy="ct", epochs=20), smoke_train)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: int(k)):
        title, ok, detail = RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key:>2}. {title}: {detail}")
