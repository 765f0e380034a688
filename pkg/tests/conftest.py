import numpy as np
import pytest
import torch

from interactpred.config import DataConfig, ModelConfig, TrainConfig
from interactpred.data import default_vocabulary, generate_interaction_dataset
from interactpred.pretrain import build_model

torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


@pytest.fixture
def vocab():
    return default_vocabulary()


@pytest.fixture
def minimal_cfg():
    """32x32 images, 16px patches, d=16, one encoder and one decoder layer."""
    return TrainConfig(model=ModelConfig.minimal(), data=DataConfig(image_size=32),
                       batch_size=4, epochs=1)


@pytest.fixture
def minimal_model(minimal_cfg, vocab):
    return build_model(minimal_cfg, vocab)


@pytest.fixture(scope="session")
def small_triplets():
    return generate_interaction_dataset(8, seed=3, canvas_size=32, num_distractors=1)


def random_boxes(rng: np.random.Generator, n: int) -> np.ndarray:
    """(n, 4) boxes in (cx, cy, w, h) lying fully inside the unit square."""
    w = rng.uniform(0.05, 0.6, n)
    h = rng.uniform(0.05, 0.6, n)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return np.stack([cx, cy, w, h], axis=1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
