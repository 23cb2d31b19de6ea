import numpy as np
import pytest
import torch

from reclip.backbone import ToyEncoder, ToyEncoderSpec
from reclip.core import ClassVocabulary, RunConfig
from reclip.synthetic import make_dataset

torch.set_num_threads(1)

CLASSES = ("background", "sheep", "cow")


@pytest.fixture
def vocab():
    return ClassVocabulary(CLASSES)


@pytest.fixture
def clean_spec():
    """Noise-free, bias-free toy encoder spec."""
    return ToyEncoderSpec(CLASSES)


@pytest.fixture
def clean_encoder(clean_spec):
    return ToyEncoder(clean_spec)


@pytest.fixture
def biased_spec():
    return ToyEncoderSpec.with_confusion(
        CLASSES, [(1, 2, 0.6)], class_prior=[0.0, 0.0, 0.45], decay_strength=0.8,
        noise_scale=0.05, common_scale=8.0,
    )


@pytest.fixture
def small_images(clean_spec):
    return make_dataset(6, clean_spec.palette, seed=3, size=64)


@pytest.fixture
def fast_config():
    return RunConfig(max_iters=4, batch_size=2, crop_ratio=0.5, upsample="nearest")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for r in reports
             for key, value in getattr(r, "user_properties", ()) if key == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(set(lines), key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
        terminalreporter.write_line("criterion 9: SKIP  needs a real CLIP checkpoint and PASCAL VOC")
