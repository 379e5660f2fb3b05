import numpy as np
import pytest

from dataset import DetectionDataset, SyntheticConfig, generate_synthetic_dataset
from detector import DetectorConfig, FcosDetector
from falcnn import FalCnn, FalcnnConfig
from fusion import FusionNet
from pipeline import CompositeModel

SMALL_SIZE = 128


@pytest.fixture
def rng():
    return np.random.default_rng(20250311)


@pytest.fixture(scope="session")
def small_synth_config():
    return SyntheticConfig(image_count=6, image_size=SMALL_SIZE, positives_per_image=2, distractors_per_image=2,
                           validation_images=2, test_images=2, min_separation=30.0)


@pytest.fixture(scope="session")
def small_dataset(small_synth_config):
    images, annotations = generate_synthetic_dataset(small_synth_config, seed=3)
    return DetectionDataset(images, annotations, split="train")


@pytest.fixture(scope="session")
def small_detector_config():
    # prior 0.2 keeps untrained scores near sqrt(0.2 * 0.5) so every image yields a few boxes
    return DetectorConfig(input_size=SMALL_SIZE, channels=(4, 8, 8), strides=(8, 16), score_threshold=0.1,
                          pre_nms_top_n=4, prior_prob=0.2)


@pytest.fixture
def small_model(small_detector_config):
    detector = FcosDetector.initialize(small_detector_config, seed=1)
    classifier = FalCnn.initialize(FalcnnConfig(widths=(4, 6, 8), feedback_channels=3), seed=2)
    return CompositeModel(detector, classifier, FusionNet.initialize(seed=3))
