"""
Pytest fixtures for ConfProbe tests
"""

import pytest
import numpy as np
from pathlib import Path
from unittest.mock import patch

import sys
sys.path.insert(0, str(Path(__file__).parent.parent))


@pytest.fixture(autouse=True)
def mock_activity_log(tmp_path):
    """Redirect activity logging to temp directory during tests"""
    temp_log = tmp_path / "activity.log"
    temp_history = tmp_path / "run_history.json"

    with patch('app.activity.ACTIVITY_LOG', temp_log):
        with patch('app.activity.HISTORY_FILE', temp_history):
            with patch('app.activity.LOG_DIR', tmp_path):
                yield


@pytest.fixture
def binary_model():
    """Binary linear synthetic model on 4x4x1 images (d=16, d_lat=8)"""
    from app.oracle import make_synthetic_model
    return make_synthetic_model(shape=(4, 4, 1), d_lat=8, num_classes=2, seed=3, logit_scale=4.0)


@pytest.fixture
def interior_images():
    """Images with every value in [0.3, 0.7], so small noise is never clamped"""
    rng = np.random.default_rng(11)
    return [rng.uniform(0.3, 0.7, (4, 4, 1)) for _ in range(20)]


@pytest.fixture
def rgb_image():
    rng = np.random.default_rng(5)
    return rng.uniform(0.0, 1.0, (6, 5, 3))


class ConstantOracle:
    """Always answers the same label and counts calls"""

    white_box = False

    def __init__(self, label=0, shape=None):
        self.label = label
        self.shape = shape
        self.calls = 0

    def top1(self, img):
        self.calls += 1
        return self.label

    def top1_batch(self, imgs):
        return [self.top1(img) for img in imgs]


@pytest.fixture
def constant_oracle():
    return ConstantOracle(label=3)


@pytest.fixture
def synthetic_world(tmp_path):
    """A small nonlinear synthetic model written to disk with a dataset drawn from it"""
    from app.oracle import make_synthetic_model, sample_synthetic_dataset
    from app.dataset import write_dataset

    model = make_synthetic_model(shape=(4, 4, 1), d_lat=4, num_classes=4, seed=1,
                                 nonlinear=True, logit_scale=3.0)
    dataset = sample_synthetic_dataset(model, 60, seed=2)
    model_path = tmp_path / "world" / "model.json"
    model.save(model_path)
    data_dir = tmp_path / "world" / "data"
    write_dataset(dataset, data_dir)
    return {"model": model, "dataset": dataset, "model_path": model_path, "data_dir": data_dir}
