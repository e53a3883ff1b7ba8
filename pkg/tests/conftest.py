"""
Test configuration for pathprof

This module provides pytest configuration and shared fixtures: the Flask
application with a throwaway run catalog, hand-built networks with known
paths, and a small synthetic IDX dataset for end-to-end runs.
"""

import json
import os
import tempfile

import numpy as np
import pytest

from pathprof import create_app, db, init_db
from pathprof.engine import Dense, Network, ReLU, build_network
from pathprof.utils.idx import write_idx

SMALL_CNN_LAYERS = [
    {'type': 'conv2d', 'out_channels': 2, 'kernel': 3},
    {'type': 'relu'},
    {'type': 'maxpool2d', 'kernel': 2},
    {'type': 'flatten'},
    {'type': 'dense', 'units': 3},
]
SMALL_CNN_INPUT = [1, 6, 6]


def pytest_configure(config):
    config.addinivalue_line(
        'markers', 'slow: full-scale runs on real MNIST files'
    )


def dense(weights, bias=None) -> Dense:
    """Dense layer from nested lists; bias defaults to zeros."""
    weights = np.asarray(weights, dtype=np.float32)
    out_dim, in_dim = weights.shape
    if bias is None:
        bias = np.zeros(out_dim, dtype=np.float32)
    return Dense(in_dim, out_dim, weights, np.asarray(bias, dtype=np.float32))


def synthetic_images(n: int, seed: int) -> tuple:
    """
    6x6 uint8 images of three classes, each a bright horizontal band at a
    class-specific row over low noise.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 3
    images = rng.integers(0, 40, size=(n, 6, 6))
    for i, label in enumerate(labels):
        row = 2 * label
        images[i, row:row + 2, :] = rng.integers(200, 256, size=(2, 6))
    return images.astype(np.uint8), labels.astype(np.uint8)


@pytest.fixture
def app():
    """
    Create application instance for testing.

    Returns
    -------
    Flask
        Test Flask application bound to a temporary SQLite catalog
    """
    # Create temporary database
    db_fd, db_path = tempfile.mkstemp()

    app = create_app({
        'TESTING': True,
        'SQLALCHEMY_DATABASE_URI': f'sqlite:///{db_path}',
        'DEFAULT_JOBS': 1,
    })
    init_db(app)

    with app.app_context():
        yield app

        # Cleanup
        db.session.remove()
        db.drop_all()
    os.close(db_fd)
    os.unlink(db_path)


@pytest.fixture
def runner(app):
    """
    Create test CLI runner.

    Parameters
    ----------
    app : Flask
        Test application

    Returns
    -------
    FlaskCliRunner
        CLI runner for testing commands
    """
    return app.test_cli_runner()


@pytest.fixture
def identity_net():
    """Single 3x3 identity dense layer."""
    return Network([dense(np.eye(3))], (3,))


@pytest.fixture
def two_layer_net():
    """
    Dense -> ReLU -> Dense with small integer weights.

    For input [1, 2] the hidden values are [3, -1] before ReLU and the
    logits are [3, 0].
    """
    return Network([
        dense([[1, 1], [1, -1]]),
        ReLU(),
        dense([[1, 1], [0, 1]]),
    ], (2,))


@pytest.fixture
def small_cnn():
    """Seeded conv -> relu -> maxpool -> flatten -> dense net on 1x6x6."""
    return build_network(SMALL_CNN_LAYERS, SMALL_CNN_INPUT, seed=0)


@pytest.fixture
def cnn_images():
    """Ten float images for ``small_cnn`` with their band labels."""
    images, labels = synthetic_images(10, seed=3)
    scaled = images.astype(np.float32)[:, None] / np.float32(255.0)
    return scaled, labels.astype(np.int64)


@pytest.fixture
def dataset_files(tmp_path):
    """
    Synthetic train/test IDX files.

    Returns
    -------
    dict
        The four dataset paths keyed like ``DatasetPaths`` fields
    """
    directory = tmp_path / 'data'
    directory.mkdir()
    paths = {}
    for split, n, seed in (('train', 60, 1), ('test', 30, 2)):
        images, labels = synthetic_images(n, seed)
        paths[f'{split}_images'] = str(directory / f'{split}-images.idx')
        paths[f'{split}_labels'] = str(directory / f'{split}-labels.idx')
        write_idx(paths[f'{split}_images'], images)
        write_idx(paths[f'{split}_labels'], labels)
    return paths


@pytest.fixture
def run_config(tmp_path, dataset_files):
    """
    RunConfig JSON for the synthetic dataset and ``SMALL_CNN_LAYERS``.

    Attacks: an aggressive FGSM and a random-image set, so the detector
    pool always holds adversarial samples. Detector epochs are kept low.
    """
    config = {
        'dataset': dataset_files,
        'architecture': SMALL_CNN_LAYERS,
        'input_shape': SMALL_CNN_INPUT,
        'train': {'epochs': 20, 'learning_rate': 0.1, 'batch_size': 10},
        'attacks': [
            {'name': 'fgsm', 'method': 'fgsm', 'epsilon': 0.5},
            {'name': 'noise', 'method': 'random', 'count': 12, 'seed': 4},
        ],
        'detector': {'epochs': 30, 'train_fraction': 0.3},
        'output_dir': str(tmp_path / 'out'),
        'jobs': 1,
    }
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(config))
    return str(path)
