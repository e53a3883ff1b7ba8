"""
Unit tests for artifact storage.
"""

import hashlib
import json
import os

import numpy as np
import pytest

from pathprof.attacks import AttackConfig, generate_adversarial_set
from pathprof.detector import LinearDetector
from pathprof.errors import ArtifactMissingError, FormatError
from pathprof.utils.storage import (
    adversarial_set_dir, load_adversarial_set, load_detector, load_model,
    read_json, save_adversarial_set, save_detector, save_model,
    write_json, write_run_manifest
)


class TestModelStorage:
    """Test cases for model save/load."""

    def test_round_trip_is_bit_exact(self, small_cnn, tmp_path):
        path = str(tmp_path / 'model' / 'model.json')
        written = save_model(small_cnn, path)
        restored = load_model(path)

        assert written[-1] == path
        assert restored.fingerprint() == small_cnn.fingerprint()
        for original, loaded in zip(small_cnn.layers, restored.layers):
            for name, tensor in original.tensors().items():
                assert loaded.tensors()[name].tobytes() == tensor.tobytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ArtifactMissingError):
            load_model(str(tmp_path / 'model.json'))

    def test_missing_blob(self, small_cnn, tmp_path):
        path = str(tmp_path / 'model.json')
        written = save_model(small_cnn, path)
        os.remove(written[0])

        with pytest.raises(ArtifactMissingError):
            load_model(path)

    def test_truncated_blob(self, small_cnn, tmp_path):
        path = str(tmp_path / 'model.json')
        blob = save_model(small_cnn, path)[0]
        with open(blob, 'rb') as f:
            payload = f.read()
        with open(blob, 'wb') as f:
            f.write(payload[:-4])

        with pytest.raises(FormatError):
            load_model(path)

    def test_reshaped_tensor_in_manifest(self, small_cnn, tmp_path):
        """A blob with the right size but the wrong shape is rejected."""
        path = str(tmp_path / 'model.json')
        save_model(small_cnn, path)
        manifest = read_json(path, 'model')
        manifest['layers'][0]['tensors']['weights']['shape'] = [1, 2, 3, 3]
        write_json(manifest, path)

        with pytest.raises(FormatError) as excinfo:
            load_model(path)
        assert excinfo.value.path == path

    def test_wrong_format(self, tmp_path):
        path = str(tmp_path / 'model.json')
        write_json({'format': 'pathprof-detector', 'version': 1}, path)

        with pytest.raises(FormatError):
            load_model(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'model.json'
        path.write_text('{"format": ')

        with pytest.raises(FormatError):
            read_json(str(path), 'model')


class TestAdversarialStorage:
    """Test cases for adversarial set save/load."""

    def test_round_trip(self, small_cnn, cnn_images, tmp_path):
        cfg = AttackConfig(name='fgsm', epsilon=0.2)
        samples = generate_adversarial_set(small_cnn, *cnn_images, cfg)
        directory = adversarial_set_dir(str(tmp_path), cfg.name)

        save_adversarial_set(samples, cfg, directory, small_cnn.input_shape)
        loaded_cfg, loaded = load_adversarial_set(directory)

        assert loaded_cfg == cfg
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            assert a.metadata() == b.metadata()
            np.testing.assert_array_equal(a.image, b.image)

    def test_directory_name_is_sanitized(self, tmp_path):
        directory = adversarial_set_dir(str(tmp_path), '../bim eps')

        assert os.path.dirname(directory) == str(tmp_path)

    def test_missing_set(self, tmp_path):
        with pytest.raises(ArtifactMissingError):
            load_adversarial_set(str(tmp_path / 'nothing'))


class TestDetectorStorage:
    """Test cases for detector save/load and run manifests."""

    def test_round_trip(self, tmp_path):
        det = LinearDetector([0.5, 0.0], [0.25, 1.0], 0.125, -0.5,
                             {'seed': 3})
        path = str(tmp_path / 'detector.json')
        save_detector(det, path)
        loaded = load_detector(path)

        np.testing.assert_array_equal(loaded.omega, det.omega)
        np.testing.assert_array_equal(loaded.omega_prime, det.omega_prime)
        assert loaded.threshold == det.threshold
        assert loaded.metadata == {'seed': 3}

    def test_negative_weights_in_file(self, tmp_path):
        path = str(tmp_path / 'detector.json')
        write_json({'format': 'pathprof-detector', 'version': 1,
                    'omega': [-1.0], 'omega_prime': [0.0],
                    'threshold': 0.0}, path)

        with pytest.raises(FormatError):
            load_detector(path)

    def test_run_manifest(self, tmp_path):
        output = tmp_path / 'report.csv'
        output.write_bytes(b'a,b\n1,2\n')
        path = str(tmp_path / 'manifest.json')

        write_run_manifest(path, 'similarity', {'seed': 7, 'jobs': 1},
                           {'weight_based': False},
                           [str(output), str(tmp_path / 'absent.csv')])

        with open(path) as f:
            manifest = json.load(f)
        assert manifest['command'] == 'similarity'
        assert manifest['seed'] == 7
        assert manifest['outputs'] == {
            str(output): hashlib.sha256(b'a,b\n1,2\n').hexdigest()
        }

    def test_json_is_deterministic(self, tmp_path):
        a, b = str(tmp_path / 'a.json'), str(tmp_path / 'b.json')
        write_json({'b': 1, 'a': [1, 2]}, a)
        write_json({'a': [1, 2], 'b': 1}, b)

        with open(a, 'rb') as fa, open(b, 'rb') as fb:
            assert fa.read() == fb.read()
