"""
Unit tests for the EPATH1 path codec.
"""

import struct

import numpy as np
import pytest

from pathprof.algebra import ClassProfile, union
from pathprof.errors import ArtifactMissingError, FormatError
from pathprof.extractor import ExtractionConfig, extract_image_path
from pathprof.utils.pathfile import (
    deserialize_path, load_path, save_path, serialize_path
)


@pytest.fixture
def cnn_path(small_cnn, cnn_images):
    _, path = extract_image_path(small_cnn, cnn_images[0][0],
                                 ExtractionConfig(theta=0.6))
    return path


@pytest.fixture
def identity_bytes(identity_net):
    _, path = extract_image_path(identity_net, np.array([1, 2, 3]),
                                 ExtractionConfig())
    return serialize_path(path)


class TestPathFile:
    """Test cases for path encoding and decoding."""

    def test_path_round_trip(self, cnn_path):
        restored = deserialize_path(serialize_path(cnn_path))

        assert restored.same_sets(cnn_path)
        assert restored.fingerprint == cnn_path.fingerprint
        assert restored.theta == 0.6
        assert restored.class_id == cnn_path.class_id
        assert restored.start_rank == 1

    def test_profile_round_trip(self, cnn_path, small_cnn, cnn_images):
        _, other = extract_image_path(small_cnn, cnn_images[0][1],
                                      ExtractionConfig(theta=0.6))
        profile = union(cnn_path, other)
        restored = deserialize_path(serialize_path(profile))

        assert isinstance(restored, ClassProfile)
        assert restored.same_sets(profile)
        assert restored.image_count == 2
        assert restored.class_id == profile.class_id

    def test_empty_profile(self, small_cnn):
        profile = ClassProfile.empty(small_cnn, ExtractionConfig(), 1)
        restored = deserialize_path(serialize_path(profile))

        assert restored.is_empty
        assert restored.image_count == 0
        assert restored.layer_indices() == [0, 2, 4]

    def test_header_layout(self, identity_bytes):
        """Magic, version and kind lead the fixed header."""
        assert identity_bytes[:8] == b'EPATH1\x01\x00'
        (depth,) = struct.unpack_from('<I', identity_bytes, 48)
        assert depth == 1

    def test_bad_magic(self, identity_bytes):
        with pytest.raises(FormatError) as e:
            deserialize_path(b'XPATH1' + identity_bytes[6:])
        assert e.value.offset == 0

    def test_bad_version(self, identity_bytes):
        data = identity_bytes[:6] + b'\x02' + identity_bytes[7:]

        with pytest.raises(FormatError) as e:
            deserialize_path(data)
        assert e.value.offset == 6

    def test_truncated(self, identity_bytes):
        with pytest.raises(FormatError):
            deserialize_path(identity_bytes[:-1])
        with pytest.raises(FormatError):
            deserialize_path(identity_bytes[:40])

    def test_trailing_bytes(self, identity_bytes):
        with pytest.raises(FormatError) as e:
            deserialize_path(identity_bytes + b'\x00')
        assert e.value.offset == len(identity_bytes)

    def test_inconsistent_length(self, identity_bytes):
        """A neuron blob length that disagrees with its capacity."""
        data = bytearray(identity_bytes)
        data[84:92] = struct.pack('<Q', 5)

        with pytest.raises(FormatError) as e:
            deserialize_path(bytes(data))
        assert e.value.offset == 76

    def test_save_and_load(self, cnn_path, tmp_path):
        target = tmp_path / 'paths' / 'image.epath'
        save_path(cnn_path, str(target))

        assert load_path(str(target)).same_sets(cnn_path)

    def test_load_missing(self, tmp_path):
        with pytest.raises(ArtifactMissingError):
            load_path(str(tmp_path / 'absent.epath'))

    def test_error_names_file(self, tmp_path):
        target = tmp_path / 'broken.epath'
        target.write_bytes(b'EPATH1')

        with pytest.raises(FormatError) as e:
            load_path(str(target))
        assert e.value.path == str(target)
