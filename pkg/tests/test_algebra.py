"""
Unit tests for profile aggregation, density and similarity.
"""

import logging

import numpy as np
import pytest

from pathprof.algebra import (
    OVERALL, ClassProfile, ProfileBuilder, aggregate_class_profiles,
    class_similarity_matrix, density, density_growth, image_class_similarity,
    image_class_similarity_per_layer, jaccard_classwise, jaccard_per_layer,
    union, weight_based_similarity_per_layer
)
from pathprof.bitset import Bitset
from pathprof.engine import Conv2D, Flatten, Network, forward_trace
from pathprof.errors import DomainError
from pathprof.extractor import (
    EffectivePath, ExtractionConfig, LayerSets, extract_image_path
)

CFG = ExtractionConfig(theta=0.5)


def _identity_paths(identity_net, inputs, theta=0.5):
    return [
        extract_image_path(identity_net, np.asarray(x),
                           ExtractionConfig(theta=theta))[1]
        for x in inputs
    ]


def _predictions(net, images):
    return np.array([forward_trace(net, image).predicted_rank[0]
                     for image in images])


def _sets(capacities, neurons=(), synapses=(), weights=()):
    n, s, w = capacities
    return LayerSets(Bitset.from_indices(n, neurons),
                     Bitset.from_indices(s, synapses),
                     Bitset.from_indices(w, weights))


@pytest.fixture
def shared_kernel_net():
    """1x2 convolution over a 1x1x3 input: two outputs share two weights."""
    conv = Conv2D(1, 1, (1, 2), 1, 0,
                  np.ones((1, 1, 1, 2), dtype=np.float32),
                  np.zeros(1, dtype=np.float32))
    return Network([conv, Flatten()], (1, 1, 3))


class TestUnion:
    """Test cases for profile union."""

    def test_idempotent(self, identity_net):
        profile = ClassProfile.from_path(
            _identity_paths(identity_net, [[1, 2, 3]])[0]
        )

        assert union(profile, profile).same_sets(profile)

    def test_empty_is_identity(self, identity_net):
        path = _identity_paths(identity_net, [[3, 1, 2]])[0]
        empty = ClassProfile.empty(identity_net, CFG, OVERALL)
        merged = union(empty, path)

        assert merged.same_sets(ClassProfile.from_path(path))
        assert merged.image_count == 1

    def test_matches_bitwise_or(self, identity_net):
        """Union of three paths is the OR of their bit vectors."""
        paths = _identity_paths(identity_net,
                                [[3, 1, 2], [1, 3, 2], [1, 2, 3]])
        merged = union(union(paths[0], paths[1]), paths[2])

        expected = np.zeros(9, dtype=bool)
        for path in paths:
            expected |= path.layers[0].synapses.to_array()
        np.testing.assert_array_equal(
            merged.layers[0].synapses.to_array(), expected
        )
        assert list(merged.layers[0].synapses) == [0, 4, 8]
        assert merged.image_count == 3
        assert merged.class_id == OVERALL

    def test_same_class_keeps_id(self, identity_net):
        a, b = _identity_paths(identity_net, [[1, 2, 3], [0, 1, 5]])

        assert union(a, b).class_id == 2

    def test_fingerprint_mismatch(self, identity_net, two_layer_net):
        a = _identity_paths(identity_net, [[1, 2, 3]])[0]
        _, b = extract_image_path(two_layer_net, np.array([1, 2]), CFG)

        with pytest.raises(DomainError):
            union(a, b)

    def test_theta_mismatch(self, identity_net):
        a = _identity_paths(identity_net, [[1, 2, 3]], theta=0.5)[0]
        b = _identity_paths(identity_net, [[1, 2, 3]], theta=0.9)[0]

        with pytest.raises(DomainError):
            union(a, b)

    def test_builder_matches_union(self, identity_net):
        paths = _identity_paths(identity_net, [[3, 1, 2], [1, 3, 2]])
        builder = ProfileBuilder(ClassProfile.empty(identity_net, CFG))
        for path in paths:
            builder.add(path)

        assert builder.build().same_sets(union(paths[0], paths[1]))
        assert builder.build().image_count == 2


class TestAggregation:
    """Test cases for class profile aggregation."""

    def test_misclassified_are_excluded(self, small_cnn, cnn_images):
        images = cnn_images[0]
        labels = _predictions(small_cnn, images)
        labels[-1] = (labels[-1] + 1) % 3

        result = aggregate_class_profiles(small_cnn, images, labels, CFG,
                                          chunk_size=2)

        assert result.misclassified == 1
        assert result.images_seen == 10
        assert sum(result.per_class_counts.values()) == 9
        assert result.overall.image_count == 9
        assert sorted(result.profiles) == [0, 1, 2]

    def test_chunking_does_not_matter(self, small_cnn, cnn_images):
        images = cnn_images[0]
        labels = _predictions(small_cnn, images)

        whole = aggregate_class_profiles(small_cnn, images, labels, CFG)
        parts = aggregate_class_profiles(small_cnn, images, labels, CFG,
                                         chunk_size=3)

        assert whole.overall.same_sets(parts.overall)

    def test_permutation_invariant(self, small_cnn, cnn_images):
        """Image order does not change the profiles."""
        images = cnn_images[0]
        labels = _predictions(small_cnn, images)

        forward = aggregate_class_profiles(small_cnn, images, labels, CFG)
        backward = aggregate_class_profiles(small_cnn, images[::-1],
                                            labels[::-1], CFG)

        for c, profile in forward.profiles.items():
            assert profile.same_sets(backward.profiles[c])
            assert profile.image_count == backward.profiles[c].image_count

    def test_members_are_fully_contained(self, small_cnn, cnn_images):
        """Every aggregated image has similarity 1 to its class."""
        images = cnn_images[0]
        labels = _predictions(small_cnn, images)
        result = aggregate_class_profiles(small_cnn, images, labels, CFG)

        for image, label in zip(images, labels):
            _, path = extract_image_path(small_cnn, image, CFG)
            assert image_class_similarity(path, result.profiles[label]) == 1.0
            vector = image_class_similarity_per_layer(
                path, result.profiles[label]
            )
            np.testing.assert_array_equal(vector.values, 1.0)

    def test_empty_class_warns(self, small_cnn, cnn_images, caplog):
        images = cnn_images[0][:1]
        labels = _predictions(small_cnn, images)

        with caplog.at_level(logging.WARNING, logger='pathprof.algebra'):
            result = aggregate_class_profiles(small_cnn, images, labels, CFG)

        empty = [c for c, n in result.per_class_counts.items() if n == 0]
        assert len(empty) == 2
        assert 'no correctly predicted images' in caplog.text
        assert result.profiles[empty[0]].is_empty

    def test_length_mismatch(self, small_cnn, cnn_images):
        with pytest.raises(DomainError):
            aggregate_class_profiles(small_cnn, cnn_images[0],
                                     cnn_images[1][:3], CFG)


class TestDensity:
    """Test cases for profile density."""

    def test_empty_profile(self, small_cnn):
        report = density(ClassProfile.empty(small_cnn, CFG), small_cnn)

        assert report.synapse_density == 0.0
        assert report.weight_density == 0.0
        assert report.rows()[-1]['layer'] == 'total'

    def test_full_profile(self, identity_net):
        layers = {0: LayerSets(Bitset.full(3), Bitset.full(9),
                               Bitset.full(9))}
        profile = ClassProfile(OVERALL, layers, 1, 0.5,
                               identity_net.fingerprint())
        report = density(profile, identity_net)

        assert report.synapse_density == 1.0
        assert report.weight_density == 1.0

    def test_pool_layer_has_no_weight_density(self, small_cnn):
        report = density(ClassProfile.empty(small_cnn, CFG), small_cnn)
        pool = [d for d in report.layers if d.kind == 'maxpool2d'][0]

        assert pool.weight_density is None

    def test_growth_is_nondecreasing(self, small_cnn, cnn_images):
        images = cnn_images[0]
        labels = _predictions(small_cnn, images)
        result = aggregate_class_profiles(small_cnn, images, labels, CFG)
        reports = density_growth(
            [result.profiles[c] for c in sorted(result.profiles)], small_cnn
        )

        values = [r.synapse_density for r in reports]
        assert values == sorted(values)
        assert values[-1] == pytest.approx(
            density(result.overall, small_cnn).synapse_density
        )

    def test_foreign_network(self, identity_net, small_cnn):
        with pytest.raises(DomainError):
            density(ClassProfile.empty(small_cnn, CFG), identity_net)


class TestJaccard:
    """Test cases for class-wise Jaccard similarity."""

    def test_self_similarity(self, identity_net):
        path = _identity_paths(identity_net, [[1, 2, 3]])[0]

        assert jaccard_classwise(path, path) == 1.0

    def test_disjoint(self, identity_net):
        a, b = _identity_paths(identity_net, [[1, 2, 3], [3, 1, 2]])

        assert jaccard_classwise(a, b) == 0.0

    def test_partial_overlap(self, identity_net):
        paths = _identity_paths(identity_net, [[3, 1, 2], [1, 3, 2]])
        merged = union(paths[0], paths[1])

        assert jaccard_classwise(merged, paths[0]) == 0.5

    def test_both_empty(self, identity_net):
        empty = ClassProfile.empty(identity_net, CFG)

        with pytest.raises(DomainError):
            jaccard_classwise(empty, empty)
        assert np.isnan(jaccard_per_layer(empty, empty)[0])

    def test_matrix(self, small_cnn, cnn_images):
        """The matrix is symmetric with a unit diagonal."""
        images = cnn_images[0]
        labels = _predictions(small_cnn, images)
        result = aggregate_class_profiles(small_cnn, images, labels, CFG)
        filled = {c: p for c, p in result.profiles.items() if not p.is_empty}

        ids, matrix = class_similarity_matrix(filled)

        assert ids == sorted(filled)
        np.testing.assert_array_equal(matrix, matrix.T)
        np.testing.assert_array_equal(np.diag(matrix), 1.0)
        assert np.all((matrix >= 0) & (matrix <= 1))


class TestContainment:
    """Test cases for image-to-profile similarity."""

    def test_weight_sharing(self, shared_kernel_net):
        """Weight sets can match where synapse sets do not."""
        caps = shared_kernel_net.capacities(0)
        assert caps == (2, 4, 2)
        fingerprint = shared_kernel_net.fingerprint()
        image = EffectivePath(
            {0: _sets(caps, [0, 1], [0, 1, 2], [0, 1])}, fingerprint,
            0.5, 1, 0
        )
        profile = ClassProfile(
            0, {0: _sets(caps, [0, 1], [0, 2], [0])}, 4, 0.5, fingerprint
        )

        synapse = image_class_similarity_per_layer(image, profile)
        weight = weight_based_similarity_per_layer(image, profile)

        assert synapse.values[0] == pytest.approx(2 / 3)
        assert weight.values[0] == pytest.approx(1 / 2)
        assert image_class_similarity(image, profile) == pytest.approx(2 / 3)

    def test_empty_image_layer(self, identity_net):
        """An empty image layer counts as fully contained and is flagged."""
        fingerprint = identity_net.fingerprint()
        image = EffectivePath({0: _sets((3, 9, 9))}, fingerprint, 0.5, 1, 0)
        profile = ClassProfile(0, {0: _sets((3, 9, 9), [0], [0], [0])}, 1,
                               0.5, fingerprint)

        vector = image_class_similarity_per_layer(image, profile)

        assert vector.values[0] == 1.0
        assert vector.empty[0]
        assert image_class_similarity(image, profile) == 1.0

    def test_disjoint_image(self, identity_net):
        a, b = _identity_paths(identity_net, [[1, 2, 3], [3, 1, 2]])

        assert image_class_similarity(a, ClassProfile.from_path(b)) == 0.0

    def test_foreign_profile(self, identity_net, small_cnn):
        path = _identity_paths(identity_net, [[1, 2, 3]])[0]

        with pytest.raises(DomainError):
            image_class_similarity_per_layer(
                path, ClassProfile.empty(small_cnn, CFG)
            )
