"""
Set algebra over effective paths.

Aggregates image paths into class profiles by union, measures their
density, compares profiles with the Jaccard coefficient and measures how
much of an image's path lies inside a class profile.
"""

import logging
from dataclasses import dataclass, field
from typing import (
    Dict, List, Mapping, Optional, Sequence, Tuple, Union
)

import numpy as np

from pathprof.bitset import Bitset
from pathprof.engine import Network, forward_trace
from pathprof.errors import DomainError
from pathprof.extractor import (
    EffectivePath, ExtractionConfig, LayerSets, extract_effective_path
)
from pathprof.parallel import chunked, map_ordered

logger = logging.getLogger(__name__)

OVERALL = -1


@dataclass(frozen=True, eq=False)
class ClassProfile:
    """
    Aggregated path of an image group.

    Attributes
    ----------
    class_id : int
        Class the images belong to, or ``OVERALL`` (-1)
    layers : Mapping[int, LayerSets]
        Union of the group's sets per path layer
    image_count : int
        Number of images aggregated
    theta : float
        Contribution ratio the paths were extracted with
    fingerprint : bytes
        Topology hash of the source network
    """

    class_id: int
    layers: Mapping[int, LayerSets]
    image_count: int
    theta: float
    fingerprint: bytes

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def is_empty(self) -> bool:
        return all(sets.synapses.count() == 0 and sets.neurons.count() == 0
                   for sets in self.layers.values())

    def layer_indices(self) -> List[int]:
        return sorted(self.layers)

    def same_sets(self, other) -> bool:
        return (
            self.layer_indices() == other.layer_indices()
            and all(self.layers[i].same_sets(other.layers[i])
                    for i in self.layers)
        )

    @classmethod
    def from_path(cls, path: EffectivePath) -> 'ClassProfile':
        return cls(path.class_id, dict(path.layers), 1, path.theta,
                   path.fingerprint)

    @classmethod
    def empty(cls, net: Network, cfg: ExtractionConfig,
              class_id: int = OVERALL) -> 'ClassProfile':
        """Profile with no images over the layers ``cfg`` extracts."""
        path_layers = net.path_layers()
        depth = len(path_layers)
        if cfg.num_layers is not None:
            depth = min(depth, cfg.num_layers)
        layers = {
            index: LayerSets.empty(net.capacities(index))
            for index in path_layers[-depth:]
        }
        return cls(class_id, layers, 0, cfg.theta, net.fingerprint())


PathLike = Union[EffectivePath, ClassProfile]


def _count(item: PathLike) -> int:
    return item.image_count if isinstance(item, ClassProfile) else 1


def _check_compatible(a: PathLike, b: PathLike) -> None:
    if a.fingerprint != b.fingerprint:
        raise DomainError('paths come from networks with different topology')
    if a.theta != b.theta:
        raise DomainError(f'theta differs: {a.theta} vs {b.theta}')
    if sorted(a.layers) != sorted(b.layers):
        raise DomainError('paths cover different layers')


def union(a: PathLike, b: PathLike) -> ClassProfile:
    """
    Per-layer union of the neuron, synapse and weight sets.

    Parameters
    ----------
    a, b : EffectivePath or ClassProfile
        Operands extracted from the same topology, theta and depth

    Returns
    -------
    ClassProfile
        Union whose ``image_count`` is the sum of the operands'
    """
    _check_compatible(a, b)
    class_id = a.class_id if a.class_id == b.class_id else OVERALL
    layers = {i: a.layers[i].union(b.layers[i]) for i in sorted(a.layers)}
    return ClassProfile(class_id, layers, _count(a) + _count(b), a.theta,
                        a.fingerprint)


class ProfileBuilder:
    """In-place accumulator for one profile; single writer."""

    def __init__(self, template: ClassProfile):
        self.class_id = template.class_id
        self.theta = template.theta
        self.fingerprint = template.fingerprint
        self.image_count = template.image_count
        self._bits: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {
            index: (sets.neurons.to_array().copy(),
                    sets.synapses.to_array().copy(),
                    sets.weights.to_array().copy())
            for index, sets in template.layers.items()
        }

    def add(self, item: PathLike) -> None:
        if item.fingerprint != self.fingerprint or item.theta != self.theta:
            raise DomainError('cannot aggregate paths of another network '
                              'or theta')
        if sorted(item.layers) != sorted(self._bits):
            raise DomainError('paths cover different layers')
        for index, sets in item.layers.items():
            neurons, synapses, weights = self._bits[index]
            neurons |= sets.neurons.to_array()
            synapses |= sets.synapses.to_array()
            weights |= sets.weights.to_array()
        self.image_count += _count(item)

    def build(self) -> ClassProfile:
        layers = {
            index: LayerSets(Bitset(n), Bitset(s), Bitset(w))
            for index, (n, s, w) in sorted(self._bits.items())
        }
        return ClassProfile(self.class_id, layers, self.image_count,
                            self.theta, self.fingerprint)


@dataclass
class AggregationResult:
    """Class profiles plus provenance counters of one aggregation run."""

    profiles: Dict[int, ClassProfile]
    overall: ClassProfile
    misclassified: int = 0
    images_seen: int = 0
    per_class_counts: Dict[int, int] = field(default_factory=dict)


def _aggregate_chunk(task) -> AggregationResult:
    net, images, labels, cfg = task
    builders = {
        c: ProfileBuilder(ClassProfile.empty(net, cfg, c))
        for c in range(net.num_classes)
    }
    overall = ProfileBuilder(ClassProfile.empty(net, cfg, OVERALL))
    misclassified = 0
    for image, label in zip(images, labels):
        trace = forward_trace(net, image)
        if trace.predicted_rank[0] != int(label):
            misclassified += 1
            continue
        path = extract_effective_path(net, trace, cfg)
        builders[int(label)].add(path)
        overall.add(path)
    return AggregationResult(
        profiles={c: b.build() for c, b in builders.items()},
        overall=overall.build(),
        misclassified=misclassified,
        images_seen=len(labels),
    )


def aggregate_class_profiles(
    net: Network, images: np.ndarray, labels: np.ndarray,
    cfg: ExtractionConfig, jobs: int = 1, chunk_size: int = 256
) -> AggregationResult:
    """
    Build per-class and overall profiles from correctly predicted images.

    Each image is traced; images whose top-1 prediction differs from their
    label are counted and skipped, the rest contribute their rank-1 path
    to their class profile and to the overall profile.

    Parameters
    ----------
    net : Network
        Trained network
    images : np.ndarray
        Images shaped (n, *net.input_shape)
    labels : np.ndarray
        Class labels
    cfg : ExtractionConfig
        Extraction parameters; the start rank is forced to 1
    jobs : int
        Worker processes
    chunk_size : int
        Images per worker task

    Returns
    -------
    AggregationResult
        Profiles for every class (empty when no image qualified), the
        overall profile and counters
    """
    cfg = ExtractionConfig(cfg.theta, 1, cfg.num_layers).validate(
        net.num_classes
    )
    if len(images) != len(labels):
        raise DomainError('images and labels differ in length')
    tasks = [
        (net, images[span], labels[span], cfg)
        for span in chunked(len(labels), chunk_size)
    ]
    builders = {
        c: ProfileBuilder(ClassProfile.empty(net, cfg, c))
        for c in range(net.num_classes)
    }
    overall = ProfileBuilder(ClassProfile.empty(net, cfg, OVERALL))
    misclassified = 0
    for part in map_ordered(_aggregate_chunk, tasks, jobs):
        for c, profile in part.profiles.items():
            builders[c].add(profile)
        overall.add(part.overall)
        misclassified += part.misclassified

    profiles = {c: b.build() for c, b in builders.items()}
    for c, profile in profiles.items():
        if profile.image_count == 0:
            logger.warning('class %d has no correctly predicted images; '
                           'its profile is empty', c)
    logger.info('aggregated %d images, %d misclassified and excluded',
                len(labels), misclassified)
    return AggregationResult(
        profiles=profiles,
        overall=overall.build(),
        misclassified=misclassified,
        images_seen=len(labels),
        per_class_counts={c: p.image_count for c, p in profiles.items()},
    )


# ---------------------------------------------------------------------------
# Density
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerDensity:
    layer_index: int
    kind: str
    synapses: int
    synapse_capacity: int
    weights: int
    weight_capacity: int

    @property
    def synapse_density(self) -> float:
        return self.synapses / self.synapse_capacity

    @property
    def weight_density(self) -> Optional[float]:
        if self.weight_capacity == 0:
            return None
        return self.weights / self.weight_capacity


@dataclass(frozen=True)
class DensityReport:
    """Per-layer and total weight / synapse density of a profile."""

    layers: Tuple[LayerDensity, ...]

    @property
    def synapse_density(self) -> float:
        capacity = sum(d.synapse_capacity for d in self.layers)
        return sum(d.synapses for d in self.layers) / capacity

    @property
    def weight_density(self) -> float:
        capacity = sum(d.weight_capacity for d in self.layers)
        if capacity == 0:
            return 0.0
        return sum(d.weights for d in self.layers) / capacity

    def rows(self) -> List[Dict[str, object]]:
        """Report rows, one per layer plus a ``total`` row."""
        rows: List[Dict[str, object]] = [
            {
                'layer': d.layer_index,
                'kind': d.kind,
                'synapses': d.synapses,
                'synapse_capacity': d.synapse_capacity,
                'synapse_density': d.synapse_density,
                'weights': d.weights,
                'weight_capacity': d.weight_capacity,
                'weight_density': d.weight_density,
            }
            for d in self.layers
        ]
        rows.append({
            'layer': 'total',
            'kind': '',
            'synapses': sum(d.synapses for d in self.layers),
            'synapse_capacity': sum(d.synapse_capacity for d in self.layers),
            'synapse_density': self.synapse_density,
            'weights': sum(d.weights for d in self.layers),
            'weight_capacity': sum(d.weight_capacity for d in self.layers),
            'weight_density': self.weight_density,
        })
        return rows


def density(profile: PathLike, net: Network) -> DensityReport:
    """
    Fraction of the network's weights and synapses inside a profile.

    Raises
    ------
    DomainError
        If the profile does not belong to ``net``
    """
    if profile.fingerprint != net.fingerprint():
        raise DomainError('profile belongs to a different network')
    layers = []
    for index in sorted(profile.layers):
        sets = profile.layers[index]
        n_cap, s_cap, w_cap = net.capacities(index)
        if (sets.neurons.capacity, sets.synapses.capacity,
                sets.weights.capacity) != (n_cap, s_cap, w_cap):
            raise DomainError(f'layer {index} capacities do not match network')
        layers.append(LayerDensity(
            index, net.layers[index].kind, sets.synapses.count(), s_cap,
            sets.weights.count(), w_cap
        ))
    return DensityReport(tuple(layers))


def density_growth(profiles: Sequence[ClassProfile],
                   net: Network) -> List[DensityReport]:
    """Density of the running union as profiles are merged in order."""
    reports = []
    merged: Optional[ClassProfile] = None
    for profile in profiles:
        merged = profile if merged is None else union(merged, profile)
        reports.append(density(merged, net))
    return reports


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def jaccard_classwise(a: PathLike, b: PathLike) -> float:
    """
    Jaccard coefficient of two profiles' synapse sets, pooled over layers.

    Raises
    ------
    DomainError
        If both synapse sets are empty (the coefficient is undefined)
    """
    _check_compatible(a, b)
    inter = sum(a.layers[i].synapses.intersection_count(b.layers[i].synapses)
                for i in a.layers)
    total = sum(a.layers[i].synapses.union_count(b.layers[i].synapses)
                for i in a.layers)
    if total == 0:
        raise DomainError('Jaccard similarity of two empty paths is undefined')
    return inter / total


def jaccard_per_layer(a: PathLike, b: PathLike) -> np.ndarray:
    """Per-layer synapse Jaccard; NaN where both layers are empty."""
    _check_compatible(a, b)
    values = []
    for index in sorted(a.layers):
        sa, sb = a.layers[index].synapses, b.layers[index].synapses
        total = sa.union_count(sb)
        values.append(sa.intersection_count(sb) / total if total else np.nan)
    return np.array(values)


def class_similarity_matrix(
    profiles: Mapping[int, ClassProfile], layer: Optional[int] = None
) -> Tuple[List[int], np.ndarray]:
    """
    Symmetric matrix of class-wise Jaccard similarities.

    Parameters
    ----------
    profiles : Mapping[int, ClassProfile]
        Profiles keyed by class id
    layer : int, optional
        Restrict to one path layer (position in the layer order) instead
        of pooling all layers

    Returns
    -------
    tuple
        ``(class_ids, matrix)``; undefined entries are NaN
    """
    ids = sorted(profiles)
    matrix = np.full((len(ids), len(ids)), np.nan)
    for row, ci in enumerate(ids):
        for col in range(row, len(ids)):
            a, b = profiles[ci], profiles[ids[col]]
            if layer is None:
                try:
                    value = jaccard_classwise(a, b)
                except DomainError:
                    logger.warning('similarity of classes %d and %d is '
                                   'undefined', ci, ids[col])
                    continue
            else:
                value = jaccard_per_layer(a, b)[layer]
            matrix[row, col] = matrix[col, row] = value
    return ids, matrix


@dataclass(frozen=True)
class SimilarityVector:
    """Per-layer similarity values plus flags for empty image layers."""

    values: np.ndarray
    empty: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def _containment(path: EffectivePath, profile: PathLike,
                 attribute: str) -> SimilarityVector:
    if path.fingerprint != profile.fingerprint:
        raise DomainError('path and profile come from different networks')
    missing = set(path.layers) - set(profile.layers)
    if missing:
        raise DomainError(f'profile lacks path layers {sorted(missing)}')
    values, empty = [], []
    for index in path.layer_indices():
        mine = getattr(path.layers[index], attribute)
        theirs = getattr(profile.layers[index], attribute)
        size = mine.count()
        if size == 0:
            if mine.capacity:
                logger.warning('image path layer %d has no %s; similarity '
                               'taken as 1.0', index, attribute)
            values.append(1.0)
            empty.append(True)
        else:
            values.append(mine.intersection_count(theirs) / size)
            empty.append(False)
    return SimilarityVector(np.array(values, dtype=np.float64),
                            np.array(empty, dtype=bool))


def image_class_similarity_per_layer(
    image_path: EffectivePath, profile: PathLike
) -> SimilarityVector:
    """
    Fraction of the image's synapses found in the profile, per layer.

    Layers where the image path has no synapse are defined as 1.0 and
    flagged in ``SimilarityVector.empty``.
    """
    return _containment(image_path, profile, 'synapses')


def weight_based_similarity_per_layer(
    image_path: EffectivePath, profile: PathLike
) -> SimilarityVector:
    """Like ``image_class_similarity_per_layer`` over weight sets."""
    return _containment(image_path, profile, 'weights')


def image_class_similarity(image_path: EffectivePath,
                           profile: PathLike) -> float:
    """Whole-path fraction of the image's synapses inside the profile."""
    if image_path.fingerprint != profile.fingerprint:
        raise DomainError('path and profile come from different networks')
    size = image_path.synapse_count()
    if size == 0:
        logger.warning('image path is empty; similarity taken as 1.0')
        return 1.0
    inside = sum(
        sets.synapses.intersection_count(profile.layers[i].synapses)
        for i, sets in image_path.layers.items()
    )
    return inside / size
