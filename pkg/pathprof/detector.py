"""
Path-similarity adversarial detector.

Each image yields two per-layer similarity vectors: its rank-1 path
against the predicted class profile and its rank-2 path against the
runner-up class profile. A nonnegative linear model combines them into
one joint similarity score; images scoring below a threshold are flagged
as adversarial.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from pathprof.algebra import (
    ClassProfile, image_class_similarity_per_layer,
    weight_based_similarity_per_layer
)
from pathprof.engine import Network, forward_trace
from pathprof.errors import DomainError, InternalInvariantError
from pathprof.extractor import ExtractionConfig, extract_effective_path

logger = logging.getLogger(__name__)

NORMAL = 1
ADVERSARIAL = 0


@dataclass(frozen=True, eq=False)
class SimilarityFeatures:
    """
    Rank-1 and rank-2 per-layer similarities of one image.

    Components flagged missing (empty image layer or empty class profile)
    take no part in the joint similarity.
    """

    rank1: np.ndarray
    rank2: np.ndarray
    rank1_missing: np.ndarray
    rank2_missing: np.ndarray
    predicted: int = -1
    runner_up: int = -1

    def __post_init__(self):
        for name in ('rank1', 'rank2'):
            object.__setattr__(self, name, np.asarray(
                getattr(self, name), dtype=np.float64))
        for name in ('rank1_missing', 'rank2_missing'):
            object.__setattr__(self, name, np.asarray(
                getattr(self, name), dtype=bool))
        lengths = {len(self.rank1), len(self.rank2),
                   len(self.rank1_missing), len(self.rank2_missing)}
        if len(lengths) != 1:
            raise DomainError('feature vectors differ in length')

    @property
    def layer_count(self) -> int:
        return len(self.rank1)

    def effective(self) -> Tuple[np.ndarray, np.ndarray]:
        """Rank-1 and rank-2 vectors with missing components zeroed."""
        return (np.where(self.rank1_missing, 0.0, self.rank1),
                np.where(self.rank2_missing, 0.0, self.rank2))


def _rank_similarity(path, profile: Optional[ClassProfile],
                     weight_based: bool) -> Tuple[np.ndarray, np.ndarray]:
    layers = path.depth
    if profile is None or profile.image_count == 0:
        return np.zeros(layers), np.ones(layers, dtype=bool)
    measure = (weight_based_similarity_per_layer if weight_based
               else image_class_similarity_per_layer)
    sim = measure(path, profile)
    return sim.values, sim.empty


def featurize(net: Network, image: np.ndarray,
              profiles: Mapping[int, ClassProfile], cfg: ExtractionConfig,
              weight_based: bool = False) -> SimilarityFeatures:
    """
    Similarity features of one image.

    Extracts the image's paths from its rank-1 and rank-2 class neurons
    and compares each with the profile of that class.

    Parameters
    ----------
    net : Network
        Network the profiles were built on
    image : np.ndarray
        Single input
    profiles : Mapping[int, ClassProfile]
        Class profiles built with ``cfg.theta``
    cfg : ExtractionConfig
        Theta and depth; the start rank is ignored
    weight_based : bool
        Compare weight sets instead of synapse sets

    Returns
    -------
    SimilarityFeatures
        Vectors of one component per extracted layer

    Raises
    ------
    DomainError
        If the network has fewer than two classes or a profile was built
        with another theta
    """
    if net.num_classes < 2:
        raise DomainError('rank-2 features need at least two classes')
    for profile in profiles.values():
        if profile.theta != cfg.theta:
            raise DomainError(
                f'profile theta {profile.theta} differs from {cfg.theta}'
            )
    trace = forward_trace(net, image)
    ranked = []
    for rank in (1, 2):
        path = extract_effective_path(
            net, trace, ExtractionConfig(cfg.theta, rank, cfg.num_layers)
        )
        ranked.append(_rank_similarity(path, profiles.get(path.class_id),
                                       weight_based))
    (r1, m1), (r2, m2) = ranked
    return SimilarityFeatures(r1, r2, m1, m2, trace.predicted_rank[0],
                              trace.predicted_rank[1])


@dataclass(frozen=True)
class DetectorConfig:
    """
    Detector training parameters.

    ``alpha`` scales the elastic-net penalty and ``l1_ratio`` splits it
    between the L1 and L2 parts; ``train_fraction`` is the share of the
    feature pool used for fitting.
    """

    epochs: int = 10000
    l1_ratio: float = 0.5
    alpha: float = 1e-4
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0
    train_fraction: float = 0.1

    def validate(self) -> 'DetectorConfig':
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError('epochs and batch_size must be positive')
        if not 0.0 <= self.l1_ratio <= 1.0:
            raise DomainError('l1_ratio must be in [0, 1]')
        if self.alpha < 0 or self.learning_rate <= 0:
            raise DomainError('alpha must be >= 0 and learning_rate > 0')
        if not 0.0 < self.train_fraction < 1.0:
            raise DomainError('train_fraction must be in (0, 1)')
        return self


@dataclass(frozen=True, eq=False)
class LinearDetector:
    """
    Nonnegative linear joint-similarity detector.

    Attributes
    ----------
    omega : np.ndarray
        Weights of the rank-1 similarities
    omega_prime : np.ndarray
        Weights of the rank-2 similarities (subtracted)
    threshold : float
        Images scoring strictly below are adversarial
    intercept : float
        Logistic intercept used during fitting only
    metadata : dict
        Training settings and counters
    """

    omega: np.ndarray
    omega_prime: np.ndarray
    threshold: float
    intercept: float = 0.0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=np.float64)
        omega_prime = np.asarray(self.omega_prime, dtype=np.float64)
        if omega.shape != omega_prime.shape:
            raise DomainError('omega and omega_prime differ in length')
        if np.any(omega < 0) or np.any(omega_prime < 0):
            raise DomainError('detector weights must be nonnegative')
        object.__setattr__(self, 'omega', omega)
        object.__setattr__(self, 'omega_prime', omega_prime)

    @property
    def layer_count(self) -> int:
        return len(self.omega)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'omega': [float(v) for v in self.omega],
            'omega_prime': [float(v) for v in self.omega_prime],
            'threshold': float(self.threshold),
            'intercept': float(self.intercept),
            'metadata': dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'LinearDetector':
        return cls(data['omega'], data['omega_prime'],
                   float(data['threshold']), float(data.get('intercept', 0.0)),
                   dict(data.get('metadata', {})))


def joint_similarity(det: LinearDetector, f: SimilarityFeatures) -> float:
    """
    ``sum(omega * rank1) - sum(omega_prime * rank2)``, skipping missing
    components.

    Raises
    ------
    DomainError
        If the feature length differs from the detector's
    """
    if f.layer_count != det.layer_count:
        raise DomainError(
            f'features have {f.layer_count} layers, detector '
            f'{det.layer_count}'
        )
    rank1, rank2 = f.effective()
    return float(det.omega @ rank1 - det.omega_prime @ rank2)


def _design_matrix(features: Sequence[SimilarityFeatures]) -> np.ndarray:
    rows = []
    for f in features:
        rank1, rank2 = f.effective()
        rows.append(np.concatenate([rank1, -rank2]))
    return np.array(rows, dtype=np.float64)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def youden_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """
    Threshold maximising TPR - FPR with normals as positives.

    An image is normal when its score is at least the threshold; ties
    between candidate thresholds go to the smallest.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    normals = labels == NORMAL
    best, best_j = -np.inf, -np.inf
    for candidate in np.unique(scores):
        flagged_normal = scores >= candidate
        tpr = np.mean(flagged_normal[normals])
        fpr = np.mean(flagged_normal[~normals])
        if tpr - fpr > best_j:
            best, best_j = float(candidate), tpr - fpr
    return best


def train_linear_detector(features: Sequence[SimilarityFeatures],
                          labels: Sequence[int],
                          cfg: DetectorConfig) -> LinearDetector:
    """
    Fit the joint-similarity weights by seeded SGD.

    Minimises the logistic loss of ``label`` (1 = normal, 0 = adversarial)
    against ``score + intercept`` plus an elastic-net penalty, projecting
    the weights onto the nonnegative orthant after every step. The
    threshold is then set by Youden's J on the training scores.

    Raises
    ------
    DomainError
        If only one label is present or lengths disagree
    """
    cfg.validate()
    y = np.asarray(labels, dtype=np.float64)
    if len(features) != len(y):
        raise DomainError('features and labels differ in length')
    if len(np.unique(y)) < 2 or not set(np.unique(y)) <= {0.0, 1.0}:
        raise DomainError('training needs both normal and adversarial labels')
    lengths = {f.layer_count for f in features}
    if len(lengths) != 1:
        raise DomainError('feature vectors differ in length')

    X = _design_matrix(features)
    n, width = X.shape
    weights = np.zeros(width)
    intercept = 0.0
    rng = np.random.default_rng(cfg.seed)
    l1 = cfg.alpha * cfg.l1_ratio
    l2 = cfg.alpha * (1.0 - cfg.l1_ratio)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            error = _sigmoid(X[batch] @ weights + intercept) - y[batch]
            grad = X[batch].T @ error / len(batch)
            grad += l2 * weights + l1 * np.sign(weights)
            weights = np.maximum(weights - cfg.learning_rate * grad, 0.0)
            intercept -= cfg.learning_rate * float(error.mean())
    if np.any(weights < 0):
        raise InternalInvariantError('projection left a negative weight')

    layers = width // 2
    scores = X @ weights
    threshold = youden_threshold(scores, y)
    metadata = {
        'epochs': cfg.epochs,
        'l1_ratio': cfg.l1_ratio,
        'alpha': cfg.alpha,
        'learning_rate': cfg.learning_rate,
        'batch_size': cfg.batch_size,
        'seed': cfg.seed,
        'train_size': int(n),
        'train_normals': int(y.sum()),
    }
    logger.info('trained detector on %d samples, threshold %.6g', n,
                threshold)
    return LinearDetector(weights[:layers], weights[layers:], threshold,
                          intercept, metadata)


class Verdict(str, enum.Enum):
    NORMAL = 'normal'
    ADVERSARIAL = 'adversarial'


def detect(det: LinearDetector, f: SimilarityFeatures) -> Verdict:
    """Adversarial iff the joint similarity is strictly below threshold."""
    if joint_similarity(det, f) < det.threshold:
        return Verdict.ADVERSARIAL
    return Verdict.NORMAL


def score_all(det: LinearDetector,
              features: Sequence[SimilarityFeatures]) -> np.ndarray:
    return np.array([joint_similarity(det, f) for f in features])


def _check_binary(labels: np.ndarray) -> None:
    if not np.any(labels == 1) or not np.any(labels == 0):
        raise DomainError('ROC needs both positive and negative labels')


def roc_auc(scores: Sequence[float],
            labels: Sequence[int]) -> Tuple[float, List[Tuple[float, float]]]:
    """
    Area under the ROC curve with label 1 as the positive class.

    Equal scores are grouped into one curve step, which gives the
    midrank (Mann-Whitney) value for ties.

    Returns
    -------
    tuple
        ``(auc, curve)`` where ``curve`` runs from (0, 0) to (1, 1) as
        (fpr, tpr) points

    Raises
    ------
    DomainError
        If only one label is present
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise DomainError('scores and labels differ in length')
    _check_binary(labels)
    positives = int(np.sum(labels == 1))
    negatives = int(np.sum(labels == 0))

    order = np.argsort(-scores, kind='stable')
    sorted_scores = scores[order]
    sorted_pos = (labels[order] == 1).astype(np.int64)
    # last index of each group of equal scores
    group_ends = np.flatnonzero(np.diff(sorted_scores) != 0)
    group_ends = np.append(group_ends, len(scores) - 1)
    tps = np.cumsum(sorted_pos)[group_ends]
    fps = (group_ends + 1) - tps

    tpr = np.concatenate([[0.0], tps / positives])
    fpr = np.concatenate([[0.0], fps / negatives])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return auc, list(zip(fpr.tolist(), tpr.tolist()))


def threshold_at_fpr(normal_scores: Sequence[float], fpr: float) -> float:
    """
    Threshold flagging at most ``fpr`` of normal images as adversarial.

    Returns the smallest normal score ``t`` such that the share of normal
    scores strictly below ``t`` does not exceed ``fpr``.
    """
    if not 0.0 <= fpr < 1.0:
        raise DomainError('fpr must be in [0, 1)')
    scores = np.sort(np.asarray(normal_scores, dtype=np.float64))
    if scores.size == 0:
        raise DomainError('no normal scores to calibrate on')
    k = int(np.floor(fpr * len(scores)))
    return float(scores[k])


def split_indices(labels: Sequence[int], fraction: float,
                  seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Seeded stratified split into training and evaluation indices.

    Each label keeps at least one sample on each side when it has two.
    Every label is shuffled by its own generator, so the partition of one
    label does not depend on how many samples the others have.
    """
    labels = np.asarray(labels)
    train, evaluation = [], []
    for value in np.unique(labels):
        members = np.flatnonzero(labels == value)
        rng = np.random.default_rng([seed, int(value)])
        members = members[rng.permutation(len(members))]
        size = int(round(fraction * len(members)))
        if len(members) > 1:
            size = min(max(size, 1), len(members) - 1)
        train.append(members[:size])
        evaluation.append(members[size:])
    return (np.sort(np.concatenate(train)),
            np.sort(np.concatenate(evaluation)))
