"""
Adversarial and unrecognizable input generation.

Gradient-sign attacks (FGSM and its iterative form BIM, targeted or not)
plus uniformly random images filtered by prediction confidence. Every
output stays inside the pixel range and the L-infinity budget.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from pathprof.engine import (
    Network, forward_trace, loss_and_input_gradient, predict_logits, softmax
)
from pathprof.errors import DomainError, GenerationError, InternalInvariantError
from pathprof.parallel import chunked, map_ordered

logger = logging.getLogger(__name__)

METHODS = ('fgsm', 'bim', 'random')

# Draws allowed per requested random image.
MAX_ATTEMPTS_PER_IMAGE = 1000


@dataclass(frozen=True)
class AttackConfig:
    """
    Parameters of one attack.

    Attributes
    ----------
    name : str
        Label of the generated set (``fgsm``, ``bim-eps015``...)
    method : str
        ``fgsm``, ``bim`` or ``random``
    epsilon : float
        L-infinity budget
    step_size : float, optional
        Per-iteration step for BIM; defaults to ``epsilon / iterations``
    iterations : int
        BIM iterations
    targeted : bool
        Descend toward ``target_class`` instead of ascending the true loss
    target_class : int, optional
        Required iff ``targeted``
    clip_range : tuple of float
        Valid pixel bounds
    seed : int
        Seed of the random generator
    confidence_floor : float
        Minimum top-1 softmax confidence of kept random images
    count : int, optional
        Number of random images; defaults to the evaluation set size
    """

    name: str = 'fgsm'
    method: str = 'fgsm'
    epsilon: float = 0.1
    step_size: Optional[float] = None
    iterations: int = 1
    targeted: bool = False
    target_class: Optional[int] = None
    clip_range: Tuple[float, float] = (0.0, 1.0)
    seed: int = 0
    confidence_floor: float = 0.0
    count: Optional[int] = None

    @property
    def step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / self.iterations

    def validate(self) -> 'AttackConfig':
        if self.method not in METHODS:
            raise DomainError(
                f'unknown attack method {self.method!r}; choose from {METHODS}'
            )
        if self.epsilon < 0:
            raise DomainError('epsilon must be nonnegative')
        if self.iterations < 1:
            raise DomainError('iterations must be positive')
        if self.method == 'bim':
            if self.step <= 0:
                raise DomainError('BIM step size must be positive')
            if self.step > self.epsilon:
                raise DomainError('BIM step size must not exceed epsilon')
        if self.targeted != (self.target_class is not None):
            raise DomainError(
                'target_class must be given exactly when targeted is set'
            )
        low, high = self.clip_range
        if not low < high:
            raise DomainError('clip_range must satisfy min < max')
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise DomainError('confidence_floor must be in [0, 1]')
        if self.count is not None and self.count < 0:
            raise DomainError('count must be nonnegative')
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['clip_range'] = list(self.clip_range)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'AttackConfig':
        data = dict(data)
        if 'clip_range' in data:
            data['clip_range'] = tuple(float(v) for v in data['clip_range'])
        data.setdefault('method', data.get('name', 'fgsm'))
        return cls(**data)


def _project(candidate: np.ndarray, origin: np.ndarray, epsilon: float,
             clip_range: Tuple[float, float]) -> np.ndarray:
    """Clip to the epsilon box around ``origin`` intersected with the range."""
    origin = origin.astype(np.float64)
    low = np.maximum(origin - epsilon, clip_range[0])
    high = np.minimum(origin + epsilon, clip_range[1])
    out = np.clip(candidate, low, high).astype(np.float32)
    # float32 rounding may land half an ulp outside the box
    out = np.where(out > high, np.nextafter(out, np.float32(-np.inf)), out)
    out = np.where(out < low, np.nextafter(out, np.float32(np.inf)), out)
    return out.astype(np.float32)


def _sign_step(net: Network, x: np.ndarray, origin: np.ndarray, step: float,
               cfg: AttackConfig, label: Optional[int]) -> np.ndarray:
    if cfg.targeted:
        _, grad = loss_and_input_gradient(net, x, cfg.target_class, True)
        direction = -np.sign(grad)
    else:
        _, grad = loss_and_input_gradient(net, x, label, False)
        direction = np.sign(grad)
    candidate = x.astype(np.float64) + step * direction
    return _project(candidate, origin, cfg.epsilon, cfg.clip_range)


def _check_source(image: np.ndarray, cfg: AttackConfig,
                  label: Optional[int]) -> np.ndarray:
    cfg.validate()
    if not cfg.targeted and label is None:
        raise DomainError('a non-targeted attack needs the true label')
    image = np.asarray(image, dtype=np.float32)
    low, high = cfg.clip_range
    if image.size and (image.min() < low or image.max() > high):
        raise DomainError('source image lies outside clip_range')
    return image


def fgsm(net: Network, image: np.ndarray, cfg: AttackConfig,
         label: Optional[int] = None) -> np.ndarray:
    """
    Fast gradient sign method.

    Non-targeted: ``clip(x + eps * sign(grad loss(x, label)))``.
    Targeted: ``clip(x - eps * sign(grad loss(x, target_class)))``.

    Raises
    ------
    DomainError
        If a non-targeted attack gets no label
    """
    image = _check_source(image, cfg, label)
    if cfg.epsilon == 0:
        return image.copy()
    return _sign_step(net, image, image, cfg.epsilon, cfg, label)


def bim(net: Network, image: np.ndarray, cfg: AttackConfig,
        label: Optional[int] = None) -> np.ndarray:
    """Basic iterative method: repeated sign steps projected to the box."""
    image = _check_source(image, cfg, label)
    x = image.copy()
    for _ in range(cfg.iterations):
        x = _sign_step(net, x, image, cfg.step, cfg, label)
        if np.max(np.abs(x.astype(np.float64) - image), initial=0.0) \
                > cfg.epsilon:
            raise InternalInvariantError('BIM iterate left the epsilon ball')
    return x


def random_unrecognizable(
    net: Network, count: int, seed: int = 0, confidence_floor: float = 0.0,
    clip_range: Tuple[float, float] = (0.0, 1.0), batch_size: int = 256
) -> List[np.ndarray]:
    """
    Uniform random images the network classifies with high confidence.

    Parameters
    ----------
    net : Network
        Network judging confidence
    count : int
        Number of images wanted
    seed : int
        Generator seed
    confidence_floor : float
        Minimum top-1 softmax probability; 0 keeps every draw
    clip_range : tuple of float
        Pixel bounds of the uniform draw

    Returns
    -------
    list of np.ndarray
        ``count`` accepted images in draw order

    Raises
    ------
    GenerationError
        When ``1000 * count`` draws do not yield enough images
    """
    if count < 0:
        raise DomainError('count must be nonnegative')
    rng = np.random.default_rng(seed)
    limit = MAX_ATTEMPTS_PER_IMAGE * count
    accepted: List[np.ndarray] = []
    attempts = 0
    while len(accepted) < count:
        if attempts >= limit:
            raise GenerationError('random image generation gave up',
                                  len(accepted), attempts)
        size = min(batch_size, limit - attempts)
        draws = rng.uniform(clip_range[0], clip_range[1],
                            size=(size,) + net.input_shape).astype(np.float32)
        confidence = softmax(predict_logits(net, draws)).max(axis=1)
        for image, conf in zip(draws, confidence):
            attempts += 1
            if conf >= confidence_floor:
                accepted.append(image)
                if len(accepted) == count:
                    break
    if count:
        logger.info('random images: accepted %d of %d draws (%.2f%%)',
                    count, attempts, 100.0 * count / attempts)
    return accepted


@dataclass(frozen=True, eq=False)
class AdversarialSample:
    """
    One generated input with its bookkeeping.

    ``label`` is the source image's true label (-1 for random images);
    ``success`` tells whether the attack changed the prediction as asked.
    """

    source_id: int
    attack: str
    image: np.ndarray
    label: int
    original_prediction: int
    predicted: int
    success: bool

    def metadata(self) -> Dict[str, Any]:
        return {
            'source_id': int(self.source_id),
            'attack': self.attack,
            'label': int(self.label),
            'original_prediction': int(self.original_prediction),
            'predicted': int(self.predicted),
            'success': bool(self.success),
        }

    @classmethod
    def from_metadata(cls, meta: Mapping[str, Any],
                      image: np.ndarray) -> 'AdversarialSample':
        return cls(meta['source_id'], meta['attack'], image, meta['label'],
                   meta['original_prediction'], meta['predicted'],
                   meta['success'])


def _attack_chunk(task) -> List[AdversarialSample]:
    net, images, labels, first_id, cfg = task
    attack = fgsm if cfg.method == 'fgsm' else bim
    samples = []
    for offset, (image, label) in enumerate(zip(images, labels)):
        label = int(label)
        before = forward_trace(net, image).predicted_rank[0]
        adv = attack(net, image, cfg, label)
        after = forward_trace(net, adv).predicted_rank[0]
        if cfg.targeted:
            success = after == cfg.target_class and before != cfg.target_class
        else:
            success = after != label
        samples.append(AdversarialSample(first_id + offset, cfg.name, adv,
                                         label, before, after, success))
    return samples


def generate_adversarial_set(
    net: Network, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
    jobs: int = 1, chunk_size: int = 64
) -> List[AdversarialSample]:
    """
    Run one attack over a set of source images (or draw random images).

    Parameters
    ----------
    net : Network
        Attacked network
    images : np.ndarray
        Source images shaped (n, *net.input_shape)
    labels : np.ndarray
        True labels of the sources
    cfg : AttackConfig
        Attack parameters
    jobs : int
        Worker processes

    Returns
    -------
    list of AdversarialSample
        One sample per source (or per random image), in source order
    """
    cfg.validate()
    if cfg.method == 'random':
        count = len(labels) if cfg.count is None else cfg.count
        drawn = random_unrecognizable(net, count, cfg.seed,
                                      cfg.confidence_floor, cfg.clip_range)
        samples = []
        for i, image in enumerate(drawn):
            predicted = forward_trace(net, image).predicted_rank[0]
            samples.append(AdversarialSample(i, cfg.name, image, -1,
                                             predicted, predicted, True))
        return samples
    if cfg.targeted and not 0 <= cfg.target_class < net.num_classes:
        raise DomainError(f'target class {cfg.target_class} out of range')
    tasks = [
        (net, images[span], labels[span], span.start, cfg)
        for span in chunked(len(labels), chunk_size)
    ]
    samples = [s for part in map_ordered(_attack_chunk, tasks, jobs)
               for s in part]
    succeeded = sum(s.success for s in samples)
    logger.info('%s: %d of %d attacks succeeded', cfg.name, succeeded,
                len(samples))
    return samples


def successful(samples: Sequence[AdversarialSample]) -> List[AdversarialSample]:
    """Samples whose attack changed the prediction; the rest are logged."""
    kept = [s for s in samples if s.success]
    dropped = len(samples) - len(kept)
    if dropped:
        logger.warning('filtered %d unsuccessful adversarial samples',
                       dropped)
    return kept
