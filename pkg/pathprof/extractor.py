"""
Effective path extraction for pathprof.

Walks a network backward from one logit neuron. For every active neuron
the smallest set of (input, weight) pairs whose products cover ``theta``
of the neuron's pre-nonlinearity value is kept; the inputs of the kept
pairs become the active neurons of the layer below. The result is the
per-layer neuron, synapse and weight sets of one input.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from pathprof.bitset import Bitset
from pathprof.engine import (
    ActivationTrace, AvgPool2D, Conv2D, Dense, Flatten, MaxPool2D, Network,
    ReLU, ResidualAdd, forward_trace, receptive_field
)
from pathprof.errors import (
    ContractViolationError, DomainError, ExtractionUnsupportedError,
    InternalInvariantError
)

logger = logging.getLogger(__name__)

# Partial sums may trail the float64 total by rounding only.
_REL_TOL = 1e-9

DEFAULT_THETA = 0.5


@dataclass(frozen=True)
class ExtractionConfig:
    """
    Parameters of one extraction.

    Attributes
    ----------
    theta : float
        Fraction of each neuron's value the kept pairs must cover, in (0, 1]
    start_rank : int
        Rank of the class neuron extraction starts from (1 = predicted)
    num_layers : int, optional
        Number of path layers, counted backward from the last, to extract;
        None extracts all of them
    """

    theta: float = DEFAULT_THETA
    start_rank: int = 1
    num_layers: Optional[int] = None

    def validate(self, num_classes: Optional[int] = None) -> 'ExtractionConfig':
        if not 0.0 < self.theta <= 1.0:
            raise DomainError(f'theta must be in (0, 1], got {self.theta}')
        if self.start_rank < 1:
            raise DomainError('start_rank must be positive')
        if num_classes is not None and self.start_rank > num_classes:
            raise DomainError(
                f'start_rank {self.start_rank} exceeds {num_classes} classes'
            )
        if self.num_layers is not None and self.num_layers < 1:
            raise DomainError('num_layers must be positive or None (all)')
        return self


@dataclass(frozen=True, eq=False)
class LayerSets:
    """Neuron, synapse and weight sets of one path layer."""

    neurons: Bitset
    synapses: Bitset
    weights: Bitset

    def union(self, other: 'LayerSets') -> 'LayerSets':
        return LayerSets(
            self.neurons | other.neurons,
            self.synapses | other.synapses,
            self.weights | other.weights,
        )

    def same_sets(self, other: 'LayerSets') -> bool:
        return (self.neurons == other.neurons
                and self.synapses == other.synapses
                and self.weights == other.weights)

    @classmethod
    def empty(cls, capacities: Tuple[int, int, int]) -> 'LayerSets':
        neurons, synapses, weights = capacities
        return cls(Bitset.empty(neurons), Bitset.empty(synapses),
                   Bitset.empty(weights))


@dataclass(frozen=True, eq=False)
class EffectivePath:
    """
    Path sets of a single extraction.

    Attributes
    ----------
    layers : Mapping[int, LayerSets]
        Sets per extracted path layer, keyed by network layer index
    fingerprint : bytes
        Topology hash of the source network
    theta : float
        Contribution ratio used
    start_rank : int
        Rank of the starting class neuron
    class_id : int
        The starting class neuron itself
    """

    layers: Mapping[int, LayerSets]
    fingerprint: bytes
    theta: float
    start_rank: int
    class_id: int

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layer_indices(self) -> List[int]:
        return sorted(self.layers)

    def items(self) -> Iterator[Tuple[int, LayerSets]]:
        for index in self.layer_indices():
            yield index, self.layers[index]

    def synapse_count(self) -> int:
        return sum(sets.synapses.count() for sets in self.layers.values())

    def weight_count(self) -> int:
        return sum(sets.weights.count() for sets in self.layers.values())

    def same_sets(self, other) -> bool:
        return (
            self.layer_indices() == other.layer_indices()
            and all(self.layers[i].same_sets(other.layers[i])
                    for i in self.layers)
        )


@dataclass(frozen=True, eq=False)
class LayerExtraction:
    """Result of walking one layer backward."""

    active_inputs: np.ndarray
    synapses: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    source_inputs: Optional[np.ndarray] = None


def _greedy_selection(products: np.ndarray,
                      targets: np.ndarray) -> np.ndarray:
    """
    Row-wise shortest prefix of positive products, in descending product
    order with ties by ascending column, whose sum reaches ``targets``.

    Returns a boolean mask shaped like ``products``.
    """
    order = np.argsort(-products, axis=1, kind='stable')
    ranked = np.take_along_axis(products, order, axis=1)
    positive = ranked > 0
    partial = np.cumsum(np.where(positive, ranked, 0.0), axis=1)
    slack = _REL_TOL * np.abs(products).sum(axis=1)
    reached = partial >= (targets - slack)[:, None]
    unreachable = ~reached[:, -1]
    if np.any(unreachable):
        raise InternalInvariantError(
            f'{int(unreachable.sum())} neuron(s) cannot reach their '
            'contribution threshold'
        )
    needed = reached.argmax(axis=1) + 1
    keep_sorted = (
        (np.arange(products.shape[1])[None, :] < needed[:, None]) & positive
    )
    mask = np.zeros_like(keep_sorted)
    np.put_along_axis(mask, order, keep_sorted, axis=1)
    return mask


def select_min_contributors(
    input_values: Sequence[float], weights: Sequence[float],
    output_value: float, theta: float
) -> frozenset:
    """
    Smallest set of pairs whose products cover ``theta * output_value``.

    Parameters
    ----------
    input_values : Sequence[float]
        Input neuron values (a bias enters as a virtual input of 1)
    weights : Sequence[float]
        Matching weights
    output_value : float
        Pre-nonlinearity value of the output neuron; must be positive
    theta : float
        Contribution ratio in (0, 1]

    Returns
    -------
    frozenset of int
        Selected pair indices

    Raises
    ------
    ContractViolationError
        If ``output_value`` is not positive
    InternalInvariantError
        If the positive products cannot reach the threshold
    """
    values = np.asarray(input_values, dtype=np.float64).reshape(-1)
    coeffs = np.asarray(weights, dtype=np.float64).reshape(-1)
    if values.shape != coeffs.shape:
        raise DomainError('input_values and weights differ in length')
    if not 0.0 < theta <= 1.0:
        raise DomainError(f'theta must be in (0, 1], got {theta}')
    if not output_value > 0:
        raise ContractViolationError(
            f'output value must be positive, got {output_value}'
        )
    if values.size == 0:
        raise InternalInvariantError('no pairs to select from')
    mask = _greedy_selection(
        (values * coeffs)[None, :], np.array([theta * float(output_value)])
    )[0]
    return frozenset(int(i) for i in np.flatnonzero(mask))


def _affine_extraction(net: Network, index: int, trace: ActivationTrace,
                       rows: np.ndarray, theta: float,
                       start: bool) -> LayerExtraction:
    layer = net.layers[index]
    inputs, weight_ids = receptive_field(net, index)
    fan_in = inputs.shape[1]
    x = trace.layer_input(index).reshape(-1).astype(np.float64)
    # index -1 (zero padding) reads the appended zero
    padded = np.append(x, 0.0)
    n_out = int(np.prod(net.shapes[index]))
    if isinstance(layer, Dense):
        coeffs = layer.weights.astype(np.float64)[rows]
        bias = layer.bias.astype(np.float64)[rows]
    else:
        positions = n_out // layer.out_channels
        channel = rows // positions
        coeffs = layer.weights.reshape(layer.out_channels, -1)
        coeffs = coeffs.astype(np.float64)[channel]
        bias = layer.bias.astype(np.float64)[channel]
    products = np.concatenate(
        [padded[inputs[rows]] * coeffs, bias[:, None]], axis=1
    )
    outputs = products.sum(axis=1)
    expand = outputs > 0
    if start and not expand.all():
        logger.debug('start neuron %s of layer %d has non-positive value '
                     '%.6g', rows, index, outputs[0])
        expand[:] = True
    chosen_rows = rows[expand]
    mask = _greedy_selection(products[expand], theta * outputs[expand])
    pair_rows, pair_cols = np.nonzero(mask[:, :fan_in])
    if start and not mask[:, :fan_in].any():
        logger.warning('start neuron of layer %d has no positive '
                       'contribution; its path is empty', index)
    outs = chosen_rows[pair_rows]

    synapses = np.zeros(n_out * fan_in, dtype=bool)
    synapses[outs * fan_in + pair_cols] = True
    weights = np.zeros(layer.weights.size, dtype=bool)
    weights[weight_ids[outs, pair_cols]] = True
    active = np.zeros(x.size, dtype=bool)
    active[inputs[outs, pair_cols]] = True
    return LayerExtraction(active, synapses, weights)


def _pool_extraction(net: Network, index: int, trace: ActivationTrace,
                     rows: np.ndarray, theta: float) -> LayerExtraction:
    layer = net.layers[index]
    inputs, _ = receptive_field(net, index)
    fan_in = inputs.shape[1]
    x = trace.layer_input(index).reshape(-1).astype(np.float64)
    n_out = int(np.prod(net.shapes[index]))
    values = x[inputs[rows]]
    if isinstance(layer, MaxPool2D):
        rows = rows[values.max(axis=1) > 0] if len(rows) else rows
        values = x[inputs[rows]]
        # first maximum = lowest flat input index
        outs, cols = rows, values.argmax(axis=1)
    else:
        # average pooling = convolution with all-ones weights
        outputs = values.sum(axis=1)
        expand = outputs > 0
        mask = _greedy_selection(values[expand], theta * outputs[expand])
        pair_rows, cols = np.nonzero(mask)
        outs = rows[expand][pair_rows]
    synapses = np.zeros(n_out * fan_in, dtype=bool)
    synapses[outs * fan_in + cols] = True
    active = np.zeros(x.size, dtype=bool)
    active[inputs[outs, cols]] = True
    return LayerExtraction(active, synapses, np.zeros(0, dtype=bool))


def extract_layer(net: Network, index: int, trace: ActivationTrace,
                  active_outputs: np.ndarray, theta: float,
                  start: bool = False) -> LayerExtraction:
    """
    Walk one layer backward from its active output neurons.

    Parameters
    ----------
    net : Network
        Network the trace belongs to
    index : int
        Layer index
    trace : ActivationTrace
        Forward trace of the input being explained
    active_outputs : np.ndarray
        Boolean mask over the layer's flat outputs
    theta : float
        Contribution ratio
    start : bool
        True for the layer holding the starting class neuron, which is
        expanded even when its value is not positive

    Returns
    -------
    LayerExtraction
        Synapse and weight masks (path layers only) plus the active
        input mask; residual layers also report the demand on their
        source layer
    """
    layer = net.layers[index]
    active_outputs = np.asarray(active_outputs, dtype=bool).reshape(-1)
    rows = np.flatnonzero(active_outputs)
    if isinstance(layer, (Dense, Conv2D)):
        return _affine_extraction(net, index, trace, rows, theta, start)
    if isinstance(layer, (MaxPool2D, AvgPool2D)):
        return _pool_extraction(net, index, trace, rows, theta)
    if isinstance(layer, (ReLU, Flatten)):
        return LayerExtraction(active_outputs.copy())
    if isinstance(layer, ResidualAdd):
        return LayerExtraction(active_outputs.copy(),
                               source_inputs=active_outputs.copy())
    raise ExtractionUnsupportedError(
        f'cannot extract through layer {index} of type {layer.kind!r}'
    )


def _check_trace(net: Network, trace: ActivationTrace) -> None:
    if len(trace.post) != len(net.layers):
        raise DomainError('trace does not come from this network')
    for index, values in enumerate(trace.post):
        if tuple(values.shape) != net.shapes[index]:
            raise DomainError(
                f'trace layer {index} has shape {values.shape}, network '
                f'expects {net.shapes[index]}'
            )


def extract_effective_path(net: Network, trace: ActivationTrace,
                           cfg: ExtractionConfig) -> EffectivePath:
    """
    Extract the effective path of one traced input.

    Starts from the rank-``cfg.start_rank`` class neuron and walks back
    through ``cfg.num_layers`` path layers (all when None).

    Parameters
    ----------
    net : Network
        Network that produced ``trace``
    trace : ActivationTrace
        Forward trace of the input
    cfg : ExtractionConfig
        Extraction parameters

    Returns
    -------
    EffectivePath
        Per-layer neuron, synapse and weight sets
    """
    cfg.validate(net.num_classes)
    _check_trace(net, trace)
    path_layers = net.path_layers()
    if not path_layers:
        raise ExtractionUnsupportedError('network has no path layers')
    depth = len(path_layers)
    if cfg.num_layers is not None:
        depth = min(depth, cfg.num_layers)
    first = path_layers[-depth]

    last = len(net.layers) - 1
    start_layer = path_layers[-1]
    class_id = trace.predicted_rank[cfg.start_rank - 1]
    demand: Dict[int, np.ndarray] = {
        last: np.zeros(net.num_classes, dtype=bool)
    }
    demand[last][class_id] = True

    sets: Dict[int, LayerSets] = {}
    for index in range(last, first - 1, -1):
        size = int(np.prod(net.shapes[index]))
        active = demand.pop(index, None)
        if active is None:
            active = np.zeros(size, dtype=bool)
        step = extract_layer(net, index, trace, active, cfg.theta,
                             start=index == start_layer)
        if net.layers[index].has_synapses:
            sets[index] = LayerSets(
                Bitset(active), Bitset(step.synapses), Bitset(step.weights)
            )
        if index > 0:
            _merge_demand(demand, index - 1, step.active_inputs)
        if step.source_inputs is not None:
            src = net.layers[index].source_layer_index
            _merge_demand(demand, src, step.source_inputs)

    return EffectivePath(
        layers={i: sets[i] for i in sorted(sets)},
        fingerprint=net.fingerprint(),
        theta=cfg.theta,
        start_rank=cfg.start_rank,
        class_id=class_id,
    )


def _merge_demand(demand: Dict[int, np.ndarray], index: int,
                  mask: np.ndarray) -> None:
    if index in demand:
        demand[index] = demand[index] | mask
    else:
        demand[index] = mask


def extract_image_path(
    net: Network, image: np.ndarray, cfg: ExtractionConfig
) -> Tuple[ActivationTrace, EffectivePath]:
    """Trace ``image`` and extract its path in one call."""
    trace = forward_trace(net, image)
    return trace, extract_effective_path(net, trace, cfg)


def path_size(path: EffectivePath) -> Dict[str, int]:
    """Total neuron, synapse and weight counts of a path."""
    return {
        'neurons': sum(s.neurons.count() for s in path.layers.values()),
        'synapses': path.synapse_count(),
        'weights': path.weight_count(),
    }
