"""
Artifact storage utilities for pathprof

Handles the on-disk layout of models (JSON manifest plus raw float32
blobs), adversarial sets (JSON manifest plus one float32 image blob),
detectors (JSON) and run manifests.
"""

import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import numpy as np
from werkzeug.utils import secure_filename

from pathprof.attacks import AdversarialSample, AttackConfig
from pathprof.detector import LinearDetector
from pathprof.engine import Network, layer_from_config
from pathprof.errors import ArtifactMissingError, DomainError, FormatError

logger = logging.getLogger(__name__)

MODEL_FORMAT = 'pathprof-model'
ADVERSARIAL_FORMAT = 'pathprof-adversarial'
DETECTOR_FORMAT = 'pathprof-detector'
FORMAT_VERSION = 1

_FLOAT = np.dtype('<f4')


def _ensure_dir(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def write_json(data: Mapping[str, Any], path: str) -> None:
    """Write JSON with sorted keys so equal data gives equal bytes."""
    _ensure_dir(path)
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write('\n')
    except OSError as e:
        raise DomainError(f'{path}: cannot write ({e.strerror})') from e


def read_json(path: str, kind: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ArtifactMissingError(kind, path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f'invalid JSON: {e.msg}', e.pos, path) from e


def _check_format(data: Mapping[str, Any], expected: str, path: str) -> None:
    if data.get('format') != expected:
        raise FormatError(f'not a {expected} manifest', path=path)
    if data.get('version') != FORMAT_VERSION:
        raise FormatError(
            f'unsupported version {data.get("version")!r}', path=path
        )


def _read_blob(path: str, shape: Sequence[int], length: int) -> np.ndarray:
    if not os.path.exists(path):
        raise ArtifactMissingError('tensor blob', path)
    with open(path, 'rb') as f:
        raw = f.read()
    expected = int(np.prod(shape, dtype=np.int64)) * _FLOAT.itemsize
    if len(raw) != length or length != expected:
        raise FormatError(
            f'blob holds {len(raw)} bytes, manifest says {length}, '
            f'shape needs {expected}', len(raw), path
        )
    return np.frombuffer(raw, dtype=_FLOAT).reshape(shape).astype(np.float32)


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def save_model(net: Network, path: str) -> List[str]:
    """
    Save ``net`` as a manifest at ``path`` plus one blob per tensor.

    Returns
    -------
    list of str
        Every file written, manifest last
    """
    directory = os.path.dirname(path) or '.'
    os.makedirs(directory, exist_ok=True)
    written = []
    layers = []
    for index, layer in enumerate(net.layers):
        entry: Dict[str, Any] = dict(layer.config())
        tensors = {}
        for name, tensor in layer.tensors().items():
            filename = secure_filename(f'layer{index:02d}_{name}.f32')
            payload = np.ascontiguousarray(tensor, dtype=_FLOAT).tobytes()
            blob_path = os.path.join(directory, filename)
            with open(blob_path, 'wb') as f:
                f.write(payload)
            written.append(blob_path)
            tensors[name] = {'file': filename, 'shape': list(tensor.shape),
                             'bytes': len(payload)}
        if tensors:
            entry['tensors'] = tensors
        layers.append(entry)
    write_json({
        'format': MODEL_FORMAT,
        'version': FORMAT_VERSION,
        'input_shape': list(net.input_shape),
        'layers': layers,
        'history': [float(v) for v in net.history],
        'fingerprint': net.fingerprint().hex(),
    }, path)
    written.append(path)
    logger.info('saved model with %d parameters to %s',
                net.parameter_count, path)
    return written


def load_model(path: str) -> Network:
    """
    Load a model saved by ``save_model``; tensors reload bit-exactly.

    Raises
    ------
    ArtifactMissingError
        If the manifest or a blob is missing
    FormatError
        If the manifest or a blob is malformed
    """
    manifest = read_json(path, 'model')
    _check_format(manifest, MODEL_FORMAT, path)
    directory = os.path.dirname(path) or '.'
    layers = []
    try:
        for entry in manifest['layers']:
            config = {k: v for k, v in entry.items() if k != 'tensors'}
            tensors = {
                name: _read_blob(os.path.join(directory, spec['file']),
                                 spec['shape'], spec['bytes'])
                for name, spec in entry.get('tensors', {}).items()
            }
            layers.append(layer_from_config(config, tensors))
        net = Network(layers, tuple(manifest['input_shape']),
                      tuple(manifest.get('history', ())))
    except (KeyError, TypeError) as e:
        raise FormatError(f'incomplete model manifest ({e})',
                          path=path) from e
    except FormatError as e:
        if e.path is not None:
            raise
        raise FormatError(str(e), path=path) from e
    expected = manifest.get('fingerprint')
    if expected and expected != net.fingerprint().hex():
        raise FormatError('topology fingerprint mismatch', path=path)
    return net


# ---------------------------------------------------------------------------
# Adversarial sets
# ---------------------------------------------------------------------------

def adversarial_set_dir(root: str, name: str) -> str:
    return os.path.join(root, secure_filename(name) or 'attack')


def save_adversarial_set(samples: Sequence[AdversarialSample],
                         cfg: AttackConfig, directory: str,
                         image_shape: Tuple[int, ...]) -> List[str]:
    """Write ``manifest.json`` and ``images.f32`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    images = np.zeros((len(samples),) + tuple(image_shape), dtype=_FLOAT)
    for i, sample in enumerate(samples):
        images[i] = sample.image.reshape(image_shape)
    blob_path = os.path.join(directory, 'images.f32')
    payload = images.tobytes()
    with open(blob_path, 'wb') as f:
        f.write(payload)
    manifest_path = os.path.join(directory, 'manifest.json')
    write_json({
        'format': ADVERSARIAL_FORMAT,
        'version': FORMAT_VERSION,
        'attack': cfg.to_dict(),
        'image_shape': list(image_shape),
        'images': {'file': 'images.f32', 'bytes': len(payload)},
        'samples': [s.metadata() for s in samples],
    }, manifest_path)
    return [blob_path, manifest_path]


def load_adversarial_set(
    directory: str
) -> Tuple[AttackConfig, List[AdversarialSample]]:
    manifest_path = os.path.join(directory, 'manifest.json')
    manifest = read_json(manifest_path, 'adversarial set')
    _check_format(manifest, ADVERSARIAL_FORMAT, manifest_path)
    try:
        cfg = AttackConfig.from_dict(manifest['attack'])
        shape = tuple(manifest['image_shape'])
        meta = manifest['samples']
        images = _read_blob(
            os.path.join(directory, manifest['images']['file']),
            (len(meta),) + shape, manifest['images']['bytes']
        )
        samples = [AdversarialSample.from_metadata(m, images[i])
                   for i, m in enumerate(meta)]
    except (KeyError, TypeError) as e:
        raise FormatError(f'incomplete adversarial manifest ({e})',
                          path=manifest_path) from e
    return cfg, samples


# ---------------------------------------------------------------------------
# Detectors and run manifests
# ---------------------------------------------------------------------------

def save_detector(det: LinearDetector, path: str) -> List[str]:
    data = det.to_dict()
    data.update(format=DETECTOR_FORMAT, version=FORMAT_VERSION)
    write_json(data, path)
    return [path]


def load_detector(path: str) -> LinearDetector:
    data = read_json(path, 'detector')
    _check_format(data, DETECTOR_FORMAT, path)
    try:
        return LinearDetector.from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f'incomplete detector file ({e})', path=path) from e


def write_run_manifest(path: str, command: str, config: Mapping[str, Any],
                       arguments: Mapping[str, Any],
                       outputs: Sequence[str]) -> str:
    """
    Record the resolved config, subcommand arguments and output checksums
    of a run.

    Feeding the manifest back through ``--config`` replays the run.
    """
    write_json({
        'command': command,
        'config': dict(config),
        'arguments': dict(arguments),
        'seed': config.get('seed'),
        'outputs': {
            out: sha256_file(out) for out in sorted(set(outputs))
            if os.path.exists(out)
        },
    }, path)
    return path
