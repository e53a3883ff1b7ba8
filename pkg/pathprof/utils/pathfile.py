"""
EPATH1 codec for effective paths and class profiles.

Layout (all integers little-endian, fixed width)::

    magic        6 bytes  b'EPATH1'
    version      u8
    kind         u8       0 = single path, 1 = profile
    fingerprint  32 bytes
    theta        f64
    depth        u32
    class_id     i32
    start_rank   u32
    image_count  u64
    layer_count  u32
    per layer:
        layer index  u32
        N, S, W:     capacity u64, byte length u64, packed bits
"""

import os
import struct
from typing import Dict, Tuple, Union

from pathprof.algebra import ClassProfile
from pathprof.bitset import Bitset
from pathprof.errors import ArtifactMissingError, FormatError
from pathprof.extractor import EffectivePath, LayerSets

MAGIC = b'EPATH1'
VERSION = 1
KIND_PATH = 0
KIND_PROFILE = 1

_HEADER = struct.Struct('<6sBB32sdIiIQI')
_LAYER = struct.Struct('<I')
_BLOB = struct.Struct('<QQ')

PathOrProfile = Union[EffectivePath, ClassProfile]


def serialize_path(item: PathOrProfile) -> bytes:
    """Encode a path or profile as EPATH1 bytes."""
    if isinstance(item, ClassProfile):
        kind, start_rank, image_count = KIND_PROFILE, 1, item.image_count
    else:
        kind, start_rank, image_count = KIND_PATH, item.start_rank, 1
    parts = [_HEADER.pack(
        MAGIC, VERSION, kind, item.fingerprint, float(item.theta),
        len(item.layers), int(item.class_id), start_rank, image_count,
        len(item.layers)
    )]
    for index in sorted(item.layers):
        sets = item.layers[index]
        parts.append(_LAYER.pack(index))
        for bits in (sets.neurons, sets.synapses, sets.weights):
            payload = bits.to_bytes()
            parts.append(_BLOB.pack(bits.capacity, len(payload)))
            parts.append(payload)
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def unpack(self, fmt: struct.Struct, what: str) -> Tuple:
        if self.offset + fmt.size > len(self.data):
            raise FormatError(f'truncated {what}', self.offset, self.path)
        values = fmt.unpack_from(self.data, self.offset)
        self.offset += fmt.size
        return values

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f'truncated {what}', self.offset, self.path)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk


def deserialize_path(data: bytes, path: str = None) -> PathOrProfile:
    """
    Decode EPATH1 bytes.

    Raises
    ------
    FormatError
        On bad magic or version, truncation, inconsistent lengths or
        trailing bytes; nothing is returned in that case
    """
    reader = _Reader(data, path)
    (magic, version, kind, fingerprint, theta, depth, class_id, start_rank,
     image_count, layer_count) = reader.unpack(_HEADER, 'header')
    if magic != MAGIC:
        raise FormatError(f'bad magic {magic!r}', 0, path)
    if version != VERSION:
        raise FormatError(f'unsupported version {version}', 6, path)
    if kind not in (KIND_PATH, KIND_PROFILE):
        raise FormatError(f'unknown kind {kind}', 7, path)
    if depth != layer_count:
        raise FormatError(
            f'depth {depth} disagrees with layer count {layer_count}',
            _HEADER.size - 4, path
        )

    layers: Dict[int, LayerSets] = {}
    for _ in range(layer_count):
        at = reader.offset
        (index,) = reader.unpack(_LAYER, 'layer index')
        if index in layers:
            raise FormatError(f'duplicate layer {index}', at, path)
        blobs = []
        for name in ('neuron', 'synapse', 'weight'):
            at = reader.offset
            capacity, length = reader.unpack(_BLOB, f'{name} length')
            if length != (capacity + 7) // 8:
                raise FormatError(
                    f'{name} set length {length} does not match capacity '
                    f'{capacity}', at, path
                )
            payload = reader.take(length, f'{name} set')
            try:
                blobs.append(Bitset.from_bytes(capacity, payload))
            except FormatError as e:
                raise FormatError(str(e), at, path) from e
        layers[index] = LayerSets(*blobs)
    if reader.offset != len(data):
        raise FormatError('trailing bytes', reader.offset, path)

    layers = {i: layers[i] for i in sorted(layers)}
    if kind == KIND_PROFILE:
        return ClassProfile(class_id, layers, image_count, theta, fingerprint)
    return EffectivePath(layers, fingerprint, theta, start_rank, class_id)


def save_path(item: PathOrProfile, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(serialize_path(item))


def load_path(path: str) -> PathOrProfile:
    if not os.path.exists(path):
        raise ArtifactMissingError('path', path)
    with open(path, 'rb') as f:
        return deserialize_path(f.read(), path)
