"""
IDX dataset utilities for pathprof

Reads MNIST-style IDX image/label file pairs into a LabeledDataset with
pixels scaled to [0, 1], and writes IDX files for fixtures.
"""

import logging
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from pathprof.errors import ArtifactMissingError, DomainError, FormatError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

_HEADER = struct.Struct('>i')


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    Images with integer labels.

    Attributes
    ----------
    images : np.ndarray
        float32 tensor of shape (n, ...) with values in [0, 1]
    labels : np.ndarray
        int64 class indices, length n
    split : str
        ``train`` or ``test``
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = 'train'

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(images) != len(labels):
            raise DomainError(
                f'{len(images)} images but {len(labels)} labels'
            )
        if labels.size and labels.min() < 0:
            raise DomainError('labels must be nonnegative')
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DomainError('pixel values must lie in [0, 1]')
        object.__setattr__(self, 'images', images)
        object.__setattr__(self, 'labels', labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def take(self, limit: Optional[int]) -> 'LabeledDataset':
        """First ``limit`` samples (all when None)."""
        if limit is None or limit >= len(self):
            return self
        return LabeledDataset(self.images[:limit], self.labels[:limit],
                              self.split)

    def shaped(self, input_shape: Tuple[int, ...]) -> np.ndarray:
        """Images reshaped to ``(n, *input_shape)``."""
        try:
            return self.images.reshape((len(self),) + tuple(input_shape))
        except ValueError as e:
            raise DomainError(
                f'images of shape {self.images.shape[1:]} do not fit '
                f'input shape {tuple(input_shape)}'
            ) from e


def _read(path: str) -> bytes:
    try:
        with open(path, 'rb') as f:
            return f.read()
    except FileNotFoundError as e:
        raise ArtifactMissingError('dataset', path) from e


def _parse_idx(payload: bytes, magic: int, path: str) -> np.ndarray:
    if len(payload) < 4:
        raise FormatError('file too short for IDX magic', 0, path)
    found = _HEADER.unpack_from(payload, 0)[0]
    if found != magic:
        raise FormatError(
            f'bad magic 0x{found:08x}, expected 0x{magic:08x}', 0, path
        )
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(payload) < header_end:
        raise FormatError('truncated dimension header', len(payload), path)
    dims = tuple(
        _HEADER.unpack_from(payload, 4 + 4 * i)[0] for i in range(ndim)
    )
    for i, size in enumerate(dims):
        if size < 0:
            raise FormatError(f'negative dimension {size}', 4 + 4 * i, path)
    expected = int(np.prod(dims, dtype=np.int64))
    available = len(payload) - header_end
    if available < expected:
        raise FormatError(
            f'truncated data: {available} of {expected} bytes',
            len(payload), path
        )
    if available > expected:
        raise FormatError('trailing bytes after data',
                          header_end + expected, path)
    data = np.frombuffer(payload, dtype=np.uint8, count=expected,
                         offset=header_end)
    return data.reshape(dims)


def load_idx(images_path: str, labels_path: str,
             split: str = 'train') -> LabeledDataset:
    """
    Load an IDX image/label pair.

    Parameters
    ----------
    images_path : str
        IDX file with magic 0x00000803 (n x rows x cols unsigned bytes)
    labels_path : str
        IDX file with magic 0x00000801 (n unsigned bytes)
    split : str
        Tag stored on the dataset

    Returns
    -------
    LabeledDataset
        Images scaled to [0, 1] by dividing by 255

    Raises
    ------
    FormatError
        On bad magic, truncation or mismatched counts
    """
    images = _parse_idx(_read(images_path), IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read(labels_path), LABEL_MAGIC, labels_path)
    if len(images) != len(labels):
        raise FormatError(
            f'{len(images)} images but {len(labels)} labels', 4, labels_path
        )
    scaled = images.astype(np.float32) / np.float32(255.0)
    logger.info('loaded %d %s images of shape %s from %s',
                len(labels), split, images.shape[1:], images_path)
    return LabeledDataset(scaled, labels.astype(np.int64), split)


def write_idx(path: str, data: np.ndarray) -> None:
    """Write unsigned-byte data as IDX (3-D images or 1-D labels)."""
    data = np.asarray(data, dtype=np.uint8)
    magic = {3: IMAGE_MAGIC, 1: LABEL_MAGIC}.get(data.ndim)
    if magic is None:
        raise DomainError('IDX writer supports 1-D labels or 3-D images')
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(magic))
        for size in data.shape:
            f.write(_HEADER.pack(size))
        f.write(data.tobytes())
