"""
Report utilities for pathprof

Writes plot-ready CSV reports (plain tables, ROC points, class similarity
matrices) and the per-image similarity feature table, all through pandas
with a fixed float format so equal inputs give equal bytes.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pathprof.detector import SimilarityFeatures
from pathprof.errors import ArtifactMissingError, DomainError, FormatError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.9g'
REPORT_KINDS = ('csv', 'roc-points', 'similarity-matrix')
FEATURE_PREFIX = ('id', 'label', 'attack', 'predicted')


def _write_frame(frame: pd.DataFrame, path: str, index: bool = False,
                 index_label: Optional[str] = None) -> str:
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        frame.to_csv(path, index=index, index_label=index_label,
                     float_format=FLOAT_FORMAT, lineterminator='\n')
    except OSError as e:
        raise DomainError(f'{path}: cannot write report ({e.strerror})') from e
    logger.debug('wrote %d rows to %s', len(frame), path)
    return path


def save_report(rows: Any, path: str, kind: str = 'csv',
                columns: Optional[Sequence[str]] = None) -> str:
    """
    Write a CSV report.

    Parameters
    ----------
    rows : Any
        ``csv``: sequence of mappings; ``roc-points``: sequence of
        (fpr, tpr) pairs; ``similarity-matrix``: ``(class_ids, matrix)``
    path : str
        Destination file
    kind : str
        One of ``csv``, ``roc-points``, ``similarity-matrix``
    columns : Sequence[str], optional
        Column order for ``csv``; also the header of an empty report

    Returns
    -------
    str
        The path written
    """
    if kind == 'csv':
        frame = pd.DataFrame(list(rows), columns=list(columns) if columns
                             else None)
        return _write_frame(frame, path)
    if kind == 'roc-points':
        frame = pd.DataFrame(
            [(float(f), float(t)) for f, t in rows], columns=['fpr', 'tpr']
        )
        return _write_frame(frame, path)
    if kind == 'similarity-matrix':
        ids, matrix = rows
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (len(ids), len(ids)):
            raise DomainError('similarity matrix must be square over ids')
        labels = [str(i) for i in ids]
        frame = pd.DataFrame(matrix, index=labels, columns=labels)
        return _write_frame(frame, path, index=True, index_label='class')
    raise DomainError(f'unknown report kind {kind!r}; choose from '
                      f'{REPORT_KINDS}')


@dataclass
class FeatureTable:
    """Similarity features of many images with their bookkeeping."""

    ids: List[int] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)
    attacks: List[str] = field(default_factory=list)
    features: List[SimilarityFeatures] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def append(self, sample_id: int, label: int, attack: str,
               features: SimilarityFeatures) -> None:
        self.ids.append(int(sample_id))
        self.labels.append(int(label))
        self.attacks.append(attack)
        self.features.append(features)

    def subset(self, indices: Sequence[int]) -> 'FeatureTable':
        return FeatureTable(
            [self.ids[i] for i in indices],
            [self.labels[i] for i in indices],
            [self.attacks[i] for i in indices],
            [self.features[i] for i in indices],
        )

    def select_attacks(self, names: Sequence[str],
                       normal_name: str = 'normal') -> 'FeatureTable':
        """Rows of the named attacks plus all normal rows."""
        keep = set(names) | {normal_name}
        return self.subset(
            [i for i, a in enumerate(self.attacks) if a in keep]
        )

    @property
    def layer_count(self) -> Optional[int]:
        return self.features[0].layer_count if self.features else None


def feature_columns(layers: int) -> List[str]:
    """Header of a feature CSV over ``layers`` path layers."""
    columns = list(FEATURE_PREFIX)
    for prefix in ('rank1', 'rank2', 'rank1_missing', 'rank2_missing'):
        columns.extend(f'{prefix}_{l}' for l in range(1, layers + 1))
    return columns


def export_features_csv(table: FeatureTable, path: str,
                        layers: Optional[int] = None) -> str:
    """
    Write one row per image: id, label, attack, predicted class, rank-1
    and rank-2 similarities, then the missing flags.

    ``layers`` fixes the header of an empty table.
    """
    layers = table.layer_count or layers or 0
    records = []
    for sample_id, label, attack, f in zip(table.ids, table.labels,
                                           table.attacks, table.features):
        if f.layer_count != layers:
            raise DomainError('feature rows differ in layer count')
        records.append(
            [sample_id, label, attack, f.predicted]
            + f.rank1.tolist() + f.rank2.tolist()
            + f.rank1_missing.astype(int).tolist()
            + f.rank2_missing.astype(int).tolist()
        )
    frame = pd.DataFrame(records, columns=feature_columns(layers))
    return _write_frame(frame, path)


def read_features_csv(path: str) -> FeatureTable:
    """
    Read a table written by ``export_features_csv``.

    Raises
    ------
    FormatError
        If the header does not follow the feature schema
    """
    if not os.path.exists(path):
        raise ArtifactMissingError('features', path)
    frame = pd.read_csv(path, dtype={'attack': str}, keep_default_na=False)
    columns = list(frame.columns)
    extra = len(columns) - len(FEATURE_PREFIX)
    if columns[:len(FEATURE_PREFIX)] != list(FEATURE_PREFIX) or extra % 4:
        raise FormatError('not a feature table header', 0, path)
    layers = extra // 4
    if columns != feature_columns(layers):
        raise FormatError('feature columns out of order', 0, path)

    def block(prefix: str) -> np.ndarray:
        names = [f'{prefix}_{l}' for l in range(1, layers + 1)]
        return frame[names].to_numpy()

    rank1, rank2 = block('rank1'), block('rank2')
    miss1, miss2 = block('rank1_missing'), block('rank2_missing')
    table = FeatureTable()
    for row in range(len(frame)):
        table.append(
            int(frame['id'].iloc[row]), int(frame['label'].iloc[row]),
            str(frame['attack'].iloc[row]),
            SimilarityFeatures(rank1[row], rank2[row],
                               miss1[row].astype(bool),
                               miss2[row].astype(bool),
                               int(frame['predicted'].iloc[row])),
        )
    return table


def similarity_summary(table: FeatureTable,
                       normal_name: str = 'normal') -> List[Dict[str, Any]]:
    """
    Mean per-layer rank-1 and rank-2 similarity of normal images and of
    each attack, with the adversarial minus normal delta.
    """
    if not len(table):
        return []
    attacks = sorted(set(table.attacks) - {normal_name})
    layers = table.layer_count

    def means(name: str) -> Tuple[np.ndarray, np.ndarray]:
        rows = [f for f, a in zip(table.features, table.attacks) if a == name]
        if not rows:
            return np.full(layers, np.nan), np.full(layers, np.nan)
        return (np.mean([f.rank1 for f in rows], axis=0),
                np.mean([f.rank2 for f in rows], axis=0))

    normal1, normal2 = means(normal_name)
    summary = []
    for attack in attacks:
        adv1, adv2 = means(attack)
        for layer in range(layers):
            summary.append({
                'attack': attack,
                'layer': layer + 1,
                'rank1_normal': normal1[layer],
                'rank1_adversarial': adv1[layer],
                'rank1_delta': adv1[layer] - normal1[layer],
                'rank2_normal': normal2[layer],
                'rank2_adversarial': adv2[layer],
                'rank2_delta': adv2[layer] - normal2[layer],
            })
    return summary
