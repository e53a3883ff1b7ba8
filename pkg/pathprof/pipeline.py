"""
Multi-step workflows behind the pathprof subcommands.

Every ``run_*`` function reads its inputs through a RunConfig, writes its
outputs below ``output_dir`` and returns the written files as
``(kind, path)`` pairs for the run manifest and the catalog.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pathprof.algebra import (
    OVERALL, ClassProfile, aggregate_class_profiles, class_similarity_matrix,
    density, density_growth, jaccard_per_layer
)
from pathprof.attacks import AdversarialSample, generate_adversarial_set, \
    successful
from pathprof.config import RunConfig
from pathprof.detector import (
    ADVERSARIAL, NORMAL, LinearDetector, featurize, roc_auc, score_all,
    split_indices, threshold_at_fpr, train_linear_detector
)
from pathprof.engine import (
    ARCHITECTURES, DropOffPath, DropPathFraction, Network, ablate_forward,
    accuracy, build_network, forward_trace, train_sgd
)
from pathprof.errors import ArtifactMissingError, DomainError
from pathprof.extractor import (
    ExtractionConfig, extract_effective_path, path_size
)
from pathprof.parallel import chunked, map_ordered
from pathprof.utils.idx import LabeledDataset, load_idx
from pathprof.utils.pathfile import load_path, save_path
from pathprof.utils.reports import (
    FeatureTable, export_features_csv, read_features_csv, save_report,
    similarity_summary
)
from pathprof.utils.storage import (
    adversarial_set_dir, load_adversarial_set, load_detector, load_model,
    save_adversarial_set, save_detector, save_model
)

logger = logging.getLogger(__name__)

Outputs = List[Tuple[str, str]]

NORMAL_NAME = 'normal'


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.output_dir, name)


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

def build_architecture(cfg: RunConfig) -> Network:
    if isinstance(cfg.architecture, str):
        spec = ARCHITECTURES[cfg.architecture]
        return build_network(spec['layers'], spec['input_shape'], cfg.seed)
    return build_network(cfg.architecture, cfg.input_shape, cfg.seed)


def load_dataset(cfg: RunConfig, split: str) -> LabeledDataset:
    """Load the train or test split, truncated to its configured limit."""
    images = getattr(cfg.dataset, f'{split}_images')
    labels = getattr(cfg.dataset, f'{split}_labels')
    cfg.require(**{f'{split}_images': images, f'{split}_labels': labels})
    limit = cfg.train_limit if split == 'train' else cfg.test_limit
    return load_idx(images, labels, split).take(limit)


def load_network(cfg: RunConfig) -> Network:
    cfg.require(model=cfg.model_file)
    return load_model(cfg.model_file)


def profile_file(cfg: RunConfig, class_id: int) -> str:
    name = 'overall.epath' if class_id == OVERALL else f'class_{class_id}.epath'
    return os.path.join(cfg.profiles_dir, name)


def load_profiles(cfg: RunConfig,
                  net: Network) -> Tuple[Dict[int, ClassProfile],
                                         ClassProfile]:
    """
    Load every class profile plus the overall profile.

    Raises
    ------
    ArtifactMissingError
        If any profile file is missing
    DomainError
        If a profile belongs to another network
    """
    fingerprint = net.fingerprint()
    loaded = {}
    for class_id in list(range(net.num_classes)) + [OVERALL]:
        path = profile_file(cfg, class_id)
        if not os.path.exists(path):
            raise ArtifactMissingError('profile', path)
        profile = load_path(path)
        if not isinstance(profile, ClassProfile):
            raise DomainError(f'{path} holds a single path, not a profile')
        if profile.fingerprint != fingerprint:
            raise DomainError(f'{path} was built on a different network')
        loaded[class_id] = profile
    overall = loaded.pop(OVERALL)
    return loaded, overall


# ---------------------------------------------------------------------------
# train / extract / aggregate / similarity
# ---------------------------------------------------------------------------

def run_train(cfg: RunConfig) -> Outputs:
    """Fit the configured architecture and save model plus history."""
    train = load_dataset(cfg, 'train')
    net = build_architecture(cfg)
    trained = train_sgd(net, train, cfg.train)
    outputs: Outputs = [('model', path)
                        for path in save_model(trained, cfg.model_file)]
    history = [{'epoch': i + 1, 'mean_loss': loss}
               for i, loss in enumerate(trained.history)]
    outputs.append(('report', save_report(
        history, _out(cfg, 'training_history.csv'),
        columns=['epoch', 'mean_loss'])))

    rows = [{'split': 'train', 'accuracy': accuracy(trained, train)}]
    if cfg.dataset.test_images and cfg.dataset.test_labels:
        rows.append({'split': 'test',
                     'accuracy': accuracy(trained, load_dataset(cfg, 'test'))})
    for row in rows:
        logger.info('%s accuracy %.4f', row['split'], row['accuracy'])
    outputs.append(('report', save_report(
        rows, _out(cfg, 'accuracy.csv'), columns=['split', 'accuracy'])))
    return outputs


def run_extract(cfg: RunConfig, ids: Sequence[int], rank: int = 1,
                split: str = 'test') -> Outputs:
    """Extract and save the paths of selected images."""
    net = load_network(cfg)
    data = load_dataset(cfg, split)
    images = data.shaped(net.input_shape)
    ext = cfg.extraction.extraction_config(rank).validate(net.num_classes)
    outputs: Outputs = []
    rows = []
    for image_id in ids:
        if not 0 <= image_id < len(data):
            raise DomainError(f'image id {image_id} outside [0, {len(data)})')
        trace = forward_trace(net, images[image_id])
        path = extract_effective_path(net, trace, ext)
        target = _out(cfg, os.path.join(
            'paths', f'{split}_{image_id}_rank{rank}.epath'))
        save_path(path, target)
        outputs.append(('path', target))
        rows.append(dict({'id': image_id,
                          'label': int(data.labels[image_id]),
                          'predicted': trace.predicted_rank[0],
                          'class_id': path.class_id},
                         **path_size(path)))
    outputs.append(('report', save_report(
        rows, _out(cfg, 'paths.csv'),
        columns=['id', 'label', 'predicted', 'class_id', 'neurons',
                 'synapses', 'weights'])))
    return outputs


def _density_rows(name: str, profile: ClassProfile,
                  net: Network) -> List[Dict]:
    return [dict({'profile': name}, **row)
            for row in density(profile, net).rows()]


def run_aggregate(cfg: RunConfig) -> Outputs:
    """Build class and overall profiles plus the density reports."""
    net = load_network(cfg)
    train = load_dataset(cfg, 'train')
    result = aggregate_class_profiles(
        net, train.shaped(net.input_shape), train.labels,
        cfg.extraction.extraction_config(), jobs=cfg.jobs
    )
    outputs: Outputs = []
    for class_id, profile in result.profiles.items():
        save_path(profile, profile_file(cfg, class_id))
        outputs.append(('profile', profile_file(cfg, class_id)))
    save_path(result.overall, profile_file(cfg, OVERALL))
    outputs.append(('profile', profile_file(cfg, OVERALL)))

    rows = _density_rows('overall', result.overall, net)
    for class_id, profile in result.profiles.items():
        rows.extend(_density_rows(f'class_{class_id}', profile, net))
    outputs.append(('report', save_report(rows, _out(cfg, 'density.csv'))))

    ordered = [result.profiles[c] for c in sorted(result.profiles)]
    growth = [
        {'classes_merged': i + 1, 'synapse_density': r.synapse_density,
         'weight_density': r.weight_density}
        for i, r in enumerate(density_growth(ordered, net))
    ]
    outputs.append(('report', save_report(
        growth, _out(cfg, 'density_growth.csv'),
        columns=['classes_merged', 'synapse_density', 'weight_density'])))

    counts = [{'class': c, 'images': n}
              for c, n in sorted(result.per_class_counts.items())]
    counts.append({'class': 'misclassified', 'images': result.misclassified})
    outputs.append(('report', save_report(
        counts, _out(cfg, 'aggregation.csv'), columns=['class', 'images'])))
    return outputs


def run_similarity(cfg: RunConfig) -> Outputs:
    """Class-wise Jaccard matrix, pooled and per layer."""
    net = load_network(cfg)
    profiles, _ = load_profiles(cfg, net)
    ids, matrix = class_similarity_matrix(profiles)
    outputs: Outputs = [('report', save_report(
        (ids, matrix), _out(cfg, 'similarity_matrix.csv'),
        kind='similarity-matrix'))]
    rows = []
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            per_layer = jaccard_per_layer(profiles[a], profiles[b])
            for position, value in enumerate(per_layer):
                rows.append({'class_a': a, 'class_b': b,
                             'layer': position + 1, 'jaccard': value})
    outputs.append(('report', save_report(
        rows, _out(cfg, 'similarity_per_layer.csv'),
        columns=['class_a', 'class_b', 'layer', 'jaccard'])))
    return outputs


# ---------------------------------------------------------------------------
# attack / featurize
# ---------------------------------------------------------------------------

def run_attack(cfg: RunConfig,
               names: Optional[Sequence[str]] = None) -> Outputs:
    """Generate the configured adversarial sets from the test split."""
    net = load_network(cfg)
    test = load_dataset(cfg, 'test')
    images = test.shaped(net.input_shape)
    attacks = [a for a in cfg.attacks if not names or a.name in names]
    if names and len(attacks) != len(set(names)):
        unknown = set(names) - {a.name for a in attacks}
        raise DomainError(f'unknown attacks: {sorted(unknown)}')
    outputs: Outputs = []
    rows = []
    for attack in attacks:
        samples = generate_adversarial_set(net, images, test.labels, attack,
                                           jobs=cfg.jobs)
        directory = adversarial_set_dir(cfg.adversarial_root, attack.name)
        for path in save_adversarial_set(samples, attack, directory,
                                         net.input_shape):
            outputs.append(('adversarial', path))
        succeeded = sum(s.success for s in samples)
        rows.append({'attack': attack.name, 'method': attack.method,
                     'samples': len(samples), 'successful': succeeded,
                     'success_rate': succeeded / len(samples)
                     if samples else 0.0})
    outputs.append(('report', save_report(
        rows, _out(cfg, 'attacks.csv'),
        columns=['attack', 'method', 'samples', 'successful',
                 'success_rate'])))
    return outputs


def _featurize_chunk(task) -> list:
    net, images, profiles, ext, weight_based = task
    return [featurize(net, image, profiles, ext, weight_based)
            for image in images]


def featurize_images(net: Network, images: np.ndarray,
                     profiles: Dict[int, ClassProfile], ext: ExtractionConfig,
                     weight_based: bool = False, jobs: Optional[int] = 1,
                     chunk_size: int = 128) -> list:
    tasks = [(net, images[span], profiles, ext, weight_based)
             for span in chunked(len(images), chunk_size)]
    return [f for part in map_ordered(_featurize_chunk, tasks, jobs)
            for f in part]


def load_attack_sets(cfg: RunConfig) -> Dict[str, List[AdversarialSample]]:
    """Successful samples of every configured attack that has a saved set."""
    sets = {}
    for attack in cfg.attacks:
        directory = adversarial_set_dir(cfg.adversarial_root, attack.name)
        if not os.path.exists(os.path.join(directory, 'manifest.json')):
            logger.warning('no adversarial set for %s in %s', attack.name,
                           directory)
            continue
        _, samples = load_adversarial_set(directory)
        sets[attack.name] = successful(samples)
    return sets


def build_feature_table(cfg: RunConfig, net: Network,
                        profiles: Dict[int, ClassProfile],
                        ext: Optional[ExtractionConfig] = None) -> FeatureTable:
    """Features of the normal test images and every saved attack set."""
    ext = ext or cfg.extraction.extraction_config()
    weight_based = cfg.extraction.weight_based
    test = load_dataset(cfg, 'test')
    table = FeatureTable()
    normal = featurize_images(net, test.shaped(net.input_shape), profiles,
                              ext, weight_based, cfg.jobs)
    for i, f in enumerate(normal):
        table.append(i, NORMAL, NORMAL_NAME, f)
    for name, samples in load_attack_sets(cfg).items():
        if not samples:
            continue
        images = np.stack([s.image for s in samples])
        feats = featurize_images(net, images, profiles, ext, weight_based,
                                 cfg.jobs)
        for sample, f in zip(samples, feats):
            table.append(sample.source_id, ADVERSARIAL, name, f)
    return table


def run_featurize(cfg: RunConfig) -> Outputs:
    net = load_network(cfg)
    profiles, _ = load_profiles(cfg, net)
    table = build_feature_table(cfg, net, profiles)
    outputs: Outputs = [('features', export_features_csv(
        table, cfg.features_file))]
    outputs.append(('report', save_report(
        similarity_summary(table, NORMAL_NAME),
        _out(cfg, 'similarity_summary.csv'),
        columns=['attack', 'layer', 'rank1_normal', 'rank1_adversarial',
                 'rank1_delta', 'rank2_normal', 'rank2_adversarial',
                 'rank2_delta'])))
    return outputs


# ---------------------------------------------------------------------------
# detector
# ---------------------------------------------------------------------------

def _gradient_attack_names(cfg: RunConfig) -> List[str]:
    return [a.name for a in cfg.attacks if a.method != 'random']


def _random_attack_names(cfg: RunConfig) -> List[str]:
    return [a.name for a in cfg.attacks if a.method == 'random']


@dataclass
class DetectorSplit:
    table: FeatureTable
    train: np.ndarray
    evaluation: np.ndarray


def split_table(table: FeatureTable, cfg: RunConfig) -> DetectorSplit:
    """Seeded stratified train/eval split of a feature pool."""
    if len(set(table.labels)) < 2:
        raise DomainError('the feature pool needs normal and adversarial '
                          'images')
    train, evaluation = split_indices(table.labels,
                                      cfg.detector.train_fraction,
                                      cfg.detector.seed)
    return DetectorSplit(table, train, evaluation)


def fit_detector(table: FeatureTable, cfg: RunConfig) -> Tuple[
        LinearDetector, DetectorSplit]:
    split = split_table(table, cfg)
    part = table.subset(split.train)
    det = train_linear_detector(part.features, part.labels, cfg.detector)
    return det, split


def _pool(cfg: RunConfig, attacks: Optional[Sequence[str]]) -> FeatureTable:
    table = read_features_csv(cfg.features_file)
    return table.select_attacks(attacks or _gradient_attack_names(cfg),
                                NORMAL_NAME)


def run_detect_train(cfg: RunConfig,
                     attacks: Optional[Sequence[str]] = None) -> Outputs:
    """Fit the detector on the training share of the feature pool."""
    cfg.require(features=cfg.features_file)
    det, split = fit_detector(_pool(cfg, attacks), cfg)
    auc, _ = roc_auc(score_all(det, split.table.subset(split.train).features),
                     split.table.subset(split.train).labels)
    logger.info('detector training AUC %.4f', auc)
    return [('detector', p) for p in save_detector(det, cfg.detector_file)]


def evaluate_detector(det: LinearDetector, table: FeatureTable,
                      cfg: RunConfig) -> Tuple[float, list, List[Dict]]:
    """Pooled AUC, ROC curve and per-attack AUC rows on the eval split."""
    split = split_table(table, cfg)
    held_out = table.subset(split.evaluation)
    scores = score_all(det, held_out.features)
    labels = np.array(held_out.labels)
    auc, curve = roc_auc(scores, labels)
    rows = [{'attack': 'all', 'samples': len(held_out), 'auc': auc}]
    attacks = np.array(held_out.attacks)
    for name in sorted(set(held_out.attacks) - {NORMAL_NAME}):
        mask = (attacks == name) | (attacks == NORMAL_NAME)
        if np.any(labels[mask] == NORMAL):
            rows.append({'attack': name, 'samples': int(mask.sum()),
                         'auc': roc_auc(scores[mask], labels[mask])[0]})
    return auc, curve, rows


def run_detect_eval(cfg: RunConfig, attacks: Optional[Sequence[str]] = None,
                    fpr: float = 0.05) -> Outputs:
    """
    Score the held-out split: ROC points, pooled and per-attack AUC, and
    the share of random images caught at a fixed false-positive rate.
    """
    cfg.require(detector=cfg.detector_file, features=cfg.features_file)
    det = load_detector(cfg.detector_file)
    auc, curve, rows = evaluate_detector(det, _pool(cfg, attacks), cfg)
    logger.info('detector eval AUC %.4f', auc)
    outputs: Outputs = [('report', save_report(
        curve, _out(cfg, 'roc_points.csv'), kind='roc-points'))]

    full = read_features_csv(cfg.features_file)
    normal_scores = score_all(det, [
        f for f, a in zip(full.features, full.attacks) if a == NORMAL_NAME
    ])
    for name in _random_attack_names(cfg):
        random_scores = score_all(det, [
            f for f, a in zip(full.features, full.attacks) if a == name
        ])
        if not len(random_scores) or not len(normal_scores):
            continue
        threshold = threshold_at_fpr(normal_scores, fpr)
        caught = float(np.mean(random_scores < threshold))
        logger.info('%s: %.2f%% caught at %.0f%% FPR', name, 100 * caught,
                    100 * fpr)
        rows.append({'attack': name, 'samples': len(random_scores),
                     'auc': None, 'fpr': fpr, 'threshold': threshold,
                     'detected_rate': caught})
    outputs.append(('report', save_report(
        rows, _out(cfg, 'detection.csv'),
        columns=['attack', 'samples', 'auc', 'fpr', 'threshold',
                 'detected_rate'])))
    return outputs


# ---------------------------------------------------------------------------
# ablation and sensitivity sweeps
# ---------------------------------------------------------------------------

def _ablation_chunk(task) -> List[Tuple[int, int, int, int]]:
    net, images, ext, fraction, seed = task
    counts = []
    for offset, image in enumerate(images):
        trace = forward_trace(net, image)
        path = extract_effective_path(net, trace, ext)
        base = trace.predicted_rank[0]
        drop = int(np.floor(fraction * path.weight_count() + 0.5))
        on_path = ablate_forward(net, image, path,
                                 DropPathFraction(fraction, seed + offset))
        # a dense path may leave fewer off-path weights than it holds
        off_count = min(drop, _off_path_weights(net, path))
        off_path = ablate_forward(net, image, path,
                                  DropOffPath(off_count, seed + offset))
        counts.append((int(on_path != base), int(off_path != base), drop,
                       off_count))
    return counts


def _off_path_weights(net: Network, path) -> int:
    return sum(net.layers[i].weights.size - sets.weights.count()
               for i, sets in path.layers.items()
               if net.layers[i].has_weights)


def run_ablate(cfg: RunConfig, fractions: Sequence[float]) -> Outputs:
    """
    Prediction flip rates when a fraction of each image's path weights is
    zeroed, against zeroing the same number of weights off the path.
    """
    net = load_network(cfg)
    test = load_dataset(cfg, 'test')
    images = test.shaped(net.input_shape)
    ext = cfg.extraction.extraction_config().validate(net.num_classes)
    rows = []
    for fraction in fractions:
        if not 0.0 <= fraction <= 1.0:
            raise DomainError(f'fraction {fraction} outside [0, 1]')
        tasks = [(net, images[span], ext, fraction, cfg.seed + span.start)
                 for span in chunked(len(images), 64)]
        counts = np.array(
            [c for part in map_ordered(_ablation_chunk, tasks, cfg.jobs)
             for c in part], dtype=np.float64
        ).reshape(-1, 4)
        rows.append({
            'fraction': fraction,
            'images': len(counts),
            'path_flip_rate': counts[:, 0].mean() if len(counts) else 0.0,
            'off_path_flip_rate': counts[:, 1].mean() if len(counts) else 0.0,
            'mean_dropped': counts[:, 2].mean() if len(counts) else 0.0,
            'mean_off_path_dropped': (counts[:, 3].mean() if len(counts)
                                      else 0.0),
        })
    return [('report', save_report(
        rows, _out(cfg, 'ablation.csv'),
        columns=['fraction', 'images', 'path_flip_rate',
                 'off_path_flip_rate', 'mean_dropped',
                 'mean_off_path_dropped']))]


def _sweep_auc(cfg: RunConfig, net: Network,
               profiles: Dict[int, ClassProfile], ext: ExtractionConfig,
               attacks: Optional[Sequence[str]] = None) -> float:
    table = build_feature_table(cfg, net, profiles, ext)
    table = table.select_attacks(attacks or _gradient_attack_names(cfg),
                                 NORMAL_NAME)
    det, _ = fit_detector(table, cfg)
    auc, _, _ = evaluate_detector(det, table, cfg)
    return auc


def run_sweep_theta(cfg: RunConfig, values: Sequence[float],
                    attacks: Optional[Sequence[str]] = None) -> Outputs:
    """Overall density, mean path size and detector AUC per theta."""
    net = load_network(cfg)
    train = load_dataset(cfg, 'train')
    images = train.shaped(net.input_shape)
    rows = []
    for theta in values:
        ext = ExtractionConfig(theta, 1, cfg.extraction.depth).validate(
            net.num_classes)
        result = aggregate_class_profiles(net, images, train.labels, ext,
                                          jobs=cfg.jobs)
        report = density(result.overall, net)
        sizes = [path_size(extract_effective_path(
            net, forward_trace(net, image), ext))['synapses']
            for image in images[:100]]
        rows.append({
            'theta': theta,
            'synapse_density': report.synapse_density,
            'weight_density': report.weight_density,
            'mean_path_synapses': float(np.mean(sizes)) if sizes else 0.0,
            'auc': _sweep_auc(cfg, net, result.profiles, ext, attacks),
        })
        logger.info('theta %.3g: density %.4f auc %.4f', theta,
                    rows[-1]['synapse_density'], rows[-1]['auc'])
    return [('report', save_report(
        rows, _out(cfg, 'sweep_theta.csv'),
        columns=['theta', 'synapse_density', 'weight_density',
                 'mean_path_synapses', 'auc']))]


def run_sweep_depth(cfg: RunConfig, values: Sequence[int],
                    attacks: Optional[Sequence[str]] = None) -> Outputs:
    """Detector AUC when extraction stops after the last ``depth`` layers."""
    net = load_network(cfg)
    profiles, _ = load_profiles(cfg, net)
    total = len(net.path_layers())
    rows = []
    for depth in values:
        ext = ExtractionConfig(cfg.extraction.theta, 1, depth).validate(
            net.num_classes)
        rows.append({'depth': depth, 'layers': min(depth, total),
                     'auc': _sweep_auc(cfg, net, profiles, ext, attacks)})
    return [('report', save_report(
        rows, _out(cfg, 'sweep_depth.csv'),
        columns=['depth', 'layers', 'auc']))]
