"""
Integration tests for the pathprof command line.

Runs every subcommand against the synthetic IDX dataset and a small CNN,
checking exit codes, written artifacts and the run catalog.
"""

import json
import os

import numpy as np
import pandas as pd
import pytest

from pathprof.cli import cli
from pathprof.config import RunConfig
from pathprof.detector import NORMAL, score_all, threshold_at_fpr
from pathprof.models import STATUS_FAILED, STATUS_SUCCEEDED, Run
from pathprof.pipeline import split_table
from pathprof.utils.reports import read_features_csv
from pathprof.utils.storage import load_detector, sha256_file


def _invoke(runner, *args):
    result = runner.invoke(cli, list(args))
    assert result.exit_code == 0, result.output
    return result


def _out(tmp_path, *parts):
    return os.path.join(str(tmp_path), 'out', *parts)


@pytest.fixture
def trained(runner, run_config):
    """Config path after train, aggregate and attack have run."""
    _invoke(runner, 'train', '--config', run_config)
    _invoke(runner, 'aggregate', '--config', run_config)
    _invoke(runner, 'attack', '--config', run_config)
    return run_config


class TestPipeline:
    """Test cases for the subcommand chain."""

    def test_train(self, runner, run_config, tmp_path):
        result = _invoke(runner, 'train', '--config', run_config,
                         '--epochs', '2')

        assert 'train: wrote' in result.output
        assert os.path.exists(_out(tmp_path, 'model', 'model.json'))
        history = pd.read_csv(_out(tmp_path, 'training_history.csv'))
        assert list(history['epoch']) == [1, 2]
        accuracy = pd.read_csv(_out(tmp_path, 'accuracy.csv'))
        assert list(accuracy['split']) == ['train', 'test']

    def test_full_chain(self, runner, trained, tmp_path):
        """Every later subcommand succeeds on the trained artifacts."""
        config = trained
        _invoke(runner, 'extract', '--config', config, '--ids', '0,3')
        _invoke(runner, 'similarity', '--config', config)
        _invoke(runner, 'featurize', '--config', config)
        _invoke(runner, 'detect-train', '--config', config,
                '--attacks', 'noise')
        _invoke(runner, 'detect-eval', '--config', config,
                '--attacks', 'noise')
        _invoke(runner, 'ablate', '--config', config, '--fractions', '0.5')
        _invoke(runner, 'sweep-depth', '--config', config,
                '--values', '1,2', '--attacks', 'noise')

        for name in ('paths.csv', 'similarity_matrix.csv', 'features.csv',
                     'detector.json', 'roc_points.csv', 'detection.csv',
                     'ablation.csv', 'sweep_depth.csv'):
            assert os.path.exists(_out(tmp_path, name)), name

        matrix = pd.read_csv(_out(tmp_path, 'similarity_matrix.csv'),
                             index_col='class')
        assert matrix.shape == (3, 3)
        sweep = pd.read_csv(_out(tmp_path, 'sweep_depth.csv'))
        assert list(sweep['depth']) == [1, 2]
        ablation = pd.read_csv(_out(tmp_path, 'ablation.csv'))
        assert list(ablation['fraction']) == [0.5]
        assert os.path.exists(_out(tmp_path, 'paths', 'test_3_rank1.epath'))

    def test_aggregate_outputs(self, runner, trained, tmp_path):
        for class_id in range(3):
            assert os.path.exists(
                _out(tmp_path, 'profiles', f'class_{class_id}.epath'))
        assert os.path.exists(_out(tmp_path, 'profiles', 'overall.epath'))
        density = pd.read_csv(_out(tmp_path, 'density.csv'))
        assert set(density['profile']) == {'overall', 'class_0', 'class_1',
                                           'class_2'}
        counts = pd.read_csv(_out(tmp_path, 'aggregation.csv'))
        assert counts['images'].sum() == 60

    def test_attack_outputs(self, runner, trained, tmp_path):
        attacks = pd.read_csv(_out(tmp_path, 'attacks.csv'))

        assert list(attacks['attack']) == ['fgsm', 'noise']
        assert list(attacks['samples']) == [30, 12]
        assert os.path.exists(
            _out(tmp_path, 'adversarial', 'noise', 'manifest.json'))

    def test_cross_attack_split(self, runner, trained, tmp_path):
        """Pools of different attacks hold out the same normal images."""
        _invoke(runner, 'featurize', '--config', trained)
        cfg, _ = RunConfig.load(trained)
        table = read_features_csv(_out(tmp_path, 'features.csv'))
        noise = split_table(table.select_attacks(['noise']), cfg)
        pooled = split_table(table.select_attacks(['noise', 'fgsm']), cfg)

        def normal_ids(split, indices):
            return {split.table.ids[i] for i in indices
                    if split.table.labels[i] == NORMAL}

        assert normal_ids(noise, noise.train) == \
            normal_ids(pooled, pooled.train)
        assert normal_ids(noise, noise.train).isdisjoint(
            normal_ids(pooled, pooled.evaluation))

    def test_manifest_replay(self, runner, trained, tmp_path):
        """Replaying a run manifest rewrites identical bytes."""
        outputs = [_out(tmp_path, 'density.csv'),
                   _out(tmp_path, 'profiles', 'class_0.epath')]
        before = []
        for path in outputs:
            with open(path, 'rb') as f:
                before.append(f.read())

        _invoke(runner, 'aggregate', '--config',
                _out(tmp_path, 'aggregate.manifest.json'))

        for path, content in zip(outputs, before):
            with open(path, 'rb') as f:
                assert f.read() == content


class TestReducedScale:
    """Detector, sweep and ablation reports on the synthetic dataset."""

    def test_random_set_threshold_at_fpr(self, runner, trained, tmp_path):
        """The random-image row is calibrated on normal scores alone."""
        _invoke(runner, 'featurize', '--config', trained)
        _invoke(runner, 'detect-train', '--config', trained,
                '--attacks', 'fgsm')
        _invoke(runner, 'detect-eval', '--config', trained,
                '--attacks', 'fgsm', '--fpr', '0.1')

        det = load_detector(_out(tmp_path, 'detector.json'))
        table = read_features_csv(_out(tmp_path, 'features.csv'))
        scores = {
            name: score_all(det, [f for f, a in zip(table.features,
                                                    table.attacks)
                                  if a == name])
            for name in ('normal', 'noise')
        }
        threshold = threshold_at_fpr(scores['normal'], 0.1)
        frame = pd.read_csv(_out(tmp_path, 'detection.csv'))
        row = frame[frame['attack'] == 'noise'].iloc[0]

        assert row['samples'] == 12
        assert row['fpr'] == 0.1
        assert row['threshold'] == pytest.approx(threshold)
        assert np.mean(scores['normal'] < threshold) <= 0.1
        assert row['detected_rate'] == \
            pytest.approx(np.mean(scores['noise'] < threshold))

    def test_detector_evaluated_on_other_attack(self, runner, trained,
                                                tmp_path):
        _invoke(runner, 'featurize', '--config', trained)
        _invoke(runner, 'detect-train', '--config', trained,
                '--attacks', 'noise')
        _invoke(runner, 'detect-eval', '--config', trained,
                '--attacks', 'fgsm')

        frame = pd.read_csv(_out(tmp_path, 'detection.csv'))
        fgsm = frame.loc[frame['attack'] == 'fgsm', 'auc'].item()

        assert 0.0 <= fgsm <= 1.0
        assert set(frame['attack']) == {'all', 'fgsm', 'noise'}

    def test_theta_sweep_grows_paths(self, runner, trained, tmp_path):
        """Larger theta values never shrink the profiles or the paths."""
        _invoke(runner, 'sweep-theta', '--config', trained,
                '--values', '0.3,0.6,1.0', '--attacks', 'noise')

        frame = pd.read_csv(_out(tmp_path, 'sweep_theta.csv'))

        assert list(frame['theta']) == [0.3, 0.6, 1.0]
        for column in ('synapse_density', 'weight_density',
                       'mean_path_synapses'):
            assert frame[column].is_monotonic_increasing, column
        assert frame['auc'].between(0.0, 1.0).all()

    def test_depth_sweep_layers(self, runner, trained, tmp_path):
        _invoke(runner, 'sweep-depth', '--config', trained,
                '--values', '1,3,5', '--attacks', 'noise')

        frame = pd.read_csv(_out(tmp_path, 'sweep_depth.csv'))

        assert list(frame['layers']) == [1, 3, 3]
        assert frame['auc'].between(0.0, 1.0).all()

    def test_ablation_bounds(self, runner, trained, tmp_path):
        """Dropping nothing flips nothing; off-path drops never exceed."""
        _invoke(runner, 'ablate', '--config', trained,
                '--fractions', '0,1')

        frame = pd.read_csv(_out(tmp_path, 'ablation.csv'))
        none, every = frame.iloc[0], frame.iloc[1]

        assert none['path_flip_rate'] == 0.0
        assert none['off_path_flip_rate'] == 0.0
        assert none['mean_dropped'] == 0.0
        assert every['images'] == 30
        assert every['mean_off_path_dropped'] <= every['mean_dropped']
        assert every['mean_dropped'] > 0

    def test_featurize_replay_checksums(self, runner, trained, tmp_path):
        """Replaying featurize rewrites the bytes its manifest recorded."""
        _invoke(runner, 'featurize', '--config', trained)
        manifest = _out(tmp_path, 'featurize.manifest.json')
        with open(manifest) as f:
            recorded = json.load(f)['outputs']

        _invoke(runner, 'featurize', '--config', manifest)

        assert set(recorded) == {_out(tmp_path, 'features.csv'),
                                 _out(tmp_path, 'similarity_summary.csv')}
        for path, digest in recorded.items():
            assert sha256_file(path) == digest


class TestErrors:
    """Test cases for exit codes and failed runs."""

    def test_missing_detector(self, runner, run_config):
        result = runner.invoke(cli, ['detect-eval', '--config', run_config])

        assert result.exit_code == 1
        assert 'missing detector' in result.output
        run = Run.get_recent(limit=1)[0]
        assert run.status == STATUS_FAILED

    def test_missing_config_file(self, runner, tmp_path):
        result = runner.invoke(cli, ['aggregate', '--config',
                                     str(tmp_path / 'absent.json')])

        assert result.exit_code == 1
        assert 'missing config' in result.output

    def test_broken_config_file(self, runner, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{"seed": ')

        result = runner.invoke(cli, ['aggregate', '--config', str(path)])

        assert result.exit_code == 1
        assert 'invalid JSON' in result.output

    def test_unknown_flag(self, runner):
        result = runner.invoke(cli, ['aggregate', '--no-such-flag'])

        assert result.exit_code == 2

    def test_bad_theta(self, runner, run_config):
        result = runner.invoke(cli, ['aggregate', '--config', run_config,
                                     '--theta', '1.5'])

        assert result.exit_code == 1

    def test_sweep_needs_values(self, runner, run_config):
        result = runner.invoke(cli, ['sweep-theta', '--config', run_config])

        assert result.exit_code == 2
        assert '--values' in result.output


class TestRuns:
    """Test cases for the run catalog listing."""

    def test_runs_listing(self, runner, run_config):
        _invoke(runner, 'train', '--config', run_config, '--epochs', '1')
        runner.invoke(cli, ['detect-eval', '--config', run_config])

        result = _invoke(runner, 'runs')

        lines = result.output.strip().splitlines()
        assert len(lines) == 2
        assert 'detect-eval' in lines[0]
        assert 'train' in lines[1]
        assert STATUS_SUCCEEDED in lines[1]
        train = Run.for_command('train')[0]
        kinds = {a.kind for a in train.artifacts}
        assert {'model', 'report', 'manifest'} <= kinds

    def test_runs_filtered_by_command(self, runner, run_config):
        _invoke(runner, 'train', '--config', run_config, '--epochs', '1')
        runner.invoke(cli, ['detect-eval', '--config', run_config])

        result = _invoke(runner, 'runs', '--command', 'detect-eval')

        lines = result.output.strip().splitlines()
        assert len(lines) == 1
        assert 'detect-eval' in lines[0]
        assert STATUS_FAILED in lines[0]
