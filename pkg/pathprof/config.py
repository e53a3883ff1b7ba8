"""
Configuration for pathprof.

``DefaultConfig`` feeds the Flask application config; ``RunConfig`` holds
the parameters of one experiment run, loaded from JSON (or from a run
manifest, which replays that run) and overridden by command-line flags.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from pathprof.attacks import AttackConfig
from pathprof.detector import DetectorConfig
from pathprof.engine import ARCHITECTURES, TrainConfig
from pathprof.errors import ArtifactMissingError, DomainError
from pathprof.extractor import DEFAULT_THETA, ExtractionConfig


class DefaultConfig:
    """Application defaults, overridable through ``PATHPROF_*`` variables."""

    SQLALCHEMY_DATABASE_URI = 'sqlite:///pathprof.db'
    SQLALCHEMY_TRACK_MODIFICATIONS = False
    LOG_DIR = 'logs'
    LOG_LEVEL = 'INFO'
    DEFAULT_JOBS = os.cpu_count() or 1


@dataclass
class DatasetPaths:
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None


@dataclass
class ExtractionSettings:
    """Extraction knobs shared by every subcommand that extracts paths."""

    theta: float = DEFAULT_THETA
    depth: Optional[int] = None
    weight_based: bool = False

    def extraction_config(self, start_rank: int = 1) -> ExtractionConfig:
        return ExtractionConfig(self.theta, start_rank, self.depth)


def _default_attacks() -> List[AttackConfig]:
    return [
        AttackConfig(name='fgsm', method='fgsm', epsilon=0.2),
        AttackConfig(name='bim', method='bim', epsilon=0.15,
                     step_size=0.015, iterations=10),
    ]


@dataclass
class RunConfig:
    """
    Resolved parameters of one run.

    Paths left unset default to fixed locations under ``output_dir`` so
    that consecutive subcommands find each other's artifacts.
    """

    dataset: DatasetPaths = field(default_factory=DatasetPaths)
    architecture: Union[str, List[Dict[str, Any]]] = 'lenet'
    input_shape: Optional[List[int]] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    extraction: ExtractionSettings = field(default_factory=ExtractionSettings)
    attacks: List[AttackConfig] = field(default_factory=_default_attacks)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: int = 0
    output_dir: str = 'pathprof-out'
    model_path: Optional[str] = None
    profiles_path: Optional[str] = None
    adversarial_dir: Optional[str] = None
    features_path: Optional[str] = None
    detector_path: Optional[str] = None
    jobs: Optional[int] = None
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None

    # -- artifact locations -------------------------------------------------

    def _under_output(self, value: Optional[str], default: str) -> str:
        return value or os.path.join(self.output_dir, default)

    @property
    def model_file(self) -> str:
        return self._under_output(self.model_path,
                                  os.path.join('model', 'model.json'))

    @property
    def profiles_dir(self) -> str:
        return self._under_output(self.profiles_path, 'profiles')

    @property
    def adversarial_root(self) -> str:
        return self._under_output(self.adversarial_dir, 'adversarial')

    @property
    def features_file(self) -> str:
        return self._under_output(self.features_path, 'features.csv')

    @property
    def detector_file(self) -> str:
        return self._under_output(self.detector_path, 'detector.json')

    # -- (de)serialisation ---------------------------------------------------

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'RunConfig':
        """
        Build a config from parsed JSON.

        A run manifest is accepted as well; its ``config`` entry is used.
        """
        if 'config' in data and isinstance(data['config'], Mapping):
            data = data['config']
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f'unknown config keys: {sorted(unknown)}')
        kwargs: Dict[str, Any] = dict(data)
        try:
            if 'dataset' in kwargs:
                kwargs['dataset'] = DatasetPaths(**kwargs['dataset'])
            if 'train' in kwargs:
                kwargs['train'] = TrainConfig(**kwargs['train'])
            if 'extraction' in kwargs:
                kwargs['extraction'] = ExtractionSettings(
                    **kwargs['extraction']
                )
            if 'attacks' in kwargs:
                kwargs['attacks'] = [
                    AttackConfig.from_dict(entry) for entry in kwargs['attacks']
                ]
            if 'detector' in kwargs:
                kwargs['detector'] = DetectorConfig(**kwargs['detector'])
        except TypeError as e:
            raise DomainError(f'invalid config section: {e}') from e
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str) -> Tuple['RunConfig', Dict[str, Any]]:
        """
        Read a RunConfig JSON file or a run manifest.

        Returns
        -------
        tuple
            The config and the subcommand arguments a manifest recorded
            (empty for a plain config file)

        Raises
        ------
        ArtifactMissingError
            If ``path`` does not exist
        DomainError
            If the file is not a valid JSON object
        """
        if not os.path.exists(path):
            raise ArtifactMissingError('config', path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise DomainError(f'{path}: invalid JSON ({e})') from e
        if not isinstance(data, dict):
            raise DomainError(f'{path}: expected a JSON object')
        return cls.from_dict(data), dict(data.get('arguments', {}))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['attacks'] = [a.to_dict() for a in self.attacks]
        return data

    def with_overrides(self, **overrides: Any) -> 'RunConfig':
        """
        Copy with flag overrides applied; ``None`` values are ignored.

        Dotted keys address nested sections (``extraction.theta``).
        """
        config = self
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, name = key.partition('.')
            if name:
                nested = replace(getattr(config, section), **{name: value})
                config = replace(config, **{section: nested})
            else:
                config = replace(config, **{key: value})
        return config

    # -- validation ------------------------------------------------------------

    def validate(self) -> 'RunConfig':
        """Check parameter bounds; file checks are per subcommand."""
        self.extraction.extraction_config().validate()
        self.train.validate()
        self.detector.validate()
        for attack in self.attacks:
            attack.validate()
        names = [a.name for a in self.attacks]
        if len(set(names)) != len(names):
            raise DomainError('attack names must be unique')
        if isinstance(self.architecture, str):
            if self.architecture not in ARCHITECTURES:
                raise DomainError(
                    f'unknown architecture {self.architecture!r}; '
                    f'choose from {sorted(ARCHITECTURES)}'
                )
        elif self.input_shape is None:
            raise DomainError('an explicit layer list needs input_shape')
        if self.jobs is not None and self.jobs < 1:
            raise DomainError('jobs must be positive')
        for limit in (self.train_limit, self.test_limit):
            if limit is not None and limit < 1:
                raise DomainError('dataset limits must be positive')
        return self

    def require(self, **artifacts: Optional[str]) -> None:
        """
        Raise ``ArtifactMissingError`` for the first missing input.

        Parameters
        ----------
        **artifacts
            Artifact kind mapped to the path that must exist
        """
        for kind, path in artifacts.items():
            if not path:
                raise ArtifactMissingError(kind.replace('_', ' '),
                                           '<not configured>')
            if not os.path.exists(path):
                raise ArtifactMissingError(kind.replace('_', ' '), path)
