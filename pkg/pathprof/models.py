"""
Database models for pathprof

This module defines the SQLAlchemy models of the run catalog: one Run per
subcommand invocation and one Artifact per file it wrote.
"""

import json
from datetime import datetime
from typing import List, Optional

from sqlalchemy import Text

from pathprof import db

STATUS_RUNNING = 'running'
STATUS_SUCCEEDED = 'succeeded'
STATUS_FAILED = 'failed'


class Run(db.Model):
    """
    One invocation of a pathprof subcommand.

    Attributes
    ----------
    id : int
        Primary key
    command : str
        Subcommand name (``train``, ``aggregate``...)
    config_json : str
        Resolved RunConfig as JSON
    seed : int
        Run seed
    status : str
        ``running``, ``succeeded`` or ``failed``
    message : str, optional
        Error message of a failed run
    manifest_path : str, optional
        Run manifest written on success
    created_at : datetime
        Start timestamp
    finished_at : datetime, optional
        End timestamp
    """

    __tablename__ = 'runs'

    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(50), nullable=False)
    config_json = db.Column(Text, nullable=False, default='{}')
    seed = db.Column(db.Integer, nullable=False, default=0)
    status = db.Column(
        db.String(20), nullable=False, default=STATUS_RUNNING
    )
    message = db.Column(Text, nullable=True)
    manifest_path = db.Column(db.String(500), nullable=True)
    created_at = db.Column(
        db.DateTime, default=datetime.utcnow, nullable=False
    )
    finished_at = db.Column(db.DateTime, nullable=True)

    # Relationships
    artifacts = db.relationship(
        'Artifact', backref='run', lazy='dynamic',
        cascade='all, delete-orphan'
    )

    def __repr__(self) -> str:
        return f'<Run {self.id} {self.command} {self.status}>'

    @property
    def config(self) -> dict:
        return json.loads(self.config_json or '{}')

    def finish(self, status: str, message: Optional[str] = None) -> None:
        """Close the run with a final status."""
        self.status = status
        self.message = message
        self.finished_at = datetime.utcnow()

    def to_dict(self) -> dict:
        """Convert run to dictionary representation."""
        return {
            'id': self.id,
            'command': self.command,
            'seed': self.seed,
            'status': self.status,
            'message': self.message,
            'manifest_path': self.manifest_path,
            'created_at': self.created_at.isoformat(),
            'finished_at': (self.finished_at.isoformat()
                            if self.finished_at else None),
            'artifacts_count': self.artifacts.count()
        }

    @classmethod
    def get_recent(cls, limit: int = 10) -> List['Run']:
        """
        Get the most recently started runs.

        Parameters
        ----------
        limit : int
            Maximum number of runs to return

        Returns
        -------
        List[Run]
            Runs, newest first
        """
        return cls.query.order_by(cls.created_at.desc(), cls.id.desc())\
                        .limit(limit).all()

    @classmethod
    def for_command(cls, command: str) -> List['Run']:
        return cls.query.filter_by(command=command)\
                        .order_by(cls.created_at.desc(), cls.id.desc()).all()


class Artifact(db.Model):
    """
    A file written by a run.

    Attributes
    ----------
    id : int
        Primary key
    run_id : int
        Owning run
    kind : str
        Artifact kind (``model``, ``profile``, ``report``...)
    path : str
        File path as written
    sha256 : str
        Hex digest of the file content
    size_bytes : int
        File size
    created_at : datetime
        Registration timestamp
    """

    __tablename__ = 'artifacts'

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('runs.id'), nullable=False)
    kind = db.Column(db.String(50), nullable=False)
    path = db.Column(db.String(500), nullable=False)
    sha256 = db.Column(db.String(64), nullable=False)
    size_bytes = db.Column(db.Integer, nullable=False, default=0)
    created_at = db.Column(
        db.DateTime, default=datetime.utcnow, nullable=False
    )

    def __repr__(self) -> str:
        return f'<Artifact {self.kind} {self.path}>'

    def to_dict(self) -> dict:
        """Convert artifact to dictionary representation."""
        return {
            'id': self.id,
            'run_id': self.run_id,
            'kind': self.kind,
            'path': self.path,
            'sha256': self.sha256,
            'size_bytes': self.size_bytes,
            'created_at': self.created_at.isoformat()
        }
