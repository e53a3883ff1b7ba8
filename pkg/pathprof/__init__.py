"""
pathprof - Effective path profiler for feed-forward neural networks

Extracts the critical neurons, synapses and weights an input relies on,
aggregates them into class profiles and turns per-layer path similarity
into an interpretable adversarial-input detector.
"""

import logging
import os
from logging.handlers import RotatingFileHandler
from typing import Any, Mapping, Optional

from flask import Flask
from flask_sqlalchemy import SQLAlchemy

# Initialize extensions
db = SQLAlchemy()


def create_app(config_overrides: Optional[Mapping[str, Any]] = None) -> Flask:
    """
    Application factory hosting configuration, logging and the run catalog.

    Parameters
    ----------
    config_overrides : Mapping[str, Any], optional
        Values applied last, after defaults and ``PATHPROF_*`` environment
        variables

    Returns
    -------
    Flask
        Configured application instance; its logger is the ``pathprof``
        logger every module logs through
    """
    app = Flask(__name__)

    # Configuration
    app.config.from_object('pathprof.config.DefaultConfig')
    app.config['SQLALCHEMY_DATABASE_URI'] = os.environ.get(
        'PATHPROF_DATABASE_URL', app.config['SQLALCHEMY_DATABASE_URI']
    )
    app.config.from_prefixed_env('PATHPROF')
    if config_overrides:
        app.config.update(config_overrides)

    # Initialize extensions with app
    db.init_app(app)

    # Configure logging
    app.logger.setLevel(app.config['LOG_LEVEL'])
    if not app.debug and not app.testing:
        log_dir = app.config['LOG_DIR']
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            os.path.join(log_dir, 'pathprof.log'),
            maxBytes=10240,
            backupCount=10
        )
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s %(levelname)s: %(message)s '
            '[in %(pathname)s:%(lineno)d]'
        ))
        file_handler.setLevel(logging.INFO)
        app.logger.addHandler(file_handler)
        app.logger.info('pathprof startup')

    return app


def init_db(app: Flask) -> None:
    """
    Create the run catalog tables if they do not exist yet.

    Parameters
    ----------
    app : Flask
        Flask application instance
    """
    # Registers the models on db.metadata
    from pathprof import models  # noqa: F401

    with app.app_context():
        db.create_all()
        app.logger.debug('Run catalog initialized')
