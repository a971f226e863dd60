import logging

import jax
from flask import Flask
from flask_sqlalchemy import SQLAlchemy

from lanechange.config import Config, merge_config_file

# Likelihood and oracle tolerances need double precision throughout
jax.config.update('jax_enable_x64', True)

# Initialize extensions
db = SQLAlchemy()


def create_app(config_class=Config, config_file=None):
    """Application factory pattern"""
    flask_app = Flask(__name__)
    flask_app.config.from_object(config_class)

    # Experiment file overrides the class defaults section by section
    config_file = config_file or flask_app.config.get('CONFIG_FILE')
    if config_file:
        merge_config_file(flask_app.config, config_file)

    logging.getLogger('lanechange').setLevel(flask_app.config['LOG_LEVEL'])

    # Initialize extensions with flask_app
    db.init_app(flask_app)

    # Register blueprints
    from lanechange.cli import bp as pipeline_bp
    flask_app.register_blueprint(pipeline_bp)

    # Make sure the ledger tables exist before any command records a run
    from lanechange import models  # noqa: F401
    with flask_app.app_context():
        db.create_all()

    return flask_app
