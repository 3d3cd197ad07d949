# server.py
"""
Application factory for the lab. There are no HTTP routes; every experiment
is a Flask CLI command registered by a blueprint:

    flask --app server check-conditions --config run.json --out conditions.csv
    python server.py list-presets
"""

import logging
import os
import sys

from dotenv import load_dotenv
from flask import Flask
from flask.cli import FlaskGroup

load_dotenv()


def create_app(test_config=None):
    """Build the lab app: log level from the environment, one CLI command per experiment."""
    app = Flask(__name__)
    # Worker count and block size are read by utils.parallel from the same .env
    app.config['HAMLAB_LOG_LEVEL'] = os.getenv('HAMLAB_LOG_LEVEL', 'INFO').upper()
    if test_config:
        app.config.update(test_config)

    logging.basicConfig(
        level=app.config['HAMLAB_LOG_LEVEL'],
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr,
    )

    # Import and register the command blueprints
    from commands.conditions import conditions_bp
    from commands.simulate import simulate_bp
    from commands.coupling import coupling_bp
    from commands.estimate import estimate_bp
    from commands.operator_lab import operator_lab_bp
    from commands.presets import presets_bp

    app.register_blueprint(conditions_bp)
    app.register_blueprint(simulate_bp)
    app.register_blueprint(coupling_bp)
    app.register_blueprint(estimate_bp)
    app.register_blueprint(operator_lab_bp)
    app.register_blueprint(presets_bp)

    return app


cli = FlaskGroup(create_app=create_app)

if __name__ == '__main__':
    cli()
