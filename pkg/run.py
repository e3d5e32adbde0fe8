#!/usr/bin/env python3
"""
ConfProbe - Black-box Confidence Estimation
"""

import sys

from flask import Flask

from app.routes import main
from app import cli


def create_app(oracle=None):
    app = Flask(__name__)

    # Oracle answering /predict; None serves only the status routes
    app.config['ORACLE'] = oracle

    # Register blueprints
    app.register_blueprint(main)

    return app


if __name__ == '__main__':
    sys.exit(cli.main(sys.argv[1:], app_factory=create_app))
