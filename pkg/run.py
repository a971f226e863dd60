"""
Command line entry point.

    python run.py ingest --input trajectories.csv --out-dir data/scenarios
    python run.py train --data-dir data/scenarios --variant unpred --out-model models/unpred.json

``flask --app run <command>`` works the same way.
"""
from flask.cli import FlaskGroup

from lanechange import create_app

app = create_app()

cli = FlaskGroup(create_app=lambda: app, add_default_commands=False)

if __name__ == '__main__':
    cli()
