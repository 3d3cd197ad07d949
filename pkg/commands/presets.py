# commands/presets.py
import json

import click
from flask import Blueprint

from services import model_service

presets_bp = Blueprint("presets", __name__, cli_group=None)


@presets_bp.cli.command("list-presets")
def list_presets():
    """Print the preset systems with their defaults."""
    presets = model_service.list_presets()
    width = max(len(p["name"]) for p in presets)
    for p in presets:
        click.echo(f"{p['name']:<{width}}  {p['note']}")
        click.echo(f"{'':<{width}}  defaults: {json.dumps(p['defaults'], sort_keys=True)}")
