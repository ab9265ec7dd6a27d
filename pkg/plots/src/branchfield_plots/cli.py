"""Command line: render one figure from run artifacts."""

from __future__ import annotations

import sys

import click

from .artifacts import HashMismatchError, SchemaMismatchError
from .render import KINDS, PlotJob, render


@click.command("render")
@click.option("--kind", required=True, type=click.Choice(KINDS))
@click.option("--in", "inputs", required=True, multiple=True,
              type=click.Path(exists=True), help="input artifact (repeat)")
@click.option("--out", "output", required=True, type=click.Path())
def main(kind, inputs, output):
    """Render a figure from branchfield CSV/JSON artifacts."""
    try:
        diagnostics = render(PlotJob(kind, tuple(inputs), output))
    except HashMismatchError as exc:
        click.echo(f"refused: {exc}", err=True)
        sys.exit(2)
    except (SchemaMismatchError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"wrote {output} ({diagnostics})")


if __name__ == "__main__":
    main()
