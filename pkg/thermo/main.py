import logging

import click

from . import __version__
from .commands import collapse, dos, report, sweep
from .config import settings
from .exceptions import ThermoError


class ThermoGroup(click.Group):
    """Maps ThermoError subclasses onto their exit codes."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except ThermoError as exc:
            click.echo(f"error: {exc.detail}", err=True)
            ctx.exit(exc.exit_code)


@click.group(cls=ThermoGroup)
@click.version_option(__version__, prog_name="thermo")
@click.option("--log-level", default=None, help="Overrides THERMO_LOG_LEVEL.")
def cli(log_level):
    """Impurity thermometry: sweeps, scaling collapses and reports."""
    logging.basicConfig(
        level=(log_level or settings.THERMO_LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


cli.add_command(sweep)
cli.add_command(collapse)
cli.add_command(report)
cli.add_command(dos)
