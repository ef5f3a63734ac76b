import json
import os

import click
import yaml
from pydantic import ValidationError

from ..exceptions import ConfigError
from ..models import DosFamily, DosSpec
from ..services import bath
from ..services.export_service import ExportService


def resolve_spec(spec: str, D: float) -> DosSpec:
    """A family name, or a YAML file holding a ``dos:`` block (or the bare mapping)."""
    try:
        if spec in {f.value for f in DosFamily}:
            return DosSpec(family=DosFamily(spec), D=D)
        if not os.path.isfile(spec):
            raise ConfigError(f"'{spec}' is neither a DoS family nor a YAML file")
        with open(spec, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {exc}", line=mark.line + 1 if mark else None)
    except ValidationError as exc:
        raise ConfigError(exc.errors()[0]["msg"], field="dos")
    if not isinstance(data, dict):
        raise ConfigError("DoS file must be a mapping", field="dos")
    block = data.get("dos", data)
    try:
        return DosSpec(**block)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first["msg"], field=".".join(["dos", *(str(p) for p in first["loc"])]))


@click.command("dos")
@click.argument("spec")
@click.option("-D", "D", type=float, default=1.0, show_default=True, help="Half bandwidth for a bare family name.")
@click.option("--emit-grid", is_flag=True, help="Write omega, rho, Re G, Im G on the default frequency grid.")
@click.option("--points", type=click.IntRange(min=200), default=None, help="Grid size (default THERMO_GRID_POINTS).")
@click.option("--out", "out_path", default="dos_grid.csv", show_default=True)
def command(spec, D, emit_grid, points, out_path):
    """Describe a bath density of states and optionally tabulate its Green's function."""
    dos = resolve_spec(spec, D)
    summary = {
        "label": dos.label,
        "family": dos.family.value,
        "D": dos.D,
        "rho0": bath.fermi_level_dos(dos),
        "particle_hole_symmetric": bath.is_particle_hole_symmetric(dos),
        "approximations": dos.approximations,
    }
    if emit_grid:
        G = bath.greens_from_dos(dos, bath.frequency_grid(dos.D, n_points=points))
        rho = bath.dos_eval(dos, G.grid)
        ExportService.write_bytes(out_path, ExportService.grid_to_csv(G.grid, rho, G.values))
        summary["grid"] = {"path": out_path, "points": int(len(G.grid)), "warnings": G.warnings}
    click.echo(json.dumps(summary, indent=2, sort_keys=True))
