import json
import logging
import os
from typing import Dict, List, Optional

import click

from ..cache import get_quarter_calibration
from ..exceptions import ConfigError, EmptyOverlapError, RangeError
from ..models import DosSpec, RunRecord, ThermoCurve, TkEstimate, TkMethod
from ..services import bath, metrology
from ..services.export_service import ExportService
from ..services.processing import load_manifest_curves


def _estimate_tk(
    method: TkMethod,
    record: RunRecord,
    curves: Dict[str, ThermoCurve],
    same_coupling: List[RunRecord],
    dos: DosSpec,
    calibration: Optional[float] = None,
) -> TkEstimate:
    if method in (TkMethod.PERTURBATIVE, TkMethod.TBG_POWER):
        return metrology.tk_perturbative(bath.fermi_level_dos(dos), record.J, dos.D, dos.family)
    if method == TkMethod.MAGNETIZATION_QUARTER:
        scan = sorted((r.B, float(curves[r.curve_id].m_imp[-1])) for r in same_coupling if r.B > 0)
        return metrology.tk_operational(curves[record.curve_id], method, scan, calibration)
    # zero-field run of the same coupling when the sweep has one
    source = next((r for r in same_coupling if r.B == 0.0), record)
    return metrology.tk_operational(curves[source.curve_id], method)


@click.command("collapse")
@click.argument("manifest_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--tk", "tk_method", type=click.Choice([m.value for m in TkMethod]), default=TkMethod.ENTROPY_HALF_LN2.value)
@click.option("--allow-mixed", is_flag=True, help="Collapse curves from different DoS families together.")
@click.option("--window", nargs=2, type=float, default=None, help="Restrict the comparison to T/T_K in [LO, HI].")
@click.option("--out", "out_path", default=None, help="CSV path (default: collapse.csv next to the manifest).")
def command(manifest_path, tk_method, allow_mixed, window, out_path):
    """Rescale the manifest's curves to (T/T_K, Q T_K/B) and report how well they collapse."""
    manifest, curves, missing = load_manifest_curves(manifest_path)
    records = [r for r in manifest["records"] if r.curve_id in curves]
    families = sorted({r.family.value for r in records})
    if len(families) > 1 and not allow_mixed:
        raise ConfigError(f"manifest mixes DoS families {families}; pass --allow-mixed to collapse them together")

    method = TkMethod(tk_method)
    calibration = get_quarter_calibration() if method == TkMethod.MAGNETIZATION_QUARTER else None
    dos_payload = manifest.get("dos")
    selected, tks, skipped = {}, {}, []
    for record in records:
        if record.B == 0.0:
            continue
        dos = DosSpec(**dos_payload) if dos_payload else DosSpec(family=record.family)
        same_coupling = [r for r in records if r.J == record.J and r.model == record.model]
        try:
            tks[record.curve_id] = _estimate_tk(method, record, curves, same_coupling, dos, calibration)
        except (RangeError, ValueError) as exc:
            logging.warning("collapse: no T_K for %s (%s)", record.curve_id, exc)
            skipped.append(record.curve_id)
            continue
        selected[record.curve_id] = curves[record.curve_id]
    if not selected:
        raise EmptyOverlapError("no curve in the manifest has a usable T_K and a nonzero field")

    result = metrology.collapse_dataset(selected, tks, window=tuple(window) if window else None)
    out_path = out_path or os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "collapse.csv")
    ExportService.write_bytes(out_path, ExportService.collapse_to_csv(result.table))

    summary = {
        "table": out_path,
        "tk_method": method.value,
        "quarter_calibration": calibration,
        "max_deviation": result.max_deviation,
        "pairwise": result.pairwise,
        "overlap": list(result.overlap),
        "tk": {k: v.value for k, v in tks.items()},
        "warnings": result.warnings,
        "skipped": skipped,
        "missing": missing,
    }
    click.echo(json.dumps(summary, indent=2, sort_keys=True))
