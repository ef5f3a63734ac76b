import json
import logging
import os
from collections import defaultdict
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import click
import numpy as np

from ..exceptions import EmptyOverlapError, RangeError, SaturationError
from ..models import DosFamily, ModelKind, RunRecord, RunStatus, ThermoCurve, TkEstimate, TkMethod
from ..services import metrology
from ..services.export_service import ExportService
from ..services.processing import load_manifest_curves

# maximum of (B/2T) sech(B/2T)
FREE_SPIN_Q_MAX = 0.6627
FREE_SPIN_B_OVER_T = 2.399
# bath polarization shifts the effective impurity field by a few percent at Jz=0.1D
ISING_UNIVERSALITY = 4e-2
COLLAPSE_CONTRAST = 0.1
# the screened-state negativity needs T well below T_K
SCREENED = 0.1


class Item(NamedTuple):
    manifest: int
    record: RunRecord
    curve: ThermoCurve

    @property
    def key(self) -> str:
        return f"{self.manifest}:{self.record.curve_id}"


# =========================
# PER CURVE
# =========================

def _peak(curve: ThermoCurve) -> Optional[Dict[str, Any]]:
    try:
        return metrology.peak_summary(curve).model_dump()
    except RangeError:
        return None


def _tk(curve: ThermoCurve) -> Optional[float]:
    if curve.s_imp is None:
        return None
    try:
        return metrology.tk_operational(curve).value
    except (RangeError, ValueError):
        return None


def _operating_point(B: float, curve: ThermoCurve) -> Optional[Dict[str, Any]]:
    """QFI and QSNR at the grid temperature where the QSNR is largest."""
    if curve.qsnr is None or curve.dm_dT is None or not np.any(np.isfinite(curve.qsnr)):
        return None
    i = int(np.nanargmax(curve.qsnr))
    try:
        point = metrology.sensitivity_point(float(curve.T[i]), B, float(curve.m_imp[i]), float(curve.dm_dT[i]))
    except SaturationError:
        return None
    return point.model_dump()


def _free_spin_deviation(B: float, curve: ThermoCurve) -> Optional[float]:
    """Sup-norm distance of Q(T) from the free-spin QSNR, relative to the free-spin maximum."""
    if B == 0.0 or curve.qsnr is None:
        return None
    Q = curve.qsnr
    expected = metrology.free_spin_qsnr(B, curve.T)
    finite = np.isfinite(Q)
    if not np.any(finite):
        return None
    return float(np.max(np.abs(Q[finite] - expected[finite])) / np.max(np.abs(expected[finite])))


def _curve_checks(model: ModelKind, B: float, peak: Optional[Dict[str, Any]], deviation: Optional[float]):
    checks = {}
    if model == ModelKind.FREE_SPIN and B != 0.0 and peak is not None:
        checks["free_spin_peak"] = bool(
            not peak["at_boundary"]
            and abs(peak["Q_max"] - FREE_SPIN_Q_MAX) <= 1e-3
            and abs(abs(B) / peak["T_max"] - FREE_SPIN_B_OVER_T) <= 1e-2 * FREE_SPIN_B_OVER_T
        )
    if model == ModelKind.ISING and deviation is not None:
        checks["free_spin_universality"] = bool(deviation < ISING_UNIVERSALITY)
    return checks


# =========================
# KONDO SCALES
# =========================

def _zero_field_tks(items: Sequence[Item]) -> Dict[Tuple[int, str, float], float]:
    """Entropy T_K of every zero-field curve, keyed by (manifest, model, J)."""
    tks = {}
    for item in items:
        if item.record.B != 0.0:
            continue
        tk = _tk(item.curve)
        if tk is not None:
            tks[(item.manifest, item.record.model.value, item.record.J)] = tk
    return tks


def _tk_for(item: Item, tks: Dict[Tuple[int, str, float], float]) -> Optional[float]:
    return tks.get((item.manifest, item.record.model.value, item.record.J))


def _peak_scaling(items: Sequence[Item], peaks: Dict[str, Optional[Dict[str, Any]]], tks) -> List[Dict[str, Any]]:
    """Q_max and T_max against B/T_K for every finite-field curve with a zero-field partner."""
    rows = []
    for item in items:
        B, tk, peak = abs(item.record.B), _tk_for(item, tks), peaks[item.key]
        if B == 0.0 or tk is None or peak is None:
            continue
        rows.append({
            "curve_id": item.record.curve_id,
            "model": item.record.model.value,
            "J": item.record.J,
            "B": item.record.B,
            "tk": tk,
            "b_over_tk": B / tk,
            "Q_max": peak["Q_max"],
            "T_max": peak["T_max"],
            "T_max_over_B": peak["T_max"] / B,
            "T_max_over_tk": peak["T_max"] / tk,
            "at_boundary": peak["at_boundary"],
        })
    return sorted(rows, key=lambda r: (r["model"], r["J"], r["b_over_tk"]))


# =========================
# ENTANGLEMENT
# =========================

def _bath_negativity(items: Sequence[Item], tks) -> List[Dict[str, Any]]:
    """Impurity/bath negativity of the screened state from the lowest-temperature magnetization."""
    rows = []
    for item in items:
        if item.record.model != ModelKind.NRG:
            continue
        tk = _tk_for(item, tks)
        T, m = float(item.curve.T[-1]), float(item.curve.m_imp[-1])
        rows.append({
            "curve_id": item.record.curve_id,
            "manifest": item.manifest,
            "J": item.record.J,
            "B": item.record.B,
            "tk": tk,
            "b_over_tk": abs(item.record.B) / tk if tk else None,
            "T": T,
            "m": m,
            "negativity": metrology.negativity_full_bath(m),
            "valid": bool(T < SCREENED * tk) if tk else None,
        })
    return sorted(rows, key=lambda r: (r["manifest"], r["J"], abs(r["B"])))


def _local_negativity(items: Sequence[Item]) -> List[Dict[str, Any]]:
    """Impurity/site-0 negativity at the lowest temperature, ordered by field then coupling."""
    rows = []
    for item in items:
        if item.curve.neg_local is None:
            continue
        rows.append({
            "curve_id": item.record.curve_id,
            "model": item.record.model.value,
            "J": item.record.J,
            "B": item.record.B,
            "T": float(item.curve.T[-1]),
            "negativity": float(item.curve.neg_local[-1]),
        })
    return sorted(rows, key=lambda r: (r["model"], r["B"], r["J"]))


def _negativity_steps(items: Sequence[Item]) -> Dict[str, bool]:
    """Low-temperature negativity against B per NBL coupling: the drop through 1/4 sits at B = J."""
    by_coupling = defaultdict(list)
    for item in items:
        if item.record.model == ModelKind.NBL and item.curve.neg_local is not None:
            by_coupling[item.record.J].append((item.record.B, float(item.curve.neg_local[-1])))
    checks = {}
    for J, scan in by_coupling.items():
        if len(scan) < 3 or J <= 0:
            continue
        B, neg = np.array(sorted(scan)).T
        below = np.flatnonzero(neg < 0.25)
        if len(below) == 0 or below[0] == 0:
            checks[f"negativity_step_J{J:g}"] = False
            continue
        i = below[0]
        step = B[i - 1] + (0.25 - neg[i - 1]) * (B[i] - B[i - 1]) / (neg[i] - neg[i - 1])
        checks[f"negativity_step_J{J:g}"] = bool(abs(step - J) <= 0.02 * J)
    return checks


def _bath_negativity_decay(rows: List[Dict[str, Any]]) -> Dict[str, bool]:
    by_coupling = defaultdict(list)
    for row in rows:
        if row["valid"] and row["B"] > 0:
            by_coupling[(row["manifest"], row["J"])].append((row["B"], row["negativity"]))
    checks = {}
    for (_, J), scan in by_coupling.items():
        if len(scan) < 3:
            continue
        _, neg = np.array(sorted(scan)).T
        name = f"negativity_bath_decreasing_J{J:g}"
        checks[name] = checks.get(name, True) and bool(np.all(np.diff(neg) <= 1e-9))
    return checks


# =========================
# DOS CLASSES
# =========================

def _tk_estimate(value: float) -> TkEstimate:
    return TkEstimate(value=value, method=TkMethod.ENTROPY_HALF_LN2, inputs_hash="report")


def _collapse_contrast(candidate: Item, references: Sequence[Item], tks) -> Optional[float]:
    """Collapse deviation of one curve against the flat-band curve nearest in B/T_K."""
    tk = _tk_for(candidate, tks)
    if tk is None or not references:
        return None
    ratio = abs(candidate.record.B) / tk
    reference = min(references, key=lambda r: abs(np.log(abs(r.record.B) / _tk_for(r, tks) / ratio)))
    try:
        result = metrology.collapse_dataset(
            {reference.key: reference.curve, candidate.key: candidate.curve},
            {reference.key: _tk_estimate(_tk_for(reference, tks)), candidate.key: _tk_estimate(tk)},
        )
    except (EmptyOverlapError, RangeError) as exc:
        logging.warning("report: no collapse between %s and %s (%s)", reference.key, candidate.key, exc)
        return None
    return result.max_deviation


def _dos_classes(items: Sequence[Item], deviations: Dict[str, Optional[float]], peaks, tks) -> Dict[str, Any]:
    """Free-spin distance, peaks and Kondo collapse against the flat band for each DoS family."""
    solved = [i for i in items if i.record.model in (ModelKind.ISING, ModelKind.NRG) and i.record.B != 0.0]
    families = defaultdict(list)
    for item in solved:
        families[item.record.family.value].append(item)
    references = [i for i in families.get(DosFamily.FLAT.value, []) if _tk_for(i, tks)]

    classes = {}
    for family, members in sorted(families.items()):
        known = [deviations[m.key] for m in members if deviations[m.key] is not None]
        contrast = None
        if family != DosFamily.FLAT.value:
            values = [_collapse_contrast(m, references, tks) for m in members if _tk_for(m, tks)]
            values = [v for v in values if v is not None]
            contrast = max(values) if values else None
        classes[family] = {
            "curves": len(members),
            "free_spin_deviation": max(known) if known else None,
            "kondo": any(_tk_for(m, tks) is not None for m in members),
            "collapse_vs_flat": contrast,
            "distinct_from_flat": bool(contrast > COLLAPSE_CONTRAST) if contrast is not None else None,
            "peaks": [
                {"curve_id": m.record.curve_id, "J": m.record.J, "B": m.record.B, **(peaks[m.key] or {})}
                for m in members
            ],
        }
    return classes


# =========================
# COMMAND
# =========================

def _load(manifest_paths: Sequence[str]):
    items, failed, missing = [], [], []
    for index, path in enumerate(manifest_paths):
        manifest, curves, lost = load_manifest_curves(path)
        for record in manifest["records"]:
            if record.status == RunStatus.FAILED:
                failed.append(record.curve_id)
            if record.curve_id in curves:
                items.append(Item(index, record, curves[record.curve_id]))
        missing.extend(lost)
    return items, failed, missing


@click.command("report")
@click.argument("manifest_paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None, help="JSON path (default: report.json next to the first manifest).")
def command(manifest_paths, out_path):
    """Peaks, Kondo scales, entanglement and pass/fail checks for the curves of one or more manifests."""
    items, failed, missing = _load(manifest_paths)
    tks = _zero_field_tks(items)
    peaks = {item.key: _peak(item.curve) for item in items}
    deviations = {item.key: _free_spin_deviation(item.record.B, item.curve) for item in items}

    entries = []
    for item in items:
        record = item.record
        entries.append({
            "curve_id": record.curve_id,
            "manifest": item.manifest,
            "model": record.model.value,
            "family": record.family.value,
            "J": record.J,
            "B": record.B,
            "peak": peaks[item.key],
            "tk": _tk(item.curve),
            "operating_point": _operating_point(record.B, item.curve),
            "free_spin_deviation": deviations[item.key],
            "checks": _curve_checks(record.model, record.B, peaks[item.key], deviations[item.key]),
            "warnings": record.warnings,
        })

    checks = {}
    for entry in entries:
        for name, passed in entry["checks"].items():
            checks[name] = checks.get(name, True) and passed
    bath_rows = _bath_negativity(items, tks)
    checks.update(_negativity_steps(items))
    checks.update(_bath_negativity_decay(bath_rows))

    paths = [os.path.abspath(p) for p in manifest_paths]
    report = {
        "manifest": paths[0],
        "manifests": paths,
        "curves": entries,
        "peak_scaling": _peak_scaling(items, peaks, tks),
        "entanglement": {"bath": bath_rows, "local": _local_negativity(items)},
        "dos_classes": _dos_classes(items, deviations, peaks, tks),
        "checks": checks,
        "failed": failed,
        "missing": missing,
    }
    out_path = out_path or os.path.join(os.path.dirname(paths[0]), "report.json")
    ExportService.write_bytes(out_path, ExportService.dumps(report))
    click.echo(json.dumps({"report": out_path, "curves": len(entries), "checks": checks}, indent=2, sort_keys=True))
