import asyncio
import logging
import os
import time
from typing import Any, List, Optional, Sequence

import numpy as np
import yaml
from pydantic import ValidationError
from tqdm import tqdm

from ..config import settings
from ..exceptions import ConfigError
from ..models import CachePolicy, IsingParams, ModelKind, RunConfig, RunRecord, RunStatus, SweepPoint, ThermoCurve
from . import bath, ising_exact, meanfield, metrology, nbl, nrg
from .cache_service import RunCache
from .export_service import ExportService

MANIFEST = "manifest.json"


# =========================
# CONFIG FILES
# =========================

def _node_line(root: Optional[yaml.Node], loc: Sequence[Any]) -> Optional[int]:
    """1-based line of the deepest YAML node reachable along a pydantic error location."""
    node, line = root, None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            match = next((v for k, v in node.value if k.value == str(part)), None)
            if match is None:
                break
            node = match
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
        else:
            break
        line = node.start_mark.line + 1
    return line


def parse_run_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", line=mark.line + 1 if mark else None)
    if not isinstance(data, dict):
        raise ConfigError("run config must be a mapping")
    try:
        return RunConfig(**data)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = list(first["loc"])
        raise ConfigError(first["msg"], line=_node_line(root, loc), field=".".join(str(p) for p in loc) or None)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}")
    return parse_run_config(text)


# =========================
# ONE POINT
# =========================

def _ising_greens(point: SweepPoint, T_max: float):
    solver = point.solver
    if solver.grid_points is None and solver.eta is None:
        return None
    grid = bath.frequency_grid(point.dos.D, n_points=solver.grid_points, T=T_max)
    return bath.greens_from_dos(point.dos, grid, eta=solver.eta)


def _nrg_curve(point: SweepPoint, temperatures: np.ndarray) -> ThermoCurve:
    solver = point.solver
    params = nrg.nrg_params(
        point.J,
        point.B,
        point.dos,
        preset=solver.preset,
        lambda_=solver.lambda_,
        n_kept=solver.n_kept,
        n_max=solver.n_max,
        beta_bar=solver.beta_bar,
    )
    run = nrg.run_nrg(params, store_vectors=solver.negativity)
    lowest, highest = run.curve.T[-1], run.curve.T[0]
    inside = temperatures[(temperatures >= lowest) & (temperatures <= highest)]
    warnings = []
    if len(inside) < len(temperatures):
        warnings.append(
            f"{len(temperatures) - len(inside)} requested temperature(s) outside the shell range "
            f"[{lowest:.3e}, {highest:.3e}] were dropped"
        )
        logging.warning("run_point: %s %s", point.curve_id, warnings[-1])
    curve = nrg.magnetization_curve(params, inside, run=run)
    if solver.negativity:
        curve = curve.with_columns(neg_local=np.array([nrg.rdm_negativity_local(run, params, T) for T in curve.T]))
    return curve.with_columns(warnings=curve.warnings + warnings)


def run_point(point: SweepPoint) -> ThermoCurve:
    """Synchronous job: compute one (model, J, B) curve including the sensitivity columns."""
    T = point.temperatures.values()
    solver = point.solver
    if point.model == ModelKind.FREE_SPIN:
        curve = metrology.free_spin_curve(point.B, T)
    elif point.model == ModelKind.ISING:
        params = IsingParams.common_field(point.J, point.B, float(T[0]), point.dos)
        curve = ising_exact.magnetization_curve(params, T, greens=_ising_greens(point, float(T[0])))
    elif point.model == ModelKind.MEAN_FIELD:
        params = IsingParams.common_field(point.J, point.B, float(T[0]), point.dos)
        curve = meanfield.magnetization_curve(params, T, tol=solver.tol, max_iter=solver.max_iter)
    elif point.model == ModelKind.NBL:
        curve = nbl.nbl_curve(point.B, point.J, T)
    else:
        curve = _nrg_curve(point, T)

    if curve.dm_dT is None:
        curve = metrology.temperature_derivative(curve, smoothing=solver.smoothing)
    curve = metrology.sensitivity_columns(curve)
    provenance = {**curve.provenance, "curve_id": point.curve_id, "point_hash": point.key()}
    return curve.with_columns(provenance=provenance)


# =========================
# SWEEPS
# =========================

def curve_artifact(point: SweepPoint) -> str:
    return f"curves/{point.curve_id}.csv"


async def _sweep_point(
    point: SweepPoint,
    config: RunConfig,
    config_hash: str,
    cache: RunCache,
    out_dir: str,
    semaphore: asyncio.Semaphore,
) -> RunRecord:
    record = RunRecord(
        curve_id=point.curve_id,
        status=RunStatus.COMPLETED,
        model=point.model,
        family=point.dos.family,
        J=point.J,
        B=point.B,
        config_hash=config_hash,
        point_hash=point.key(),
    )
    async with semaphore:
        started = time.perf_counter()
        try:
            curve = cache.get(record.point_hash) if config.cache == CachePolicy.USE else None
            if curve is not None:
                record.status = RunStatus.CACHED
            else:
                curve = await asyncio.to_thread(run_point, point)
                if config.cache != CachePolicy.OFF:
                    await cache.aput(record.point_hash, curve)
            artifact = curve_artifact(point)
            await asyncio.to_thread(
                ExportService.write_bytes, os.path.join(out_dir, artifact), ExportService.curve_to_csv(curve)
            )
            record.artifacts = [artifact]
            record.warnings = list(curve.warnings)
        except Exception as exc:
            logging.exception("Sweep point %s failed", point.curve_id)
            record.status = RunStatus.FAILED
            record.error_message = f"{type(exc).__name__}: {exc}"
        record.wall_time = time.perf_counter() - started
    return record


async def run_sweep(
    config: RunConfig,
    cache: RunCache,
    out_dir: Optional[str] = None,
    workers: Optional[int] = None,
) -> List[RunRecord]:
    """Run every point of ``config`` on a bounded pool and write the manifest.

    Failed points are recorded and the sweep carries on; the caller decides
    what a failure means for the exit status.
    """
    out_dir = out_dir or config.output_dir
    workers = workers or config.workers or settings.THERMO_WORKERS
    points = config.points()
    config_hash = config.config_hash()
    semaphore = asyncio.Semaphore(max(1, workers))

    logging.info("run_sweep: %s points, %s workers, output in %s", len(points), workers, out_dir)
    progress = tqdm(total=len(points), desc="sweep", unit="point", leave=False)

    async def tracked(point: SweepPoint) -> RunRecord:
        record = await _sweep_point(point, config, config_hash, cache, out_dir, semaphore)
        progress.update(1)
        return record

    try:
        records = await asyncio.gather(*(tracked(p) for p in points))
    finally:
        progress.close()

    manifest = ExportService.build_manifest(records, config_hash, config.dos.model_dump(mode="json"))
    await asyncio.to_thread(ExportService.write_bytes, os.path.join(out_dir, MANIFEST), ExportService.dumps(manifest))
    return list(records)


# =========================
# MANIFESTS
# =========================

def load_manifest_curves(path: str):
    """Manifest plus the curves of its finished records.

    Returns ``(manifest, curves, missing)``: curves keyed by curve_id with the
    record's field in their provenance, and the ids whose artifacts are gone.
    """
    try:
        manifest = ExportService.load_manifest(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}")
    curves, missing = {}, []
    for record in manifest["records"]:
        if record.status == RunStatus.FAILED or not record.artifacts:
            continue
        artifact = ExportService.artifact_path(path, record.artifacts[0])
        try:
            with open(artifact, "rb") as f:
                curve = ExportService.curve_from_csv(f.read())
        except (OSError, ValueError):
            logging.warning("load_manifest_curves: artifact %s of %s is unreadable", artifact, record.curve_id)
            missing.append(record.curve_id)
            continue
        provenance = {"model": record.model.value, "J": record.J, "B": record.B, "curve_id": record.curve_id}
        curves[record.curve_id] = curve.with_columns(provenance=provenance, warnings=list(record.warnings))
    return manifest, curves, missing
