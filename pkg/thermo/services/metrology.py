"""Thermometric quantities derived from the impurity magnetization.

The probe populations are p_{up/down} = 1/2 -+ <S_I^z>, so the Fisher
information for temperature, the QSNR and the Kondo-regime rescalings all
follow from m(T) and its temperature derivative.
"""
import itertools
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.signal import savgol_filter

from ..config import settings
from ..exceptions import DivergentFisherError, EmptyOverlapError, RangeError, SaturationError
from ..models import (
    DosFamily,
    PeakSummary,
    SensitivityPoint,
    ThermoCurve,
    TkEstimate,
    TkMethod,
    canonical_hash,
)
from .ising_exact import free_spin_magnetization

SATURATION = 1e-12
NORMALIZATION = 1e-8
SMOOTHING_NOISE = 1e-4
COLLAPSE_REGIME = 0.1
HALF_LN2 = 0.5 * np.log(2.0)


# =========================
# ENTANGLEMENT
# =========================

def partial_transpose(rho: np.ndarray, dims: Tuple[int, int], subsystem: int = 0) -> np.ndarray:
    """Transpose ``rho`` on one factor of a bipartite dA x dB space."""
    dA, dB = dims
    blocks = np.asarray(rho).reshape(dA, dB, dA, dB)
    if subsystem == 0:
        blocks = blocks.transpose(2, 1, 0, 3)
    elif subsystem == 1:
        blocks = blocks.transpose(0, 3, 2, 1)
    else:
        raise ValueError("subsystem must be 0 or 1")
    return blocks.reshape(dA * dB, dA * dB)


def negativity(rho: np.ndarray, dims: Tuple[int, int], subsystem: int = 0) -> float:
    """N = (||rho^{T_A}||_1 - 1) / 2, the summed magnitude of the negative eigenvalues."""
    eigenvalues = np.linalg.eigvalsh(partial_transpose(rho, dims, subsystem))
    return float(max(0.0, -eigenvalues[eigenvalues < 0].sum()))


def negativity_full_bath(m: float) -> float:
    """Impurity / whole-bath negativity of a pure screened ground state, valid for T << T_K."""
    if abs(m) > 0.5 + SATURATION:
        raise ValueError(f"|m| = {abs(m):.6g} exceeds 1/2")
    return 0.5 * float(np.sqrt(max(0.0, 1.0 - 4.0 * m * m)))


# =========================
# FISHER INFORMATION
# =========================

def fisher_information(p_k: Sequence[float], dp_k: Sequence[float]) -> float:
    p = np.asarray(p_k, dtype=float)
    dp = np.asarray(dp_k, dtype=float)
    if p.shape != dp.shape:
        raise ValueError("probabilities and derivatives differ in length")
    if np.any(p < 0) or abs(p.sum() - 1.0) > NORMALIZATION:
        raise ValueError("probabilities must be non-negative and sum to 1")
    if abs(dp.sum()) > NORMALIZATION:
        raise ValueError("probability derivatives must sum to 0")
    empty = p == 0
    if np.any(dp[empty] != 0):
        raise DivergentFisherError("an outcome with zero probability has a nonzero derivative")
    return float(np.sum(dp[~empty] ** 2 / p[~empty]))


def qfi_two_level(m: float, dm_dT: float) -> float:
    """dm_dT^2 / (1/4 - m^2) for a probe diagonal in the energy basis."""
    if abs(m) >= 0.5 - SATURATION:
        raise SaturationError(f"|m| = {abs(m):.15g} is saturated; the probe carries no thermal information")
    return float(dm_dT**2 / (0.25 - m * m))


def qsnr(T, qfi):
    if np.any(np.asarray(qfi) < 0):
        raise ValueError("qfi must be non-negative")
    return np.asarray(T) * np.sqrt(qfi)


def free_spin_qsnr(B, T):
    """(B/2T) sech(B/2T); maximal (0.6627) at B/T = 2.399."""
    if np.any(np.asarray(T) <= 0):
        raise ValueError("temperature must be positive")
    x = np.abs(np.asarray(B, dtype=float) / (2.0 * np.asarray(T, dtype=float)))
    with np.errstate(over="ignore"):
        return x / np.cosh(x)


def sensitivity_point(T: float, B: float, m: float, dm_dT: float) -> SensitivityPoint:
    qfi = qfi_two_level(m, dm_dT)
    return SensitivityPoint(T=T, B=B, m=m, dm_dT=dm_dT, qfi=qfi, qsnr=float(qsnr(T, qfi)))


# =========================
# CURVES
# =========================

def free_spin_curve(B: float, temperatures: Iterable[float]) -> ThermoCurve:
    T = np.sort(np.asarray(list(temperatures), dtype=float))[::-1]
    return ThermoCurve(
        T=T,
        m_imp=free_spin_magnetization(B, T),
        s_imp=np.log(2.0 * np.cosh(B / (2.0 * T))) - (B / (2.0 * T)) * np.tanh(B / (2.0 * T)),
        provenance={"model": "free_spin", "B": B},
    )


def _log_stencil(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """dm/dx with the 5-point centered stencil on a uniform grid, 3-point elsewhere."""
    steps = np.diff(x)
    derivative = np.gradient(m, x, edge_order=2)
    if len(m) >= 5 and np.allclose(steps, steps[0], rtol=1e-9):
        h = steps[0]
        derivative[2:-2] = (-m[4:] + 8.0 * m[3:-1] - 8.0 * m[1:-3] + m[:-4]) / (12.0 * h)
    return derivative


def temperature_derivative(curve: ThermoCurve, smoothing: bool = False) -> ThermoCurve:
    """Fill ``dm_dT`` by finite differences in ln T.

    With ``smoothing`` a window-5, order-2 local polynomial fit replaces the
    stencil, but only when the point-to-point noise exceeds 1e-4.
    """
    if len(curve.T) < 5:
        raise ValueError(f"temperature_derivative needs at least 5 points, got {len(curve.T)}")
    x = np.log(curve.T)
    m = curve.m_imp
    provenance = dict(curve.provenance)
    provenance["dm_dT"] = "finite_difference_lnT"
    provenance["dm_dT_endpoints"] = "one-sided 3-point"

    derivative = _log_stencil(m, x)
    if smoothing:
        smoothed = savgol_filter(m, window_length=5, polyorder=2)
        noise = float(np.max(np.abs(m - smoothed)))
        if noise > SMOOTHING_NOISE:
            derivative = np.gradient(smoothed, x, edge_order=2)
            provenance["smoothing"] = {"window": 5, "order": 2, "noise": noise}
            logging.info("temperature_derivative: smoothing applied (noise %.3e)", noise)
    return curve.with_columns(dm_dT=derivative / curve.T, provenance=provenance)


def sensitivity_columns(curve: ThermoCurve) -> ThermoCurve:
    """Fill ``qfi`` and ``qsnr`` from m and dm_dT; saturated points get NaN and a warning."""
    if curve.dm_dT is None:
        curve = temperature_derivative(curve)
    m = curve.m_imp
    saturated = np.abs(m) >= 0.5 - SATURATION
    qfi = np.full(len(m), np.nan)
    free = ~saturated
    qfi[free] = curve.dm_dT[free] ** 2 / (0.25 - m[free] ** 2)
    warnings = list(curve.warnings)
    if np.any(saturated):
        warnings.append(f"{int(saturated.sum())} saturated point(s) have undefined QFI")
    return curve.with_columns(qfi=qfi, qsnr=curve.T * np.sqrt(qfi), warnings=warnings)


def peak_summary(curve: ThermoCurve) -> PeakSummary:
    """Vertex of the parabola through the QSNR maximum and its neighbours in (ln T, Q)."""
    if curve.qsnr is None:
        curve = sensitivity_columns(curve)
    Q = curve.qsnr
    if not np.any(np.isfinite(Q)):
        raise RangeError("curve has no finite QSNR values")
    i = int(np.nanargmax(Q))
    if i == 0 or i == len(Q) - 1 or not np.all(np.isfinite(Q[i - 1: i + 2])):
        return PeakSummary(T_max=float(curve.T[i]), Q_max=float(Q[i]), order=0, at_boundary=True)

    x = np.log(curve.T[i - 1: i + 2])
    a, b, c = np.polyfit(x, Q[i - 1: i + 2], 2)
    if a >= 0:
        return PeakSummary(T_max=float(curve.T[i]), Q_max=float(Q[i]), order=0)
    vertex = -b / (2.0 * a)
    return PeakSummary(T_max=float(np.exp(vertex)), Q_max=float(np.polyval([a, b, c], vertex)))


# =========================
# KONDO TEMPERATURE
# =========================

def tk_perturbative(rho0: float, J: float, D: float, family: DosFamily) -> TkEstimate:
    """Order-of-magnitude T_K with unit prefactor."""
    inputs = canonical_hash({"rho0": rho0, "J": J, "D": D, "family": family.value})
    if family == DosFamily.GRAPHENE:
        return TkEstimate(value=0.0, method=TkMethod.PERTURBATIVE, inputs_hash=inputs, no_kondo=True)
    coupling = rho0 * J
    if coupling <= 0:
        raise ValueError("rho0 * J must be positive for an antiferromagnetic Kondo scale")
    if coupling >= 1:
        logging.warning("tk_perturbative: rho0*J = %.3g is outside the weak-coupling regime", coupling)
    if family == DosFamily.TBG:
        return TkEstimate(value=D * coupling**4, method=TkMethod.TBG_POWER, inputs_hash=inputs, order_of_magnitude=True)
    return TkEstimate(
        value=D * float(np.exp(-1.0 / coupling)),
        method=TkMethod.PERTURBATIVE,
        inputs_hash=inputs,
        order_of_magnitude=True,
    )


def _log_crossing(x: np.ndarray, y: np.ndarray, level: float) -> Optional[float]:
    """First point along x where y crosses ``level``, interpolated linearly in ln x."""
    order = np.argsort(x)
    x, y = np.log(x[order]), y[order] - level
    hits = np.flatnonzero(np.sign(y[:-1]) * np.sign(y[1:]) <= 0)
    hits = [i for i in hits if y[i] != y[i + 1]]
    if not hits:
        return None
    i = hits[0]
    return float(np.exp(x[i] - y[i] * (x[i + 1] - x[i]) / (y[i + 1] - y[i])))


def quarter_field(field_scan: Sequence[Tuple[float, float]]) -> float:
    """Smallest B at which the low-temperature <S_I^z>(B) reaches -1/4."""
    B, m = (np.asarray(v, dtype=float) for v in zip(*field_scan))
    found = _log_crossing(B, m, -0.25)
    if found is None:
        raise RangeError("field scan does not reach <S_I^z> = -1/4")
    return found


def tk_operational(
    curve: ThermoCurve,
    method: TkMethod = TkMethod.ENTROPY_HALF_LN2,
    field_scan: Optional[Sequence[Tuple[float, float]]] = None,
    calibration: Optional[float] = None,
) -> TkEstimate:
    """T_K from a zero-field curve (entropy crossing ln2/2) or from a low-T field scan."""
    inputs = canonical_hash({"provenance": curve.provenance, "method": method.value, "n": len(curve.T)})
    if method == TkMethod.ENTROPY_HALF_LN2:
        if curve.s_imp is None:
            raise ValueError("EntropyHalfLn2 needs an entropy column")
        found = _log_crossing(curve.T, curve.s_imp, HALF_LN2)
        if found is None:
            raise RangeError("S_imp never crosses ln2/2 on this temperature range")
        return TkEstimate(value=found, method=method, inputs_hash=inputs)
    if method == TkMethod.MAGNETIZATION_QUARTER:
        if not field_scan:
            raise ValueError("MagnetizationQuarter needs a field scan of (B, m) pairs")
        constant = calibration if calibration is not None else settings.tk_quarter_calibration
        if constant is None:
            raise ValueError(
                "MagnetizationQuarter needs B_{1/4}/T_K; pass calibration (see thermo.cache.get_quarter_calibration)"
            )
        if constant <= 0:
            raise ValueError("quarter-field calibration must be positive")
        return TkEstimate(value=quarter_field(field_scan) / constant, method=method, inputs_hash=inputs)
    raise ValueError(f"{method.value} is not an operational T_K criterion")


def calibrate_quarter_field(tk_entropy: float, field_scan: Sequence[Tuple[float, float]]) -> float:
    """B_{1/4} / T_K of a run whose T_K is known from the entropy criterion."""
    if tk_entropy <= 0:
        raise ValueError("reference T_K must be positive")
    return quarter_field(field_scan) / tk_entropy


# =========================
# COLLAPSE
# =========================

class CollapseResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    table: pd.DataFrame
    max_deviation: float
    pairwise: Dict[str, float] = Field(default_factory=dict)
    overlap: Tuple[float, float]
    warnings: List[str] = Field(default_factory=list)


def curve_field(curve: ThermoCurve) -> float:
    provenance = curve.provenance
    if "B" in provenance:
        return float(provenance["B"])
    return float(provenance["B_I"])


def collapse_dataset(
    curves: Dict[str, ThermoCurve],
    tks: Dict[str, TkEstimate],
    window: Optional[Tuple[float, float]] = None,
    samples: int = 200,
) -> CollapseResult:
    """Rescale each curve to (T/T_K, Q T_K/B) and compare them on their common range.

    The deviation of a pair is the sup-norm difference relative to the larger
    of the two sup-norms over the shared T/T_K range (clipped to ``window``).
    """
    if not curves:
        raise EmptyOverlapError("no curves to collapse")
    frames = []
    rescaled = {}
    warnings = []
    for curve_id, curve in curves.items():
        tk = tks[curve_id].value
        if tk <= 0:
            raise RangeError(f"{curve_id}: T_K must be positive for a collapse")
        B = curve_field(curve)
        if abs(B) / tk >= COLLAPSE_REGIME:
            warnings.append(f"{curve_id}: B/T_K = {abs(B) / tk:.3g} is outside the Kondo regime")
            logging.warning("collapse_dataset: %s has B/T_K = %.3g", curve_id, abs(B) / tk)
        if curve.qsnr is None:
            curve = sensitivity_columns(curve)
        keep = np.isfinite(curve.qsnr)
        x = curve.T[keep] / tk
        y = curve.qsnr[keep] * tk / abs(B)
        order = np.argsort(x)
        rescaled[curve_id] = (np.log(x[order]), y[order])
        frames.append(pd.DataFrame({"t_over_tk": x, "q_rescaled": y, "curve_id": curve_id}))

    low = max(v[0][0] for v in rescaled.values())
    high = min(v[0][-1] for v in rescaled.values())
    if window is not None:
        low, high = max(low, np.log(window[0])), min(high, np.log(window[1]))
    if len(rescaled) > 1 and low >= high:
        raise EmptyOverlapError("the rescaled curves share no T/T_K range")

    pairwise = {}
    grid = np.linspace(low, high, samples)
    for a, b in itertools.combinations(sorted(rescaled), 2):
        ya = np.interp(grid, *rescaled[a])
        yb = np.interp(grid, *rescaled[b])
        scale = max(np.max(np.abs(ya)), np.max(np.abs(yb)))
        pairwise[f"{a}|{b}"] = float(np.max(np.abs(ya - yb)) / scale) if scale > 0 else 0.0

    table = pd.concat(frames, ignore_index=True)
    return CollapseResult(
        table=table,
        max_deviation=max(pairwise.values(), default=0.0),
        pairwise=pairwise,
        overlap=(float(np.exp(low)), float(np.exp(high))),
        warnings=warnings,
    )
