"""Exact Ising impurity (J_perp = 0) via boundary-potential Green's functions.

With J_perp = 0 the impurity projection S_I^z is conserved and each
(S_I^z, sigma) sector is a free-fermion bath with a potential
eps = sigma (B_0 + Jz S_I^z) on the boundary orbital. Only the change of the
bath partition function matters for the magnetization, so everything below
works with the shift of the total DoS, written as the phase
arg(1 - eps G00) plus bound-state poles.
"""
import logging
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy import optimize, special

from ..config import settings
from ..exceptions import IntegrityError, QuadratureError
from ..models import (
    ALL_SECTORS,
    DosFamily,
    IsingParams,
    LocalGreensFunction,
    SectorLabel,
    SpectralShift,
    ThermoCurve,
)
from . import bath

COUNT_TOLERANCE = 1e-6
COUNT_FAILURE = 1e-4


def boundary_potential(p: IsingParams, s: SectorLabel) -> float:
    return s.sigma * (p.B_0 + p.Jz * s.S_I)


def delta_g_local(G: LocalGreensFunction, eps: float) -> np.ndarray:
    """G^eps_00 - G^0_00 from the Dyson equation 1/G^eps = 1/G^0 - eps."""
    g = G.values
    if eps == 0.0:
        return np.zeros_like(g)
    return eps * g * g / (1.0 - eps * g)


# =========================
# BOUND STATES
# =========================

def spectral_parts(G: LocalGreensFunction) -> Tuple[np.ndarray, np.ndarray]:
    """Re G and pi*rho; the DoS is taken unbroadened whenever it is known."""
    if G.dos is not None:
        return G.values.real, np.pi * bath.dos_eval(G.dos, G.grid)
    return G.values.real, np.clip(-G.values.imag, 0.0, None)


def _raw_phase(G: LocalGreensFunction, eps: float) -> np.ndarray:
    real, spectral = spectral_parts(G)
    return np.sign(eps) * np.arctan2(abs(eps) * spectral, 1.0 - eps * real)


def _secular(G: LocalGreensFunction, eps: float):
    def secular(w):
        return 1.0 - eps * bath.evaluate_greens(G.dos, w, G.eta)[0].real[0]

    return secular


def _residue(G: LocalGreensFunction, eps: float, omega_b: float, h: float) -> float:
    """Residue of G/(1 - eps G) at its pole, where G = 1/eps."""
    _, derivative = bath.evaluate_greens(G.dos, omega_b, G.eta)
    if derivative is None:
        upper = bath.evaluate_greens(G.dos, omega_b + h, G.eta)[0].real[0]
        lower = bath.evaluate_greens(G.dos, omega_b - h, G.eta)[0].real[0]
        slope = (upper - lower) / (2.0 * h)
    else:
        slope = derivative.real[0]
    return float(-1.0 / (eps * eps * slope))


def _root(secular, lo: float, hi: float) -> float:
    return optimize.brentq(secular, lo, hi, xtol=1e-15 * max(1.0, abs(lo), abs(hi)), rtol=4 * np.finfo(float).eps)


def _locate(G: LocalGreensFunction, eps: float, i: int) -> Tuple[float, float]:
    """Position and local residue of the bound state between grid[i] and grid[i+1]."""
    lo, hi = float(G.grid[i]), float(G.grid[i + 1])
    x_lo = 1.0 - eps * G.values.real[i]
    x_hi = 1.0 - eps * G.values.real[i + 1]
    omega_b = lo - x_lo * (hi - lo) / (x_hi - x_lo)

    if G.dos is None:
        slope = (G.values.real[i + 1] - G.values.real[i]) / (hi - lo)
        return float(omega_b), float(-1.0 / (eps * eps * slope))

    secular = _secular(G, eps)
    if np.sign(secular(lo)) != np.sign(secular(hi)):
        omega_b = _root(secular, lo, hi)
    return float(omega_b), _residue(G, eps, omega_b, 1e-4 * (hi - lo))


def _beyond_window(G: LocalGreensFunction, eps: float) -> Optional[Tuple[float, float]]:
    """Bound state pushed past the end of the grid by a strong potential."""
    edge = float(G.grid[-1] if eps > 0 else G.grid[0])
    secular = _secular(G, eps)
    step = abs(edge) + 2.0 * abs(eps) + 2.0 * G.dos.D
    far = edge + np.sign(eps) * step
    for _ in range(60):
        if np.sign(secular(far)) != np.sign(secular(edge)):
            lo, hi = sorted((edge, far))
            omega_b = _root(secular, lo, hi)
            return omega_b, _residue(G, eps, omega_b, 1e-6 * step)
        far = edge + (far - edge) * 2.0
    logging.warning("bound_states: no root beyond the window for eps=%g", eps)
    return None


def bound_states(G: LocalGreensFunction, eps: float) -> List[Tuple[float, float]]:
    """(position, local residue) of every bound state the grid cannot resolve.

    A bound state shows up as a drop of the phase by pi between two adjacent
    grid points, where 1 - eps Re G changes sign outside the continuum. A
    phase still near pi at the window edge means the state lies beyond the
    grid; it is then found from the closed form of the bath.
    """
    if eps == 0.0 or G.is_discrete:
        return []
    phase = _raw_phase(G, eps)
    jumps = np.flatnonzero(np.diff(phase) < -0.5 * np.pi)
    found = [_locate(G, eps, int(i)) for i in jumps]
    edge_phase = phase[-1] if eps > 0 else phase[0]
    if G.dos is not None and abs(edge_phase) > 0.5 * np.pi:
        outside = _beyond_window(G, eps)
        if outside is not None:
            found.append(outside)
    return sorted(found)


def discrete_levels(G: LocalGreensFunction, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Exact perturbed levels of a pole bath and their weight on the boundary orbital."""
    positions, weights = G.poles[:, 0], G.poles[:, 1]
    coupling = np.sqrt(weights)
    levels, vectors = np.linalg.eigh(np.diag(positions) + eps * np.outer(coupling, coupling))
    return levels, (coupling @ vectors) ** 2


# =========================
# TOTAL DOS CHANGE
# =========================

def _infer_eps(G: LocalGreensFunction, delta_g00: np.ndarray) -> float:
    if not np.any(delta_g00):
        return 0.0
    return float(np.median((1.0 / G.values - 1.0 / (G.values + delta_g00)).real))


def delta_g_total(
    G: LocalGreensFunction,
    delta_g00: np.ndarray,
    eps: Optional[float] = None,
) -> SpectralShift:
    """Orbital-summed change of the bath Green's function.

    On the grid this is delta_g00 * (1 - dDelta/domega). Bound states come back
    as poles of weight one; for discrete baths the perturbed and unperturbed
    levels are returned instead and the shift is exact.
    """
    eps = _infer_eps(G, delta_g00) if eps is None else float(eps)
    if eps == 0.0:
        zeros = np.zeros_like(G.values)
        return SpectralShift(eps=0.0, grid=G.grid, delta_g_total=zeros, phase=np.zeros(len(G.grid)))

    _, d_delta = bath.hybridization(G)
    total = delta_g00 * (1.0 - d_delta)

    if G.is_discrete:
        levels, residues = discrete_levels(G, eps)
        old = G.poles[:, 0]
        poles = np.concatenate([
            np.column_stack([levels, np.ones(len(levels))]),
            np.column_stack([old, -np.ones(len(old))]),
        ])
        return SpectralShift(
            eps=eps,
            grid=G.grid,
            delta_g_total=total,
            poles=poles,
            residues=np.concatenate([residues, np.zeros(len(old))]),
            state_count=float(poles[:, 1].sum()),
        )

    found = bound_states(G, eps)
    phase = _raw_phase(G, eps)
    for omega_b, _ in found:
        phase = phase + np.pi * (G.grid > omega_b)
    poles = np.array([[w, 1.0] for w, _ in found]).reshape(-1, 2)
    residues = np.array([r for _, r in found])

    count = float(-(phase[-1] - phase[0]) / np.pi + poles[:, 1].sum())
    warnings = []
    if abs(count) > COUNT_FAILURE:
        raise IntegrityError(
            f"spectral weight change {count:.3e} for eps={eps:g} on {G.kind}; "
            "a bound state is probably outside the frequency window"
        )
    if abs(count) > COUNT_TOLERANCE:
        warnings.append(f"state counting off by {count:.2e} for eps={eps:g}")
        logging.warning("delta_g_total: state counting off by %.2e for eps=%g", count, eps)

    return SpectralShift(
        eps=eps,
        grid=G.grid,
        delta_g_total=total,
        phase=phase,
        poles=poles,
        residues=residues,
        state_count=count,
        warnings=warnings,
    )


def _log_occupation(omega, T: float):
    """ln(1 + exp(-omega/T)) without overflow."""
    return np.logaddexp(0.0, -np.asarray(omega, dtype=float) / T)


def fermi_quadrature(integrand: np.ndarray, grid: np.ndarray, what: str) -> float:
    """Trapezoid rule on the frequency grid, checked against every other point.

    The band edges are bracketed by grid points, so steps in the integrand
    cost nothing; a disagreement with the half grid means the grid is too
    coarse for the Fermi window.
    """
    fine = float(np.trapezoid(integrand, grid))
    coarse = float(np.trapezoid(integrand[::2], grid[::2]))
    if abs(fine - coarse) > 1e-3 * (1.0 + abs(fine)):
        raise QuadratureError(f"{what} did not converge (full grid {fine:.6e}, half grid {coarse:.6e})", len(grid), float(grid[-1]))
    return fine


def ln_z_shift(shift: SpectralShift, T: float) -> float:
    """Integral of the total DoS change against ln(1 + e^{-omega/T}), poles included.

    The continuous part is integrated by parts so that only the phase, never
    its derivative, is sampled: the Fermi function is the kernel.
    """
    if T <= 0:
        raise ValueError("temperature must be positive")
    value = float(np.sum(shift.poles[:, 1] * _log_occupation(shift.poles[:, 0], T))) if len(shift.poles) else 0.0
    if shift.phase is None or not np.any(shift.phase):
        return value

    grid, phase = shift.grid, shift.phase
    relative = phase - phase[0]
    integrand = relative * special.expit(-grid / T)
    fine = fermi_quadrature(integrand, grid, f"phase integral at T={T:g}")

    tail = abs(phase[0]) / np.pi * float(_log_occupation(grid[0], T))
    if tail > 1e-8:
        logging.warning("ln_z_shift: weight below the window may shift ln Z by up to %.2e", tail)

    value += -relative[-1] / np.pi * float(_log_occupation(grid[-1], T)) - fine / (np.pi * T)
    return float(value)


# =========================
# MAGNETIZATION
# =========================

def free_spin_magnetization(B, T):
    return -0.5 * np.tanh(np.asarray(B) / (2.0 * np.asarray(T)))


def _is_wide_band(p: IsingParams) -> bool:
    scale = max(abs(p.Jz), abs(p.B_I), abs(p.B_0), p.T)
    return p.dos.family == DosFamily.FLAT and p.dos.D >= settings.wide_band_ratio * scale


def greens_for(p: IsingParams, T_max: Optional[float] = None) -> LocalGreensFunction:
    window = max(5.0 * p.dos.D, 50.0 * (T_max or p.T))
    return bath.default_greens(p.dos, window=window)


def sector_shifts(p: IsingParams, G: LocalGreensFunction) -> Dict[SectorLabel, SpectralShift]:
    shifts = {}
    for sector in ALL_SECTORS:
        eps = boundary_potential(p, sector)
        shifts[sector] = delta_g_total(G, delta_g_local(G, eps), eps)
    return shifts


def _from_shifts(p: IsingParams, shifts: Dict[SectorLabel, SpectralShift], T: float) -> float:
    log_z = {0.5: -p.B_I * 0.5 / T, -0.5: p.B_I * 0.5 / T}
    for sector, shift in shifts.items():
        log_z[sector.S_I] += ln_z_shift(shift, T)
    return float(0.5 * np.tanh(0.5 * (log_z[0.5] - log_z[-0.5])))


def magnetization(p: IsingParams, greens: Optional[LocalGreensFunction] = None) -> float:
    """<S_I^z> = (1/2)(Z_up - Z_down)/(Z_up + Z_down), assembled in log space.

    ``greens`` overrides the bath Green's function built from ``p.dos``; pass
    a ``greens_from_poles`` result to solve a finite bath exactly.
    """
    if p.B_0 == 0.0 or (greens is None and _is_wide_band(p)):
        return float(free_spin_magnetization(p.B_I, p.T))
    G = greens if greens is not None else greens_for(p)
    return _from_shifts(p, sector_shifts(p, G), p.T)


def magnetization_curve(
    params: IsingParams,
    temperatures: Iterable[float],
    greens: Optional[LocalGreensFunction] = None,
) -> ThermoCurve:
    """Magnetization on a descending temperature grid with one set of sector shifts."""
    T = np.sort(np.asarray(list(temperatures), dtype=float))[::-1]
    G = greens if greens is not None else greens_for(params, T_max=float(T[0]))
    shifts = None
    m = np.empty(len(T))
    method = "phase_shift" if not G.is_discrete else "discrete"
    for i, t in enumerate(T):
        p = params.model_copy(update={"T": float(t)})
        if p.B_0 == 0.0 or (greens is None and _is_wide_band(p)):
            m[i] = free_spin_magnetization(p.B_I, t)
            method = "closed_form"
            continue
        if shifts is None:
            shifts = sector_shifts(params, G)
        m[i] = _from_shifts(p, shifts, float(t))

    warnings = list(G.warnings)
    for shift in (shifts or {}).values():
        warnings.extend(shift.warnings)
    return ThermoCurve(
        T=T,
        m_imp=m,
        provenance={
            "model": "ising",
            "dos": params.dos.label,
            "Jz": params.Jz,
            "B_I": params.B_I,
            "B_0": params.B_0,
            "method": method,
            "grid_points": len(G.grid),
            "approximations": params.dos.approximations,
        },
        warnings=sorted(set(warnings)),
    )
