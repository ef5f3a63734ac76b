"""Self-consistent mean field for the Ising impurity.

The impurity sees B_I + Jz <S_0^z> and the boundary orbital sees
B_0 + Jz <S_I^z>; both expectation values are iterated to a fixed point.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy import special

from ..exceptions import ConvergenceError
from ..models import IsingParams, LocalGreensFunction, MfState, ThermoCurve
from . import bath, ising_exact

MIXING = 0.5
MIN_MIXING = 2.0 ** -6
DISTINCT = 1e-6


def bath_occupancy(G: LocalGreensFunction, B_0_eff: float, T: float, sigma: float) -> float:
    """<n_{0 sigma}> of the boundary orbital under the potential sigma*B_0_eff."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    eps = sigma * B_0_eff
    if eps == 0.0 and G.dos is not None and bath.is_particle_hole_symmetric(G.dos):
        return 0.5

    if G.is_discrete:
        levels, residues = ising_exact.discrete_levels(G, eps)
        return float(np.clip(np.sum(residues * special.expit(-levels / T)), 0.0, 1.0))

    real, spectral = ising_exact.spectral_parts(G)
    # -Im G^sigma / pi with G^sigma = G / (1 - eps G)
    local = spectral / (np.pi * ((1.0 - eps * real) ** 2 + (eps * spectral) ** 2))
    found = ising_exact.bound_states(G, eps)
    for omega_b, _ in found:
        i = int(np.searchsorted(G.grid, omega_b))
        local[max(i - 1, 0): i + 1] = 0.0

    n = ising_exact.fermi_quadrature(local * special.expit(-G.grid / T), G.grid, "occupancy integral")
    n += sum(residue * special.expit(-omega_b / T) for omega_b, residue in found)
    return float(np.clip(n, 0.0, 1.0))


def bath_magnetization(G: LocalGreensFunction, B_0_eff: float, T: float) -> float:
    return 0.5 * (bath_occupancy(G, B_0_eff, T, 0.5) - bath_occupancy(G, B_0_eff, T, -0.5))


def mean_field_free_energy(state: MfState, p: IsingParams, G: LocalGreensFunction) -> float:
    """Free energy of the decoupled Hamiltonian, including the -Jz m_imp m_bath constant."""
    T = p.T
    impurity = -T * np.logaddexp(state.B_I_eff / (2 * T), -state.B_I_eff / (2 * T))
    bath_part = 0.0
    for sigma in (0.5, -0.5):
        eps = sigma * state.B_0_eff
        shift = ising_exact.delta_g_total(G, ising_exact.delta_g_local(G, eps), eps)
        bath_part -= T * ising_exact.ln_z_shift(shift, T)
    return float(impurity + bath_part - p.Jz * state.m_imp * state.m_bath)


def _step(p: IsingParams, G: LocalGreensFunction, m_imp: float, m_bath: float) -> Tuple[float, float]:
    new_imp = float(ising_exact.free_spin_magnetization(p.B_I + p.Jz * m_bath, p.T))
    new_bath = bath_magnetization(G, p.B_0 + p.Jz * m_imp, p.T)
    return new_imp, new_bath


def _iterate(
    p: IsingParams,
    G: LocalGreensFunction,
    seed: Tuple[float, float],
    tol: float,
    max_iter: int,
) -> MfState:
    m_imp, m_bath = seed
    alpha = MIXING
    residuals: List[float] = []
    last_sign = 0.0
    for iteration in range(1, max_iter + 1):
        new_imp, new_bath = _step(p, G, m_imp, m_bath)
        d_imp, d_bath = new_imp - m_imp, new_bath - m_bath
        residual = max(abs(d_imp), abs(d_bath))
        residuals.append(residual)
        if residual <= tol:
            # m_imp is the free-spin law at exactly the reported B_I_eff
            return MfState(
                m_imp=new_imp,
                m_bath=m_bath,
                B_I_eff=p.B_I + p.Jz * m_bath,
                B_0_eff=p.B_0 + p.Jz * new_imp,
                iterations=iteration,
                residual=residual,
            )
        sign = float(np.sign(d_imp if abs(d_imp) >= abs(d_bath) else d_bath))
        if last_sign and sign == -last_sign:
            alpha = max(0.5 * alpha, MIN_MIXING)
        last_sign = sign
        m_imp += alpha * d_imp
        m_bath += alpha * d_bath
    raise ConvergenceError(f"mean field did not converge in {max_iter} iterations", residuals)


def solve_self_consistent(
    p: IsingParams,
    tol: float = 1e-10,
    max_iter: int = 500,
    greens: Optional[LocalGreensFunction] = None,
    probe: bool = True,
) -> MfState:
    """Damped fixed-point iteration seeded from the decoupled solution.

    With ``probe`` the iteration is repeated from the two antiparallel
    polarized seeds; when they land on a different fixed point the one with
    the lower mean-field free energy is returned and flagged.
    """
    if tol < 1e-12:
        raise ValueError("tol must be at least 1e-12")
    G = greens if greens is not None else ising_exact.greens_for(p)

    seed = (
        float(ising_exact.free_spin_magnetization(p.B_I, p.T)),
        bath_magnetization(G, p.B_0, p.T),
    )
    found = [_iterate(p, G, seed, tol, max_iter)]
    if probe and p.Jz != 0.0:
        for polarized in ((0.5, -0.5), (-0.5, 0.5)):
            try:
                state = _iterate(p, G, polarized, tol, max_iter)
            except ConvergenceError as exc:
                logging.info("solve_self_consistent: seed %s did not converge (%s)", polarized, exc.detail)
                continue
            if all(abs(state.m_imp - other.m_imp) > DISTINCT for other in found):
                found.append(state)

    ranked = [s.model_copy(update={"free_energy": mean_field_free_energy(s, p, G)}) for s in found]
    best = min(ranked, key=lambda s: s.free_energy)
    if len(ranked) > 1:
        logging.warning(
            "solve_self_consistent: %s fixed points at Jz=%g B_I=%g T=%g, keeping m_imp=%.6g",
            len(ranked), p.Jz, p.B_I, p.T, best.m_imp,
        )
        best = best.model_copy(update={"multiple_fixed_points": True})
    return best


def magnetization_curve(params: IsingParams, temperatures, tol: float = 1e-10, max_iter: int = 500) -> ThermoCurve:
    """Mean-field m_imp on a descending temperature grid."""
    T = np.sort(np.asarray(list(temperatures), dtype=float))[::-1]
    states = [solve_self_consistent(params.model_copy(update={"T": float(t)}), tol, max_iter) for t in T]
    warnings = [f"multiple mean-field fixed points at T={t:.6g}" for t, s in zip(T, states) if s.multiple_fixed_points]
    return ThermoCurve(
        T=T,
        m_imp=np.array([s.m_imp for s in states]),
        provenance={
            "model": "mean_field",
            "dos": params.dos.label,
            "Jz": params.Jz,
            "B_I": params.B_I,
            "B_0": params.B_0,
            "iterations": [s.iterations for s in states],
        },
        warnings=warnings,
    )
