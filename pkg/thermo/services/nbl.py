"""Narrow-band limit: the impurity exchange-coupled to a single bath site.

The eight levels of J S_I.S_0 + B (S_I^z + S_0^z) are known in closed form,
so every thermal quantity is a weighted level sum evaluated with
log-sum-exp. ``nbl_hamiltonian`` builds the same model as an explicit 8x8
matrix for cross-checks.
"""
from typing import Iterable, List, Tuple

import numpy as np
from scipy.special import logsumexp

from ..models import NblParams, ThermoCurve

# impurity (up, down) x site (empty, up, down, double); index = 4 * impurity + site
SITE_SZ = np.diag([0.0, 0.5, -0.5, 0.0])
SITE_RAISE = np.zeros((4, 4))
SITE_RAISE[1, 2] = 1.0
IMP_SZ = np.diag([0.5, -0.5])
IMP_RAISE = np.array([[0.0, 1.0], [0.0, 0.0]])

LEVEL_LABELS = (
    "empty_up", "empty_down", "double_up", "double_down",
    "triplet_up", "triplet_zero", "triplet_down", "singlet",
)


def nbl_levels(J: float, B: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Energies with the diagonal S_I^z and S_0^z of each eigenstate, ordered as LEVEL_LABELS."""
    energies = np.array([
        0.5 * B, -0.5 * B, 0.5 * B, -0.5 * B,
        0.25 * J + B, 0.25 * J, 0.25 * J - B, -0.75 * J,
    ])
    impurity = np.array([0.5, -0.5, 0.5, -0.5, 0.5, 0.0, -0.5, 0.0])
    site = np.array([0.0, 0.0, 0.0, 0.0, 0.5, 0.0, -0.5, 0.0])
    return energies, impurity, site


def nbl_hamiltonian(J: float, B: float) -> np.ndarray:
    """Product-basis matrix of J S_I.S_0 + B (S_I^z + S_0^z)."""
    exchange = np.kron(IMP_SZ, SITE_SZ) + 0.5 * (
        np.kron(IMP_RAISE, SITE_RAISE.T) + np.kron(IMP_RAISE.T, SITE_RAISE)
    )
    zeeman = np.kron(IMP_SZ, np.eye(4)) + np.kron(np.eye(2), SITE_SZ)
    return J * exchange + B * zeeman


def nbl_density_matrix(p: NblParams) -> np.ndarray:
    """Thermal state of ``nbl_hamiltonian`` by exact diagonalization."""
    energies, vectors = np.linalg.eigh(nbl_hamiltonian(p.J, p.B))
    weights = np.exp(-(energies - energies.min()) / p.T)
    weights /= weights.sum()
    return (vectors * weights) @ vectors.T


def _weights(p: NblParams) -> Tuple[np.ndarray, float]:
    energies, _, _ = nbl_levels(p.J, p.B)
    log_z = logsumexp(-energies / p.T)
    return np.exp(-energies / p.T - log_z), float(log_z)


def nbl_log_partition(p: NblParams) -> float:
    energies, _, _ = nbl_levels(p.J, p.B)
    return float(logsumexp(-energies / p.T))


def nbl_partition(p: NblParams) -> float:
    """Z = 4 cosh(B/2T) + e^{-J/4T} [1 + 2 cosh(B/T)] + e^{3J/4T}."""
    return float(np.exp(nbl_log_partition(p)))


def nbl_magnetization(p: NblParams) -> float:
    """<S_I^z> = -[2 sinh(B/2T) + e^{-J/4T} sinh(B/T)] / Z."""
    weights, _ = _weights(p)
    _, impurity, _ = nbl_levels(p.J, p.B)
    return float(np.clip(weights @ impurity, -0.5, 0.5))


def nbl_negativity(p: NblParams) -> float:
    """Impurity / bath-site negativity of the thermal state.

    Only the singly occupied triplet-zero and singlet carry coherence between
    |up,down> and |down,up>; after the partial transpose it couples
    |up,up> and |down,down>, whose 2x2 block holds the single negative
    eigenvalue.
    """
    weights, _ = _weights(p)
    p_up, p_down = weights[4], weights[6]
    coherence = 0.5 * (weights[5] - weights[7])
    value = np.hypot(0.5 * (p_up - p_down), coherence) - 0.5 * (p_up + p_down)
    return float(max(0.0, value))


def nbl_entropy(p: NblParams) -> float:
    """S = ln Z + <E>/T of the two-site model."""
    weights, log_z = _weights(p)
    energies, _, _ = nbl_levels(p.J, p.B)
    return float(log_z + weights @ energies / p.T)


def nbl_dm_dT(p: NblParams) -> float:
    """d<S_I^z>/dT = (<S E> - <S><E>) / T^2."""
    weights, _ = _weights(p)
    energies, impurity, _ = nbl_levels(p.J, p.B)
    mean_e = weights @ energies
    return float((weights @ (impurity * energies) - (weights @ impurity) * mean_e) / p.T**2)


def _bath_dm_dT(p: NblParams) -> float:
    weights, _ = _weights(p)
    energies, _, site = nbl_levels(p.J, p.B)
    return float((weights @ (site * energies) - (weights @ site) * (weights @ energies)) / p.T**2)


def nbl_entropy_and_maxwell(p: NblParams, delta_B: float = 1e-6) -> Tuple[float, float]:
    """Entropy and the Maxwell-relation residual |dm_I/dT + (1/2) dS/dB|.

    dS/dB is the centered difference at +-delta_B. With a common field
    dS/dB = -d(m_I + m_0)/dT, so the residual tends to |d(m_I - m_0)/dT| / 2,
    which vanishes only when impurity and bath site respond alike.
    """
    entropy = nbl_entropy(p)
    upper = nbl_entropy(p.model_copy(update={"B": p.B + delta_B}))
    lower = nbl_entropy(p.model_copy(update={"B": p.B - delta_B}))
    dS_dB = (upper - lower) / (2.0 * delta_B)
    return entropy, float(abs(nbl_dm_dT(p) + 0.5 * dS_dB))


def maxwell_residual_analytic(p: NblParams) -> float:
    return 0.5 * abs(nbl_dm_dT(p) - _bath_dm_dT(p))


def nodal_points(J: float, B_values: Iterable[float], T_values: Iterable[float]) -> List[Tuple[float, float]]:
    """(B, T) points where dm/dT changes sign along each fixed-B line.

    The QSNR vanishes there; T is interpolated linearly in ln T.
    """
    T = np.sort(np.asarray(list(T_values), dtype=float))
    points = []
    for B in B_values:
        slope = np.array([nbl_dm_dT(NblParams(J=J, B=float(B), T=t)) for t in T])
        for i in np.flatnonzero(np.sign(slope[:-1]) * np.sign(slope[1:]) < 0):
            x0, x1 = np.log(T[i]), np.log(T[i + 1])
            root = x0 - slope[i] * (x1 - x0) / (slope[i + 1] - slope[i])
            points.append((float(B), float(np.exp(root))))
    return points


def nbl_curve(B: float, J: float, temperatures: Iterable[float]) -> ThermoCurve:
    """Closed-form curve on a descending temperature grid.

    ``s_imp`` holds the entropy of the whole two-site model.
    """
    T = np.sort(np.asarray(list(temperatures), dtype=float))[::-1]
    params = [NblParams(J=J, B=B, T=float(t)) for t in T]
    return ThermoCurve(
        T=T,
        m_imp=np.array([nbl_magnetization(q) for q in params]),
        s_imp=np.array([nbl_entropy(q) for q in params]),
        dm_dT=np.array([nbl_dm_dT(q) for q in params]),
        neg_local=np.array([nbl_negativity(q) for q in params]),
        provenance={"model": "nbl", "J": J, "B": B, "dm_dT": "analytic", "s_imp": "two-site total"},
    )
