"""Brute-force reference calculations shared by the solver tests."""
import numpy as np
from scipy.special import expit


def free_fermion_ln_z(levels, temperature):
    """ln Z of independent fermion levels at zero chemical potential."""
    return float(np.sum(np.logaddexp(0.0, -np.asarray(levels) / temperature)))


def chain_matrix(hoppings, onsite=None):
    hoppings = np.asarray(hoppings, dtype=float)
    n = len(hoppings) + 1
    h = np.diag(np.zeros(n) if onsite is None else np.asarray(onsite, dtype=float)[:n])
    idx = np.arange(n - 1)
    h[idx, idx + 1] = hoppings
    h[idx + 1, idx] = hoppings
    return h


def uniform_flat_levels(n_poles, D=1.0):
    """Midpoint discretization of the flat band as a single-particle matrix."""
    width = 2.0 * D / n_poles
    positions = -D + width * (np.arange(n_poles) + 0.5)
    weights = np.full(n_poles, 1.0 / n_poles)
    return positions, weights


def pole_matrix(positions, weights):
    """Star geometry: the boundary orbital is sum_k sqrt(w_k) c_k."""
    return np.diag(positions), np.sqrt(weights)


def boundary_ln_z_shift(h, boundary, eps, temperature):
    """ln Z(eps) - ln Z(0) for a potential eps on the orbital ``boundary``."""
    perturbed = np.linalg.eigvalsh(h + eps * np.outer(boundary, boundary))
    return free_fermion_ln_z(perturbed, temperature) - free_fermion_ln_z(np.linalg.eigvalsh(h), temperature)


def ising_magnetization(h, boundary, Jz, B_I, B_0, temperature):
    """<S_I^z> of an Ising impurity on a free-fermion bath, summed over all four sectors."""
    log_z = {}
    for s in (0.5, -0.5):
        total = -B_I * s / temperature
        for sigma in (0.5, -0.5):
            total += boundary_ln_z_shift(h, boundary, sigma * (B_0 + Jz * s), temperature)
        log_z[s] = total
    return 0.5 * np.tanh(0.5 * (log_z[0.5] - log_z[-0.5]))


def boundary_occupation(h, boundary, eps, temperature):
    levels, vectors = np.linalg.eigh(h + eps * np.outer(boundary, boundary))
    weight = (boundary @ vectors) ** 2
    return float(np.sum(weight * expit(-levels / temperature)))


def jordan_wigner(n_modes):
    """Annihilation operators of ``n_modes`` fermion modes on 2**n_modes states."""
    lower = np.array([[0.0, 1.0], [0.0, 0.0]])
    string = np.diag([1.0, -1.0])
    ops = []
    for m in range(n_modes):
        factors = [string] * m + [lower] + [np.eye(2)] * (n_modes - m - 1)
        op = factors[0]
        for f in factors[1:]:
            op = np.kron(op, f)
        ops.append(op)
    return ops


def kondo_chain(J, B_I, B_0, hoppings, onsite):
    """Impurity (x) chain Hamiltonian; modes ordered (site 0 up, site 0 down, site 1 up, ...).

    Returns the Hamiltonian, S_I^z and the per-mode annihilation operators, all on
    the impurity (x) fermion space.
    """
    n_sites = len(onsite)
    c = jordan_wigner(2 * n_sites)
    dim = c[0].shape[0]
    eye_f = np.eye(dim)
    imp_sz = np.diag([0.5, -0.5])
    imp_raise = np.array([[0.0, 1.0], [0.0, 0.0]])
    up, down = c[0], c[1]
    s0_z = 0.5 * (up.T @ up - down.T @ down)
    s0_raise = up.T @ down

    h_f = B_0 * s0_z
    for n, eps in enumerate(onsite):
        h_f = h_f + eps * (c[2 * n].T @ c[2 * n] + c[2 * n + 1].T @ c[2 * n + 1])
    for n, t in enumerate(hoppings):
        for sigma in (0, 1):
            hop = c[2 * n + sigma].T @ c[2 * n + 2 + sigma]
            h_f = h_f + t * (hop + hop.T)

    h = (
        np.kron(np.eye(2), h_f)
        + B_I * np.kron(imp_sz, eye_f)
        + J * (np.kron(imp_sz, s0_z) + 0.5 * (np.kron(imp_raise, s0_raise.T) + np.kron(imp_raise.T, s0_raise)))
    )
    return h, np.kron(imp_sz, eye_f), [np.kron(np.eye(2), op) for op in c]


def thermal_average(h, op, temperature):
    energies, vectors = np.linalg.eigh(h)
    weights = np.exp(-(energies - energies[0]) / temperature)
    weights /= weights.sum()
    return float(np.sum(weights * np.einsum("in,ij,jn->n", vectors, op, vectors)))


def local_density_matrix(h, temperature):
    """Impurity (x) site-0 state in the basis 4 * impurity + (empty, up, down, double)."""
    energies, vectors = np.linalg.eigh(h)
    weights = np.exp(-(energies - energies[0]) / temperature)
    rho = (vectors * (weights / weights.sum())) @ vectors.T
    rest = h.shape[0] // 8
    reduced = np.einsum("aibj->ab", rho.reshape(8, rest, 8, rest))
    # qubit order (n_up, n_down) -> site basis (empty, up, down, double)
    order = np.concatenate([[0, 2, 1, 3], [4, 6, 5, 7]])
    return reduced[np.ix_(order, order)]
