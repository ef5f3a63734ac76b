"""Bath densities of states, local Green's functions and Wilson chains.

Energies are in the same units as ``DosSpec.D``. Every family is normalized
to unit weight; the prefactor rho_0 is fixed by that normalization.
"""
import logging
from functools import lru_cache
from typing import Callable, Optional, Sequence, Tuple

import mpmath
import numpy as np
from scipy import integrate, special
from scipy.linalg import eigh_tridiagonal

from ..config import settings
from ..exceptions import PrecisionError, SingularInversionError
from ..models import (
    POWER_LAW_FAMILIES,
    DiscreteBath,
    DosFamily,
    DosSpec,
    LocalGreensFunction,
    WilsonChain,
)

SQRT_PI = np.sqrt(np.pi)


def load_table(path: str, D: float = 1.0) -> DosSpec:
    """Read a two-column (omega, rho) text file into a Tabulated spec."""
    return DosSpec(family=DosFamily.TABULATED, D=D, table_path=path)


@lru_cache(maxsize=32)
def _table(spec: DosSpec) -> Tuple[np.ndarray, np.ndarray]:
    w, p = np.asarray(spec.table, dtype=float).T
    return w, p / np.trapezoid(p, w)


def _prefactor(spec: DosSpec) -> float:
    D = spec.D
    if spec.family == DosFamily.FLAT:
        return 1.0 / (2.0 * D)
    if spec.family == DosFamily.NANOWIRE:
        return 2.0 / (np.pi * D)
    if spec.family == DosFamily.GAUSSIAN:
        return 1.0 / (SQRT_PI * D)
    if spec.family in POWER_LAW_FAMILIES:
        return (spec.exponent + 1.0) / (2.0 * D)
    return 1.0


def fermi_level_dos(spec: DosSpec) -> float:
    """rho_0 as it enters Kondo-scale estimates.

    For the power-law families this is the prefactor of |omega/D|^r, not
    rho(0), which vanishes (graphene) or diverges (TBG).
    """
    if spec.family in POWER_LAW_FAMILIES:
        return _prefactor(spec)
    return float(dos_eval(spec, 0.0))


def is_particle_hole_symmetric(spec: DosSpec) -> bool:
    if spec.family != DosFamily.TABULATED:
        return True
    tw, tp = _table(spec)
    return bool(np.allclose(tw, -tw[::-1]) and np.allclose(tp, tp[::-1]))


def dos_eval(spec: DosSpec, omega):
    """Density of states rho(omega) for scalar or array input."""
    w = np.asarray(omega, dtype=float)
    x = w / spec.D
    rho0 = _prefactor(spec)
    inside = np.abs(x) <= 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        if spec.family == DosFamily.FLAT:
            out = np.where(inside, rho0, 0.0)
        elif spec.family == DosFamily.NANOWIRE:
            out = np.where(inside, rho0 * np.sqrt(np.clip(1.0 - x * x, 0.0, None)), 0.0)
        elif spec.family == DosFamily.GAUSSIAN:
            out = rho0 * np.exp(-x * x)
        elif spec.family in POWER_LAW_FAMILIES:
            out = np.where(inside, rho0 * np.abs(x) ** spec.exponent, 0.0)
        else:
            tw, tp = _table(spec)
            out = np.interp(w, tw, tp, left=0.0, right=0.0)
    return out if out.ndim else float(out)


# =========================
# INTERVAL WEIGHTS
# =========================

def _primitives(spec: DosSpec) -> Tuple[Callable, Callable]:
    """Antiderivatives of rho and omega*rho for the closed-form families."""
    D = spec.D
    rho0 = _prefactor(spec)

    if spec.family == DosFamily.FLAT:
        def weight(w):
            return rho0 * np.clip(w, -D, D)

        def moment(w):
            return 0.5 * rho0 * np.clip(w, -D, D) ** 2

    elif spec.family == DosFamily.NANOWIRE:
        def weight(w):
            x = np.clip(w / D, -1.0, 1.0)
            return 0.5 * rho0 * D * (x * np.sqrt(1.0 - x * x) + np.arcsin(x))

        def moment(w):
            x = np.clip(w / D, -1.0, 1.0)
            return -rho0 * D * D * (1.0 - x * x) ** 1.5 / 3.0

    elif spec.family == DosFamily.GAUSSIAN:
        def weight(w):
            return 0.5 * rho0 * D * SQRT_PI * special.erf(w / D)

        def moment(w):
            return -0.5 * rho0 * D * D * np.exp(-((w / D) ** 2))

    else:
        r = spec.exponent

        # the |omega|^r divergence (r < 0) integrates in closed form
        def weight(w):
            x = np.clip(w / D, -1.0, 1.0)
            return rho0 * D * np.sign(x) * np.abs(x) ** (r + 1.0) / (r + 1.0)

        def moment(w):
            x = np.clip(w / D, -1.0, 1.0)
            return rho0 * D * D * np.abs(x) ** (r + 2.0) / (r + 2.0)

    return weight, moment


def interval_weight(spec: DosSpec, a: float, b: float) -> Tuple[float, float]:
    """Return (integral of rho, integral of omega*rho) over [a, b]."""
    if spec.family == DosFamily.TABULATED:
        tw, tp = _table(spec)
        lo, hi = max(a, tw[0]), min(b, tw[-1])
        if hi <= lo:
            return 0.0, 0.0
        nodes = tw[(tw > lo) & (tw < hi)]
        limit = max(50, 4 * len(nodes))
        rho = lambda w: np.interp(w, tw, tp)  # noqa: E731
        weight = integrate.quad(rho, lo, hi, points=nodes if len(nodes) else None, limit=limit)[0]
        moment = integrate.quad(lambda w: w * rho(w), lo, hi, points=nodes if len(nodes) else None, limit=limit)[0]
        return weight, moment
    weight, moment = _primitives(spec)
    return float(weight(b) - weight(a)), float(moment(b) - moment(a))


# =========================
# GREEN'S FUNCTIONS
# =========================

def frequency_grid(
    D: float = 1.0,
    n_points: Optional[int] = None,
    window: Optional[float] = None,
    T: Optional[float] = None,
) -> np.ndarray:
    """Symmetric log-linear frequency grid, dense near omega=0.

    The grid never contains omega=0 and clusters geometrically onto the band
    edges +-D from both sides, down to a distance of 1e-7 D.
    """
    n_points = n_points or settings.grid_points
    W = window or max(5.0 * D, 50.0 * T if T else 0.0)
    half = n_points // 2
    n_edge = max(half // 20, 2)
    n_log = (half - 2 * n_edge) // 2
    n_lin = half - 2 * n_edge - n_log
    lowest = min(1e-8 * D, 1e-3 * T) if T else 1e-8 * D
    approach = np.geomspace(1e-7, 0.05, n_edge)
    positive = np.concatenate([
        np.geomspace(lowest, W, n_log),
        np.linspace(W / n_lin, W, n_lin),
        D * (1.0 - approach),
        D * (1.0 + approach),
    ])
    positive = np.unique(positive[positive <= W])
    return np.concatenate([-positive[::-1], positive])


def _flat_closed_form(spec: DosSpec, z: np.ndarray):
    D, rho0 = spec.D, _prefactor(spec)
    g = rho0 * (np.log(z + D) - np.log(z - D))
    dg = rho0 * (1.0 / (z + D) - 1.0 / (z - D))
    return g, dg


def _nanowire_closed_form(spec: DosSpec, z: np.ndarray):
    # t G = x - i sqrt(1 - x^2) with x = omega / 2t and D = 2t
    D = spec.D
    x = z / D
    root = np.sqrt(x - 1.0) * np.sqrt(x + 1.0)
    g = 2.0 / D * (x - root)
    dg = 2.0 / (D * D) * (1.0 - x / root)
    return g, dg


def _gaussian_closed_form(spec: DosSpec, z: np.ndarray):
    D = spec.D
    g = -1j * SQRT_PI * special.wofz(z / D) / D
    dg = 2.0 / (D * D) - 2.0 * z * g / (D * D)
    return g, dg


def _hilbert_power_law(spec: DosSpec, omega: float) -> float:
    """PV integral of rho(e)/(omega - e) for |omega|^r on [-D, D], omega > 0."""
    D, r = spec.D, spec.exponent
    scale = _prefactor(spec) * D ** (-r)
    alg = (r, 0.0)
    # negative half of the band, folded: rho(-e)/(omega + e)
    total = integrate.quad(lambda e: scale / (omega + e), 0.0, D, weight="alg", wvar=alg, limit=200)[0]
    if omega >= D:
        total += integrate.quad(lambda e: scale / (omega - e), 0.0, D, weight="alg", wvar=alg, limit=200)[0]
        return total
    split = 0.5 * omega
    total += integrate.quad(lambda e: scale / (omega - e), 0.0, split, weight="alg", wvar=alg, limit=200)[0]
    rho = lambda e: scale * e ** r  # noqa: E731
    total -= integrate.quad(rho, split, D, weight="cauchy", wvar=omega, limit=200)[0]
    return total


def principal_value(
    rho: Callable[[float], float],
    omega: float,
    lo: float,
    hi: float,
    points: Optional[Sequence[float]] = None,
    limit: int = 200,
) -> float:
    """PV integral of rho(e) / (omega - e) over [lo, hi].

    The pole is handled by QUADPACK's Cauchy-weighted adaptive rule when
    omega lies inside the interval.
    """
    if lo < omega < hi:
        return -integrate.quad(rho, lo, hi, weight="cauchy", wvar=omega, limit=limit)[0]
    return integrate.quad(lambda e: rho(e) / (omega - e), lo, hi, points=points, limit=limit)[0]


def _hilbert_table(spec: DosSpec, omega: float) -> float:
    tw, tp = _table(spec)
    limit = max(200, 4 * len(tw))
    return principal_value(lambda e: np.interp(e, tw, tp), omega, tw[0], tw[-1], points=tw[1:-1], limit=limit)


def _hilbert_real(spec: DosSpec, grid: np.ndarray) -> np.ndarray:
    out = np.empty_like(grid)
    if spec.family == DosFamily.TABULATED:
        for i, w in enumerate(grid):
            out[i] = _hilbert_table(spec, float(w))
        return out
    # symmetric power law: Re G is odd in omega
    magnitudes = np.abs(grid)
    cache = {}
    for i, w in enumerate(magnitudes):
        key = float(w)
        if key not in cache:
            cache[key] = _hilbert_power_law(spec, key)
        out[i] = np.sign(grid[i]) * cache[key]
    return out


def _resolution_warnings(spec: DosSpec, grid: np.ndarray) -> list:
    warnings = []
    inside = grid[np.abs(grid) <= spec.D]
    if len(inside) < 2 or np.max(np.diff(inside)) > 0.02 * spec.D:
        warnings.append(f"grid spacing inside the band exceeds 0.02D for {spec.label}")
    if spec.family == DosFamily.TABULATED:
        tw, _ = _table(spec)
        covered = inside[(inside >= tw[0]) & (inside <= tw[-1])]
        if len(covered) > 1 and np.max(np.diff(covered)) > 2.0 * np.min(np.diff(tw)):
            warnings.append("grid is coarser than the tabulated DoS features")
    return warnings


def evaluate_greens(
    spec: DosSpec,
    omega,
    eta: Optional[float] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """G00 and, for the closed forms, dG/domega at arbitrary frequencies.

    No grid checks are made; this is the point evaluator behind
    ``greens_from_dos`` and the bound-state root search.
    """
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    eta = settings.eta * spec.D if eta is None else eta
    z = w + 1j * eta
    if spec.family == DosFamily.FLAT:
        return _flat_closed_form(spec, z)
    if spec.family == DosFamily.NANOWIRE:
        return _nanowire_closed_form(spec, z)
    if spec.family == DosFamily.GAUSSIAN:
        return _gaussian_closed_form(spec, z)
    return _hilbert_real(spec, w) - 1j * np.pi * dos_eval(spec, w), None


def greens_from_dos(
    spec: DosSpec,
    grid: Optional[np.ndarray] = None,
    eta: Optional[float] = None,
) -> LocalGreensFunction:
    """Retarded G00(omega) of the bath described by ``spec``.

    Closed forms are used for the flat, nanowire and Gaussian families.
    Otherwise Im G = -pi rho and Re G is the principal-value Hilbert
    transform of rho.
    """
    grid = frequency_grid(spec.D) if grid is None else np.asarray(grid, dtype=float)
    eta = settings.eta * spec.D if eta is None else eta
    if eta <= 0:
        raise ValueError("broadening eta must be positive")
    if grid[0] > -5.0 * spec.D * (1 - 1e-12) or grid[-1] < 5.0 * spec.D * (1 - 1e-12):
        raise ValueError("frequency grid must span at least [-5D, 5D]")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("frequency grid must be strictly increasing")

    values, derivative = evaluate_greens(spec, grid, eta)
    kind = spec.family.value if derivative is not None else "hilbert"

    warnings = _resolution_warnings(spec, grid)
    for message in warnings:
        logging.warning("greens_from_dos: %s", message)
    return LocalGreensFunction(
        grid=grid, values=values, eta=eta, kind=kind, dos=spec, derivative=derivative, warnings=warnings
    )


@lru_cache(maxsize=16)
def default_greens(spec: DosSpec, window: Optional[float] = None) -> LocalGreensFunction:
    """greens_from_dos on the default grid, memoized per spec and window."""
    return greens_from_dos(spec, frequency_grid(spec.D, window=window))


def wide_band_greens(rho0: float, grid: np.ndarray, eta: Optional[float] = None) -> LocalGreensFunction:
    """The D -> infinity flat band at fixed rho_0: G = -i pi rho_0."""
    grid = np.asarray(grid, dtype=float)
    values = np.full(grid.shape, -1j * np.pi * rho0)
    return LocalGreensFunction(
        grid=grid,
        values=values,
        eta=eta or settings.eta,
        kind="wide_flat",
        derivative=np.zeros_like(values),
    )


def greens_from_poles(
    bath: DiscreteBath,
    grid: Optional[np.ndarray] = None,
    eta: Optional[float] = None,
) -> LocalGreensFunction:
    """Green's function of a discrete bath sum_k w_k / (z - e_k)."""
    span = float(np.max(np.abs(bath.positions)))
    grid = frequency_grid(span) if grid is None else np.asarray(grid, dtype=float)
    eta = settings.eta * span if eta is None else eta
    z = (grid + 1j * eta)[:, None]
    e, w = bath.positions[None, :], bath.weights[None, :]
    values = np.sum(w / (z - e), axis=1)
    derivative = -np.sum(w / (z - e) ** 2, axis=1)
    poles = np.column_stack([bath.positions, bath.weights])
    return LocalGreensFunction(
        grid=grid, values=values, eta=eta, kind="discrete", derivative=derivative, poles=poles
    )


def hybridization(G: LocalGreensFunction) -> Tuple[np.ndarray, np.ndarray]:
    """Delta(omega) = omega - 1/G and dDelta/domega on the grid of ``G``."""
    magnitude = np.abs(G.values)
    bad = np.flatnonzero(magnitude < 1e-12)
    if bad.size:
        i = int(bad[0])
        raise SingularInversionError(float(G.grid[i]), float(magnitude[i]))
    inverse = 1.0 / G.values
    delta = G.grid - inverse
    if G.derivative is not None:
        dG = G.derivative
    else:
        dG = np.gradient(G.values, G.grid, edge_order=2)
    d_delta = 1.0 + dG * inverse * inverse
    return delta, d_delta


# =========================
# DISCRETIZATION AND CHAIN
# =========================

def discretize_log(spec: DosSpec, lambda_: float, n_max: int) -> DiscreteBath:
    """Logarithmic discretization at +-D Lambda^-n, one pole per interval.

    Each pole sits at the rho-weighted mean of its interval and carries the
    interval weight. The innermost interval [0, D Lambda^-n_max] and, for
    families with weight beyond D, the tail [D, inf) are kept as poles too.
    """
    if lambda_ <= 1.0:
        raise ValueError("Lambda must exceed 1")
    if n_max < 20:
        raise ValueError("n_max must be at least 20")

    D = spec.D
    edges = D * lambda_ ** (-np.arange(n_max + 1, dtype=float))
    positive = [(edges[n + 1], edges[n]) for n in range(n_max)] + [(0.0, edges[-1])]
    intervals = positive + [(-b, -a) for a, b in positive]
    if spec.family == DosFamily.GAUSSIAN:
        intervals += [(D, np.inf), (-np.inf, -D)]
    elif spec.family == DosFamily.TABULATED:
        tw, _ = _table(spec)
        if tw[-1] > D:
            intervals.append((D, float(tw[-1])))
        if tw[0] < -D:
            intervals.append((float(tw[0]), -D))

    positions, weights, dropped = [], [], []
    for a, b in intervals:
        w, m = interval_weight(spec, a, b)
        if w <= 1e-300:
            dropped.append((float(a), float(b)))
            continue
        positions.append(m / w)
        weights.append(w)

    order = np.argsort(positions)
    positions = np.asarray(positions)[order]
    weights = np.asarray(weights)[order]
    total = float(np.sum(weights))
    if abs(total - 1.0) > 1e-8:
        logging.warning("discretize_log: weights of %s sum to %.12f", spec.label, total)
    if dropped:
        logging.info("discretize_log: dropped %s zero-weight intervals for %s", len(dropped), spec.label)
    return DiscreteBath(
        positions=positions, weights=weights, dos_ref=spec.label, lambda_=lambda_, n_max=n_max, dropped=dropped
    )


def _is_symmetric(bath: DiscreteBath) -> bool:
    e, w = bath.positions, bath.weights
    return bool(np.allclose(e, -e[::-1], rtol=1e-13, atol=0.0) and np.allclose(w, w[::-1], rtol=1e-12, atol=0.0))


def wilson_chain(bath: DiscreteBath, n_sites: int, dps: Optional[int] = None) -> WilsonChain:
    """Tridiagonalize the discretized bath into a Wilson chain.

    Lanczos recursion from the seed vector sqrt(w_k), run in extended
    precision with full reorthogonalization against every earlier vector.
    """
    n_poles = len(bath.positions)
    if bath.lambda_ is None:
        raise ValueError("wilson_chain needs a logarithmically discretized bath")
    if n_sites > n_poles:
        raise ValueError(f"{n_sites} sites requested from {n_poles} poles")
    dps = dps or settings.wilson_dps
    threshold = mpmath.mpf(10) ** (-(dps // 2))

    with mpmath.workdps(dps):
        energies = np.array([mpmath.mpf(float(x)) for x in bath.positions], dtype=object)
        seed = np.array([mpmath.sqrt(mpmath.mpf(float(w))) for w in bath.weights], dtype=object)
        seed = seed / mpmath.sqrt(np.dot(seed, seed))

        basis = [seed]
        onsite, hoppings = [], []
        previous, beta = None, mpmath.mpf(0)
        current = seed
        for n in range(n_sites):
            applied = energies * current
            alpha = np.dot(current, applied)
            onsite.append(alpha)
            if n == n_sites - 1:
                break
            residual = applied - alpha * current
            if previous is not None:
                residual = residual - beta * previous
            for vector in basis:
                residual = residual - np.dot(vector, residual) * vector
            beta = mpmath.sqrt(np.dot(residual, residual))
            if beta == 0:
                raise PrecisionError(n + 1, 1.0, dps)
            following = residual / beta
            overlap = max(abs(np.dot(vector, following)) for vector in basis)
            if overlap > threshold:
                raise PrecisionError(n + 1, float(overlap), dps)
            hoppings.append(beta)
            basis.append(following)
            previous, current = current, following

        onsite = [float(a) for a in onsite]
        hoppings = [float(b) for b in hoppings]

    if _is_symmetric(bath):
        onsite = [0.0] * len(onsite)
    return WilsonChain(
        lambda_=bath.lambda_,
        hoppings=tuple(hoppings),
        onsite=tuple(onsite),
        dos_ref=bath.dos_ref,
    )


def build_chain(spec: DosSpec, lambda_: float, n_sites: int, dps: Optional[int] = None) -> WilsonChain:
    """discretize_log followed by wilson_chain with enough intervals for n_sites."""
    n_max = max(20, n_sites + 20)
    return wilson_chain(discretize_log(spec, lambda_, n_max), n_sites, dps)


def chain_poles(
    hoppings: Sequence[float],
    onsite: Optional[Sequence[float]] = None,
    dos_ref: str = "chain",
) -> DiscreteBath:
    """End-of-chain spectral decomposition of a finite tight-binding chain."""
    hoppings = np.asarray(hoppings, dtype=float)
    n_sites = len(hoppings) + 1
    diagonal = np.zeros(n_sites) if onsite is None else np.asarray(onsite, dtype=float)[:n_sites]
    energies, vectors = eigh_tridiagonal(diagonal, hoppings)
    return DiscreteBath(positions=energies, weights=vectors[0, :] ** 2, dos_ref=dos_ref)
