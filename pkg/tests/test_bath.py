import numpy as np
import pytest
from pydantic import ValidationError

from thermo.exceptions import SingularInversionError
from thermo.models import DosFamily, DosSpec, LocalGreensFunction
from thermo.services import bath


ALL_FAMILIES = [
    DosSpec(family=DosFamily.FLAT),
    DosSpec(family=DosFamily.NANOWIRE),
    DosSpec(family=DosFamily.GAUSSIAN),
    DosSpec(family=DosFamily.GRAPHENE),
    DosSpec(family=DosFamily.TBG),
]


def test_dos_eval_reference_values(flat, nanowire):
    assert bath.dos_eval(flat, 0.5) == pytest.approx(0.5)
    assert bath.dos_eval(nanowire, 0.0) == pytest.approx(2.0 / np.pi)
    assert bath.dos_eval(DosSpec(family=DosFamily.GRAPHENE), 0.0) == 0.0
    assert bath.dos_eval(flat, 1.5) == 0.0


@pytest.mark.parametrize("spec", ALL_FAMILIES, ids=lambda s: s.family.value)
def test_every_family_is_normalized(spec):
    weight, first_moment = bath.interval_weight(spec, -np.inf, np.inf)
    assert weight == pytest.approx(1.0, abs=1e-8)
    assert first_moment == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("spec", ALL_FAMILIES, ids=lambda s: s.family.value)
def test_closed_form_weights_match_quadrature(spec):
    from scipy import integrate

    a, b = 0.13, 0.71
    numeric = integrate.quad(lambda w: bath.dos_eval(spec, w), a, b)[0]
    assert bath.interval_weight(spec, a, b)[0] == pytest.approx(numeric, rel=1e-9)


def test_tabulated_spec_is_normalized_and_validated(tmp_path):
    path = tmp_path / "dos.txt"
    path.write_text("# omega rho\n-1 2\n0 2\n1 2\n")
    spec = bath.load_table(str(path))
    assert bath.dos_eval(spec, 0.3) == pytest.approx(0.5)
    assert bath.interval_weight(spec, -2.0, 2.0)[0] == pytest.approx(1.0, abs=1e-8)

    with pytest.raises(ValidationError):
        DosSpec(family=DosFamily.TABULATED, table=((-1.0, 1.0), (1.0, -1.0)))
    with pytest.raises(ValidationError):
        DosSpec(family=DosFamily.TABULATED, table=((-1.0, 0.0), (1.0, 0.0)))


def test_config_block_aliases():
    spec = DosSpec.model_validate({"name": "tbg", "D": 2.0})
    assert spec.family == DosFamily.TBG
    assert spec.exponent == -0.25


def test_flat_band_center_and_nanowire_closed_form(flat, nanowire):
    grid = np.linspace(-5.0, 5.0, 1001)
    G = bath.greens_from_dos(flat, grid)
    center = G.values[500]
    assert center.real == pytest.approx(0.0, abs=1e-9)
    assert center.imag == pytest.approx(-np.pi * 0.5, abs=1e-6)

    t = 0.5
    G = bath.greens_from_dos(nanowire, grid)
    assert t * G.values[500] == pytest.approx(-1j, abs=1e-6)
    edge = int(np.argmin(np.abs(grid - 2 * t)))
    assert t * G.values[edge] == pytest.approx(1.0, abs=5e-3)


@pytest.mark.parametrize("spec", ALL_FAMILIES, ids=lambda s: s.family.value)
def test_kramers_kronig_imaginary_part(spec):
    grid = bath.frequency_grid(spec.D, n_points=800)
    G = bath.greens_from_dos(spec, grid)
    away = np.abs(np.abs(grid) - spec.D) > 0.05 * spec.D
    np.testing.assert_allclose(-G.values.imag[away] / np.pi, bath.dos_eval(spec, grid[away]), atol=1e-5)
    assert np.all(G.values.imag <= 1e-15)


def test_principal_value_reproduces_nanowire_closed_form(nanowire):
    t = 0.5
    for omega in np.linspace(-0.89, 0.89, 15) * 2 * t:
        numeric = bath.principal_value(lambda e: bath.dos_eval(nanowire, e), omega, -1.0, 1.0)
        closed = (omega / (2 * t)) / t
        assert numeric == pytest.approx(closed, abs=1e-6)


def test_power_law_hilbert_is_odd_and_matches_direct_quadrature():
    spec = DosSpec(family=DosFamily.GRAPHENE)
    grid = bath.frequency_grid(spec.D, n_points=400)
    G = bath.greens_from_dos(spec, grid)
    np.testing.assert_allclose(G.values.real, -G.values.real[::-1], atol=1e-12)
    # rho = |e| on [-1, 1]: Re G(w) = w ln(w^2 / (1 - w^2)) for 0 < w < 1
    i = int(np.argmin(np.abs(grid - 0.4)))
    w = grid[i]
    assert G.values.real[i] == pytest.approx(w * np.log(w * w / (1 - w * w)), rel=1e-7)


def test_hybridization_round_trip_and_limits(nanowire):
    grid = bath.frequency_grid(1.0, n_points=600)
    G = bath.greens_from_dos(nanowire, grid)
    delta, d_delta = bath.hybridization(G)
    np.testing.assert_allclose(1.0 / (grid - delta), G.values, rtol=1e-10)

    t = 0.5
    i = int(np.argmin(np.abs(grid)))
    assert delta[i] == pytest.approx(-1j * t, abs=1e-6)
    expected = 1.0 - 1.0 / (1.0 - (t * G.values) ** 2)
    np.testing.assert_allclose(d_delta, expected, rtol=1e-8, atol=1e-8)


def test_hybridization_finite_differences_agree_with_analytic(nanowire):
    grid = np.linspace(-5.0, 5.0, 20001)
    G = bath.greens_from_dos(nanowire, grid, eta=1e-3)
    numeric = G.model_copy(update={"derivative": None})
    inside = np.abs(grid) < 0.8
    np.testing.assert_allclose(bath.hybridization(numeric)[1][inside], bath.hybridization(G)[1][inside], atol=1e-5)


def test_wide_band_hybridization():
    grid = np.linspace(-5.0, 5.0, 101)
    rho0 = 0.5
    delta, d_delta = bath.hybridization(bath.wide_band_greens(rho0, grid))
    np.testing.assert_allclose(delta, grid - 1j / (np.pi * rho0))
    np.testing.assert_allclose(d_delta, 1.0)


def test_singular_inversion_is_reported():
    grid = np.linspace(-5.0, 5.0, 11)
    values = np.full(11, -1j)
    values[3] = 0.0
    G = LocalGreensFunction(grid=grid, values=values, eta=1e-6, kind="test")
    with pytest.raises(SingularInversionError):
        bath.hybridization(G)


def test_log_discretization_flat_band(flat):
    discrete = bath.discretize_log(flat, 2.0, 40)
    pairs = dict((round(p, 12), w) for p, w in discrete.pairs())
    assert pairs[0.75] == pytest.approx(0.25)
    assert discrete.weights.sum() == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(discrete.positions, -discrete.positions[::-1], atol=1e-15)
    np.testing.assert_allclose(discrete.weights, discrete.weights[::-1], rtol=1e-12)


def test_log_discretization_keeps_divergent_tbg_weight():
    spec = DosSpec(family=DosFamily.TBG)
    discrete = bath.discretize_log(spec, 2.0, 30)
    assert discrete.weights.sum() == pytest.approx(1.0, abs=1e-8)


def test_log_discretization_rejects_bad_arguments(flat):
    with pytest.raises(ValueError):
        bath.discretize_log(flat, 1.0, 40)
    with pytest.raises(ValueError):
        bath.discretize_log(flat, 2.0, 10)


def wilson_flat_band(lam, n):
    return (
        0.5 * (1 + 1 / lam)
        * (1 - lam ** (-n - 1))
        / np.sqrt((1 - lam ** (-2 * n - 1)) * (1 - lam ** (-2 * n - 3)))
        * lam ** (-n / 2)
    )


def test_wilson_chain_reproduces_flat_band_coefficients(flat):
    chain = bath.wilson_chain(bath.discretize_log(flat, 2.0, 40), 30)
    assert chain.hoppings[0] == pytest.approx(wilson_flat_band(2.0, 0), abs=1e-8)
    for n in range(10):
        assert chain.hoppings[n] == pytest.approx(wilson_flat_band(2.0, n), rel=1e-6)
    assert all(e == 0.0 for e in chain.onsite)
    scaled = np.array(chain.hoppings) * 2.0 ** (np.arange(len(chain.hoppings)) / 2)
    assert scaled[-1] == pytest.approx(0.75, rel=1e-2)


@pytest.mark.parametrize("spec", ALL_FAMILIES[:3], ids=lambda s: s.family.value)
def test_metallic_chain_decays_as_sqrt_lambda(spec):
    chain = bath.build_chain(spec, 2.5, 40)
    ratios = np.array(chain.hoppings[20:38]) / np.array(chain.hoppings[21:39])
    np.testing.assert_allclose(ratios, np.sqrt(2.5), rtol=1e-2)


def test_chain_fidelity_recovers_poles(flat):
    discrete = bath.discretize_log(flat, 2.0, 20)
    chain = bath.wilson_chain(discrete, len(discrete.positions))
    rebuilt = bath.chain_poles(chain.hoppings, chain.onsite)
    np.testing.assert_allclose(rebuilt.positions, discrete.positions, atol=1e-8)
    np.testing.assert_allclose(rebuilt.weights, discrete.weights, atol=1e-6)


def test_first_hopping_grows_towards_continuum_moment(flat):
    t0 = [bath.wilson_chain(bath.discretize_log(flat, lam, 40), 2).hoppings[0] for lam in (3.0, 2.0, 1.5)]
    assert t0[0] < t0[1] < t0[2] < np.sqrt(1.0 / 3.0)


def test_chain_longer_than_pole_set_is_rejected(flat):
    discrete = bath.discretize_log(flat, 2.0, 20)
    with pytest.raises(ValueError):
        bath.wilson_chain(discrete, len(discrete.positions) + 1)
