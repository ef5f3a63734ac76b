import hashlib
import json
from enum import Enum
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import __version__


class DosFamily(str, Enum):
    FLAT = "flat"
    NANOWIRE = "nanowire"
    GAUSSIAN = "gaussian"
    GRAPHENE = "graphene"
    TBG = "tbg"
    TABULATED = "tabulated"


POWER_LAW_FAMILIES = (DosFamily.GRAPHENE, DosFamily.TBG)
DEFAULT_EXPONENTS = {DosFamily.GRAPHENE: 1.0, DosFamily.TBG: -0.25}


class ModelKind(str, Enum):
    FREE_SPIN = "free_spin"
    ISING = "ising"
    MEAN_FIELD = "mean_field"
    NBL = "nbl"
    NRG = "nrg"


class TkMethod(str, Enum):
    ENTROPY_HALF_LN2 = "entropy"
    MAGNETIZATION_QUARTER = "quarter"
    PERTURBATIVE = "perturbative"
    TBG_POWER = "tbg_power"


class CachePolicy(str, Enum):
    USE = "use"
    REFRESH = "refresh"
    OFF = "off"


class RunStatus:
    COMPLETED = "completed"
    CACHED = "cached"
    FAILED = "failed"


def canonical_hash(payload: Dict[str, Any]) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(f"{text}|{__version__}".encode("utf-8")).hexdigest()


# =========================
# BATH
# =========================

class DosSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: DosFamily
    D: float = Field(1.0, gt=0)
    r: Optional[float] = None
    table_path: Optional[str] = None
    table: Optional[Tuple[Tuple[float, float], ...]] = None

    @model_validator(mode="before")
    @classmethod
    def _load_table(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            if "family" not in data and "name" in data:
                data["family"] = data.pop("name")
            if isinstance(data.get("table"), str):
                data["table_path"] = data.pop("table")
        if isinstance(data, dict) and data.get("table_path") and not data.get("table"):
            raw = np.loadtxt(data["table_path"], comments="#", ndmin=2)
            if raw.shape[1] < 2:
                raise ValueError("tabulated DoS needs two columns (omega, rho)")
            data = {**data, "table": tuple((float(w), float(p)) for w, p in raw[:, :2])}
        return data

    @model_validator(mode="after")
    def _check(self) -> "DosSpec":
        if self.family in POWER_LAW_FAMILIES and self.exponent <= -1.0:
            raise ValueError(f"power-law exponent must exceed -1, got {self.exponent}")
        if self.family == DosFamily.TABULATED:
            if not self.table or len(self.table) < 2:
                raise ValueError("tabulated DoS needs at least two (omega, rho) rows")
            w, p = np.asarray(self.table).T
            if np.any(np.diff(w) <= 0):
                raise ValueError("tabulated omega values must be strictly increasing")
            if np.any(p < 0):
                raise ValueError("tabulated rho must be non-negative")
            if np.trapezoid(p, w) <= 0:
                raise ValueError("tabulated rho has no weight and cannot be normalized")
        return self

    @property
    def exponent(self) -> float:
        if self.r is not None:
            return self.r
        return DEFAULT_EXPONENTS.get(self.family, 0.0)

    @property
    def label(self) -> str:
        if self.family in POWER_LAW_FAMILIES:
            return f"{self.family.value}(D={self.D:g},r={self.exponent:g})"
        if self.family == DosFamily.TABULATED:
            return f"tabulated({self.table_path or len(self.table)})"
        return f"{self.family.value}(D={self.D:g})"

    @property
    def approximations(self) -> List[str]:
        if self.family == DosFamily.GRAPHENE:
            return ["graphene DoS replaced by the linear pseudogap with hard cutoff at D"]
        return []


class LocalGreensFunction(BaseModel):
    """Retarded local bath Green's function sampled on a frequency grid.

    ``kind`` names the closed form used (or "hilbert" / "discrete"), and
    ``derivative`` holds dG/domega whenever it is known analytically.
    Discrete baths keep their pole list in ``poles`` as an (n, 2) array of
    (position, weight) rows.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: np.ndarray
    values: np.ndarray
    eta: float = Field(gt=0)
    kind: str
    dos: Optional[DosSpec] = None
    derivative: Optional[np.ndarray] = None
    poles: Optional[np.ndarray] = None
    warnings: List[str] = Field(default_factory=list)

    @property
    def is_discrete(self) -> bool:
        return self.poles is not None


class DiscreteBath(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    positions: np.ndarray
    weights: np.ndarray
    dos_ref: str
    lambda_: Optional[float] = None
    n_max: Optional[int] = None
    dropped: List[Tuple[float, float]] = Field(default_factory=list)

    def pairs(self) -> List[Tuple[float, float]]:
        return list(zip(self.positions.tolist(), self.weights.tolist()))


class WilsonChain(BaseModel):
    model_config = ConfigDict(frozen=True)

    lambda_: float = Field(gt=1.0)
    hoppings: Tuple[float, ...]
    onsite: Tuple[float, ...]
    dos_ref: str

    @field_validator("hoppings")
    @classmethod
    def _positive(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(t <= 0 for t in value):
            raise ValueError("Wilson chain hoppings must be positive")
        return value


# =========================
# ISING / MEAN FIELD / NBL
# =========================

class IsingParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    Jz: float
    B_I: float
    B_0: float
    T: float = Field(gt=0)
    dos: DosSpec

    @classmethod
    def common_field(cls, Jz: float, B: float, T: float, dos: DosSpec) -> "IsingParams":
        return cls(Jz=Jz, B_I=B, B_0=B, T=T, dos=dos)


class SectorLabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    S_I: float
    sigma: float

    @field_validator("S_I", "sigma")
    @classmethod
    def _half(cls, value: float) -> float:
        if value not in (0.5, -0.5):
            raise ValueError("projections must be +1/2 or -1/2")
        return value


ALL_SECTORS = tuple(SectorLabel(S_I=s, sigma=g) for s in (0.5, -0.5) for g in (0.5, -0.5))


class SpectralShift(BaseModel):
    """Change of the total bath DoS caused by a boundary potential ``eps``.

    ``phase`` is arg(1 - eps G00) with the jumps at bound states removed, so
    the continuous part of the DoS change is -phase'/pi. ``poles`` holds
    (position, weight) rows: bound states enter with weight +1, and for
    discrete baths the unperturbed levels enter with weight -1.
    ``residues`` are the matching pole weights in the local G00.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    eps: float
    grid: np.ndarray
    delta_g_total: np.ndarray
    phase: Optional[np.ndarray] = None
    poles: np.ndarray = Field(default_factory=lambda: np.zeros((0, 2)))
    residues: np.ndarray = Field(default_factory=lambda: np.zeros(0))
    state_count: float = 0.0
    warnings: List[str] = Field(default_factory=list)


class MfState(BaseModel):
    m_imp: float = Field(ge=-0.5, le=0.5)
    m_bath: float = Field(ge=-0.5, le=0.5)
    B_I_eff: float
    B_0_eff: float
    iterations: int
    residual: float
    free_energy: Optional[float] = None
    multiple_fixed_points: bool = False


class NblParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    J: float
    B: float
    T: float = Field(gt=0)


# =========================
# NRG
# =========================

class NrgParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    J: float
    B: float
    chain: WilsonChain
    n_kept: int = Field(600, ge=100)
    n_max: int = Field(60, ge=0)
    beta_bar: float = Field(0.7, ge=0.4, le=1.5)
    D: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _chain_long_enough(self) -> "NrgParams":
        if self.n_max > len(self.chain.hoppings):
            raise ValueError(f"chain has {len(self.chain.hoppings)} hoppings, n_max={self.n_max} needs more")
        return self

    @property
    def lambda_(self) -> float:
        return self.chain.lambda_

    def cache_key(self, dos: Optional[DosSpec] = None) -> str:
        payload = self.model_dump(mode="json")
        if dos is not None:
            payload["dos"] = dos.model_dump(mode="json")
        return canonical_hash(payload)


class Sector(NamedTuple):
    Q: int
    Sz2: int


class ShellSpectrum(BaseModel):
    """One NRG iteration.

    ``energies`` holds every eigenvalue of the shell (rescaled by ``scale``,
    ground state at 0); the first ``kept[q]`` of each sector survive
    truncation and ``ground_energy`` is the absolute ground-state energy.
    ``impurity_sz`` is the full S_I^z block in the shell eigenbasis,
    ``creation`` the f^dagger_{N,sigma} blocks between kept states keyed by
    (source sector, 2*sigma), and ``vectors``/``layout`` the eigenvectors in the
    enlarged product basis used for backward propagation.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    N: int
    scale: float
    ground_energy: float = 0.0
    energies: Dict[Sector, np.ndarray]
    kept: Dict[Sector, int]
    impurity_sz: Dict[Sector, np.ndarray]
    creation: Dict[Tuple[Sector, int], np.ndarray] = Field(default_factory=dict)
    vectors: Dict[Sector, np.ndarray] = Field(default_factory=dict)
    layout: Dict[Sector, List[Tuple[Sector, int, int, int]]] = Field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return int(sum(len(e) for e in self.energies.values()))

    @property
    def n_kept(self) -> int:
        return int(sum(self.kept.values()))


# =========================
# METROLOGY
# =========================

CURVE_COLUMNS = ("T", "m_imp", "s_imp", "dm_dT", "qfi", "qsnr", "neg_local")


class ThermoCurve(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    T: np.ndarray
    m_imp: np.ndarray
    s_imp: Optional[np.ndarray] = None
    dm_dT: Optional[np.ndarray] = None
    qfi: Optional[np.ndarray] = None
    qsnr: Optional[np.ndarray] = None
    neg_local: Optional[np.ndarray] = None
    provenance: Dict[str, Any] = Field(default_factory=dict)
    warnings: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "ThermoCurve":
        if len(self.T) != len(self.m_imp):
            raise ValueError("T and m_imp must have equal length")
        if len(self.T) > 1 and np.any(np.diff(self.T) >= 0):
            raise ValueError("temperatures must be strictly decreasing")
        if np.any(np.abs(self.m_imp) > 0.5 + 1e-12):
            raise ValueError("|m_imp| exceeds 1/2")
        if self.qfi is not None and np.any(self.qfi[np.isfinite(self.qfi)] < 0):
            raise ValueError("QFI must be non-negative")
        return self

    def column(self, name: str) -> np.ndarray:
        value = getattr(self, name)
        if value is None:
            return np.full(len(self.T), np.nan)
        return value

    def with_columns(self, **columns: Any) -> "ThermoCurve":
        return self.model_copy(update=columns)


class SensitivityPoint(BaseModel):
    T: float
    B: float
    m: float
    dm_dT: float
    qfi: float = Field(ge=0)
    qsnr: float = Field(ge=0)


class PeakSummary(BaseModel):
    T_max: float
    Q_max: float
    order: int = 2
    at_boundary: bool = False


class TkEstimate(BaseModel):
    value: float = Field(ge=0)
    method: TkMethod
    inputs_hash: str
    no_kondo: bool = False
    order_of_magnitude: bool = False


# =========================
# CLI
# =========================

class TemperatureGrid(BaseModel):
    t_min: float = Field(gt=0)
    t_max: float = Field(gt=0)
    points: int = Field(60, ge=5)

    @model_validator(mode="after")
    def _ordered(self) -> "TemperatureGrid":
        if self.t_min >= self.t_max:
            raise ValueError("t_min must be below t_max")
        return self

    def values(self) -> np.ndarray:
        # descending, matching the shell order of NRG curves
        return np.geomspace(self.t_max, self.t_min, self.points)


class SolverOverrides(BaseModel):
    preset: str = "desk"
    lambda_: Optional[float] = Field(None, gt=1.0)
    n_kept: Optional[int] = Field(None, ge=100)
    n_max: Optional[int] = Field(None, ge=1)
    beta_bar: Optional[float] = Field(None, ge=0.4, le=1.5)
    tol: float = Field(1e-10, ge=1e-12)
    max_iter: int = Field(500, ge=1)
    grid_points: Optional[int] = Field(None, ge=200)
    eta: Optional[float] = Field(None, gt=0)
    negativity: bool = False
    smoothing: bool = False


class RunConfig(BaseModel):
    model: ModelKind
    dos: DosSpec = DosSpec(family=DosFamily.FLAT)
    couplings: List[float] = Field(default_factory=lambda: [0.0])
    fields: List[float] = Field(min_length=1)
    temperatures: TemperatureGrid
    solver: SolverOverrides = Field(default_factory=SolverOverrides)
    output_dir: str = "runs"
    cache: CachePolicy = CachePolicy.USE
    workers: Optional[int] = Field(None, ge=1)

    @field_validator("couplings")
    @classmethod
    def _couplings(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("coupling list is empty")
        return value

    def canonical(self) -> Dict[str, Any]:
        payload = self.model_dump(mode="json", exclude={"output_dir", "cache", "workers"})
        payload["couplings"] = sorted(payload["couplings"])
        payload["fields"] = sorted(payload["fields"])
        return payload

    def config_hash(self) -> str:
        return canonical_hash(self.canonical())

    def points(self) -> List["SweepPoint"]:
        return [
            SweepPoint(model=self.model, dos=self.dos, J=J, B=B, temperatures=self.temperatures, solver=self.solver)
            for J in sorted(self.couplings)
            for B in sorted(self.fields)
        ]


class SweepPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: ModelKind
    dos: DosSpec
    J: float
    B: float
    temperatures: TemperatureGrid
    solver: SolverOverrides

    def key(self) -> str:
        return canonical_hash(self.model_dump(mode="json"))

    @property
    def curve_id(self) -> str:
        return f"{self.model.value}_{self.dos.family.value}_J{self.J:.6g}_B{self.B:.6g}"


class RunRecord(BaseModel):
    curve_id: str
    status: str
    model: ModelKind
    family: DosFamily
    J: float
    B: float
    config_hash: str
    point_hash: str
    version: str = __version__
    wall_time: float = 0.0
    warnings: List[str] = Field(default_factory=list)
    artifacts: List[str] = Field(default_factory=list)
    error_message: Optional[str] = None
