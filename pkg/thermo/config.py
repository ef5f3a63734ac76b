import os
from typing import Optional

from dotenv import load_dotenv

load_dotenv()


class Settings:
    THERMO_CACHE_DIR = os.getenv("THERMO_CACHE_DIR", os.path.join(os.path.expanduser("~"), ".cache", "thermo"))
    THERMO_WORKERS = int(os.getenv("THERMO_WORKERS", str(os.cpu_count() or 1)))
    THERMO_LOG_LEVEL = os.getenv("THERMO_LOG_LEVEL", "INFO")

    # frequency grid used for Green's function work (energies in units of D)
    grid_points: int = int(os.getenv("THERMO_GRID_POINTS", "4000"))
    eta: float = float(os.getenv("THERMO_ETA", "1e-6"))
    wide_band_ratio: float = float(os.getenv("THERMO_WIDE_BAND_RATIO", "1e6"))

    # Wilson chain recursion runs with this many decimal digits
    wilson_dps: int = int(os.getenv("THERMO_WILSON_DPS", "40"))

    # NRG desk preset; the "fidelity" preset is Lambda=2, N_s=3000
    nrg_lambda: float = float(os.getenv("THERMO_NRG_LAMBDA", "2.5"))
    nrg_kept: int = int(os.getenv("THERMO_NRG_KEPT", "600"))
    nrg_beta_bar: float = float(os.getenv("THERMO_NRG_BETA_BAR", "0.7"))
    nrg_shells: int = int(os.getenv("THERMO_NRG_SHELLS", "60"))

    # B_{1/4} / T_K for the MagnetizationQuarter estimator. Unset means the value
    # measured against a J=0.3D entropy run and stored in the run cache
    tk_quarter_calibration: Optional[float] = (
        float(os.environ["THERMO_TK_QUARTER_CALIBRATION"]) if os.getenv("THERMO_TK_QUARTER_CALIBRATION") else None
    )


NRG_PRESETS = {
    "desk": {"lambda_": Settings.nrg_lambda, "n_kept": Settings.nrg_kept},
    "fidelity": {"lambda_": 2.0, "n_kept": 3000},
}

settings = Settings()


def get_settings() -> Settings:
    """Accessor used by the services and commands."""
    return settings
