import logging
from typing import Dict, Optional

from .config import settings
from .models import DosFamily, DosSpec, canonical_hash
from .services import nrg
from .services.cache_service import RunCache

_cache: Optional[RunCache] = None
_quarter: Dict[str, float] = {}


def get_cache(root: Optional[str] = None) -> RunCache:
    """Lazily create and return the run cache.

    The cache directory is only touched on the first write, so importing the
    commands never creates THERMO_CACHE_DIR.
    """
    global _cache
    root = root or settings.THERMO_CACHE_DIR
    if _cache is None or _cache.root != root:
        _cache = RunCache(root)
    return _cache


def quarter_calibration_key(preset: str = "desk") -> str:
    return canonical_hash(
        {"calibration": "magnetization_quarter", "J": nrg.CALIBRATION_COUPLING, "dos": "flat", "preset": preset}
    )


def get_quarter_calibration(preset: str = "desk") -> float:
    """B_{1/4} / T_K for the MagnetizationQuarter estimator.

    THERMO_TK_QUARTER_CALIBRATION wins when set. Otherwise the constant
    measured against the J=0.3D flat-band entropy T_K is read from the run
    cache; the first call without a stored value runs that measurement and
    stores it.
    """
    if settings.tk_quarter_calibration is not None:
        return settings.tk_quarter_calibration
    if preset in _quarter:
        return _quarter[preset]

    cache = get_cache()
    key = quarter_calibration_key(preset)
    value = cache.get_value(key)
    if value is None:
        logging.warning("No stored quarter-field calibration for preset %s; measuring it with NRG", preset)
        value = nrg.quarter_calibration(DosSpec(family=DosFamily.FLAT), preset=preset)
        cache.put_value(key, value, J=nrg.CALIBRATION_COUPLING, preset=preset)
    _quarter[preset] = value
    return value
