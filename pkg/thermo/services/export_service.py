import io
import json
import os
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from .. import __version__
from ..models import CURVE_COLUMNS, RunRecord, ThermoCurve

SCHEMA = 1
FLOAT_FORMAT = "%.12e"


def _plain(value: Any):
    """json ``default`` hook for numpy scalars and arrays."""
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


class ExportService:
    """Tables and manifests written by the sweep, collapse and report commands.

    Every CSV starts with a ``# schema=1`` comment line and floats are written
    with ``%.12e`` so identical curves give byte-identical files.
    """

    @staticmethod
    def curve_frame(curve: ThermoCurve) -> pd.DataFrame:
        return pd.DataFrame({name: curve.column(name) for name in CURVE_COLUMNS})

    @staticmethod
    def frame_to_csv(frame: pd.DataFrame) -> bytes:
        buffer = io.StringIO()
        buffer.write(f"# schema={SCHEMA}\n")
        frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, na_rep="nan", lineterminator="\n")
        return buffer.getvalue().encode("utf-8")

    @staticmethod
    def curve_to_csv(curve: ThermoCurve) -> bytes:
        return ExportService.frame_to_csv(ExportService.curve_frame(curve))

    @staticmethod
    def read_csv(data: bytes) -> pd.DataFrame:
        text = data.decode("utf-8")
        header = text.split("\n", 1)[0].strip()
        if header != f"# schema={SCHEMA}":
            raise ValueError(f"unsupported table header {header!r}, expected '# schema={SCHEMA}'")
        return pd.read_csv(io.StringIO(text), comment="#")

    @staticmethod
    def curve_from_csv(data: bytes) -> ThermoCurve:
        frame = ExportService.read_csv(data)
        columns = {}
        for name in CURVE_COLUMNS:
            values = frame[name].to_numpy(dtype=float) if name in frame else None
            # all-NaN optional columns were never computed
            if name not in ("T", "m_imp") and values is not None and np.all(np.isnan(values)):
                values = None
            columns[name] = values
        return ThermoCurve(**columns)

    @staticmethod
    def collapse_to_csv(table: pd.DataFrame) -> bytes:
        return ExportService.frame_to_csv(table[["t_over_tk", "q_rescaled", "curve_id"]])

    @staticmethod
    def grid_to_csv(omega, rho, greens) -> bytes:
        frame = pd.DataFrame({"omega": omega, "rho": rho, "re_g": np.real(greens), "im_g": np.imag(greens)})
        return ExportService.frame_to_csv(frame)

    # =========================
    # CURVE PAYLOADS (cache)
    # =========================

    @staticmethod
    def curve_payload(curve: ThermoCurve) -> Dict[str, Any]:
        columns = {name: getattr(curve, name).tolist() for name in CURVE_COLUMNS if getattr(curve, name) is not None}
        return {"columns": columns, "provenance": curve.provenance, "warnings": curve.warnings}

    @staticmethod
    def curve_from_payload(payload: Dict[str, Any]) -> ThermoCurve:
        columns = {name: np.asarray(values, dtype=float) for name, values in payload["columns"].items()}
        return ThermoCurve(**columns, provenance=payload.get("provenance", {}), warnings=payload.get("warnings", []))

    @staticmethod
    def dumps(payload: Dict[str, Any]) -> bytes:
        return json.dumps(payload, indent=2, sort_keys=True, default=_plain).encode("utf-8")

    # =========================
    # MANIFEST
    # =========================

    @staticmethod
    def build_manifest(
        records: List[RunRecord],
        config_hash: Optional[str] = None,
        dos: Optional[Dict[str, Any]] = None,
    ) -> Dict[str, Any]:
        return {
            "schema": SCHEMA,
            "version": __version__,
            "config_hash": config_hash,
            "dos": dos,
            "records": [r.model_dump(mode="json") for r in records],
        }

    @staticmethod
    def write_bytes(path: str, data: bytes) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
        return path

    @staticmethod
    def load_manifest(path: str) -> Dict[str, Any]:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        manifest["records"] = [RunRecord(**r) for r in manifest.get("records", [])]
        return manifest

    @staticmethod
    def artifact_path(manifest_path: str, artifact: str) -> str:
        """Artifacts are stored relative to the manifest's directory."""
        if os.path.isabs(artifact):
            return artifact
        return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), artifact)
