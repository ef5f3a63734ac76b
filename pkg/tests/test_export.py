import numpy as np
import pandas as pd
import pytest

from thermo.models import DosFamily, ModelKind, RunRecord, RunStatus, ThermoCurve
from thermo.services import metrology
from thermo.services.export_service import ExportService


def sample_curve():
    curve = metrology.free_spin_curve(0.5, np.geomspace(10.0, 0.01, 40))
    return metrology.sensitivity_columns(curve)


def test_csv_header_and_float_format():
    text = ExportService.curve_to_csv(sample_curve()).decode("utf-8")
    lines = text.splitlines()
    assert lines[0] == "# schema=1"
    assert lines[1] == "T,m_imp,s_imp,dm_dT,qfi,qsnr,neg_local"
    first = lines[2].split(",")
    assert first[0] == "1.000000000000e+01"
    assert first[-1] == "nan"
    assert len(lines) == 42


def test_identical_curves_give_identical_bytes():
    assert ExportService.curve_to_csv(sample_curve()) == ExportService.curve_to_csv(sample_curve())


def test_curve_survives_csv():
    curve = sample_curve()
    loaded = ExportService.curve_from_csv(ExportService.curve_to_csv(curve))
    np.testing.assert_allclose(loaded.T, curve.T, rtol=1e-12)
    np.testing.assert_allclose(loaded.qsnr, curve.qsnr, rtol=1e-11)
    assert loaded.neg_local is None


def test_unknown_schema_is_rejected():
    with pytest.raises(ValueError):
        ExportService.curve_from_csv(b"T,m_imp\n1.0,0.0\n")
    with pytest.raises(ValueError):
        ExportService.read_csv(b"# schema=2\nT,m_imp\n1.0,0.0\n")


def test_payload_keeps_exact_values_and_metadata():
    curve = sample_curve().with_columns(warnings=["coarse grid"])
    loaded = ExportService.curve_from_payload(ExportService.curve_payload(curve))
    np.testing.assert_array_equal(loaded.m_imp, curve.m_imp)
    np.testing.assert_array_equal(loaded.qfi, curve.qfi)
    assert loaded.provenance == curve.provenance
    assert loaded.warnings == ["coarse grid"]


def test_collapse_table_columns():
    table = pd.DataFrame({"curve_id": ["a"], "q_rescaled": [0.25], "t_over_tk": [1.0]})
    lines = ExportService.collapse_to_csv(table).decode("utf-8").splitlines()
    assert lines[1] == "t_over_tk,q_rescaled,curve_id"
    assert lines[2] == "1.000000000000e+00,2.500000000000e-01,a"


def test_manifest_round_trip(tmp_path):
    record = RunRecord(
        curve_id="nbl_flat_J1_B0.5",
        status=RunStatus.COMPLETED,
        model=ModelKind.NBL,
        family=DosFamily.FLAT,
        J=1.0,
        B=0.5,
        config_hash="abc",
        point_hash="def",
        artifacts=["curves/nbl_flat_J1_B0.5.csv"],
    )
    path = str(tmp_path / "out" / "manifest.json")
    ExportService.write_bytes(path, ExportService.dumps(ExportService.build_manifest([record], "abc")))
    manifest = ExportService.load_manifest(path)
    assert manifest["schema"] == 1
    assert manifest["records"] == [record]
    assert ExportService.artifact_path(path, record.artifacts[0]) == str(tmp_path / "out" / "curves" / "nbl_flat_J1_B0.5.csv")


def test_empty_curve_frame_columns():
    curve = ThermoCurve(T=np.array([2.0, 1.0]), m_imp=np.zeros(2))
    frame = ExportService.curve_frame(curve)
    assert frame["qfi"].isna().all()
    assert list(frame["m_imp"]) == [0.0, 0.0]
