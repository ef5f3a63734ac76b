import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from thermo import cache as cache_module
from thermo.exceptions import ConfigError
from thermo.main import cli
from thermo.models import DosFamily, ModelKind, RunRecord, RunStatus, ThermoCurve
from thermo.services import metrology, processing
from thermo.services.export_service import ExportService

FREE_SPIN = """\
model: free_spin
fields: [0.01, 0.1, 1.0, 10.0]
temperatures:
  t_min: 1.0e-4
  t_max: 100.0
  points: 400
"""

NBL = """\
model: nbl
couplings: [1.0]
fields: [0.5, 0.8, 0.9, 0.99, 1.01, 1.1, 1.2, 1.5]
temperatures:
  t_min: 1.0e-3
  t_max: 1.0
  points: 7
"""

ISING = """\
model: ising
couplings: [0.1]
fields: [0.01, 10.0]
temperatures:
  t_min: 1.0e-4
  t_max: 10.0
  points: 50
"""

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def sweep(tmp_path, config_text, *extra):
    runner = CliRunner()
    config = write(tmp_path, "run.yaml", config_text)
    out = tmp_path / "out"
    args = ["sweep", config, "--out", str(out), "--cache-dir", str(tmp_path / "cache"), "--workers", "2", *extra]
    return runner.invoke(cli, args), out


def test_free_spin_sweep_and_report(tmp_path):
    result, out = sweep(tmp_path, FREE_SPIN)
    assert result.exit_code == 0, result.output
    manifest = json.loads((out / "manifest.json").read_text())
    assert [r["status"] for r in manifest["records"]] == [RunStatus.COMPLETED] * 4

    report = CliRunner().invoke(cli, ["report", str(out / "manifest.json")])
    assert report.exit_code == 0, report.output
    summary = json.loads((out / "report.json").read_text())
    assert summary["checks"] == {"free_spin_peak": True}
    for entry in summary["curves"]:
        assert entry["peak"]["Q_max"] == pytest.approx(0.6627, abs=1e-3)
        assert entry["B"] / entry["peak"]["T_max"] == pytest.approx(2.399, abs=2e-2)


def test_cached_rerun_is_byte_identical(tmp_path):
    result, out = sweep(tmp_path, FREE_SPIN)
    assert result.exit_code == 0, result.output
    first = {p.name: p.read_bytes() for p in (out / "curves").iterdir()}

    result, out = sweep(tmp_path, FREE_SPIN)
    assert result.exit_code == 0, result.output
    manifest = json.loads((out / "manifest.json").read_text())
    assert {r["status"] for r in manifest["records"]} == {RunStatus.CACHED}
    assert {p.name: p.read_bytes() for p in (out / "curves").iterdir()} == first

    result, out = sweep(tmp_path, FREE_SPIN, "--cache", "off")
    assert {p.name: p.read_bytes() for p in (out / "curves").iterdir()} == first


def test_nbl_report_finds_the_negativity_step(tmp_path):
    result, out = sweep(tmp_path, NBL)
    assert result.exit_code == 0, result.output
    CliRunner().invoke(cli, ["report", str(out / "manifest.json")])
    summary = json.loads((out / "report.json").read_text())
    assert summary["checks"]["negativity_step_J1"] is True


def test_empty_field_list_is_a_config_error(tmp_path):
    result, _ = sweep(tmp_path, FREE_SPIN.replace("[0.01, 0.1, 1.0, 10.0]", "[]"))
    assert result.exit_code == 2
    assert "line 2" in result.output
    assert "fields" in result.output


def test_config_diagnostics():
    with pytest.raises(ConfigError) as info:
        processing.parse_run_config(NBL.replace("t_min: 1.0e-3", "t_min: -1.0"))
    assert info.value.field == "temperatures.t_min"
    assert info.value.line == 5

    with pytest.raises(ConfigError) as info:
        processing.parse_run_config("model: nbl\nfields: [1.0\n")
    assert info.value.line is not None

    with pytest.raises(ConfigError) as info:
        processing.load_run_config("/nonexistent/run.yaml")
    assert info.value.exit_code == 2


def test_failed_point_gives_partial_failure(tmp_path, monkeypatch):
    real = processing.run_point

    def fragile(point):
        if point.B == 1.0:
            raise RuntimeError("solver blew up")
        return real(point)

    monkeypatch.setattr(processing, "run_point", fragile)
    result, out = sweep(tmp_path, FREE_SPIN, "--cache", "off")
    assert result.exit_code == 3
    records = json.loads((out / "manifest.json").read_text())["records"]
    failed = [r for r in records if r["status"] == RunStatus.FAILED]
    assert len(failed) == 1
    assert "solver blew up" in failed[0]["error_message"]
    assert len([r for r in records if r["status"] == RunStatus.COMPLETED]) == 3


def test_empty_manifest_report(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_bytes(ExportService.dumps(ExportService.build_manifest([])))
    result = CliRunner().invoke(cli, ["report", str(path)])
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "report.json").read_text())
    assert summary["curves"] == []
    assert summary["checks"] == {}


# =========================
# collapse
# =========================

def kondo_like_curve(B, tk):
    x = np.geomspace(1e3, 1e-3, 121)
    T = x * tk
    return ThermoCurve(
        T=T,
        m_imp=np.zeros(121),
        s_imp=np.log(2.0) * T / (T + tk),
        qsnr=(B / tk) * x / (1.0 + x**2),
    )


def write_manifest(tmp_path, entries):
    records = []
    for curve_id, family, J, B, curve in entries:
        artifact = f"curves/{curve_id}.csv"
        ExportService.write_bytes(str(tmp_path / artifact), ExportService.curve_to_csv(curve))
        records.append(
            RunRecord(
                curve_id=curve_id,
                status=RunStatus.COMPLETED,
                model=ModelKind.NRG,
                family=family,
                J=J,
                B=B,
                config_hash="test",
                point_hash=curve_id,
                artifacts=[artifact],
            )
        )
    path = tmp_path / "manifest.json"
    path.write_bytes(ExportService.dumps(ExportService.build_manifest(records)))
    return str(path)


def test_collapse_of_kondo_like_curves(tmp_path):
    manifest = write_manifest(tmp_path, [
        ("a", DosFamily.FLAT, 0.3, 1e-5, kondo_like_curve(1e-5, 1e-3)),
        ("b", DosFamily.FLAT, 0.2, 1e-6, kondo_like_curve(1e-6, 1e-4)),
    ])
    result = CliRunner().invoke(cli, ["collapse", manifest, "--tk", "entropy"])
    assert result.exit_code == 0, result.output
    summary = json.loads(result.stdout)
    assert summary["max_deviation"] < 1e-6
    assert summary["tk"]["a"] == pytest.approx(1e-3, rel=1e-2)
    lines = (tmp_path / "collapse.csv").read_text().splitlines()
    assert lines[:2] == ["# schema=1", "t_over_tk,q_rescaled,curve_id"]
    assert len(lines) == 2 + 242


def test_collapse_refuses_mixed_families(tmp_path):
    manifest = write_manifest(tmp_path, [
        ("a", DosFamily.FLAT, 0.3, 1e-5, kondo_like_curve(1e-5, 1e-3)),
        ("b", DosFamily.TBG, 0.3, 1e-6, kondo_like_curve(1e-6, 1e-4)),
    ])
    result = CliRunner().invoke(cli, ["collapse", manifest])
    assert result.exit_code == 2
    assert "--allow-mixed" in result.output
    assert CliRunner().invoke(cli, ["collapse", manifest, "--allow-mixed"]).exit_code == 0


def test_collapse_with_quarter_field_tk(tmp_path, monkeypatch):
    monkeypatch.setattr(cache_module.settings, "tk_quarter_calibration", None)
    monkeypatch.setattr(cache_module.settings, "THERMO_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setattr(cache_module, "_cache", None)
    monkeypatch.setattr(cache_module, "_quarter", {})
    cache_module.get_cache().put_value(cache_module.quarter_calibration_key(), 2.0)

    tk, b_quarter = 1e-3, 2e-3
    entries = []
    for i, B in enumerate(np.geomspace(1e-4, 1e-1, 13)):
        curve = kondo_like_curve(B, tk).with_columns(m_imp=np.full(121, -0.5 * B / (B + b_quarter)))
        entries.append((f"b{i:02d}", DosFamily.FLAT, 0.3, float(B), curve))
    manifest = write_manifest(tmp_path, entries)

    result = CliRunner().invoke(cli, ["collapse", manifest, "--tk", "quarter"])
    assert result.exit_code == 0, result.output
    summary = json.loads(result.stdout)
    assert summary["quarter_calibration"] == 2.0
    for value in summary["tk"].values():
        assert value == pytest.approx(tk, rel=2e-2)


# =========================
# report sections
# =========================

def screened_curve(B, tk, b_quarter=2e-3):
    return kondo_like_curve(B, tk).with_columns(m_imp=np.full(121, -0.5 * B / (B + b_quarter)))


def test_report_peak_scaling_and_bath_negativity(tmp_path):
    tk = 1e-3
    entries = [("z", DosFamily.FLAT, 0.3, 0.0, screened_curve(0.0, tk))]
    entries += [(f"b{i}", DosFamily.FLAT, 0.3, B, screened_curve(B, tk)) for i, B in enumerate((1e-5, 1e-4, 1e-3))]
    manifest = write_manifest(tmp_path, entries)

    result = CliRunner().invoke(cli, ["report", manifest])
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "report.json").read_text())

    scaling = summary["peak_scaling"]
    assert [row["curve_id"] for row in scaling] == ["b0", "b1", "b2"]
    for row in scaling:
        assert row["tk"] == pytest.approx(tk, rel=1e-2)
        assert row["b_over_tk"] == pytest.approx(row["B"] / tk, rel=1e-2)
        assert row["T_max_over_tk"] == pytest.approx(1.0, rel=1e-2)
        assert row["Q_max"] == pytest.approx(row["B"] / (2 * tk), rel=1e-2)

    bath_rows = summary["entanglement"]["bath"]
    assert [row["curve_id"] for row in bath_rows] == ["z", "b0", "b1", "b2"]
    assert bath_rows[0]["negativity"] == pytest.approx(0.5)
    assert all(row["valid"] for row in bath_rows)
    assert summary["entanglement"]["local"] == []
    assert summary["checks"] == {"negativity_bath_decreasing_J0.3": True}
    assert summary["dos_classes"]["flat"]["kondo"] is True
    assert summary["dos_classes"]["flat"]["collapse_vs_flat"] is None


def test_report_compares_dos_classes(tmp_path):
    flat = write_manifest(tmp_path / "flat", [
        ("z", DosFamily.FLAT, 0.3, 0.0, kondo_like_curve(0.0, 1e-3)),
        ("a", DosFamily.FLAT, 0.3, 1e-5, kondo_like_curve(1e-5, 1e-3)),
    ])
    x = np.geomspace(1e3, 1e-3, 121)
    divergent = kondo_like_curve(1e-6, 1e-4).with_columns(qsnr=1e-2 * np.sqrt(x) / (1.0 + x))
    tbg = write_manifest(tmp_path / "tbg", [
        ("z", DosFamily.TBG, 0.3, 0.0, kondo_like_curve(0.0, 1e-4)),
        ("a", DosFamily.TBG, 0.3, 1e-6, divergent),
    ])
    T = 1e-4 * np.geomspace(100.0, 0.01, 121)
    free = metrology.free_spin_curve(1e-4, T).with_columns(qsnr=metrology.free_spin_qsnr(1e-4, T))
    graphene = write_manifest(tmp_path / "graphene", [
        ("z", DosFamily.GRAPHENE, 0.3, 0.0, metrology.free_spin_curve(0.0, T)),
        ("a", DosFamily.GRAPHENE, 0.3, 1e-4, free),
    ])

    result = CliRunner().invoke(cli, ["report", flat, tbg, graphene])
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "flat" / "report.json").read_text())
    assert len(summary["manifests"]) == 3
    assert len(summary["curves"]) == 6

    classes = summary["dos_classes"]
    assert classes["flat"]["collapse_vs_flat"] is None
    assert classes["tbg"]["kondo"] is True
    assert classes["tbg"]["collapse_vs_flat"] > 0.1
    assert classes["tbg"]["distinct_from_flat"] is True
    assert classes["graphene"]["kondo"] is False
    assert classes["graphene"]["collapse_vs_flat"] is None
    assert classes["graphene"]["free_spin_deviation"] < 1e-6
    assert classes["graphene"]["peaks"][0]["Q_max"] == pytest.approx(0.6627, abs=1e-3)


def test_report_needs_a_manifest():
    result = CliRunner().invoke(cli, ["report"])
    assert result.exit_code == 2


def test_ising_report_lists_the_free_spin_deviation(tmp_path):
    result, out = sweep(tmp_path, ISING)
    assert result.exit_code == 0, result.output
    CliRunner().invoke(cli, ["report", str(out / "manifest.json")])
    summary = json.loads((out / "report.json").read_text())
    deviations = [entry["free_spin_deviation"] for entry in summary["curves"]]
    assert all(0.0 <= d < 4e-2 for d in deviations)
    assert summary["checks"] == {"free_spin_universality": True}
    for entry in summary["curves"]:
        point = entry["operating_point"]
        assert point["qsnr"] == pytest.approx(entry["peak"]["Q_max"], rel=5e-2)


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    config = processing.load_run_config(str(path))
    assert config.points()


# =========================
# dos
# =========================

def test_dos_family_summary():
    result = CliRunner().invoke(cli, ["dos", "flat"])
    assert result.exit_code == 0, result.output
    assert json.loads(result.stdout)["rho0"] == pytest.approx(0.5)


def test_dos_yaml_block_and_grid(tmp_path):
    spec = write(tmp_path, "bath.yaml", "dos:\n  family: nanowire\n  D: 2.0\n")
    out = tmp_path / "grid.csv"
    result = CliRunner().invoke(cli, ["dos", spec, "--emit-grid", "--points", "800", "--out", str(out)])
    assert result.exit_code == 0, result.output
    summary = json.loads(result.stdout)
    assert summary["rho0"] == pytest.approx(1.0 / np.pi)
    frame = ExportService.read_csv(out.read_bytes())
    assert list(frame.columns) == ["omega", "rho", "re_g", "im_g"]
    inside = frame[frame["omega"].abs() < 1.8]
    np.testing.assert_allclose(inside["im_g"], -np.pi * inside["rho"], atol=1e-5)


def test_dos_unknown_spec():
    result = CliRunner().invoke(cli, ["dos", "jellium"])
    assert result.exit_code == 2
