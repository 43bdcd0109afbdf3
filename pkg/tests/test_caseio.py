import copy
import json

import numpy as np
import pytest

from slackdyn import caseio
from slackdyn.devices import Gfl, Gfm, RlcLoad, StaticLoad, SyncMachine
from slackdyn.errors import ParseError, ValidationError


def _raw(name):
    return json.loads(caseio.bundled_case_path(name).read_text())


def _parse(raw):
    return caseio.parse_case_text(json.dumps(raw))


def test_wscc9_machines_contents():
    case = caseio.parse_case(caseio.bundled_case_path("wscc9_machines"))
    assert len(case.buses) == 9
    assert len(case.branches) == 9
    machines = [d for d in case.devices if d.type == "machine"]
    assert len(machines) == 3
    assert all(m.governor is not None for m in machines)
    assert case.meta.s_base == 100.0 and case.meta.f_nominal == 60.0


def test_every_bundled_case_builds():
    names = caseio.bundled_cases()
    for required in ("wscc9_machines.json", "wscc9_gfm_droop.json", "wscc9_gfm_vsm.json", "wscc9_gfl.json"):
        assert required in names
    for name in names:
        case, system = caseio.load(name)
        assert case.scenarios
        for sc in case.scenarios:
            caseio.build_scenario(case, sc)
        sol = system.solve_powerflow()
        assert sol.mismatch < 1e-8


def test_wscc_powerflow_reference_values():
    # standard published dispatch of the 9-bus system
    _, system = caseio.load("wscc9_machines")
    sol = system.solve_powerflow()
    assert sol.p_gen[0] == pytest.approx(0.7164, abs=1e-4)
    assert sol.q_gen[0] == pytest.approx(0.2705, abs=1e-4)
    assert sol.q_gen[1] == pytest.approx(0.0665, abs=1e-4)
    assert sol.q_gen[2] == pytest.approx(-0.1086, abs=1e-4)
    assert sol.at(5)[0] == pytest.approx(0.9956, abs=1e-4)


def test_device_types_built():
    _, system = caseio.load("wscc9_mixed_gfl")
    kinds = {d.name: type(d) for d in system.devices}
    assert kinds["G1"] is SyncMachine and kinds["C3"] is Gfl and kinds["L5"] is StaticLoad
    _, system = caseio.load("wscc9_gfm_vsm")
    gfms = [d for d in system.devices if isinstance(d, Gfm)]
    assert [d.name for d in gfms] == ["C1", "C2", "C3"]
    assert all(d.params.variant == "vsm" for d in gfms)


def test_rlc_reactances_converted():
    case, system = caseio.load("three_bus_rlc")
    rlc = next(d for d in system.devices if isinstance(d, RlcLoad))
    wb = system.net.omega_b
    assert rlc.params.l * wb == pytest.approx(0.5)
    assert rlc.params.c * wb == pytest.approx(0.05)


def test_empty_bus_list_rejected():
    raw = _raw("wscc9_machines")
    raw["buses"] = []
    with pytest.raises(ValidationError, match="buses"):
        _parse(raw)


def test_two_integral_governors_rejected():
    raw = _raw("wscc9_machines")
    raw["devices"][0]["governor"]["mode"] = "integral"
    raw["devices"][1]["governor"]["mode"] = "integral"
    with pytest.raises(ValidationError, match="integral"):
        _parse(raw)


def test_single_integral_governor_accepted():
    raw = _raw("wscc9_machines")
    raw["devices"][0]["governor"]["mode"] = "integral"
    _parse(raw)


def test_unknown_field_rejected_with_location():
    raw = _raw("wscc9_machines")
    raw["devices"][1]["inertia"] = 3.0
    with pytest.raises(ValidationError, match=r"devices\[1\]"):
        _parse(raw)


def test_unknown_device_type_rejected():
    raw = _raw("wscc9_machines")
    raw["devices"][0]["type"] = "windmill"
    with pytest.raises(ValidationError):
        _parse(raw)


def test_unknown_bus_reference_rejected():
    raw = _raw("wscc9_machines")
    raw["loads"][0]["bus"] = 42
    with pytest.raises(ValidationError, match="unknown bus 42"):
        _parse(raw)


def test_event_on_unknown_device_rejected():
    raw = _raw("wscc9_mixed_gfl")
    raw["scenarios"]["gfl_step"]["events"][0]["action"]["device"] = "C9"
    with pytest.raises(ValidationError, match="C9"):
        _parse(raw)


def test_event_after_end_rejected():
    raw = _raw("wscc9_machines")
    raw["scenarios"]["load_loss"]["events"][0]["t"] = 50.0
    with pytest.raises(ValidationError, match="t_end"):
        _parse(raw)


def test_wrong_format_version_rejected():
    raw = _raw("wscc9_machines")
    raw["format_version"] = 2
    with pytest.raises(ValidationError, match="format_version"):
        _parse(raw)


def test_malformed_json_reports_line():
    text = caseio.bundled_case_path("wscc9_machines").read_text()
    lines = text.splitlines()
    lines[5] = lines[5] + " ,,"
    with pytest.raises(ParseError, match="line 6"):
        caseio.parse_case_text("\n".join(lines))


def test_missing_file(tmp_path):
    with pytest.raises(ParseError):
        caseio.parse_case(tmp_path / "nope.json")


def test_non_utf8_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_bytes(b'{"format_version": 1, "meta": {"name": "\xff"}}')
    with pytest.raises(ParseError):
        caseio.parse_case(p)


def test_scenario_overrides():
    case = caseio.parse_case(caseio.bundled_case_path("wscc9_machines"))
    sc = caseio.build_scenario(case, "load_loss", t_end=5.0, dt=0.02)
    assert (sc.t_end, sc.dt) == (5.0, 0.02)
    with pytest.raises(ValidationError):
        caseio.build_scenario(case, "load_loss", dt=-1.0)
    with pytest.raises(ValidationError, match="no scenario"):
        caseio.build_scenario(case, "missing")


def test_auto_agc_shares_equal_for_equal_droops():
    _, system = caseio.load("wscc9_agc")
    shares = [d.governor.agc_share for d in system.devices if isinstance(d, SyncMachine)]
    np.testing.assert_allclose(shares, [1 / 3] * 3)


def test_bundled_files_carry_provenance_notes():
    for name in caseio.bundled_cases():
        case = caseio.parse_case(caseio.bundled_case_path(name))
        assert case.meta.notes


def test_parse_is_pure():
    raw = _raw("wscc9_machines")
    before = copy.deepcopy(raw)
    _parse(raw)
    assert raw == before
