from __future__ import annotations

import math

import pytest

from vpgrav.config import parse_config_text
from vpgrav.verify import FAIL, PASS, UNCHECKED, WARN, CheckSpec, _status, rel_margin, run_battery

SMALL = """
[grid]
n3 = 32
m1 = 6
m2 = 6
m3 = 16
[steady]
max_iter = 10
[verify]
samples = 100
envelope_samples = 100
lemma_samples = 10
weight_samples = 10
jacobian_samples = 10
"""


def test_margin_and_status_rules():
    assert rel_margin(1.0, 2.0) == pytest.approx(0.5)
    hard = CheckSpec("x", "a", 1, 0, 1e-9, "hard")
    soft = CheckSpec("y", "a", 1, 0, 1e-9, "soft")
    assert _status(hard, -1e-10) == PASS and _status(hard, -1e-3) == FAIL
    assert _status(soft, -1e-3) == WARN and _status(hard, math.nan) == UNCHECKED


def test_vacuum_scenario_is_clean():
    cfg = parse_config_text(SMALL + "[boundary]\namplitude = 0.0\n[dynamic]\nf0_kind = zero\nT = 0.05\n")
    rep = run_battery(cfg)
    assert rep.status_code == 0 and not rep.hard_failures
    assert rep["steady-bootstrap"].status == PASS
    text = rep.text(timing=False)
    assert text.count("check=") == len(rep.results) and "wall=" not in text


def test_field_beating_gravity_fails_bootstrap_and_gates_the_rest():
    text = SMALL.replace("[grid]\n", "[grid]\nL3 = 3.0\nvmax = 4.0\n")
    cfg = parse_config_text(text + "[physics]\ng = 0.3\nbeta = 0.5\n[boundary]\namplitude = 40.0\nbeta_G = 0.6\n")
    with pytest.warns(RuntimeWarning, match="condition:beta"):
        rep = run_battery(cfg)
    assert rep["steady-bootstrap"].status == FAIL
    assert rep.status_code == 1
    for cid in ("exit-time", "decay-rho", "weight-ratio"):
        assert rep[cid].status == UNCHECKED
