from __future__ import annotations

import os

import numpy as np
import pytest

from vpgrav.cli import CSV_HEADER, fmt, main
from vpgrav.config import parse_config_text
from vpgrav.snapshot import read_snapshot

SMALL = """
[grid]
n3 = 24
m1 = 4
m2 = 4
m3 = 16
[steady]
max_iter = 10
[dynamic]
f0_kind = zero
T = 0.5
stride = 2
"""


def test_unknown_subcommand_gives_usage_and_status_2(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_config_error_status(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[physics]\ng = -1\n")
    assert main(["steady", "--config", str(p)]) == 2
    assert "physics.g must be positive" in capsys.readouterr().err


def test_fmt_round_trips_doubles():
    for x in (0.1, 1 / 3, 1e-300, 123456789.123456789, -2.5e17):
        assert float(fmt(x)) == x
    assert fmt(True) == "1" and fmt(7) == "7"


def test_evolve_with_zero_perturbation(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL)
    out = tmp_path / "run"
    assert main(["evolve", "--config", str(cfg), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    # the echoed configuration parses back to the same values
    echo = printed[:printed.index("steady:")]
    assert parse_config_text(echo).values == parse_config_text(SMALL).values
    lines = (out / "timeseries.csv").read_text().splitlines()
    assert lines[0] == CSV_HEADER
    rows = np.array([[float(c) for c in ln.split(",")] for ln in lines[1:]])
    assert rows.shape[1] == 6 and rows.shape[0] > 2
    assert np.all(rows[:, 1] == 0.0)
    assert np.all(rows[:, 5] == 1.0)
    snaps = sorted(f for f in os.listdir(out) if f.startswith("f_"))
    assert snaps[0] == "f_000000.snap"
    assert read_snapshot(out / snaps[-1]).meta["role"] == "perturbation"
    assert (out / "resolved.cfg").exists()


def test_steady_writes_snapshots_and_convergence(tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL)
    out = tmp_path / "s"
    assert main(["steady", "--config", str(cfg), "--out", str(out)]) == 0
    h = read_snapshot(out / "steady_h.snap")
    assert h.values.shape == (1, 1, 24, 4, 4, 16) and h.meta["role"] == "steady"
    conv = (out / "convergence.csv").read_text().splitlines()
    assert conv[0].startswith("iteration,weighted_diff")
    assert len(conv) >= 3


def test_thread_override_precedence(monkeypatch):
    from vpgrav.cli import build_parser, resolve_config

    monkeypatch.setenv("VPGRAV_THREADS", "3")
    args = build_parser().parse_args(["verify"])
    assert resolve_config(args)["verify"]["threads"] == 3
    args = build_parser().parse_args(["verify", "--threads", "2", "--seed", "11"])
    cfg = resolve_config(args)
    assert cfg["verify"]["threads"] == 2 and cfg["verify"]["seed"] == 11


def test_shipped_default_config_matches_defaults():
    from vpgrav.config import defaults, parse_config

    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    assert parse_config(os.path.join(here, "default.cfg")).values == defaults().values


@pytest.mark.parametrize("cmd", ["green-selftest"])
def test_green_selftest_command_reports(cmd, capsys):
    status = main([cmd])
    out = capsys.readouterr().out
    assert "c2 0.15915494309189535 ok=1" in out
    assert status in (0, 1) and ("status fail" in out) == (status == 1)
