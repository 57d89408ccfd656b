import pytest

from app.config_manager import (dump_config, format_points, load_config,
                                parse_config, write_config_echo)
from app.errors import ConfigError

SINGLE = """\
[problem]
mode = single_sink
points = 0.25,0.3333; 0.75,0.6667
alpha = 0
"""


def _violations(text, overrides=None):
    with pytest.raises(ConfigError) as info:
        parse_config(text, overrides)
    return info.value.violations


def test_defaults():
    cfg = parse_config(SINGLE)
    assert cfg.mode == "single_sink"
    assert cfg.alpha == 0.0
    assert cfg.points == ((0.25, 0.3333), (0.75, 0.6667))
    assert cfg.name == "run"
    assert cfg.solver.path == "psi_path"
    assert cfg.solver.gamma == 0.6
    assert cfg.solver.stop.max_iters == 300000
    assert cfg.refine.initial_size == 32
    assert cfg.refine.max_rounds == 5
    assert cfg.output.render and cfg.output.snapshots
    assert cfg.pairs() == [((0.25, 0.3333), (0.75, 0.6667))]


def test_preset_expands_with_its_default_size():
    cfg = parse_config("[problem]\npreset = pentagon\nalpha = 0.5\n")
    assert cfg.mode == "single_sink"
    assert len(cfg.points) == 5
    (x0, y0), (x1, y1) = cfg.points[:2]
    assert ((x1 - x0) ** 2 + (y1 - y0) ** 2) ** 0.5 == pytest.approx(0.5)
    assert len(cfg.pairs()) == 4


def test_alpha_out_of_range_names_the_bound():
    errors = _violations(SINGLE.replace("alpha = 0", "alpha = 1.5"))
    assert errors == ["[problem] alpha = '1.5': alpha must lie in [0, 1]"]


def test_every_violation_is_reported():
    text = """\
[problem]
mode = single_sink
points = 0.25,0.3; 1.2,0.5; nope
alpha = -1
[solver]
gamma = 3
colour = red
[extra]
x = 1
"""
    errors = _violations(text)
    assert any("outside the open unit square" in e for e in errors)
    assert any("'nope' is not 'x,y'" in e for e in errors)
    assert any("alpha must lie in [0, 1]" in e for e in errors)
    assert any("[solver] gamma" in e for e in errors)
    assert "[solver] unknown key 'colour'" in errors
    assert "unknown section [extra]" in errors


def test_missing_alpha_and_mode():
    errors = _violations("[problem]\npoints = 0.2,0.2; 0.8,0.8\n")
    assert "[problem] alpha is required (a number in [0, 1])" in errors
    assert "[problem] mode is required unless a preset is given" in errors


def test_preset_and_points_conflict():
    errors = _violations("[problem]\npreset = square\npoints = 0.2,0.2; 0.8,0.8\n"
                         "alpha = 0\n")
    assert errors == ["[problem] preset and points are mutually exclusive"]


def test_preset_mode_mismatch():
    errors = _violations("[problem]\npreset = switch4\nmode = single_sink\nalpha = 0.5\n")
    assert "does not match preset" in errors[0]


def test_pairing_modes_need_matching_counts():
    errors = _violations("[problem]\nmode = free_pairing\nsources = 0.1,0.1; 0.1,0.2\n"
                         "sinks = 0.9,0.9\nalpha = 0.5\n")
    assert "got 2 and 1" in errors[0]
    cfg = parse_config("[problem]\nmode = who_goes_where\nsources = 0.1,0.1; 0.1,0.2\n"
                       "sinks = 0.9,0.9; 0.9,0.9\nalpha = 0.5\n")
    assert cfg.pairs() == [((0.1, 0.1), (0.9, 0.9)), ((0.1, 0.2), (0.9, 0.9))]
    records = cfg.terminal_records()
    assert records[-1] == (0.9, 0.9, "sink")
    assert len(records) == 3


def test_duplicate_points_are_rejected():
    errors = _violations("[problem]\nmode = single_sink\npoints = 0.2,0.2; 0.2,0.2\n"
                         "alpha = 0\n")
    assert errors == ["[problem] points must be distinct"]


def test_overrides_replace_file_values():
    cfg = parse_config(SINGLE, {"alpha": 0.5, "rounds": 2, "max_iters": 10, "seed": None})
    assert cfg.alpha == 0.5
    assert cfg.refine.max_rounds == 2
    assert cfg.solver.stop.max_iters == 10
    assert cfg.graph.stop.max_iters == 10
    assert _violations(SINGLE, {"alpha": 2.0}) == [
        "[problem] alpha = '2.0': alpha must lie in [0, 1]"]
    with pytest.raises(ConfigError):
        parse_config(SINGLE, {"colour": 1})


def test_seed_override_reexpands_random_presets():
    text = "[problem]\npreset = random(4)\nalpha = 0.5\n"
    a = parse_config(text, {"seed": 1})
    b = parse_config(text, {"seed": 2})
    assert a.seed == 1 and len(a.points) == 4
    assert a.points != b.points
    assert parse_config(text, {"seed": 1}).points == a.points


@pytest.mark.parametrize("text", [
    SINGLE,
    "[problem]\nname = pent\npreset = pentagon(0.4)\nalpha = 0.25\n"
    "[solver]\npath = phi_path\ngamma = 1.0\n[refine]\ngrid = 16\nadaptive = no\n",
    "[problem]\nmode = free_pairing\nsources = 0.1,0.1; 0.1,0.2\n"
    "sinks = 0.9,0.9; 0.8,0.8\nalpha = 0.7\n[output]\nrender = false\n",
    "[problem]\npreset = graph4\nalpha = 0\n[graph]\nmethod = lp\nk_points = 0\n",
])
def test_normalized_form_reads_back_identically(text):
    cfg = parse_config(text)
    assert parse_config(dump_config(cfg)) == cfg


def test_format_points_is_exact():
    text = format_points([(0.1, 1.0 / 3.0)])
    assert text == "0.1,0.3333333333333333"


def test_load_and_echo(tmp_path):
    text = "# comment kept verbatim\n" + SINGLE + "\n[solver]\nwindow = 50\n"
    src = tmp_path / "problem.ini"
    src.write_bytes(text.encode("utf-8"))
    cfg, raw = load_config(src)
    assert raw == text
    echo, effective = write_config_echo(tmp_path / "out", raw, cfg)
    assert echo.read_bytes() == src.read_bytes()
    assert parse_config(effective.read_text()) == cfg
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_malformed_ini():
    errors = _violations("points without a section\n")
    assert errors[0].startswith("malformed problem file")
