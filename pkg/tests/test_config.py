from importlib import resources

import pytest
from hypothesis import given, settings, strategies as st

from yamabe_lab.config import SCHEMA, ConfigError, load, parse_text, schema_text

CONFIGS = resources.files("yamabe_lab") / "configs"


def test_defaults_are_valid():
    cfg = parse_text("")
    for k, _, _, _ in SCHEMA:
        assert k in cfg.values
    assert cfg["chart.name"] == "flat_box"
    assert cfg["bubble.eps"] == [0.01, 0.005, 0.0025]


def test_comments_and_points():
    cfg = parse_text("# header\ngreen.centers = 0,0,0; 0,0,0.5  # two poles\n")
    assert cfg["green.centers"] == [[0, 0, 0], [0, 0, 0.5]]


def test_section_and_chart_params():
    cfg = parse_text("chart.name = flat_half_box\nchart.height = 2\n")
    assert cfg.section("chart")["height"] == 2.0
    assert cfg.chart_params() == dict(n=3, half_width=1.0, height=2.0)


@pytest.mark.parametrize("text,key", [
    ("bubble.rho = 0.1\nbubble.eps = 0.06", "bubble.eps"),
    ("chart.name = torus", "chart.name"),
    ("chart.n = 2", "chart.n"),
    ("grid.n = x", "grid.n"),
    ("nonsense.key = 1", "nonsense.key"),
    ("mass.radii = 40,20,80", "mass.radii"),
    ("flow.adapt = maybe", "flow.adapt"),
    ("green.centers = 0,0", "green.centers"),
    ("bubble.kind = B\nbubble.delta = 0.5\nbubble.rho = 0.5", "bubble.delta"),
    ("fit.m = 3", "fit.bubbles"),
    ("just words", "line 1"),
])
def test_field_level_errors(text, key):
    with pytest.raises(ConfigError) as e:
        parse_text(text)
    assert e.value.key == key
    assert key in str(e.value)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.001, 1.0))
def test_eps_rho_rule(rho, eps):
    text = f"bubble.rho = {rho!r}\nbubble.eps = {eps!r}\n"
    if 2 * eps < rho:
        assert parse_text(text)["bubble.eps"] == [eps]
    else:
        with pytest.raises(ConfigError):
            parse_text(text)


def test_shipped_configs():
    for f in CONFIGS.iterdir():
        if f.name.endswith(".cfg") and f.name != "malformed.cfg":
            load(f)
    with pytest.raises(ConfigError) as e:
        load(CONFIGS / "malformed.cfg")
    assert e.value.key == "bubble.eps"


def test_missing_file():
    with pytest.raises(ConfigError):
        load("/nonexistent/x.cfg")


def test_schema_file_in_sync():
    assert (resources.files("yamabe_lab") / "schema.txt").read_text() == schema_text()
