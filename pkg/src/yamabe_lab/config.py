"""Flat key = value experiment configs with dotted section prefixes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .geometry import CATALOG


class ConfigError(ValueError):
    """Validation failure; ``key`` names the offending field."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


def _floats(s: str) -> list:
    return [float(t) for t in s.replace(";", ",").split(",") if t.strip()]


def _points(s: str) -> list:
    return [[float(t) for t in p.split(",")] for p in s.split(";") if p.strip()]


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


PARSERS = {"int": int, "float": float, "str": str.strip, "floats": _floats, "points": _points,
           "bool": _bool}

# key, type, default, description
SCHEMA = [
    ("seed", "int", "0", "single source of randomness"),
    ("output.dir", "str", "out", "artifact directory (overridden by --out)"),
    ("chart.name", "str", "flat_box", "catalog chart: " + ", ".join(sorted(CATALOG))),
    ("chart.n", "int", "3", "dimension"),
    ("chart.lo", "float", "0.0", "flat_box lower corner (all axes)"),
    ("chart.hi", "float", "1.0", "flat_box upper corner (all axes)"),
    ("chart.half_width", "float", "1.0", "half boxes: tangential half width"),
    ("chart.height", "float", "1.0", "half boxes: height"),
    ("chart.mass", "float", "1.0", "schwarzschild charts: mass parameter"),
    ("chart.r_out", "float", "400.0", "schwarzschild charts: box half width"),
    ("chart.kappa", "float", "0.1", "kappa_half_box: boundary bending"),
    ("grid.n", "int", "17", "nodes per axis"),
    ("flow.T", "float", "1.0", "final time"),
    ("flow.dt0", "float", "1e-3", "initial step"),
    ("flow.adapt", "bool", "true", "adaptive stepping"),
    ("flow.u0", "str", "cosine", "initial data: const | cosine | random"),
    ("flow.amplitude", "float", "0.2", "initial perturbation amplitude (< 1)"),
    ("bubble.kind", "str", "C", "A | B | C"),
    ("bubble.eps", "floats", "0.01,0.005,0.0025", "bubble scales"),
    ("bubble.rho", "float", "0.5", "cutoff radius"),
    ("bubble.delta", "float", "0.1", "kind B depth"),
    ("bubble.C_B", "float", "1.0", "kind B admissibility constant (delta <= C_B rho^2)"),
    ("green.centers", "points", "0,0,0", "centers, ';'-separated"),
    ("green.k_max", "int", "0", "chain length (0 selects n)"),
    ("green.rho0", "float", "0.25", "parametrix cutoff radius"),
    ("green.perturbation", "float", "0.0", "amplitude of the conformal perturbation w - 1"),
    ("mass.radii", "floats", "20,40,80,160", "sphere radii, increasing"),
    ("mass.which", "str", "adm", "adm | boundary"),
    ("mass.rotation", "float", "0.4", "rotation angle for the invariance check"),
    ("flux.rhos", "floats", "0.05,0.1,0.2,0.4", "flux radii"),
    ("flux.mass", "float", "1.0", "Kelvin fixture mass parameter"),
    ("q.restarts", "int", "5", "random restarts"),
    ("q.iters", "int", "300", "iterations per restart"),
    ("fit.m", "int", "1", "bubble count"),
    ("fit.bubbles", "points", "0.503,0.497,0.51,0.08", "synthetic bubbles x..., eps"),
    ("fit.rho", "float", "0.3", "cutoff radius"),
    ("fit.delta0", "float", "0.02", "zoning threshold"),
    ("fit.R0", "float", "1.0", "zeroth-order coefficient of the fit form"),
    ("fit.noise", "float", "0.0", "amplitude of seeded nodal noise"),
    ("tensor.n", "int", "6", "dimension"),
    ("tensor.d", "int", "2", "degree"),
    ("tensor.drop_normal", "bool", "false", "ablate the boundary condition"),
]

_TYPES = {k: t for k, t, _, _ in SCHEMA}


def schema_text() -> str:
    lines = ["# key | type | default | description"]
    for k, t, d, doc in SCHEMA:
        lines.append(f"{k} | {t} | {d} | {doc}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def chart_params(self) -> dict:
        name = self.values["chart.name"]
        v = self.values
        if name == "flat_box":
            return dict(n=v["chart.n"], lo=v["chart.lo"], hi=v["chart.hi"])
        if name == "flat_half_box":
            return dict(n=v["chart.n"], half_width=v["chart.half_width"], height=v["chart.height"])
        if name in ("schwarzschild", "half_schwarzschild"):
            return dict(n=v["chart.n"], mass=v["chart.mass"], r_out=v["chart.r_out"])
        if name == "kappa_half_box":
            return dict(n=v["chart.n"], kappa=v["chart.kappa"], half_width=v["chart.half_width"],
                        height=v["chart.height"])
        return dict(n=v["chart.n"])


def parse_text(text: str) -> ExperimentConfig:
    raw = {}
    for ln, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"line {ln}", "expected 'key = value'")
        k, v = (t.strip() for t in s.split("=", 1))
        if k not in _TYPES:
            raise ConfigError(k, "unknown key")
        raw[k] = v
    vals = {}
    for k, t, d, _ in SCHEMA:
        src = raw.get(k, d)
        try:
            vals[k] = PARSERS[t](src)
        except ValueError as e:
            raise ConfigError(k, f"cannot parse {src!r} as {t} ({e})") from None
    cfg = ExperimentConfig(vals)
    validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError("config", str(e)) from None
    return parse_text(text)


def _need(cond, key, msg):
    if not cond:
        raise ConfigError(key, msg)


def validate(cfg: ExperimentConfig) -> None:
    v = cfg.values
    n = v["chart.n"]
    _need(v["chart.name"] in CATALOG, "chart.name", f"unknown chart {v['chart.name']!r}")
    _need(n >= 3, "chart.n", "need n >= 3")
    _need(v["chart.hi"] > v["chart.lo"], "chart.hi", "need hi > lo")
    _need(v["grid.n"] >= 3, "grid.n", "need at least 3 nodes per axis")
    _need(v["flow.T"] > 0, "flow.T", "must be positive")
    _need(0 < v["flow.dt0"] <= v["flow.T"], "flow.dt0", "need 0 < dt0 <= T")
    _need(v["flow.u0"] in ("const", "cosine", "random"), "flow.u0", "const | cosine | random")
    _need(0 <= v["flow.amplitude"] < 1, "flow.amplitude", "need 0 <= amplitude < 1")
    _need(v["bubble.kind"] in ("A", "B", "C"), "bubble.kind", "A | B | C")
    _need(v["bubble.rho"] > 0, "bubble.rho", "must be positive")
    _need(len(v["bubble.eps"]) > 0, "bubble.eps", "empty list")
    for e in v["bubble.eps"]:
        _need(e > 0, "bubble.eps", "scales must be positive")
        _need(2 * e < v["bubble.rho"], "bubble.eps", f"need 2 eps < rho (eps={e}, rho={v['bubble.rho']})")
    if v["bubble.kind"] == "B":
        _need(v["bubble.delta"] > 0, "bubble.delta", "must be positive for kind B")
        _need(v["bubble.delta"] <= v["bubble.C_B"] * v["bubble.rho"] ** 2, "bubble.delta",
              "need delta <= C_B rho^2")
    for c in v["green.centers"]:
        _need(len(c) == n, "green.centers", f"each center needs {n} coordinates")
    _need(v["green.k_max"] >= 0, "green.k_max", "must be >= 0")
    _need(v["green.rho0"] > 0, "green.rho0", "must be positive")
    r = v["mass.radii"]
    _need(len(r) >= 3, "mass.radii", "need at least 3 radii")
    _need(all(b > a > 0 for a, b in zip(r, r[1:])), "mass.radii", "must be positive and increasing")
    _need(v["mass.which"] in ("adm", "boundary"), "mass.which", "adm | boundary")
    _need(len(v["flux.rhos"]) >= 3 and min(v["flux.rhos"]) > 0, "flux.rhos", "need >= 3 positive radii")
    _need(v["q.restarts"] >= 0, "q.restarts", "must be >= 0")
    _need(v["fit.m"] >= 1, "fit.m", "must be >= 1")
    _need(len(v["fit.bubbles"]) >= v["fit.m"], "fit.bubbles", "fewer synthetic bubbles than fit.m")
    for b in v["fit.bubbles"]:
        _need(len(b) == n + 1, "fit.bubbles", f"each bubble needs {n} coordinates and eps")
        _need(0 < b[-1] and 2 * b[-1] < v["fit.rho"], "fit.bubbles", "need 0 < 2 eps < fit.rho")
    _need(v["fit.delta0"] > 0, "fit.delta0", "must be positive")
    _need(v["tensor.n"] >= 4, "tensor.n", "need n >= 4")
    _need(v["tensor.d"] >= 1, "tensor.d", "need d >= 1")
