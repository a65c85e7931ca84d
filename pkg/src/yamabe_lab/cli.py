"""Experiment runner: ``yamabe-lab COMMAND --config PATH [--out DIR] [--seed N]``.

Exit codes: 0 success, 1 unknown command, 2 invalid config, 3 numerical failure
(a diagnostic JSON is written to the output directory).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, ExperimentConfig

COMMANDS = ("flow-run", "bubble-sweep", "green-build", "mass", "flux-i", "q-estimate",
            "blowup-fit", "tensor-kernel", "report")

# column -> (unit, meaning)
COLUMN_META = {
    "t": ("time", "flow time"),
    "rbar": ("1/length^2", "total-curvature average Rbar"),
    "volume": ("length^n", "volume of the evolving metric"),
    "minR": ("1/length^2", "minimum scalar curvature"),
    "maxR": ("1/length^2", "maximum scalar curvature"),
    "minU": ("1", "minimum conformal factor"),
    "maxU": ("1", "maximum conformal factor"),
    "lp_dev": ("1", "Lp deviation of R from Rbar_inf"),
    "neumannR": ("1/length^3", "max normal derivative of R on the boundary"),
    "rbar_identity_err": ("1", "relative error of the Rbar evolution identity"),
    "kind": ("-", "test-function kind"),
    "eps": ("length", "bubble scale"),
    "rho": ("length", "cutoff or flux radius"),
    "delta": ("length", "depth of the center"),
    "energy": ("1", "energy E"),
    "gap": ("1", "energy minus the sharp constant"),
    "res_int_norm": ("1", "interior residual norm"),
    "res_bdry_pos": ("1", "positive part of the boundary residual"),
    "res_bdry_neg": ("1", "negative part of the boundary residual"),
    "center": ("length", "Green-function pole"),
    "tag": ("1", "normalization limit |y|^{n-2} G"),
    "scale": ("1", "stored scale of the kernel"),
    "min_G": ("1", "minimum sampled Green value"),
    "bg_residual": ("1", "boundary operator residual of G"),
    "repro_err_max": ("1", "worst relative error of the reproducing identity"),
    "R": ("length", "sphere radius"),
    "flux": ("1", "raw mass flux"),
    "extrapolated": ("1", "extrapolated limit"),
    "order_estimate": ("1", "fitted decay order"),
    "I": ("1", "flux integral I(x0 rho)"),
    "lower": ("1", "lower bound for Q(M)"),
    "upper": ("1", "upper bound for Q(M)"),
    "eigenvalue": ("1", "first eigenvalue of the conformal Laplacian"),
    "stagnated": ("bool", "optimizer stagnation flag"),
    "x": ("length", "bubble center"),
    "alpha": ("1", "bubble amplitude"),
    "n": ("1", "dimension"),
    "d": ("1", "degree"),
    "drop_normal": ("bool", "boundary condition ablated"),
    "kernel_dim": ("1", "dimension of the tensor kernel"),
}


class NumericalFailure(RuntimeError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v).replace(",", " ")


def write_csv(path: Path, rows: list, columns) -> None:
    head = []
    for c in columns:
        unit, meaning = COLUMN_META.get(c, ("-", c))
        head.append(f"{c} [{unit}; {meaning}]")
    lines = [",".join(head)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def read_csv(path: Path):
    lines = Path(path).read_text().splitlines()
    names = [h.split(" [", 1)[0] for h in lines[0].split(",")]
    return [dict(zip(names, ln.split(","))) for ln in lines[1:]]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _chart(cfg: ExperimentConfig):
    from .geometry import make_chart
    return make_chart(cfg["chart.name"], **cfg.chart_params())


def _grid(cfg, chart):
    from .geometry import Grid
    n = cfg["grid.n"]
    counts = [n] * chart.n
    if (chart.n - 1, 0) in chart.physical and len(chart.physical) == 1:
        counts[-1] = n // 2 + 1
    return Grid.uniform_grid(chart, counts)


# ---------------------------------------------------------------------------
# commands

def cmd_flow_run(cfg, out: Path, rng):
    from .flow import YamabeFlow, max_principle_ok, snapshot_table
    chart = _chart(cfg)
    grid = _grid(cfg, chart)
    X = grid.points()
    span = chart.hi - chart.lo
    a = cfg["flow.amplitude"]
    kind = cfg["flow.u0"]
    if kind == "const":
        u0 = np.ones(grid.shape)
    elif kind == "cosine":
        u0 = 1 + a * np.cos(np.pi * (X[..., 0] - chart.lo[0]) / span[0])
    else:
        u0 = np.ones(grid.shape)
        for _ in range(3):
            k = rng.integers(0, 3, size=chart.n)
            ph = rng.uniform(0, 2 * np.pi)
            u0 = u0 + a / 3 * np.cos(np.pi * np.sum(k * (X - chart.lo) / span, axis=-1) + ph)
    flow = YamabeFlow(chart, grid)
    states, rep = flow.run(u0, cfg["flow.T"], cfg["flow.dt0"], adapt=cfg["flow.adapt"])
    rows = snapshot_table(flow, states)
    cols = ["t", "rbar", "volume", "minR", "maxR", "minU", "maxU", "lp_dev", "neumannR",
            "rbar_identity_err"]
    write_csv(out / "flow.csv", rows, cols)
    rb = np.array([s.rbar for s in states])
    ok_mp, margin = max_principle_ok(states)
    mono = bool(np.all(np.diff(rb) <= 1e-8 * np.abs(rb[:-1]) + 1e-14))
    vol = float(np.max(np.abs(np.array([s.volume for s in states]) - 1)))
    return dict(status=rep["status"], steps=rep["steps"], rejects=rep["rejects"],
                rbar_inf=rep["rbar_inf"],
                verdicts={"maximum principle": ok_mp, "Rbar non-increasing": mono,
                          "unit volume": vol <= 1e-10},
                max_principle_margin=margin, volume_deviation=vol)


def cmd_bubble_sweep(cfg, out, rng):
    from .bubbles import SWEEP_COLUMNS, BubbleSpec, sweep_row
    n = cfg["chart.n"]
    rows = []
    for e in cfg["bubble.eps"]:
        spec = BubbleSpec(cfg["bubble.kind"], np.zeros(n), e, cfg["bubble.rho"],
                          delta=cfg["bubble.delta"] if cfg["bubble.kind"] == "B" else 0.0,
                          C_B=cfg["bubble.C_B"])
        rows.append(sweep_row(spec))
    write_csv(out / "bubble_sweep.csv", rows, SWEEP_COLUMNS)
    eps = np.array([r["eps"] for r in rows])
    gaps = np.abs([r["gap"] for r in rows])
    verdicts = {}
    if cfg["bubble.kind"] != "B" and len(rows) >= 2:
        # quadrature floors make the sequence noisy at the smallest scales
        slope = float(np.polyfit(np.log(eps), np.log(np.maximum(gaps, 1e-300)), 1)[0])
        verdicts["gap tends to 0 with eps"] = slope > 0
    return dict(verdicts=verdicts, gaps=[r["gap"] for r in rows])


def _perturbed(chart, amp):
    from .geometry import conformal_chart
    if amp == 0:
        return chart

    def w(x):
        x = np.asarray(x, dtype=float)
        return 1 + amp * (x[..., 0] + 0.75 * x[..., 0] ** 2 - 0.5 * x[..., 1] ** 2
                          + 0.5 * x[..., -1] ** 2 + 0.25 * x[..., 0] * x[..., 1])
    return conformal_chart(chart, w)


def cmd_green_build(cfg, out, rng):
    from .greenmass import assemble_green, bump_test_functions, reproducing_check
    base = _chart(cfg)
    chart = _perturbed(base, cfg["green.perturbation"])
    grid = _grid(cfg, chart)
    kmax = cfg["green.k_max"] or None
    rows = []
    ok_pos = ok_rep = True
    for c in cfg["green.centers"]:
        t = assemble_green(chart, grid, np.array(c), rho0=cfg["green.rho0"], k_max=kmax)
        errs = [reproducing_check(t, chart, grid, phi).rel_err for phi in bump_test_functions(chart)]
        ch = t.checks
        rows.append(dict(center=" ".join(f"{v:.12g}" for v in c), kind=t.kind, tag=t.tag, scale=t.scale,
                         min_G=ch.get("min_G", np.nan), bg_residual=ch.get("bg_residual", 0.0),
                         repro_err_max=max(errs)))
        ok_pos &= bool(ch.get("min_G", 1.0) > 0)
        ok_rep &= max(errs) <= 0.01
    write_csv(out / "green.csv", rows, ["center", "kind", "tag", "scale", "min_G", "bg_residual",
                                         "repro_err_max"])
    return dict(verdicts={"positivity": ok_pos, "reproducing formula": ok_rep})


def _rotation(n, th, keep_last):
    Q = np.eye(n)
    c, s = np.cos(th), np.sin(th)
    Q[:2, :2] = [[c, -s], [s, c]]
    if not keep_last:
        P = np.eye(n)
        P[1:3, 1:3] = [[c, -s], [s, c]]
        Q = P @ Q
    return Q


def cmd_mass(cfg, out, rng):
    from .greenmass import MASS_COLUMNS, adm_mass, boundary_mass, rotated_chart
    chart = _chart(cfg)
    radii = cfg["mass.radii"]
    if max(radii) > float(np.min(chart.hi)):
        raise ConfigError("mass.radii", "radius exceeds the chart")
    which = cfg["mass.which"]
    fn = adm_mass if which == "adm" else boundary_mass
    res = fn(chart, radii)
    write_csv(out / "mass.csv", res.rows(), MASS_COLUMNS)
    rot = fn(rotated_chart(chart, _rotation(chart.n, cfg["mass.rotation"], which == "boundary")), radii)
    scale = max(abs(res.extrapolated), 1e-12)
    rel = abs(rot.extrapolated - res.extrapolated) / scale
    inv = rel <= 5e-3 or abs(rot.extrapolated - res.extrapolated) <= 1e-8
    return dict(extrapolated=res.extrapolated, order_estimate=res.order_estimate, warning=res.warning,
                rotated=rot.extrapolated, verdicts={"rotation invariance": bool(inv)})


def cmd_flux_i(cfg, out, rng):
    from .geometry import flat_half_box, schwarzschild_chart
    from .greenmass import boundary_mass, flux_I, kelvin_green
    n = cfg["chart.n"]
    m = cfg["flux.mass"]
    chart = flat_half_box(n, cfg["chart.half_width"], cfg["chart.height"])
    G = kelvin_green(lambda y: 1 + m / (2 * np.linalg.norm(y, axis=-1) ** (n - 2)), n)
    rep = flux_I(chart, G, cfg["flux.rhos"])
    rows = [dict(rho=r, I=v, extrapolated=rep.extrapolated) for r, v in zip(rep.rho, rep.I)]
    write_csv(out / "flux_i.csv", rows, ["rho", "I", "extrapolated"])
    bm = boundary_mass(schwarzschild_chart(n, m, r_out=cfg["chart.r_out"], half=True), cfg["mass.radii"])
    rel = abs(rep.extrapolated - bm.extrapolated) / max(abs(bm.extrapolated), 1e-12)
    return dict(extrapolated=rep.extrapolated, boundary_mass=bm.extrapolated,
                verdicts={"flux matches boundary mass": bool(rel <= 0.02 or abs(m) == 0)})


def cmd_q_estimate(cfg, out, rng):
    from .functionals import estimate_Q
    chart = _chart(cfg)
    grid = _grid(cfg, chart)
    b = estimate_Q(chart, grid, restarts=cfg["q.restarts"], seed=cfg["seed"], iters=cfg["q.iters"])
    write_csv(out / "q.csv", [dict(lower=b.lower, upper=b.upper, eigenvalue=b.eigenvalue,
                                   stagnated=b.stagnated)], ["lower", "upper", "eigenvalue", "stagnated"])
    return dict(verdicts={"bracket ordered": bool(b.lower <= b.upper)})


def cmd_blowup_fit(cfg, out, rng):
    from .blowup import FIT_COLUMNS, FitConfig, detect_peaks, fit_bubbles, split_vw
    from .bubbles import BubbleSpec, assemble_test_function
    from .geometry import Field
    chart = _chart(cfg)
    grid = _grid(cfg, chart)
    fc = FitConfig(rho=cfg["fit.rho"], delta0=cfg["fit.delta0"], R0=cfg["fit.R0"])
    u = np.zeros(grid.shape)
    for b in cfg["fit.bubbles"]:
        u = u + assemble_test_function(BubbleSpec("C", np.array(b[:-1]), b[-1], fc.rho), chart, grid).values
    if cfg["fit.noise"] > 0:
        u = u + cfg["fit.noise"] * rng.standard_normal(grid.shape)
        u = np.maximum(u, 0.0)
    u = Field(u, grid)
    peaks = detect_peaks(u, chart)
    if len(peaks) < cfg["fit.m"]:
        raise NumericalFailure(f"found {len(peaks)} peaks, need {cfg['fit.m']}")
    fit = fit_bubbles(u, chart, cfg["fit.m"], peaks, fc)
    split = split_vw(fit, u, chart)
    write_csv(out / "fit.csv", fit.rows(), FIT_COLUMNS)
    mono = bool(np.all(np.diff(fit.objective_trace) <= 0))
    return dict(w_energy=fit.w_energy, C_nu=fit.C_nu, separation=fit.separation, E_v=split.E_v,
                split_bound=split.bound, projected=fit.projected, rank_deficient=fit.rank_deficient,
                verdicts={"objective non-increasing": mono, "energy splitting bound": split.holds,
                          "fit below initialization": fit.w_energy <= fit.initial_objective})


def cmd_tensor_kernel(cfg, out, rng):
    from .polytensor import lemma1_kernel
    n, d, drop = cfg["tensor.n"], cfg["tensor.d"], cfg["tensor.drop_normal"]
    k = lemma1_kernel(n, d, drop_normal=drop)
    write_csv(out / "tensor.csv", [dict(n=n, d=d, drop_normal=drop, kernel_dim=k)],
              ["n", "d", "drop_normal", "kernel_dim"])
    return dict(kernel_dim=k, verdicts={"kernel trivial": k == 0} if not drop else {})


HANDLERS = {
    "flow-run": cmd_flow_run,
    "bubble-sweep": cmd_bubble_sweep,
    "green-build": cmd_green_build,
    "mass": cmd_mass,
    "flux-i": cmd_flux_i,
    "q-estimate": cmd_q_estimate,
    "blowup-fit": cmd_blowup_fit,
    "tensor-kernel": cmd_tensor_kernel,
}

SUMMARY_LABELS = {
    "flow-run": "normalized flow with minimal boundary",
    "bubble-sweep": "glued bubble energies against the sharp constants",
    "green-build": "Green functions by parametrix iteration",
    "mass": "mass flux at infinity",
    "flux-i": "flux integral I(x0 rho) on the Kelvin fixture",
    "q-estimate": "bracket for the discrete Q(M)",
    "blowup-fit": "bubble decomposition fit",
    "tensor-kernel": "polynomial tensor kernel",
}


def report(out: Path) -> str:
    """Text summary of every command summary found in ``out``."""
    files = sorted(Path(out).glob("*.summary.json"))
    if not files:
        raise FileNotFoundError(f"no summaries in {out}")
    lines = []
    for f in files:
        s = json.loads(f.read_text())
        cmd = s["command"]
        lines.append(f"[{cmd}] {SUMMARY_LABELS.get(cmd, cmd)}")
        for k in sorted(s):
            if k in ("command", "verdicts"):
                continue
            lines.append(f"  {k}: {s[k]}")
        for k, v in sorted(s.get("verdicts", {}).items()):
            lines.append(f"  {'PASS' if v else 'FAIL'} {k}")
    return "\n".join(lines) + "\n"


def run_command(command: str, cfg: ExperimentConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    try:
        with np.errstate(all="ignore"):
            summary = HANDLERS[command](cfg, out, rng)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # numerical failures of any module
        diag = dict(command=command, error=str(e), type=type(e).__name__)
        node = getattr(e, "node", None)
        if node is not None:
            diag["node"] = [int(i) for i in np.atleast_1d(node)]
        _write_json(out / f"{command}.failure.json", diag)
        print(f"numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 3
    summary["command"] = command
    _write_json(out / f"{command}.summary.json", summary)
    return 0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="yamabe-lab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int)
    args = p.parse_args(argv)
    if args.command not in COMMANDS:
        p.print_usage(sys.stderr)
        print(f"unknown command {args.command!r}; choose from {', '.join(COMMANDS)}", file=sys.stderr)
        return 1
    if args.command == "report":
        out = args.out or Path("out")
        try:
            sys.stdout.write(report(out))
        except FileNotFoundError as e:
            print(str(e), file=sys.stderr)
            return 2
        return 0
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.parse_text("")
        if args.seed is not None:
            cfg.values["seed"] = args.seed
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = args.out or Path(cfg["output.dir"])
    return run_command(args.command, cfg, out)


if __name__ == "__main__":
    sys.exit(main())
