"""Command-line driver.

    fpmorph morph {grid,grid-sharp,sphere,sphere-sharp} ...
    fpmorph tessellate --n 3000 --iterations 100 --seed 0 --out tess.npz
    fpmorph mask --tess tess.npz (--image mask.png | --caps "lon,lat,r;...") --out levels.txt
    fpmorph oracle mu2 (--target b.png | --tess tess.npz --target levels.txt) --dt ...
    fpmorph example {aging,ct,continents} --out DIR

Flags override values from ``--config FILE`` (``key=value`` lines, keys spelled
like the long flags with underscores).  Exit status is 0 on success, 1 on a
runtime failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import grid, media, sphere, synthetic
from .diagnostics import MAX_ORACLE_UNKNOWNS, ConvergenceReport, dense_operator_mu2
from .thresholding import SharpConfig, sharp_evolve

log = logging.getLogger("fpmorph")

MODES = ("grid", "grid-sharp", "sphere", "sphere-sharp")


@dataclass
class RunConfig:
    mode: str
    out: str
    init: str | None = None
    target: str | None = None
    tess: str | None = None
    dt: float = 0.01
    dx: float = 1.0
    dy: float = 1.0
    steps: int = 1000
    stride: int = 100
    eps_floor: float = media.DEFAULT_EPS_FLOOR
    pi_s: float = 0.1
    pi_b: float = 0.9
    level_cut: float = 0.5
    schedule: str | None = None
    schedule_value: int | None = None
    rounds: int = 50
    bisection_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        need = ("init", "target", "tess") if self.mode.startswith("sphere") else ("init", "target")
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"mode {self.mode} requires --{', --'.join(missing)}")
        for k in ("dt", "dx", "dy", "eps_floor", "bisection_tol", "pi_s", "pi_b"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        for k in ("steps", "stride", "rounds"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be a positive integer")
        if self.schedule is None:
            self.schedule = "constant" if self.mode == "grid-sharp" else "ramp"
        if self.schedule_value is None:
            self.schedule_value = 10 if self.schedule == "constant" else 2

    def sharp(self) -> SharpConfig:
        return SharpConfig(
            pi_s=self.pi_s,
            pi_b=self.pi_b,
            schedule=self.schedule,
            schedule_value=self.schedule_value,
            bisection_tol=self.bisection_tol,
            max_rounds=self.rounds,
        )


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value):
    t = str(_CONFIG_TYPES.get(key, "str"))
    if "float" in t:
        return float(value)
    if "int" in t:
        return int(value)
    return value


def merge_config(args: argparse.Namespace) -> RunConfig:
    """Flag values win over the config file, which wins over built-in defaults."""
    merged = {}
    if getattr(args, "config", None):
        for k, v in media.read_keyvalue(args.config).items():
            k = k.replace("-", "_")
            if k not in _CONFIG_TYPES or k == "mode":
                raise ValueError(f"unknown config key {k!r} in {args.config}")
            merged[k] = _coerce(k, v)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            merged[f.name] = v
    for required in ("mode", "out"):
        if required not in merged:
            raise ValueError(f"--{required} is required")
    return RunConfig(**merged)


# ---------------------------------------------------------------------------
# pipelines


def _config_items(cfg: RunConfig):
    return [(f"config.{k}", v) for k, v in asdict(cfg).items()]


def _report_items(report: ConvergenceReport):
    items = [("records", len(report)), ("linear_steps", report.linear_steps)]
    for ch in report.channels:
        items.append((f"{ch}.initial_error", repr(report.errors[ch][0])))
        items.append((f"{ch}.final_error", repr(report.errors[ch][-1])))
        fit = report.fits.get(ch)
        if fit is not None:
            items.append((f"{ch}.fitted_rate", repr(fit.rate)))
            items.append((f"{ch}.fit_r_squared", repr(fit.r_squared)))
    if report.converged is not None:
        items += [
            ("converged", report.converged),
            ("converged_round", report.converged_round),
            ("converged_step", report.converged_step),
        ]
        if report.threshold_residuals:
            items.append(("final_threshold_residual", repr(report.threshold_residuals[-1])))
    items += [(f"meta.{k}", v) for k, v in report.metadata.items()]
    return items


def _load_pair(cfg: RunConfig):
    a = media.read_png(cfg.init)
    b = media.read_png(cfg.target)
    if a.data.shape != b.data.shape:
        raise ValueError(f"initial image {a.data.shape} and target image {b.data.shape} differ in size or channels")
    return a, b


def run_grid_mode(cfg: RunConfig, out: Path) -> dict:
    a, b = _load_pair(cfg)
    rho = media.image_to_density(a, cfg.eps_floor)
    pis = media.image_to_density(b, cfg.eps_floor)
    first = next(iter(pis.values()))
    shape = grid.GridShape.like(first, cfg.dx, cfg.dy)
    names, dens, eqs, items = [], [], [], []
    for name in pis:
        eq = grid.GridEquilibrium.build(pis[name], shape, cfg.dt)
        c = grid.mass_adjustment_factor(rho[name], eq)
        log.info("channel %s: mass adjustment c = %.17g", name, c)
        items.append((f"{name}.mass_scale", repr(c)))
        names.append(name)
        dens.append(grid.DensityGrid(shape, c * rho[name]))
        eqs.append(eq)
    media.write_png(b, out / "target.png")
    sink = media.PNGFrameSink(out)
    report = grid.run_grid(grid.ChannelSet(names, dens, eqs), cfg.steps, cfg.stride, sink)
    report.metadata["eps_floor"] = repr(cfg.eps_floor)
    report.metadata["pixel_map"] = "density=max(pixel/255, eps_floor); row j upward"
    media.write_error_log(report, out / "errors.csv")
    return {"report": report, "items": items}


def _binary_levels(img: media.ImageField, cut: float) -> np.ndarray:
    gray = img.data.mean(axis=2)
    return np.ascontiguousarray(np.flipud(gray >= cut).T)


def run_grid_sharp_mode(cfg: RunConfig, out: Path) -> dict:
    a, b = _load_pair(cfg)
    sc = cfg.sharp()
    pi = np.where(_binary_levels(b, cfg.level_cut), sc.pi_b, sc.pi_s)
    rho0 = np.where(_binary_levels(a, cfg.level_cut), sc.pi_b, sc.pi_s)
    shape = grid.GridShape.like(pi, cfg.dx, cfg.dy)
    eq = grid.GridEquilibrium.build(pi, shape, cfg.dt)
    media.write_png(media.density_to_image({"gray": pi}), out / "target.png")
    sink = media.PNGFrameSink(out)
    report = sharp_evolve(
        rho0, pi, lambda r: grid.step_values(r, eq), eq.weights, sc, sink=sink, dt=cfg.dt, channel="gray"
    )
    media.write_error_log(report, out / "errors.csv")
    return {"report": report, "items": []}


def read_levels(path, n: int) -> np.ndarray:
    """Cell level file: one ``index s|b`` (or ``index value``) per line, every cell exactly once."""
    vals = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'index level'")
            k = int(parts[0])
            if k in vals:
                raise ValueError(f"{path}:{lineno}: cell {k} listed twice")
            vals[k] = parts[1]
    if sorted(vals) != list(range(n)):
        raise ValueError(f"{path}: level file must list every cell 0..{n - 1} exactly once")
    return np.array([vals[k] for k in range(n)], dtype=object)


def levels_to_values(levels: np.ndarray, pi_s: float, pi_b: float) -> np.ndarray:
    out = np.empty(len(levels))
    for k, v in enumerate(levels):
        if v == "s":
            out[k] = pi_s
        elif v == "b":
            out[k] = pi_b
        else:
            out[k] = float(v)
    return out


def write_levels(path, mask: np.ndarray) -> None:
    with open(path, "w") as fh:
        for k, m in enumerate(mask):
            fh.write(f"{k} {'b' if m else 's'}\n")


def run_sphere_mode(cfg: RunConfig, out: Path) -> dict:
    tess = sphere.load_tessellation(cfg.tess)
    pi = levels_to_values(read_levels(cfg.target, tess.n), cfg.pi_s, cfg.pi_b)
    rho0 = levels_to_values(read_levels(cfg.init, tess.n), cfg.pi_s, cfg.pi_b)
    rates = sphere.build_rates(tess, pi, cfg.dt)
    sink = media.CloudFrameSink(out)
    items = [("tess.n", tess.n), ("tess.seed", tess.seed), ("tess.iterations", tess.iterations)]
    if cfg.mode == "sphere":
        c = sphere.mass_adjustment_factor(rho0, pi, tess, rates)
        log.info("mass adjustment c = %.17g", c)
        items.append(("value.mass_scale", repr(c)))
        report = sphere.run_cloud(sphere.CloudDensity(c * rho0, pi), rates, tess, cfg.steps, cfg.stride, sink)
    else:
        w = sphere.cloud_weights(tess, rates)
        report = sharp_evolve(
            rho0, pi, lambda r: sphere.step_values(r, pi, rates), w, cfg.sharp(), sink=sink, dt=cfg.dt
        )
    media.write_error_log(report, out / "errors.csv")
    return {"report": report, "items": items}


PIPELINES = {
    "grid": run_grid_mode,
    "grid-sharp": run_grid_sharp_mode,
    "sphere": run_sphere_mode,
    "sphere-sharp": run_sphere_mode,
}


def run_pipeline(cfg: RunConfig) -> ConvergenceReport:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = PIPELINES[cfg.mode](cfg, out)
    report = result["report"]
    items = [("mode", cfg.mode)] + _config_items(cfg) + result["items"] + _report_items(report)
    media.write_keyvalue(out / "report.txt", items)
    return report


# ---------------------------------------------------------------------------
# auxiliary commands


def cmd_tessellate(args) -> int:
    tess = sphere.cvt_sphere(args.n, args.iterations, args.seed)
    sphere.save_tessellation(tess, args.out)
    print(f"n={tess.n} iterations={tess.iterations} seed={tess.seed} area_std={tess.area_std():.6g} -> {args.out}")
    return 0


def parse_caps(text: str):
    centers, radii = [], []
    for chunk in text.split(";"):
        if chunk.strip():
            lon, lat, r = (float(x) for x in chunk.split(","))
            centers.append((lon, lat))
            radii.append(r)
    if not centers:
        raise ValueError("no caps given")
    return centers, radii


def raster_mask(tess: sphere.SphereTessellation, img: media.ImageField, cut: float = 0.5) -> np.ndarray:
    """Sample an equirectangular mask (lon -180..180 left to right, lat 90..-90 top to bottom)."""
    lon, lat = sphere.xyz_to_lonlat(tess.points)
    h, w = img.height, img.width
    col = np.clip(((lon + 180.0) / 360.0 * w).astype(int), 0, w - 1)
    row = np.clip(((90.0 - lat) / 180.0 * h).astype(int), 0, h - 1)
    return img.data.mean(axis=2)[row, col] >= cut


def cmd_mask(args) -> int:
    tess = sphere.load_tessellation(args.tess)
    if (args.image is None) == (args.caps is None):
        raise ValueError("give exactly one of --image or --caps")
    if args.image is not None:
        mask = raster_mask(tess, media.read_png(args.image), args.cut)
    else:
        mask = sphere.cap_mask(tess, *parse_caps(args.caps))
    write_levels(args.out, mask)
    print(f"{int(mask.sum())} of {tess.n} cells at level b -> {args.out}")
    return 0


def cmd_oracle(args) -> int:
    if args.tess is not None:
        tess = sphere.load_tessellation(args.tess)
        if tess.n > MAX_ORACLE_UNKNOWNS:
            raise ValueError(f"oracle limited to {MAX_ORACLE_UNKNOWNS} cells")
        pi = levels_to_values(read_levels(args.target, tess.n), args.pi_s, args.pi_b)
        mu2 = dense_operator_mu2((sphere.build_rates(tess, pi, args.dt), tess, pi))
    else:
        pis = media.image_to_density(media.read_png(args.target), args.eps_floor)
        first = next(iter(pis.values()))
        if first.size > MAX_ORACLE_UNKNOWNS:
            raise ValueError(f"oracle limited to {MAX_ORACLE_UNKNOWNS} pixels, image has {first.size}")
        shape = grid.GridShape.like(first, args.dx, args.dy)
        for name, pi in pis.items():
            mu2 = dense_operator_mu2(grid.GridEquilibrium.build(pi, shape, args.dt))
            print(f"{name} mu2={mu2!r}")
        return 0
    print(f"mu2={mu2!r}")
    return 0


def cmd_example(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.name in ("aging", "ct"):
        if args.name == "aging":
            a, b = synthetic.portrait(args.size, 0.0), synthetic.portrait(args.size, 1.0)
            steps = args.steps or 10000
        else:
            a, b = synthetic.lung_slice(args.size, 0.1), synthetic.lung_slice(args.size, 1.0)
            steps = args.steps or 6000
        media.write_png(a, out / "init.png")
        media.write_png(b, out / "target.png")
        cfg = RunConfig(
            mode="grid",
            out=str(out / "run"),
            init=str(out / "init.png"),
            target=str(out / "target.png"),
            dt=0.01,
            dx=1e-4,
            dy=1e-4,
            steps=steps,
            stride=args.stride or 1000,
        )
        report = run_pipeline(cfg)
        for ch in report.channels:
            fit = report.fits.get(ch)
            rate = "n/a" if fit is None else f"{fit.rate:.8f}"
            print(f"{ch}: error {report.errors[ch][0]:.3e} -> {report.errors[ch][-1]:.3e}, rate/step {rate}")
        return 0

    # continents: sharp vs linear on a CVT sphere
    tess = sphere.cvt_sphere(args.cells, 100, args.seed)
    sphere.save_tessellation(tess, out / "tess.npz")
    start, end = synthetic.land_masks(tess)
    write_levels(out / "init_levels.txt", start)
    write_levels(out / "target_levels.txt", end)
    common = dict(init=str(out / "init_levels.txt"), target=str(out / "target_levels.txt"), tess=str(out / "tess.npz"))
    sharp_rep = run_pipeline(RunConfig(mode="sphere-sharp", out=str(out / "sharp"), dt=0.05, rounds=50, **common))
    lin_rep = run_pipeline(
        RunConfig(mode="sphere", out=str(out / "linear"), dt=0.05, steps=args.steps or 10000, stride=1000, **common)
    )
    rows = []
    for crit in (1e-3, 1e-4, 1e-5, 1e-6):
        rows.append((crit, lin_rep.first_step_below(crit), sharp_rep.first_step_below(crit)))
    with open(out / "steps_to_criterion.csv", "w") as fh:
        fh.write("criterion,linear_steps,threshold_steps\n")
        for crit, lin, thr in rows:
            fh.write(f"{crit:g},{lin},{thr}\n")
            print(f"criterion {crit:g}: linear {lin}  threshold {thr}")
    print(f"thresholding converged={sharp_rep.converged} round={sharp_rep.converged_round} step={sharp_rep.converged_step}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p: argparse.ArgumentParser, mode: str) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--out", help="output directory")
    if mode.startswith("sphere"):
        p.add_argument("--tess", help="tessellation cache (.npz) from 'fpmorph tessellate'")
        p.add_argument("--init", help="initial cell levels file (index s|b per line)")
        p.add_argument("--target", help="equilibrium cell levels file")
    else:
        p.add_argument("--init", help="initial image (PNG)")
        p.add_argument("--target", help="equilibrium image (PNG)")
        p.add_argument("--dx", type=float, help="x spacing (default 1)")
        p.add_argument("--dy", type=float, help="y spacing (default 1)")
        p.add_argument("--eps-floor", dest="eps_floor", type=float, help="positivity floor for pixel values (default 1e-3)")
    p.add_argument("--dt", type=float, help="time step (default 0.01)")
    if mode.endswith("sharp"):
        p.add_argument("--pi-s", dest="pi_s", type=float, help="small level (default 0.1)")
        p.add_argument("--pi-b", dest="pi_b", type=float, help="large level (default 0.9)")
        p.add_argument("--rounds", type=int, help="maximum thresholding rounds (default 50)")
        p.add_argument("--schedule", choices=("ramp", "constant"), help="linear steps per round: ramp k*value or constant value")
        p.add_argument("--schedule-value", dest="schedule_value", type=int, help="ramp factor (default 2) or constant count (default 10)")
        p.add_argument("--bisection-tol", dest="bisection_tol", type=float, help="bisection interval length (default 1e-6)")
        if mode == "grid-sharp":
            p.add_argument("--level-cut", dest="level_cut", type=float, help="grey value splitting s from b (default 0.5)")
    else:
        p.add_argument("--steps", type=int, help="number of explicit steps (default 1000)")
        p.add_argument("--stride", type=int, help="frame every this many steps (default 100)")
        if mode == "sphere":
            p.add_argument("--pi-s", dest="pi_s", type=float, help="value for level s (default 0.1)")
            p.add_argument("--pi-b", dest="pi_b", type=float, help="value for level b (default 0.9)")
    p.set_defaults(mode=mode)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpmorph", description="Morph images and sphere colourings by drift-diffusion toward a target")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    morph = sub.add_parser("morph", help="evolve an initial field toward an equilibrium")
    msub = morph.add_subparsers(dest="mode_cmd", required=True)
    for mode in MODES:
        _add_run_flags(msub.add_parser(mode, help=f"{mode} pipeline"), mode)

    t = sub.add_parser("tessellate", help="build and cache a CVT of the unit sphere")
    t.add_argument("--n", type=int, required=True)
    t.add_argument("--iterations", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    m = sub.add_parser("mask", help="rasterise a lon/lat mask onto a tessellation as a level file")
    m.add_argument("--tess", required=True)
    m.add_argument("--image", help="equirectangular PNG; pixels >= --cut become level b")
    m.add_argument("--caps", help="'lon,lat,radius_deg;...' spherical caps that become level b")
    m.add_argument("--cut", type=float, default=0.5)
    m.add_argument("--out", required=True)

    o = sub.add_parser("oracle", help="small-problem spectral oracles")
    osub = o.add_subparsers(dest="oracle_cmd", required=True)
    mu = osub.add_parser("mu2", help="second eigenvalue magnitude of the dense iteration matrix")
    mu.add_argument("--target", required=True, help="equilibrium PNG, or level file with --tess")
    mu.add_argument("--tess")
    mu.add_argument("--dt", type=float, required=True)
    mu.add_argument("--dx", type=float, default=1.0)
    mu.add_argument("--dy", type=float, default=1.0)
    mu.add_argument("--eps-floor", dest="eps_floor", type=float, default=media.DEFAULT_EPS_FLOOR)
    mu.add_argument("--pi-s", dest="pi_s", type=float, default=0.1)
    mu.add_argument("--pi-b", dest="pi_b", type=float, default=0.9)

    e = sub.add_parser("example", help="desk-scale reproductions on synthetic inputs")
    e.add_argument("name", choices=("aging", "ct", "continents"))
    e.add_argument("--out", required=True)
    e.add_argument("--size", type=int, default=64, help="image side length for aging/ct")
    e.add_argument("--cells", type=int, default=300, help="sphere cells for continents")
    e.add_argument("--steps", type=int, help="override the number of linear steps")
    e.add_argument("--stride", type=int)
    e.add_argument("--seed", type=int, default=7)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "morph":
            try:
                cfg = merge_config(args)
            except (TypeError, ValueError) as exc:
                parser.print_usage(sys.stderr)
                print(f"fpmorph: error: {exc}", file=sys.stderr)
                return 2
            report = run_pipeline(cfg)
            summary = ", ".join(f"{ch} final error {report.errors[ch][-1]:.3e}" for ch in report.channels)
            print(f"{cfg.mode}: {len(report)} records; {summary} -> {cfg.out}")
            return 0
        if args.command == "tessellate":
            return cmd_tessellate(args)
        if args.command == "mask":
            return cmd_mask(args)
        if args.command == "oracle":
            return cmd_oracle(args)
        if args.command == "example":
            return cmd_example(args)
    except (ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"fpmorph: error: {exc}", file=sys.stderr)
        return 1
    parser.print_usage(sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
