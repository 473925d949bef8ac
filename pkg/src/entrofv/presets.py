"""The bundled experiments: problem builders, run configs and CSV emission.

Every preset resolves to a concrete problem on the reference mesh family.
Boundary data is discretized as exact edge means, potentials are sampled at
cell centers and their orthogonal projections onto Dirichlet edges, initial
data and cellwise coefficients at cell centroids.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .entropy import EntropyTrace, fit_decay_rate
from .linalg import LinAlgError, NewtonConfig
from .mesh import (BOTTOM, LEFT, RIGHT, TOP, BoundarySpec, Mesh, Segment,
                   reference_mesh)
from .schemes import SCHEMES, AssemblyError, BScheme, DataError, DdData, \
    advection_from_potential, discretize_coefficients
from .solvers import (DdProblem, FpProblem, PmeProblem, SolverError,
                      StepperConfig, run_transient, solve_fp_steady)

THREADS_ENV = "ENTROFV_THREADS"


class UsageError(Exception):
    """Bad configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# problem builders


def toy_mesh(level: int) -> Mesh:
    bnd = BoundarySpec(dirichlet=(LEFT, RIGHT), neumann=(BOTTOM, TOP))
    return reference_mesh(level, bnd)


def toy_problem(level: int) -> FpProblem:
    """Unit advection along the first axis, boundary values 1 and e."""
    mesh = toy_mesh(level)
    geo = mesh.geometry
    phi_cells = mesh.cell_center[:, 0]
    phi_dir = np.where(mesh.dirichlet, geo.edge_midpoint[:, 0], np.nan)
    u = advection_from_potential(mesh, phi_cells, phi_dir)
    f_dir = np.where(mesh.dirichlet, np.exp(geo.edge_midpoint[:, 0]), np.nan)
    data = discretize_coefficients(mesh, 1.0, f_dir, u_first=u)
    x1 = geo.cell_centroid[:, 0]
    f0 = np.exp(x1) + np.exp(x1 / 2.0) * np.sin(np.pi * x1)
    return FpProblem(mesh=mesh, data=data, f0=f0)


def toy_real_steady(mesh: Mesh) -> np.ndarray:
    """Exponential of the potential at the scheme points; solves the
    Scharfetter-Gummel steady system exactly."""
    return np.exp(mesh.cell_center[:, 0])


#: Low-diffusion barrier blocks of the heterogeneous test; two axis-aligned
#: rectangles whose sides lie on mesh edge lines from level 2 on.
HETERO_BARRIER = (((0.0, 0.75), (0.25, 0.5)), ((0.25, 1.0), (0.625, 0.875)))
HETERO_DRAIN_DIFFUSION = 3.0
HETERO_BARRIER_DIFFUSION = 0.01
HETERO_LOW_VALUE = 0.018


def _in_barrier(points: np.ndarray) -> np.ndarray:
    inside = np.zeros(points.shape[0], dtype=bool)
    for (x0, x1), (y0, y1) in HETERO_BARRIER:
        inside |= ((points[:, 0] > x0) & (points[:, 0] < x1)
                   & (points[:, 1] > y0) & (points[:, 1] < y1))
    return inside


def hetero_problem(level: int) -> FpProblem:
    """Drain/barrier diffusion contrast with a constant drift, driven from
    the top boundary toward the bottom one."""
    mesh = reference_mesh(level, BoundarySpec(dirichlet=(TOP, BOTTOM),
                                              neumann=(LEFT, RIGHT)))
    geo = mesh.geometry
    a_cells = np.where(_in_barrier(geo.cell_centroid),
                       HETERO_BARRIER_DIFFUSION, HETERO_DRAIN_DIFFUSION)
    # constant advection (-1/2, 0) derives from the potential -x1/2
    phi_cells = -0.5 * mesh.cell_center[:, 0]
    phi_dir = np.where(mesh.dirichlet, -0.5 * geo.edge_midpoint[:, 0], np.nan)
    u = advection_from_potential(mesh, phi_cells, phi_dir)
    top = mesh.dirichlet & (np.abs(geo.edge_midpoint[:, 1] - 1.0) < 1e-9)
    f_dir = np.where(mesh.dirichlet, np.where(top, 1.0, HETERO_LOW_VALUE), np.nan)
    data = discretize_coefficients(mesh, a_cells, f_dir, u_first=u)
    f0 = np.full(mesh.n_cells, HETERO_LOW_VALUE)
    return FpProblem(mesh=mesh, data=data, f0=f0)


def fill_problem(level: int, m: float = 4.0) -> PmeProblem:
    """Nonlinear filling of an initially empty medium from the right edge;
    boundary value 2.5 on the (0.3, 0.7) strip of the edge and 1 elsewhere."""
    mesh = reference_mesh(level, BoundarySpec(dirichlet=(RIGHT,),
                                              neumann=(LEFT, TOP, BOTTOM)))
    geo = mesh.geometry
    f_dir = np.full(mesh.n_edges, np.nan)
    for e in np.nonzero(mesh.dirichlet)[0]:
        va, vb = geo.vertices[geo.edge_vertices[e]]
        y0, y1 = sorted((float(va[1]), float(vb[1])))
        overlap = max(0.0, min(y1, 0.7) - max(y0, 0.3))
        f_dir[e] = (2.5 * overlap + 1.0 * ((y1 - y0) - overlap)) / (y1 - y0)
    return PmeProblem(mesh=mesh, m=m, f_dirichlet=f_dir,
                      f0=np.zeros(mesh.n_cells))


def sweep_problem(level: int, m: float, m_dirichlet: float) -> PmeProblem:
    """Constant Dirichlet data on the whole boundary, empty initial state."""
    mesh = reference_mesh(level, BoundarySpec.all_dirichlet())
    f_dir = np.where(mesh.dirichlet, m_dirichlet, np.nan)
    return PmeProblem(mesh=mesh, m=m, f_dirichlet=f_dir,
                      f0=np.zeros(mesh.n_cells))


#: Upper-left quadrant acts as the P-doped region of the junction.
PN_P_REGION = ((0.0, 0.5), (0.5, 1.0))


def pn_problem(level: int, lam: float = 1.0, bias: float = 0.0,
               doping_magnitude: float = 1.0) -> DdProblem:
    """Junction diode with ohmic contacts on the bottom edge and the left
    quarter of the top edge; optional applied bias between the contacts."""
    bnd = BoundarySpec(dirichlet=(BOTTOM, Segment(1, 1.0, 0.0, 0.25)),
                       neumann=(LEFT, RIGHT, Segment(1, 1.0, 0.25, 1.0)))
    mesh = reference_mesh(level, bnd)
    geo = mesh.geometry
    dmask = mesh.dirichlet
    mid = geo.edge_midpoint
    bottom = dmask & (np.abs(mid[:, 1]) < 1e-9)

    n_dir = np.where(dmask, np.where(bottom, math.e, 1.0), np.nan)
    p_dir = np.where(dmask, np.where(bottom, 1.0 / math.e, 1.0), np.nan)
    v_bias = np.where(bottom, bias, -bias)
    v_dir = np.where(dmask, 0.5 * (np.log(n_dir) - np.log(p_dir)) + v_bias, np.nan)

    cen = geo.cell_centroid
    (x0, x1), (y0, y1) = PN_P_REGION
    p_region = (cen[:, 0] > x0) & (cen[:, 0] < x1) & (cen[:, 1] > y0) & (cen[:, 1] < y1)
    doping = np.where(p_region, -doping_magnitude, doping_magnitude)

    dd = DdData(doping=doping, debye=lam, n_dirichlet=n_dir,
                p_dirichlet=p_dir, v_dirichlet=v_dir)
    n0 = math.e + (1.0 - math.e) * (1.0 - np.sqrt(cen[:, 1]))
    p0 = 1.0 / math.e + (1.0 - 1.0 / math.e) * (1.0 - np.sqrt(cen[:, 1]))
    return DdProblem(mesh=mesh, dd=dd, n0=n0, p0=p0)


# ---------------------------------------------------------------------------
# run configuration and the preset catalog


@dataclass(frozen=True)
class RunConfig:
    preset: str
    scheme: Optional[str] = None
    level: Optional[int] = None
    dt: Optional[float] = None
    t_final: Optional[float] = None
    entropy_floor: float = 1e-14
    out: Optional[str] = None
    force_peclet: bool = False
    m: Optional[float] = None
    m_dirichlet: Optional[float] = None
    debye: float = 1.0
    bias: Optional[float] = None
    doping: float = 1.0
    threads: Optional[int] = None

    def resolved_scheme(self, default: str) -> BScheme:
        name = self.scheme if self.scheme is not None else default
        if name not in SCHEMES:
            raise UsageError(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}")
        return SCHEMES[name]


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    model: str
    level: int
    dt: float
    t_final: float
    adaptive: bool = False
    scheme: str = "sg"


_CATALOG = (
    Preset("fp-toy", "linear advection-diffusion with the exact exponential "
           "steady state; boundary values 1 and e", "fokker-planck",
           level=0, dt=1e-2, t_final=4.0),
    Preset("fp-hetero", "heterogeneous drain/barrier diffusion (3 vs 0.01) "
           "with constant drift (-1/2, 0)", "fokker-planck",
           level=4, dt=1e-2, t_final=2.0, scheme="upwind"),
    Preset("pme-fill", "porous-medium filling, exponent 4, piecewise "
           "boundary values 2.5 / 1 on the right edge", "pme",
           level=3, dt=1e-3, t_final=15.0, adaptive=True),
    Preset("pme-sweep", "porous-medium decay-rate sweep over the exponent "
           "and the boundary level", "pme",
           level=2, dt=1e-3, t_final=60.0, adaptive=True),
    Preset("dd-pn", "junction diode with thermal contacts", "drift-diffusion",
           level=3, dt=1e-2, t_final=10.0),
    Preset("dd-bias", "junction diode with applied bias 2.5", "drift-diffusion",
           level=2, dt=1e-2, t_final=10.0),
)

SWEEP_EXPONENTS = (2.0, 3.0, 4.0)
SWEEP_BOUNDARY_LEVELS = (0.1, 1.0, 5.0)


def presets() -> dict[str, Preset]:
    return {p.name: p for p in _CATALOG}


def _stepper(preset: Preset, cfg: RunConfig) -> StepperConfig:
    dt = cfg.dt if cfg.dt is not None else preset.dt
    t_final = cfg.t_final if cfg.t_final is not None else preset.t_final
    newton = NewtonConfig()
    if preset.adaptive:
        return StepperConfig(t_final=t_final, dt0=min(dt, 1e-2), newton=newton,
                             entropy_floor=cfg.entropy_floor)
    return StepperConfig.fixed(dt, t_final, newton=newton,
                               entropy_floor=cfg.entropy_floor)


def build_problem(cfg: RunConfig):
    """Resolve a configuration to (problem, scheme, stepper)."""
    catalog = presets()
    if cfg.preset not in catalog:
        raise UsageError(f"unknown preset {cfg.preset!r}; "
                         f"choose from {sorted(catalog)}")
    preset = catalog[cfg.preset]
    level = cfg.level if cfg.level is not None else preset.level
    scheme = cfg.resolved_scheme(preset.scheme)

    if cfg.preset == "fp-toy":
        problem = toy_problem(level)
    elif cfg.preset == "fp-hetero":
        problem = hetero_problem(level)
    elif cfg.preset == "pme-fill":
        problem = fill_problem(level, m=cfg.m if cfg.m is not None else 4.0)
    elif cfg.preset == "pme-sweep":
        problem = sweep_problem(level,
                                m=cfg.m if cfg.m is not None else 2.0,
                                m_dirichlet=cfg.m_dirichlet
                                if cfg.m_dirichlet is not None else 1.0)
    elif cfg.preset == "dd-pn":
        problem = pn_problem(level, lam=cfg.debye, doping_magnitude=cfg.doping)
    elif cfg.preset == "dd-bias":
        bias = cfg.bias if cfg.bias is not None else 2.5
        problem = pn_problem(level, lam=cfg.debye, bias=bias,
                             doping_magnitude=cfg.doping)
    else:  # pragma: no cover
        raise UsageError(f"preset {cfg.preset} has no builder")

    if isinstance(problem, FpProblem) and cfg.force_peclet:
        problem = replace(problem, force_peclet=True)
    return problem, scheme, _stepper(preset, cfg)


# ---------------------------------------------------------------------------
# running and output emission


def _write_steady(path: Path, steady) -> None:
    lines = []
    if hasattr(steady, "n"):
        for k, (nk, pk, vk) in enumerate(zip(steady.n, steady.p, steady.v)):
            lines.append(f"{k} {nk:.17g} {pk:.17g} {vk:.17g}")
    else:
        for k, val in enumerate(steady):
            lines.append(f"{k} {val:.17g}")
    path.write_text("\n".join(lines) + "\n")


def run(cfg: RunConfig) -> int:
    """Execute one preset run; emits trace.csv and steady.txt, returns the
    exit status (0 success, 1 solver abort)."""
    out = Path(cfg.out if cfg.out is not None
               else f"runs/{cfg.preset}-{cfg.scheme or 'default'}")
    out.mkdir(parents=True, exist_ok=True)
    if cfg.preset == "pme-sweep":
        return _run_sweep(cfg, out)
    problem, scheme, stepper = build_problem(cfg)
    try:
        result = run_transient(problem, scheme, stepper)
    except (SolverError, AssemblyError, DataError, LinAlgError) as err:
        (out / "error.txt").write_text(str(err) + "\n")
        print(f"solver failure: {err}")
        return 1
    (out / "trace.csv").write_text(result.trace.to_csv())
    _write_steady(out / "steady.txt", result.steady)
    if result.aborted:
        print(f"run aborted: {result.abort_reason} (partial trace flushed)")
        return 1
    print(f"wrote {out / 'trace.csv'} ({len(result.trace)} records) "
          f"and {out / 'steady.txt'}")
    return 0


def _sweep_points(cfg: RunConfig):
    fixed_m = 2.0
    fixed_md = 1.0
    points = [(fixed_m, md) for md in SWEEP_BOUNDARY_LEVELS]
    points += [(m, fixed_md) for m in SWEEP_EXPONENTS if (m, fixed_md) not in points]
    if cfg.m is not None or cfg.m_dirichlet is not None:
        points = [(cfg.m if cfg.m is not None else fixed_m,
                   cfg.m_dirichlet if cfg.m_dirichlet is not None else fixed_md)]
    return points


def sweep_rate(trace: EntropyTrace) -> float:
    """Fitted decay rate of the relative functional over its clean
    log-linear stretch (relative levels 1e-9 .. 1e-4)."""
    values = trace.column("N_m")
    t = trace.column("t")
    mask = (values > 1e-9 * values[0]) & (values < 1e-4 * values[0])
    if mask.sum() < 5:
        raise SolverError("trace too short to fit a decay rate")
    return fit_decay_rate(trace, "N_m", (t[mask][0], t[mask][-1])).rate


def _run_sweep(cfg: RunConfig, out: Path) -> int:
    points = _sweep_points(cfg)
    threads = cfg.threads or int(os.environ.get(THREADS_ENV, "1"))
    catalog = presets()
    preset = catalog["pme-sweep"]
    level = cfg.level if cfg.level is not None else preset.level

    def one(point):
        m, md = point
        problem = sweep_problem(level, m=m, m_dirichlet=md)
        stepper = _stepper(preset, cfg)
        return point, run_transient(problem, SCHEMES["sg"], stepper)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, points))
    else:
        results = [one(p) for p in points]

    status = 0
    rate_rows = ["m,m_dirichlet,rate"]
    for (m, md), result in results:
        subdir = out / f"m{m:g}-md{md:g}"
        subdir.mkdir(parents=True, exist_ok=True)
        (subdir / "trace.csv").write_text(result.trace.to_csv())
        _write_steady(subdir / "steady.txt", result.steady)
        if result.aborted:
            status = 1
            print(f"sweep point m={m:g} md={md:g} aborted: {result.abort_reason}")
            continue
        try:
            rate_rows.append(f"{m:.17g},{md:.17g},{sweep_rate(result.trace):.17g}")
        except SolverError:
            rate_rows.append(f"{m:.17g},{md:.17g},")  # run too short to fit
    (out / "rates.csv").write_text("\n".join(rate_rows) + "\n")
    print(f"wrote {len(results)} sweep traces under {out}")
    return status


# ---------------------------------------------------------------------------
# convergence study


def convergence_study(preset: str, levels, schemes) -> tuple[str, str]:
    """Steady-state errors against the exact reference per level and scheme.

    Returns (text table, csv).  Orders are omitted where an error sits at
    the round-off floor.
    """
    if preset != "fp-toy":
        raise UsageError("only the fp-toy preset defines an exact steady reference")
    levels = list(levels)
    names = list(schemes)
    for s in names:
        if s not in SCHEMES:
            raise UsageError(f"unknown scheme {s!r}")

    errors: dict[str, list[float]] = {s: [] for s in names}
    for level in levels:
        problem = toy_problem(level)
        reference = toy_real_steady(problem.mesh)
        for s in names:
            steady = solve_fp_steady(problem.mesh, problem.data, SCHEMES[s])
            from .entropy import lp_distance
            errors[s].append(lp_distance(problem.mesh, steady, reference, 1))

    def order(e0: float, e1: float) -> Optional[float]:
        if min(e0, e1) < 1e-13:
            return None
        return math.log2(e0 / e1)

    header = ["dx"]
    for s in names:
        header += [f"{s}_err", f"{s}_order"]
    csv_lines = [",".join(header)]
    text_lines = ["dx        " + "  ".join(f"{s:>10} {'order':>6}" for s in names)]
    for i, level in enumerate(levels):
        dx = 0.25 / 2 ** level
        row_txt = [f"1/{int(round(1 / dx)):<7}"]
        row_csv = [format(dx, ".17g")]
        for s in names:
            err = errors[s][i]
            o = order(errors[s][i - 1], err) if i > 0 else None
            row_txt.append(f"{err:10.3e} {o:6.2f}" if o is not None else f"{err:10.3e} {'-':>6}")
            row_csv.append(format(err, ".17g"))
            row_csv.append(format(o, ".17g") if o is not None else "")
        text_lines.append("  ".join(row_txt))
        csv_lines.append(",".join(row_csv))
    return "\n".join(text_lines) + "\n", "\n".join(csv_lines) + "\n"
