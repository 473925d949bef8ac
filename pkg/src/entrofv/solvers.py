"""Steady states, backward-Euler steps and the adaptive transient driver."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import entropy as ent
from .entropy import PHI1, PHI2, EntropyTrace
from .linalg import NewtonConfig, NonConvergence, newton_solve, solve_linear
from .mesh import Mesh
from .schemes import (SCHARFETTER_GUMMEL, BScheme, DataError, DdData,
                      TransportData, assemble_dd_residual, assemble_fp_operator,
                      assemble_pme_residual, assemble_poisson,
                      poisson_dirichlet_rhs, signed_power, transport_data)


class SolverError(Exception):
    pass


@dataclass(frozen=True)
class StepperConfig:
    """Adaptive policy: double after success, halve on failure, clamp."""

    t_final: float
    dt0: float = 1e-3
    dt_min: float = 1e-8
    dt_max: float = 1e-2
    grow: float = 2.0
    shrink: float = 2.0
    newton: NewtonConfig = NewtonConfig()
    entropy_floor: float = 1e-14

    def __post_init__(self):
        if not (self.dt_min <= self.dt0 <= self.dt_max):
            raise ValueError("need dt_min <= dt0 <= dt_max")
        if self.grow <= 1 or self.shrink <= 1:
            raise ValueError("grow and shrink factors must exceed 1")
        if self.t_final <= 0:
            raise ValueError("final time must be positive")

    @staticmethod
    def fixed(dt: float, t_final: float, **kw) -> "StepperConfig":
        """Constant time step (still halved if a nonlinear step fails)."""
        return StepperConfig(t_final=t_final, dt0=dt, dt_max=dt,
                             dt_min=min(1e-8, dt), **kw)


@dataclass(frozen=True)
class DdState:
    n: np.ndarray
    p: np.ndarray
    v: np.ndarray


# ---------------------------------------------------------------------------
# linear convection-diffusion


def solve_fp_steady(mesh: Mesh, data: TransportData, scheme: BScheme,
                    beta: float = 0.05, force: bool = False) -> np.ndarray:
    """Unique steady state of the flux scheme; strictly positive."""
    m_op, b = assemble_fp_operator(mesh, data, scheme, beta=beta, force=force)
    f = solve_linear(m_op, b)
    balance = np.max(np.abs(m_op.matvec(f) - b))
    if balance > 1e-10 * (1.0 + np.max(np.abs(b))):
        raise SolverError(f"steady flux balance {balance:.3e} above tolerance")
    if np.any(f <= 0):
        raise SolverError("steady state is not strictly positive")
    return f


class FpStepper:
    """Backward-Euler steps with the operator factorized once per step size."""

    def __init__(self, mesh: Mesh, data: TransportData, scheme: BScheme,
                 beta: float = 0.05, force: bool = False):
        self.mesh = mesh
        self.operator, self.boundary = assemble_fp_operator(
            mesh, data, scheme, beta=beta, force=force)
        self._lu: dict[float, spla.SuperLU] = {}

    def step(self, f_prev: np.ndarray, dt: float) -> np.ndarray:
        lu = self._lu.get(dt)
        if lu is None:
            system = (sp.diags(self.mesh.cell_area / dt) + self.operator.csr).tocsc()
            lu = spla.splu(system)
            self._lu[dt] = lu
        return lu.solve(self.mesh.cell_area * f_prev / dt + self.boundary)


def step_fp(mesh: Mesh, data: TransportData, scheme: BScheme,
            f_prev: np.ndarray, dt: float, **kw) -> np.ndarray:
    """One implicit step of the linear model; monotone, hence sign-preserving."""
    if dt <= 0:
        raise ValueError("time step must be positive")
    return FpStepper(mesh, data, scheme, **kw).step(np.asarray(f_prev, dtype=float), dt)


# ---------------------------------------------------------------------------
# nonlinear diffusion


def solve_pme_steady(mesh: Mesh, f_dirichlet: np.ndarray, m: float,
                     initial: Optional[np.ndarray] = None) -> np.ndarray:
    """Steady state: harmonic in f**m with Dirichlet data, or the constant
    carrying the initial mass when the whole boundary is no-flux."""
    if m <= 1:
        raise DataError("exponent must exceed 1")
    if not np.any(mesh.dirichlet):
        if initial is None:
            raise SolverError("all-Neumann steady state needs the initial data")
        avg = float(np.sum(mesh.cell_area * initial) / mesh.cell_area.sum())
        return np.full(mesh.n_cells, avg)
    u_dir = np.where(np.isfinite(f_dirichlet), signed_power(f_dirichlet, m), np.nan)
    laplace_data = transport_data(mesh, np.ones(mesh.n_edges),
                                  np.zeros(mesh.n_edges), u_dir)
    # without advection every flux family assembles the same Laplacian
    m_op, b = assemble_fp_operator(mesh, laplace_data, SCHARFETTER_GUMMEL)
    u = solve_linear(m_op, b)
    if np.any(u <= 0):
        raise SolverError("steady state lost positivity")
    return u ** (1.0 / m)


def step_pme(mesh: Mesh, f_prev: np.ndarray, m: float, dt: float,
             f_dirichlet: np.ndarray,
             newton: NewtonConfig = NewtonConfig()) -> Union[np.ndarray, NonConvergence]:
    """One implicit step via Newton started from the previous state."""
    f_prev = np.asarray(f_prev, dtype=float)

    def residual(f):
        return assemble_pme_residual(mesh, f_prev, f, m, dt, f_dirichlet)[0]

    def jacobian(f):
        return assemble_pme_residual(mesh, f_prev, f, m, dt, f_dirichlet)[1]

    result = newton_solve(residual, jacobian, f_prev, newton)
    if isinstance(result, NonConvergence):
        return result
    f, iterations = result
    if np.any(f < -1e-9 * max(1.0, float(np.max(np.abs(f))))):
        return NonConvergence(iterations=iterations, residual_norm=0.0,
                              last_iterate=f, reason="negative density")
    return np.maximum(f, 0.0)


# ---------------------------------------------------------------------------
# drift-diffusion


def dd_equilibrium_offsets(mesh: Mesh, dd: DdData,
                           tol: float = 1e-10) -> Optional[tuple[float, float]]:
    """Offsets (alpha_N, alpha_P) when the boundary data is compatible with a
    current-free steady state, else None."""
    dmask = mesh.dirichlet
    if not np.any(dmask):
        return None
    a_n = np.log(dd.n_dirichlet[dmask]) - dd.v_dirichlet[dmask]
    a_p = np.log(dd.p_dirichlet[dmask]) + dd.v_dirichlet[dmask]
    if np.ptp(a_n) <= tol and np.ptp(a_p) <= tol:
        return float(a_n.mean()), float(a_p.mean())
    return None


def solve_dd_thermal(mesh: Mesh, dd: DdData, alpha_n: float, alpha_p: float,
                     newton: NewtonConfig = NewtonConfig(),
                     v0: Optional[np.ndarray] = None) -> DdState:
    """Current-free steady state from the nonlinear Poisson equation."""
    offsets = dd_equilibrium_offsets(mesh, dd)
    if offsets is None:
        raise SolverError("boundary data is incompatible with a current-free steady state")
    if abs(offsets[0] - alpha_n) > 1e-8 or abs(offsets[1] - alpha_p) > 1e-8:
        raise SolverError(f"boundary offsets {offsets} do not match "
                          f"({alpha_n}, {alpha_p})")
    a_mat = assemble_poisson(mesh, dd.debye)
    b_dir = poisson_dirichlet_rhs(mesh, dd.debye, dd.v_dirichlet)
    area = mesh.cell_area

    def residual(v):
        charge = np.exp(alpha_p - v) - np.exp(alpha_n + v) + dd.doping
        return a_mat.matvec(v) - b_dir - area * charge

    def jacobian(v):
        return a_mat.add_diagonal(area * (np.exp(alpha_p - v) + np.exp(alpha_n + v)))

    start = np.zeros(mesh.n_cells) if v0 is None else np.asarray(v0, dtype=float)
    result = newton_solve(residual, jacobian, start, newton)
    if isinstance(result, NonConvergence) and v0 is not None:
        result = newton_solve(residual, jacobian, np.zeros(mesh.n_cells), newton)
    if isinstance(result, NonConvergence):
        raise SolverError(f"thermal equilibrium solve failed: {result}")
    v, _ = result
    return DdState(n=np.exp(alpha_n + v), p=np.exp(alpha_p - v), v=v)


def _dd_newton(mesh: Mesh, dd: DdData, scheme: BScheme, start: DdState,
               newton: NewtonConfig, state_prev=None, dt=None):
    n = mesh.n_cells

    def unpack(x):
        return x[:n], x[n:2 * n], x[2 * n:]

    def residual(x):
        return assemble_dd_residual(mesh, dd, scheme, state_prev, unpack(x), dt)[0]

    def jacobian(x):
        return assemble_dd_residual(mesh, dd, scheme, state_prev, unpack(x), dt)[1]

    x0 = np.concatenate([start.n, start.p, start.v])
    result = newton_solve(residual, jacobian, x0, newton)
    if isinstance(result, NonConvergence):
        return result
    x, iterations = result
    state = DdState(*(np.array(part) for part in unpack(x)))
    if np.any(state.n <= 0) or np.any(state.p <= 0):
        return NonConvergence(iterations=iterations, residual_norm=0.0,
                              last_iterate=x, reason="non-positive density")
    return state


def _dd_initial_guess(mesh: Mesh, dd: DdData) -> DdState:
    """Harmonic interpolation of the density data, potential from the linear
    Poisson equation with the resulting charge."""
    ones = np.ones(mesh.n_edges)
    zeros = np.zeros(mesh.n_edges)
    fields = []
    for dirichlet in (dd.n_dirichlet, dd.p_dirichlet):
        data = transport_data(mesh, ones, zeros, dirichlet)
        m_op, b = assemble_fp_operator(mesh, data, SCHARFETTER_GUMMEL)
        fields.append(solve_linear(m_op, b))
    n0, p0 = fields
    v0 = solve_dd_poisson(mesh, dd, n0, p0)
    return DdState(n=n0, p=p0, v=v0)


def solve_dd_poisson(mesh: Mesh, dd: DdData, n_field: np.ndarray,
                     p_field: np.ndarray) -> np.ndarray:
    """Potential solving the linear Poisson equation for given densities."""
    a_mat = assemble_poisson(mesh, dd.debye)
    b = poisson_dirichlet_rhs(mesh, dd.debye, dd.v_dirichlet) \
        + mesh.cell_area * (p_field - n_field + dd.doping)
    return solve_linear(a_mat, b)


def solve_dd_steady(mesh: Mesh, dd: DdData, scheme: BScheme,
                    newton: NewtonConfig = NewtonConfig(),
                    initial: Optional[DdState] = None) -> DdState:
    """Coupled steady state; falls back to a homotopy that ramps the applied
    potential from its current-free part when plain Newton stalls."""
    offsets = dd_equilibrium_offsets(mesh, dd)
    if initial is not None:
        start = initial
    elif offsets is not None:
        start = solve_dd_thermal(mesh, dd, *offsets, newton=newton)
    else:
        start = _dd_initial_guess(mesh, dd)

    result = _dd_newton(mesh, dd, scheme, start, newton)
    if not isinstance(result, NonConvergence):
        return result

    # homotopy in the Dirichlet potential toward the full bias
    dmask = mesh.dirichlet
    base = np.full(mesh.n_edges, np.nan)
    base[dmask] = 0.5 * (np.log(dd.n_dirichlet[dmask]) - np.log(dd.p_dirichlet[dmask]))
    state = None
    for s in (0.0, 0.25, 0.5, 0.75, 1.0):
        v_dir = np.where(dmask, (1.0 - s) * base + s * dd.v_dirichlet, np.nan)
        dd_s = DdData(doping=dd.doping, debye=dd.debye, n_dirichlet=dd.n_dirichlet,
                      p_dirichlet=dd.p_dirichlet, v_dirichlet=v_dir)
        guess = state if state is not None else _dd_initial_guess(mesh, dd_s)
        step = _dd_newton(mesh, dd_s, scheme, guess, newton)
        if isinstance(step, NonConvergence):
            raise SolverError(f"steady drift-diffusion solve failed at "
                              f"bias fraction {s:g}: {step}")
        state = step
    return state


def step_dd(mesh: Mesh, dd: DdData, scheme: BScheme, state_prev: DdState,
            dt: float,
            newton: NewtonConfig = NewtonConfig()) -> Union[DdState, NonConvergence]:
    """One fully implicit step of the coupled system from the previous state."""
    return _dd_newton(mesh, dd, scheme, state_prev, newton,
                      state_prev=(state_prev.n, state_prev.p), dt=dt)


# ---------------------------------------------------------------------------
# transient problems and the adaptive driver


@dataclass(frozen=True)
class FpProblem:
    mesh: Mesh
    data: TransportData
    f0: np.ndarray
    beta: float = 0.05
    force_peclet: bool = False


@dataclass(frozen=True)
class PmeProblem:
    mesh: Mesh
    m: float
    f_dirichlet: np.ndarray
    f0: np.ndarray


@dataclass(frozen=True)
class DdProblem:
    mesh: Mesh
    dd: DdData
    n0: np.ndarray
    p0: np.ndarray


@dataclass
class TransientResult:
    trace: EntropyTrace
    steady: object
    final: object
    aborted: bool = False
    abort_reason: str = ""


def adaptive_time_loop(state, cfg: StepperConfig, try_step: Callable,
                       record: Callable, stop: Optional[Callable] = None):
    """Drive ``try_step(state, dt)`` to the final time.

    ``record(t, dt, state)`` is called after every accepted step and must
    return the diagnostics record; ``stop(record)`` may end the run early.
    Returns (state, t, abort_reason or None).
    """
    t = 0.0
    dt_prev: Optional[float] = None
    while t < cfg.t_final * (1.0 - 1e-13):
        dt = cfg.dt0 if dt_prev is None else min(cfg.grow * dt_prev, cfg.dt_max)
        dt = min(dt, cfg.t_final - t)
        while True:
            result = try_step(state, dt)
            if not isinstance(result, NonConvergence):
                break
            if dt <= cfg.dt_min * (1.0 + 1e-12):
                return state, t, f"time step would fall below {cfg.dt_min:g}: {result}"
            dt = max(dt / cfg.shrink, cfg.dt_min)
        state = result
        t += dt
        dt_prev = dt
        rec = record(t, dt, state)
        if stop is not None and stop(rec):
            break
    return state, t, None


def _run_generic(columns, state0, diag, cfg, try_step, steady, primary):
    trace = EntropyTrace(columns)
    first = {"t": 0.0, "dt": 0.0}
    first.update(diag(state0))
    trace.append(first)
    floor = cfg.entropy_floor * max(first[primary], 1e-300)

    def record(t, dt, state):
        rec = {"t": t, "dt": dt}
        rec.update(diag(state))
        trace.append(rec)
        return rec

    def stop(rec):
        return rec[primary] < floor

    final, _, abort = adaptive_time_loop(state0, cfg, try_step, record, stop)
    return TransientResult(trace=trace, steady=steady, final=final,
                           aborted=abort is not None, abort_reason=abort or "")


def run_transient(problem, scheme: BScheme, cfg: StepperConfig,
                  diagnostics: Optional[dict[str, Callable]] = None) -> TransientResult:
    """Integrate a problem to the final time, recording entropies relative to
    the steady state computed up front.  The run also stops once the primary
    entropy falls below ``cfg.entropy_floor`` times its initial value."""
    extras = diagnostics or {}

    if isinstance(problem, FpProblem):
        mesh, data = problem.mesh, problem.data
        steady = solve_fp_steady(mesh, data, scheme,
                                 beta=problem.beta, force=problem.force_peclet)
        stepper = FpStepper(mesh, data, scheme,
                            beta=problem.beta, force=problem.force_peclet)

        def diag(f):
            rec = {
                "H_phi1": ent.relative_phi_entropy(mesh, f, steady, PHI1),
                "H_phi2": ent.relative_phi_entropy(mesh, f, steady, PHI2),
                "D_phi2": ent.phi_dissipation(mesh, data, scheme, f, steady, PHI2),
                "L1": ent.lp_distance(mesh, f, steady, 1),
                "L2": ent.lp_distance(mesh, f, steady, 2),
            }
            rec.update({k: fn(f) for k, fn in extras.items()})
            return rec

        columns = ("t", "dt", "H_phi1", "H_phi2", "D_phi2", "L1", "L2", *extras)
        return _run_generic(columns, np.asarray(problem.f0, dtype=float), diag, cfg,
                            lambda f, dt: stepper.step(f, dt), steady, "H_phi2")

    if isinstance(problem, PmeProblem):
        mesh, m = problem.mesh, problem.m
        steady = solve_pme_steady(mesh, problem.f_dirichlet, m, initial=problem.f0)

        def diag(f):
            rec = {
                "N_m": ent.entrophy(mesh, f, steady, m),
                "D_m": ent.entrophy_dissipation(mesh, f, steady, m),
                "Lmp1": ent.lp_distance(mesh, f, steady, m + 1.0),
            }
            rec.update({k: fn(f) for k, fn in extras.items()})
            return rec

        columns = ("t", "dt", "N_m", "D_m", "Lmp1", *extras)
        return _run_generic(columns, np.asarray(problem.f0, dtype=float), diag, cfg,
                            lambda f, dt: step_pme(mesh, f, m, dt,
                                                   problem.f_dirichlet, cfg.newton),
                            steady, "N_m")

    if isinstance(problem, DdProblem):
        mesh, dd = problem.mesh, problem.dd
        steady = solve_dd_steady(mesh, dd, scheme, newton=cfg.newton)
        offsets = dd_equilibrium_offsets(mesh, dd)
        thermal = solve_dd_thermal(mesh, dd, *offsets, newton=cfg.newton) \
            if offsets is not None else None
        v0 = solve_dd_poisson(mesh, dd, problem.n0, problem.p0)
        state0 = DdState(n=np.asarray(problem.n0, dtype=float),
                         p=np.asarray(problem.p0, dtype=float), v=v0)

        def diag(state):
            triple = (state.n, state.p, state.v)
            rec = {
                "E_inf": ent.dd_entropy(mesh, triple, (steady.n, steady.p, steady.v),
                                        dd.debye),
                "E_eq": ent.dd_entropy(mesh, triple, (thermal.n, thermal.p, thermal.v),
                                       dd.debye) if thermal is not None else float("nan"),
            }
            rec.update({k: fn(state) for k, fn in extras.items()})
            return rec

        columns = ("t", "dt", "E_inf", "E_eq", *extras)
        return _run_generic(columns, state0, diag, cfg,
                            lambda s, dt: step_dd(mesh, dd, scheme, s, dt, cfg.newton),
                            steady, "E_inf")

    raise TypeError(f"unknown problem type {type(problem).__name__}")
