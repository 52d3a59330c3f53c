"""Volume-constrained compliance minimization with millability filtering.

The inner loop advects the shape along the filtered negative shape gradient
of an augmented Lagrangian; the outer loop updates the volume-constraint
multiplier and penalty.  The strict update only removes accessible material
(millability is preserved every iteration); the relaxed update additionally
grows inaccessible regions shut at a rate tied to the fastest removal.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .fem import ElasticState, LoadCase, Material, discretize, shape_gradient_compliance, solve
from .heat import TemperatureField, solve_heat
from .levelset import LevelSet, SurfaceSamples
from .milling import (
    DirectionSet,
    FilterField,
    ToolModel,
    filter_3axis,
    filter_5axis_heat_search,
    filter_5axis_hemisphere,
    filter_5axis_normal_search,
)

MILLING_MODES = ("off", "3axis", "hemisphere", "normal", "heat")


@dataclass
class MillingSpec:
    """Which accessibility search the optimizer runs each iteration."""

    mode: str = "off"
    directions: DirectionSet | None = None
    max_iters: int = 8
    heat_step: float | None = None

    def __post_init__(self):
        if self.mode not in MILLING_MODES:
            raise ValueError(f"milling mode must be one of {MILLING_MODES}")
        if self.mode == "3axis" and self.directions is None:
            raise ValueError("3-axis milling requires a direction set")


@dataclass
class Problem:
    domain: LevelSet
    material: Material
    load_cases: list[LoadCase]
    volume_fraction: float
    preserved: LevelSet | None = None
    tool: ToolModel | None = None
    milling: MillingSpec = field(default_factory=MillingSpec)
    symmetry_planes: list[tuple[int, float]] = field(default_factory=list)
    algorithm: str = "strict"
    alpha: float = 0.25
    initial: LevelSet | None = None  # defaults to the full design domain
    rho_min: float = 1e-3
    penalty0: float = 10.0
    max_iters: int = 200
    outer_every: int = 10
    conv_tol: float = 0.01
    conv_window: int = 5
    max_halvings: int = 8

    def __post_init__(self):
        if not 0.0 < self.volume_fraction < 1.0:
            raise ValueError("volume fraction target must lie in (0, 1)")
        if self.algorithm not in ("strict", "relaxed"):
            raise ValueError("algorithm must be 'strict' or 'relaxed'")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("relaxed growth rate alpha must lie in (0, 1]")
        if self.milling.mode != "off" and self.tool is None:
            raise ValueError("milling-constrained runs need a tool model")
        if self.preserved is not None:
            gap = self.preserved.values - self.domain.values
            if gap.min() < -self.domain.h:
                raise ValueError("preserved regions must lie inside the design domain")


@dataclass
class AugLagState:
    lam: float = 0.0
    mu: float = 10.0
    c0: float | None = None
    last_outer_g: float | None = None

    def lagrangian(self, ctilde: float, g: float) -> float:
        shifted = max(0.0, self.lam / self.mu + g)
        return ctilde + 0.5 * self.mu * shifted ** 2 - self.lam ** 2 / (2.0 * self.mu)

    def volume_gradient_coeff(self, g: float) -> float:
        return max(0.0, self.lam + self.mu * g)


@dataclass
class Evaluation:
    """Everything the loop needs to know about one shape."""

    omega: LevelSet
    fem: ElasticState
    samples: SurfaceSamples
    compliance: float
    volume: float
    g: float
    ctilde: float
    gradient: np.ndarray  # negative compliance shape gradient per sample

    def lagrangian(self, state: AugLagState) -> float:
        return state.lagrangian(self.ctilde, self.g)

    def dL(self, state: AugLagState, domain_volume: float) -> np.ndarray:
        return -self.gradient / _c0(state) + self.volume_gradient(state, domain_volume)

    def volume_gradient(self, state: AugLagState, domain_volume: float) -> float:
        return state.volume_gradient_coeff(self.g) / domain_volume


def _c0(state: AugLagState) -> float:
    if state.c0 is None:
        raise ValueError("iteration-0 compliance not set; evaluate the start shape first")
    return state.c0


@dataclass
class SpeedField:
    """Per-sample advection speed and its normal extension onto the band."""

    sample_values: np.ndarray
    band_values: np.ndarray

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.sample_values))) if self.sample_values.size else 0.0


@dataclass
class StepResult:
    omega: LevelSet
    evaluation: Evaluation
    eps: float
    halvings: int
    stalled: bool
    max_speed: float
    frac_eta_zero: float
    eta: FilterField | None


@dataclass
class IterationRecord:
    iteration: int
    L: float
    compliance: float
    volume_fraction: float
    lam: float
    mu: float
    eps: float
    max_speed: float
    frac_eta_zero: float

    CSV_HEADER = ("iter", "L", "compliance", "volume_fraction", "lambda", "mu",
                  "eps", "max_speed", "frac_eta_zero")

    def csv_row(self):
        return (self.iteration, f"{self.L:.9g}", f"{self.compliance:.9g}",
                f"{self.volume_fraction:.9g}", f"{self.lam:.9g}", f"{self.mu:.9g}",
                f"{self.eps:.9g}", f"{self.max_speed:.9g}", f"{self.frac_eta_zero:.6f}")


@dataclass
class RunResult:
    omega: LevelSet
    history: list[IterationRecord]
    converged: bool
    feasible: bool
    state: AugLagState
    final_compliance: float
    final_volume_fraction: float
    wall_time: float
    final_evaluation: Evaluation | None = None


# ------------------------------------------------------------------
# evaluation and gradients
# ------------------------------------------------------------------

def evaluate(problem: Problem, omega: LevelSet, state: AugLagState) -> Evaluation:
    """FEM solve + boundary sampling + constraint bookkeeping for one shape."""
    fem_state = discretize(omega, problem.rho_min)
    solve(fem_state, problem.material, problem.load_cases)
    samples = omega.sample_boundary()
    gradient = shape_gradient_compliance(fem_state, samples)
    compliance = fem_state.mean_compliance
    if state.c0 is None:
        state.c0 = compliance
    vol = omega.volume()
    g = vol / problem.domain.volume() - problem.volume_fraction
    return Evaluation(
        omega=omega, fem=fem_state, samples=samples,
        compliance=compliance, volume=vol, g=g,
        ctilde=compliance / state.c0, gradient=gradient,
    )


def lagrangian_gradient(problem: Problem, omega: LevelSet,
                        state: AugLagState) -> tuple[float, np.ndarray, Evaluation]:
    """Augmented Lagrangian value and its per-sample shape gradient."""
    ev = evaluate(problem, omega, state)
    return ev.lagrangian(state), ev.dL(state, problem.domain.volume()), ev


# ------------------------------------------------------------------
# filter application
# ------------------------------------------------------------------

def compute_filter(problem: Problem, omega: LevelSet, samples: SurfaceSamples,
                   temperature: TemperatureField | None = None) -> FilterField | None:
    spec = problem.milling
    if spec.mode == "off":
        return None
    tool = problem.tool
    if spec.mode == "3axis":
        return filter_3axis(omega, samples, spec.directions, tool)
    if spec.mode == "hemisphere":
        return filter_5axis_hemisphere(omega, samples, tool)
    if spec.mode == "normal":
        return filter_5axis_normal_search(omega, samples, tool, spec.max_iters)
    if temperature is None:
        raise ValueError("heat-search filtering needs a solved temperature field")
    return filter_5axis_heat_search(omega, samples, tool, temperature,
                                    spec.max_iters, spec.heat_step)


def apply_growth_gate(eta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Strict-update gate: the filter vanishes wherever the speed would grow."""
    gated = eta.copy()
    gated[v > 0.0] = 0.0
    return gated


def relaxed_speeds(eta: np.ndarray, v: np.ndarray, alpha: float) -> np.ndarray:
    """Relaxed update: inaccessible samples grow at alpha * max(v)."""
    v_max = float(v.max()) if v.size else 0.0
    out = np.where(eta == 0.0, alpha * v_max, eta * v)
    return out


def build_speed(problem: Problem, omega: LevelSet, ev: Evaluation,
                state: AugLagState, eta: FilterField | None) -> tuple[SpeedField, float]:
    """Assemble the advection speed for one step.

    Returns the speed field and the fraction of samples whose filter value
    is zero (0.0 when filtering is off).
    """
    v = -ev.dL(state, problem.domain.volume())
    frac_zero = 0.0
    if eta is None:
        speed = v
    else:
        frac_zero = float((eta.eta == 0.0).mean()) if len(eta) else 0.0
        if problem.algorithm == "strict":
            speed = apply_growth_gate(eta.eta, v) * v
        else:
            speed = relaxed_speeds(eta.eta, v, problem.alpha)
    if problem.preserved is not None and len(ev.samples):
        on_patch = problem.preserved.sample(ev.samples.positions) <= 0.5 * omega.h
        speed = np.where(on_patch, 0.0, speed)
    band = omega.extend_normal(ev.samples, speed)
    return SpeedField(speed, band), frac_zero


# ------------------------------------------------------------------
# shape update
# ------------------------------------------------------------------

def transform_shape(problem: Problem, omega: LevelSet, speed: SpeedField,
                    eps: float) -> LevelSet:
    """Advect, clip to the design domain, re-add preserved regions, symmetrize."""
    out = omega.advect(speed.band_values, eps)
    clipped = np.maximum(out.values, problem.domain.values)
    if not np.array_equal(clipped, out.values):
        out = LevelSet(out.grid, clipped, out.band_width).redistance()
    if problem.preserved is not None:
        out = out.union(problem.preserved)
    for axis, coord in problem.symmetry_planes:
        out = out.mirror(axis, coord)
    return out


def line_search(problem: Problem, omega: LevelSet, speed: SpeedField,
                state: AugLagState, base_L: float):
    """Backtrack from the one-voxel CFL time until the Lagrangian drops.

    Returns (eps, trial evaluation or None, halvings).  A zero speed returns
    the CFL bound with no trial; exhausting the halvings returns None.
    """
    vmax = speed.max_abs
    if vmax == 0.0:
        return 0.0, None, 0
    eps0 = 0.5 * omega.h / vmax
    eps = eps0
    for halving in range(problem.max_halvings + 1):
        trial_omega = transform_shape(problem, omega, speed, eps)
        trial = evaluate(problem, trial_omega, state)
        if trial.lagrangian(state) < base_L:
            return eps, trial, halving
        eps *= 0.5
    return 0.0, None, problem.max_halvings


def _step(problem: Problem, omega: LevelSet, state: AugLagState,
          base: Evaluation | None = None,
          temperature: TemperatureField | None = None) -> StepResult:
    if base is None:
        base = evaluate(problem, omega, state)
    eta = compute_filter(problem, omega, base.samples, temperature)
    speed, frac_zero = build_speed(problem, omega, base, state, eta)
    base_L = base.lagrangian(state)
    eps, trial, halvings = line_search(problem, omega, speed, state, base_L)
    if trial is None:
        return StepResult(omega, base, 0.0, halvings, True,
                          speed.max_abs, frac_zero, eta)
    return StepResult(trial.omega, trial, eps, halvings, False,
                      speed.max_abs, frac_zero, eta)


def strict_step(problem: Problem, omega: LevelSet, state: AugLagState,
                base: Evaluation | None = None,
                temperature: TemperatureField | None = None) -> StepResult:
    """One shrink-only update: speed = eta * v with growth gated to zero."""
    if problem.algorithm != "strict":
        raise ValueError("problem is not configured for the strict algorithm")
    return _step(problem, omega, state, base, temperature)


def relaxed_step(problem: Problem, omega: LevelSet, state: AugLagState,
                 base: Evaluation | None = None,
                 temperature: TemperatureField | None = None) -> StepResult:
    """One update that grows inaccessible regions at alpha * max(v)."""
    if problem.algorithm != "relaxed":
        raise ValueError("problem is not configured for the relaxed algorithm")
    return _step(problem, omega, state, base, temperature)


def outer_update(state: AugLagState, g: float,
                 allow_penalty_growth: bool = True) -> AugLagState:
    """Multiplier ascent; the penalty doubles while the violation stalls.

    Stall-recovery updates between the regular cadence pass
    allow_penalty_growth=False so the doubling test stays tied to the
    every-N-iterations schedule.
    """
    state.lam = max(0.0, state.lam + state.mu * g)
    if allow_penalty_growth:
        if state.last_outer_g is not None and abs(g) > 0.5 * abs(state.last_outer_g):
            state.mu = min(2.0 * state.mu, 1e6)
        state.last_outer_g = g
    return state


# ------------------------------------------------------------------
# main loop
# ------------------------------------------------------------------

def run(problem: Problem, log_path=None, checkpoint_every: int | None = None,
        checkpoint_dir=None, verbose: bool = False, callback=None) -> RunResult:
    """Optimize until the Lagrangian and the volume violation both settle.

    Convergence requires |dL|/L below `conv_tol` over `conv_window`
    consecutive iterations together with |g| < conv_tol.  Milling-
    constrained runs finish with a morphological closing at the bit radius.
    `callback(iteration, omega, evaluation, step)` runs after every
    iteration (diagnostics, millability audits).
    """
    t_start = time.perf_counter()
    h = problem.domain.h
    omega = (problem.initial if problem.initial is not None else problem.domain).copy()
    if problem.tool is not None:
        omega = omega.ensure_band(problem.tool.band_requirement(h))
    if problem.preserved is not None:
        omega = omega.union(problem.preserved)
    for axis, coord in problem.symmetry_planes:
        omega = omega.mirror(axis, coord)

    state = AugLagState(lam=0.0, mu=problem.penalty0)
    base = evaluate(problem, omega, state)
    history: list[IterationRecord] = []
    temperature = None
    log_file = open(log_path, "w", newline="") if log_path else None
    writer = None
    if log_file:
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(IterationRecord.CSV_HEADER)

    converged = False
    stall_streak = 0
    recent_L: list[float] = []
    try:
        for it in range(1, problem.max_iters + 1):
            if problem.milling.mode == "heat":
                omega_plus = omega.offset(problem.tool.bit_radius)
                temperature = solve_heat(omega_plus, initial=temperature)
            step = _step(problem, omega, state, base, temperature)
            omega, base = step.omega, step.evaluation
            L = base.lagrangian(state)
            rec = IterationRecord(
                iteration=it, L=L, compliance=base.compliance,
                volume_fraction=base.volume / problem.domain.volume(),
                lam=state.lam, mu=state.mu, eps=step.eps,
                max_speed=step.max_speed, frac_eta_zero=step.frac_eta_zero,
            )
            history.append(rec)
            if writer:
                writer.writerow(rec.csv_row())
                log_file.flush()
            if verbose:
                print(f"[{it:4d}] L={L:.5f} C={base.compliance:.4g} "
                      f"vf={rec.volume_fraction:.4f} lam={state.lam:.3g} "
                      f"mu={state.mu:.3g} eps={step.eps:.3g} "
                      f"eta0={step.frac_eta_zero:.3f}{' STALL' if step.stalled else ''}")
            if checkpoint_every and checkpoint_dir and it % checkpoint_every == 0:
                from .io import write_grid_file
                write_grid_file(f"{checkpoint_dir}/checkpoint_{it:04d}.lsg", omega)
            if callback is not None:
                callback(it, omega, base, step)

            feasible = abs(base.g) < problem.conv_tol
            if step.stalled:
                stall_streak += 1
                if feasible or stall_streak >= 5:
                    converged = feasible
                    break
                outer_update(state, base.g, allow_penalty_growth=False)
                recent_L.clear()
                continue
            stall_streak = 0
            recent_L.append(L)
            if len(recent_L) > problem.conv_window + 1:
                recent_L.pop(0)
            if len(recent_L) == problem.conv_window + 1 and feasible:
                rel = [
                    abs(recent_L[i + 1] - recent_L[i]) / max(abs(recent_L[i]), 1e-12)
                    for i in range(problem.conv_window)
                ]
                if max(rel) < problem.conv_tol:
                    converged = True
                    break
            if it % problem.outer_every == 0:
                outer_update(state, base.g)
                recent_L.clear()
    finally:
        if log_file:
            log_file.close()

    final_vf = base.volume / problem.domain.volume()
    feasible = abs(base.g) < problem.conv_tol
    if problem.tool is not None:
        omega = omega.close(problem.tool.bit_radius)
    return RunResult(
        omega=omega, history=history, converged=converged, feasible=feasible,
        state=state, final_compliance=base.compliance,
        final_volume_fraction=final_vf,
        wall_time=time.perf_counter() - t_start,
        final_evaluation=base,
    )
