"""IRLS / Gauss-Newton driver with a fixed-iteration Jacobi-preconditioned CG inner solver.

A problem handed to :func:`gauss_newton_irls` exposes three methods:

``linearize(params, level) -> LinearizedSystem``
    Rasterize at the pyramid level, refresh IRLS weights, return the system
    and the true energy at ``params``.
``energy(params, level) -> EnergyReport``
    True energy only (used after the last step of a level).
``apply_update(params, step, level) -> params``
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .energy import EnergyReport

FINEST_LEVEL = 3
PRECOND_FLOOR = 1e-12


class NumericalError(FloatingPointError):
    """Non-finite values inside the solver."""


@dataclass(frozen=True)
class LevelSpec:
    level: int
    gn_iterations: int
    pcg_iterations: int


@dataclass(frozen=True)
class SolveSchedule:
    levels: tuple

    def __post_init__(self):
        specs = tuple(s if isinstance(s, LevelSpec) else LevelSpec(*s) for s in self.levels)
        object.__setattr__(self, "levels", specs)
        if not specs:
            raise ValueError("empty schedule")
        for s in specs:
            if s.gn_iterations < 1 or s.pcg_iterations < 1:
                raise ValueError("iteration counts must be >= 1")
            if not 0 <= s.level <= FINEST_LEVEL:
                raise ValueError(f"level {s.level} outside 0..{FINEST_LEVEL}")
        lv = [s.level for s in specs]
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("levels must ascend in resolution")

    @classmethod
    def parse(cls, spec) -> "SolveSchedule":
        if isinstance(spec, SolveSchedule):
            return spec
        return cls(tuple(tuple(int(v) for v in s) for s in spec))

    @property
    def n_levels(self) -> int:
        """Pyramid depth needed to serve every level."""
        return FINEST_LEVEL - min(s.level for s in self.levels) + 1


TRACKING = SolveSchedule(((2, 1, 4), (3, 7, 4)))
BUNDLING = SolveSchedule(((1, 25, 4), (2, 5, 4), (3, 1, 4)))


def pyramid_index(level: int) -> int:
    """Schedule level (3 = finest) to index into :func:`build_pyramid` output."""
    return FINEST_LEVEL - level


def level_scale(level: int) -> float:
    return float(2 ** (FINEST_LEVEL - level))


@dataclass
class PcgResult:
    x: np.ndarray
    residual_norms: list
    iterations: int


def pcg_solve(apply_A: Callable[[np.ndarray], np.ndarray], b: np.ndarray, precond: np.ndarray,
              iters: int, rtol: float | None = None) -> PcgResult:
    """Jacobi-preconditioned CG from x0 = 0 for exactly ``iters`` steps.

    ``rtol`` enables an early exit once ``||r|| <= rtol * ||b||``.
    """
    b = np.asarray(b, dtype=np.float64)
    minv = 1.0 / np.maximum(np.asarray(precond, dtype=np.float64), PRECOND_FLOOR)
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = float(np.linalg.norm(b))
    hist = [bnorm]
    if not np.isfinite(bnorm):
        raise NumericalError("non-finite right-hand side")
    if bnorm == 0.0:
        return PcgResult(x, hist, 0)
    z = minv * r
    p = z.copy()
    rz = float(r @ z)
    done = 0
    for _ in range(iters):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise NumericalError("non-finite operator product in PCG")
        if pAp <= 0.0:
            # null direction of a PSD operator: nothing left to reduce
            break
        a = rz / pAp
        x = x + a * p
        r = r - a * Ap
        done += 1
        rn = float(np.linalg.norm(r))
        hist.append(rn)
        if not np.isfinite(rn):
            raise NumericalError("non-finite residual in PCG")
        if rtol is not None and rn <= rtol * bnorm:
            break
        z = minv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PcgResult(x, hist, done)


def jtj_apply(J: np.ndarray, x: np.ndarray) -> np.ndarray:
    """J^T (J x) without forming J^T J."""
    return J.T @ (J @ x)


@dataclass
class NormalSystem:
    """Dense normal system of one Jacobian block."""
    J: np.ndarray
    F: np.ndarray

    @property
    def rhs(self) -> np.ndarray:
        return -(self.J.T @ self.F)

    @property
    def precond(self) -> np.ndarray:
        return np.maximum(np.einsum("ij,ij->j", self.J, self.J), PRECOND_FLOOR)

    def apply_JtJ(self, x: np.ndarray) -> np.ndarray:
        return jtj_apply(self.J, x)


@dataclass
class LinearizedSystem:
    apply_JtJ: Callable[[np.ndarray], np.ndarray]
    rhs: np.ndarray
    precond: np.ndarray
    report: EnergyReport


@dataclass
class TraceRow:
    iteration: int
    level: int
    E_total: float
    E_col: float
    E_lan: float
    E_reg: float
    n_visible: int


TRACE_FIELDS = ("iteration", "level", "E_total", "E_col", "E_lan", "E_reg", "n_visible")


def write_trace_csv(rows: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "level", "E_total", "E_col", "E_lan", "E_reg", "|V|"])
        for r in rows:
            w.writerow([r.iteration, r.level, repr(r.E_total), repr(r.E_col), repr(r.E_lan),
                        repr(r.E_reg), r.n_visible])


@dataclass
class SolveResult:
    params: object
    trace: list = field(default_factory=list)
    pcg_history: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)

    def final_report(self) -> TraceRow:
        return self.trace[-1]


def _row(it, level, rep: EnergyReport) -> TraceRow:
    return TraceRow(it, level, rep.E_total, rep.E_col, rep.E_lan, rep.E_reg, rep.n_visible)


def gauss_newton_irls(problem, params, schedule: SolveSchedule = TRACKING, *,
                      step_halving: int = 0, pcg_rtol: float | None = None) -> SolveResult:
    """Coarse-to-fine GN with one IRLS reweighting per step.

    The trace holds the true energy at the start of every level and after
    every step. ``step_halving > 0`` enables up to that many halvings of a
    step that raises the energy (off by default).
    """
    schedule = SolveSchedule.parse(schedule)
    result = SolveResult(params)
    it = 0
    for spec in schedule.levels:
        sys = problem.linearize(params, spec.level)
        result.trace.append(_row(it, spec.level, sys.report))
        for k in range(spec.gn_iterations):
            pcg = pcg_solve(sys.apply_JtJ, sys.rhs, sys.precond, spec.pcg_iterations, pcg_rtol)
            step = pcg.x
            if not np.all(np.isfinite(step)):
                raise NumericalError("non-finite GN update")
            result.pcg_history.append(pcg.residual_norms)
            new = problem.apply_update(params, step, spec.level)
            last = k == spec.gn_iterations - 1
            if step_halving:
                e_old = sys.report.E_total
                for _ in range(step_halving):
                    e_new = problem.energy(new, spec.level).E_total
                    if e_new <= e_old:
                        break
                    step = 0.5 * step
                    new = problem.apply_update(params, step, spec.level)
            result.step_norms.append(float(np.linalg.norm(step)))
            params = new
            it += 1
            if last:
                rep = problem.energy(params, spec.level)
            else:
                sys = problem.linearize(params, spec.level)
                rep = sys.report
            result.trace.append(_row(it, spec.level, rep))
    result.params = params
    return result
