"""Price search with matching time via augmented Walrasian functions.

With matching time, excess supply loses the monotone structure that the
fixed-point route exploits, so balancing prices are characterized as
maxinf points of the bilinear function W(rho, phi) = -sum phi_s ES_s(rho)
over the price space times the unit simplex. A proximal term in the
simplex variable makes the inner minimization a closed-form projection,
and the outer maximization runs a derivative-free quadratic-fit search
over a growing box; schedules (r, M) grow and (eps) shrinks geometrically
across outer iterations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .cda import CdaProblem, DiagonalizedSolution, solve_diagonalized
from .matching import MatchingModel

__all__ = [
    "WalrasSchedule",
    "WalrasTrace",
    "WalrasResult",
    "MarketBalance",
    "JointEquilibriumEvaluator",
    "project_simplex",
    "walrasian_w",
    "augmented_w",
    "es_squared",
    "maximize_over_box",
    "algorithm1",
    "BoxMaxResult",
]


def project_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the unit simplex (sort and threshold).

    The output z satisfies z >= 0, sum z = 1, and y - z is constant on
    the support, which is the exact KKT characterization.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size == 0 or not np.all(np.isfinite(y)):
        raise ValueError("expected a finite 1-D vector")
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, y.size + 1)
    cond = u - css / idx > 0
    k = int(np.nonzero(cond)[0][-1]) + 1
    tau = css[k - 1] / k
    return np.maximum(y - tau, 0.0)


def walrasian_w(phi: np.ndarray, es: np.ndarray) -> float:
    """W(rho, phi) = -sum_s phi_s * ES_s(rho); never positive.

    ``es`` holds the squared per-market imbalances already evaluated at
    the price vector of interest, so this is just the bilinear form.
    """
    return float(-(np.asarray(phi, dtype=float) @ np.asarray(es, dtype=float)))


def augmented_w(phi: np.ndarray, es: np.ndarray, r: float
                ) -> tuple[float, np.ndarray]:
    """Proximal value min_z { W(rho,z) + |z - phi|^2 / (2r) } on the simplex.

    Completing the square shows the argmin is the simplex projection of
    phi + r * es; returns (value, argmin).
    """
    if r <= 0:
        raise ValueError("proximal parameter must be positive")
    phi = np.asarray(phi, dtype=float)
    es = np.asarray(es, dtype=float)
    z = project_simplex(phi + r * es)
    value = walrasian_w(z, es) + float(np.sum((z - phi) ** 2)) / (2.0 * r)
    return value, z


@dataclass
class MarketBalance:
    """Joint-equilibrium summary used by the Walrasian search."""

    f_d: np.ndarray
    f_r: np.ndarray
    es: np.ndarray  # squared imbalance per market
    converged: bool
    concentrated: bool


def es_squared(prices: np.ndarray, evaluator: "Callable[[np.ndarray], MarketBalance]"
               ) -> np.ndarray:
    """Squared demand-supply imbalance per market at ``prices``."""
    return evaluator(np.asarray(prices, dtype=float)).es


class JointEquilibriumEvaluator:
    """Maps prices to the diagonalized driver/rider equilibrium.

    Phase II evaluations reuse a bounded-iteration diagonalized solve
    warm-started from the previous evaluation; ``full=True`` forces a
    fresh full-tolerance re-solve (used for the reported gap). Results
    are cached by price vector. Equilibria that pile more than 99% of
    the drivers onto one market are flagged ``concentrated`` so the
    search can reject these trivial solutions.
    """

    def __init__(self, problem: CdaProblem, model: MatchingModel,
                 diag_tol: float = 1e-7, diag_max_outer: int = 60,
                 cda_tol: float = 1e-8, full_diag_tol: float = 1e-9,
                 full_diag_max_outer: int = 400,
                 concentration_limit: float = 0.99):
        self.problem = problem
        self.model = model
        self.diag_tol = diag_tol
        self.diag_max_outer = diag_max_outer
        self.cda_tol = cda_tol
        self.full_diag_tol = full_diag_tol
        self.full_diag_max_outer = full_diag_max_outer
        self.concentration_limit = concentration_limit
        self._warm: DiagonalizedSolution | None = None
        self._cache: dict[bytes, MarketBalance] = {}
        self.evaluations = 0

    def _balance(self, diag: DiagonalizedSolution) -> MarketBalance:
        es = (diag.f_d - diag.f_r) ** 2
        total = float(diag.f_d.sum())
        concentrated = bool(total > 0 and
                            diag.f_d.max() / total > self.concentration_limit)
        return MarketBalance(diag.f_d, diag.f_r, es, diag.converged, concentrated)

    def __call__(self, prices: np.ndarray, full: bool = False) -> MarketBalance:
        prices = np.asarray(prices, dtype=float)
        key = prices.tobytes() + (b"F" if full else b"")
        if key in self._cache:
            return self._cache[key]
        import dataclasses

        problem = dataclasses.replace(self.problem, prices=prices)
        if full:
            diag = solve_diagonalized(
                problem, self.model, tol=self.full_diag_tol,
                max_outer=self.full_diag_max_outer, cda_tol=self.cda_tol)
        else:
            diag = solve_diagonalized(
                problem, self.model, tol=self.diag_tol,
                max_outer=self.diag_max_outer, cda_tol=self.cda_tol,
                init=self._warm)
        self._warm = diag
        self.evaluations += 1
        bal = self._balance(diag)
        self._cache[key] = bal
        return bal


@dataclass(frozen=True)
class WalrasSchedule:
    """Geometric schedules for the approximating maxinf loop.

    eps shrinks by c1 (0 < c1 < 1); the box half-width M and proximal
    parameter r grow by c2 (> 1) each outer iteration.
    """

    eps0: float = 1.0
    M0: float = 10.0
    r0: float = 1.0
    c1: float = 0.5
    c2: float = 2.0
    gap_tol: float = 1e-3
    max_outer: int = 30
    phase2_budget_per_dim: int = 50

    def __post_init__(self) -> None:
        if not 0 < self.c1 < 1:
            raise ValueError("c1 must lie in (0, 1)")
        if self.c2 <= 1:
            raise ValueError("c2 must exceed 1")
        if min(self.eps0, self.M0, self.r0, self.gap_tol) <= 0:
            raise ValueError("schedule scalars must be positive")


@dataclass
class WalrasTrace:
    """Per-iteration records (nu, rho, phi, gap, es, r, M, eps)."""

    destinations: tuple[int, ...]
    rows: list[dict] = field(default_factory=list)

    def record(self, nu: int, rho: np.ndarray, phi: np.ndarray, gap: float,
               es: np.ndarray, r: float, m: float, eps: float) -> None:
        self.rows.append({
            "nu": nu, "gap": float(gap), "r": float(r), "M": float(m),
            "eps": float(eps), "rho": np.array(rho, dtype=float),
            "phi": np.array(phi, dtype=float), "es": np.array(es, dtype=float)})

    def to_csv(self, path: str) -> None:
        names = ["nu", "gap", "r", "M", "eps"]
        names += [f"rho_{s}" for s in self.destinations]
        names += [f"es_{s}" for s in self.destinations]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for row in self.rows:
                rec = [row["nu"], row["gap"], row["r"], row["M"], row["eps"]]
                rec += list(row["rho"]) + list(row["es"])
                writer.writerow(rec)


@dataclass
class WalrasResult:
    rho_star: np.ndarray
    gap: float
    converged: bool
    iterations: int
    trace: WalrasTrace
    balance: MarketBalance

    def to_json(self) -> str:
        return json.dumps({
            "rho_star": [float(x) for x in self.rho_star],
            "gap": self.gap,
            "converged": self.converged,
            "iterations": self.iterations,
        })


@dataclass
class BoxMaxResult:
    x: np.ndarray
    value: float
    evaluations: int


def maximize_over_box(objective: Callable[[np.ndarray], float],
                      center: np.ndarray, half_width: float | np.ndarray,
                      eps: float, budget: int,
                      shrink: float = 0.5, grow: float = 2.0) -> BoxMaxResult:
    """Derivative-free maximization over [center - M, center + M].

    Runs a sequential per-axis quadratic interpolation on a stencil
    center +/- h per axis, maximizes the separable model inside the
    trust radius intersected with the box, and adapts the radius on
    success or failure. Stops when the model predicts less than ``eps``
    improvement, the radius underflows, or the budget is exhausted.
    Fully deterministic; among ties the earliest evaluated point wins.
    """
    center = np.asarray(center, dtype=float).copy()
    dim = center.size
    if budget < dim + 2:
        raise ValueError("budget must cover at least dim + 2 evaluations")
    half = np.broadcast_to(np.asarray(half_width, dtype=float), center.shape).copy()
    lo, hi = center - half, center + half

    cache: dict[bytes, float] = {}
    evals = 0

    def feval(x: np.ndarray) -> float | None:
        nonlocal evals
        key = x.tobytes()
        if key in cache:
            return cache[key]
        if evals >= budget:
            return None
        cache[key] = objective(x)
        evals += 1
        return cache[key]

    best_x = center.copy()
    best_f = feval(best_x)
    assert best_f is not None
    h = half / 2.0
    x_c = center.copy()
    f_c = best_f

    while evals < budget:
        # stencil and per-axis three-point quadratic fit
        deltas_plus = np.minimum(h, hi - x_c)
        deltas_minus = -np.minimum(h, x_c - lo)
        prop = np.zeros(dim)
        predicted = 0.0
        out_of_budget = False
        for j in range(dim):
            dp, dm = float(deltas_plus[j]), float(deltas_minus[j])
            f_p = f_m = None
            if dp > 0:
                xp = x_c.copy()
                xp[j] += dp
                f_p = feval(xp)
                if f_p is None:
                    out_of_budget = True
                    break
                if f_p > best_f:
                    best_f, best_x = f_p, xp
            if dm < 0:
                xm = x_c.copy()
                xm[j] += dm
                f_m = feval(xm)
                if f_m is None:
                    out_of_budget = True
                    break
                if f_m > best_f:
                    best_f, best_x = f_m, xm
            # model m(d) = a d^2 + b d (+ f_c)
            if f_p is not None and f_m is not None:
                denom = dp * dm * (dp - dm)
                a = ((f_p - f_c) * dm - (f_m - f_c) * dp) / denom
                b = ((f_m - f_c) * dp * dp - (f_p - f_c) * dm * dm) / denom
            elif f_p is not None:
                a, b = 0.0, (f_p - f_c) / dp
            elif f_m is not None:
                a, b = 0.0, (f_m - f_c) / dm
            else:
                a = b = 0.0
            lo_d = max(-float(h[j]), float(lo[j] - x_c[j]))
            hi_d = min(float(h[j]), float(hi[j] - x_c[j]))
            cands = [lo_d, hi_d]
            if a < 0:
                cands.append(min(hi_d, max(lo_d, -b / (2.0 * a))))
            vals = [a * d * d + b * d for d in cands]
            k = int(np.argmax(vals))
            if vals[k] > 0:
                prop[j] = cands[k]
                predicted += vals[k]
        if out_of_budget:
            break
        if predicted <= eps:
            break
        x_new = np.clip(x_c + prop, lo, hi)
        f_new = feval(x_new)
        if f_new is None:
            break
        if f_new > f_c:
            if f_new > best_f:
                best_f, best_x = f_new, x_new
            gain = f_new - f_c
            x_c, f_c = x_new, f_new
            if gain >= 0.5 * predicted:
                h = np.minimum(h * grow, half)
        else:
            h = h * shrink
            if float(h.max()) < 1e-9 * max(1.0, float(half.max())):
                break
    return BoxMaxResult(best_x, float(best_f), evals)


def algorithm1(evaluator: JointEquilibriumEvaluator | Callable[..., MarketBalance],
               schedule: WalrasSchedule, rho0: np.ndarray,
               destinations: Sequence[int] | None = None) -> WalrasResult:
    """Approximating maxinf-point loop for the balancing prices.

    Each outer iteration runs Phase I (the proximal simplex argmin, in
    closed form) and Phase II (derivative-free maximization of the
    augmented function over a box around the previous iterate), then
    re-evaluates the per-market squared imbalances and the gap
    max_s ES_s. The schedule updates eps, M, r geometrically. On gap
    convergence the returned prices balance every market to within
    sqrt(gap_tol); budget exhaustion returns the best iterate flagged.
    """
    rho = np.asarray(rho0, dtype=float).copy()
    s_dim = rho.size
    if destinations is None:
        prob = getattr(evaluator, "problem", None)
        destinations = tuple(prob.destinations) if prob is not None \
            else tuple(range(s_dim))
    trace = WalrasTrace(tuple(destinations))
    eps, big_m, r = schedule.eps0, schedule.M0, schedule.r0
    phi = np.full(s_dim, 1.0 / s_dim)

    bal = evaluator(rho, full=True)
    es = bal.es
    gap = float(es.max())
    trace.record(0, rho, phi, gap, es, r, big_m, eps)
    nu = 0
    while nu < schedule.max_outer and (gap >= schedule.gap_tol or bal.concentrated):
        _, phi = augmented_w(phi, es, r)

        def objective(p: np.ndarray) -> float:
            b = evaluator(p)
            if b.concentrated:
                return -1e30
            return augmented_w(phi, b.es, r)[0]

        budget = schedule.phase2_budget_per_dim * s_dim
        res = maximize_over_box(objective, rho, big_m, eps, budget)
        rho = res.x
        bal = evaluator(rho, full=True)
        es = bal.es
        gap = float(es.max())
        nu += 1
        trace.record(nu, rho, phi, gap, es, r, big_m, eps)
        eps *= schedule.c1
        big_m *= schedule.c2
        r *= schedule.c2
    converged = gap < schedule.gap_tol and not bal.concentrated
    return WalrasResult(rho_star=rho, gap=gap, converged=converged,
                        iterations=nu, trace=trace, balance=bal)
