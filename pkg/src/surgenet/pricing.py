"""Upper-level pricing when matching time is ignored.

The platform's imbalance-minimizing problem reduces to finding the
unique price vector at which driver arrivals equal linear rider demand
at every destination. Three routes are provided: the damped fixed-point
map rho <- rho - ES/b, cyclic per-coordinate bisection (a slow but
independent cross-check), and a single-level dual decomposition whose
multipliers are the prices. A revenue-maximizing alternative objective
is solved by derivative-free pattern search.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cda import CdaProblem, EquilibriumSolution, solve_cda

__all__ = [
    "DemandModel",
    "PriceVector",
    "ImbalanceReport",
    "PriceSolve",
    "SingleLevelSolution",
    "ProfitSolve",
    "price_bounds",
    "excess_supply",
    "fixed_point_prices",
    "bisection_prices",
    "solve_single_level",
    "profit",
    "maximize_profit",
    "aggregate_clearing_price",
    "write_price_trace",
]


@dataclass(frozen=True)
class DemandModel:
    """Linear demand d_s = D_s - b_s * rho_s per destination."""

    D: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "D", np.asarray(self.D, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        if self.D.shape != self.b.shape:
            raise ValueError("D and b must align")
        if np.any(self.b <= 0):
            raise ValueError("demand slopes must be positive")

    def demand(self, rho: np.ndarray, clamp: bool = False) -> np.ndarray:
        d = self.D - self.b * np.asarray(rho, dtype=float)
        return np.maximum(d, 0.0) if clamp else d


@dataclass(frozen=True)
class PriceVector:
    """Prices with their Lemma-style feasibility box.

    The box is [(D_s - Qbar)/b_s, D_s/b_s] per destination; any
    balancing price vector lies inside it. Lower bounds may be negative
    and are honored as-is (no flooring at zero).
    """

    rho: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    destinations: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float))


def price_bounds(demand: DemandModel, total_supply: float
                 ) -> tuple[np.ndarray, np.ndarray]:
    """((D - Qbar)/b, D/b) box containing the balancing prices."""
    return (demand.D - total_supply) / demand.b, demand.D / demand.b


@dataclass
class ImbalanceReport:
    """Per-destination excess supply at one price vector.

    ``es[j] = arriving supply - requested demand`` for destination j,
    ``m = |es|``; total_m lies in [0, Qbar].
    """

    prices: np.ndarray
    es: np.ndarray
    m: np.ndarray
    total_m: float
    converged: bool
    solution: EquilibriumSolution


def excess_supply(prices: np.ndarray, problem: CdaProblem, demand: DemandModel,
                  cda_tol: float = 1e-8, cda_max_iter: int = 10000
                  ) -> ImbalanceReport:
    """Solve the CDA at ``prices`` and report ES_s per destination."""
    prices = np.asarray(prices, dtype=float)
    sol = solve_cda(replace(problem, prices=prices), tol=cda_tol,
                    max_iter=cda_max_iter)
    supply = sol.arriving_supply()
    es = supply - demand.demand(prices)
    m = np.abs(es)
    return ImbalanceReport(prices=prices, es=es, m=m, total_m=float(m.sum()),
                           converged=sol.converged, solution=sol)


@dataclass
class PriceSolve:
    prices: PriceVector
    report: ImbalanceReport
    converged: bool
    iterations: int
    trace: list[dict]


def _trace_row(it: int, dests: Sequence[int], rho: np.ndarray,
               es: np.ndarray, total_m: float) -> dict:
    row: dict = {"iter": it}
    for s, r in zip(dests, rho):
        row[f"rho_{s}"] = float(r)
    for s, e in zip(dests, es):
        row[f"es_{s}"] = float(e)
    row["total_m"] = float(total_m)
    return row


def write_price_trace(path: str, trace: Sequence[dict]) -> None:
    """Emit the per-iteration trace as iter,rho_<s>...,es_<s>...,total_m CSV."""
    if not trace:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(trace[0].keys()))
        writer.writeheader()
        writer.writerows(trace)


def fixed_point_prices(problem: CdaProblem, demand: DemandModel,
                       damping: float = 1.0, tol: float = 1e-3,
                       max_iter: int = 200, cda_tol: float = 1e-8,
                       rho0: np.ndarray | None = None) -> PriceSolve:
    """Balancing prices via the damped map rho <- rho - ES(rho)/b.

    The undamped map sends the price box into itself and is monotone,
    which pins down the unique fixed point; the iteration itself is
    stabilized by halving the damping whenever max|ES| fails to improve
    for 3 consecutive iterations. Terminates when max|ES| <= tol.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must be in (0, 1]")
    lo, hi = price_bounds(demand, problem.total_supply)
    rho = 0.5 * (lo + hi) if rho0 is None else np.asarray(rho0, dtype=float).copy()
    dests = problem.destinations
    trace: list[dict] = []
    best: tuple[float, np.ndarray, ImbalanceReport] | None = None
    stall = 0
    converged = False
    iterations = 0
    for it in range(max_iter):
        rep = excess_supply(rho, problem, demand, cda_tol=cda_tol)
        max_m = float(rep.m.max())
        trace.append(_trace_row(it, dests, rho, rep.es, rep.total_m))
        if best is None or max_m < best[0]:
            best = (max_m, rho.copy(), rep)
            stall = 0
        else:
            stall += 1
            if stall >= 3:
                damping *= 0.5
                stall = 0
        iterations = it + 1
        if max_m <= tol:
            converged = True
            break
        rho = np.clip(rho - damping * rep.es / demand.b, lo, hi)
    assert best is not None
    _, rho_best, rep_best = best
    pv = PriceVector(rho_best, lo, hi, tuple(dests))
    return PriceSolve(pv, rep_best, converged, iterations, trace)


def bisection_prices(problem: CdaProblem, demand: DemandModel,
                     tol: float = 1e-3, max_outer: int = 25,
                     cda_tol: float = 1e-8) -> PriceSolve:
    """Cyclic per-coordinate bisection of ES_s(rho) = 0 over the box.

    ES_s is non-decreasing in rho_s with the other coordinates held
    fixed, and brackets at the box ends, so each coordinate solve is a
    plain bisection. Used as an independent cross-check of the
    fixed-point and single-level routes.
    """
    lo, hi = price_bounds(demand, problem.total_supply)
    rho = 0.5 * (lo + hi)
    dests = problem.destinations
    n = len(dests)
    trace: list[dict] = []
    converged = False
    rep = excess_supply(rho, problem, demand, cda_tol=cda_tol)
    outer = 0
    for outer in range(1, max_outer + 1):
        for j in range(n):
            a, bnd = float(lo[j]), float(hi[j])
            for _ in range(60):
                rho[j] = 0.5 * (a + bnd)
                rep = excess_supply(rho, problem, demand, cda_tol=cda_tol)
                e = float(rep.es[j])
                if abs(e) <= 0.5 * tol:
                    break
                if e > 0:
                    bnd = rho[j]
                else:
                    a = rho[j]
                if bnd - a < 1e-12 * max(1.0, abs(bnd)):
                    break
        rep = excess_supply(rho, problem, demand, cda_tol=cda_tol)
        trace.append(_trace_row(outer, dests, rho, rep.es, rep.total_m))
        if float(rep.m.max()) <= tol:
            converged = True
            break
    pv = PriceVector(rho.copy(), lo, hi, tuple(dests))
    return PriceSolve(pv, rep, converged, outer, trace)


@dataclass
class SingleLevelSolution:
    flows: EquilibriumSolution
    demand_served: np.ndarray
    prices: PriceVector
    report: ImbalanceReport
    converged: bool
    iterations: int
    trace: list[dict]


def solve_single_level(problem: CdaProblem, demand: DemandModel,
                       tol: float = 1e-3, max_iter: int = 200,
                       damping: float = 1.0, cda_tol: float = 1e-8,
                       rho0: np.ndarray | None = None) -> SingleLevelSolution:
    """Single-level reformulation solved by dual decomposition.

    The market-clearing constraint sum_r q_rs = d_s carries multipliers
    rho; at trial multipliers the q-subproblem is exactly the CDA and
    the d-subproblem has the closed form d = D - b * rho. The multiplier
    ascent is the Lemma-style map scaled by 1/b_s, damped as in
    ``fixed_point_prices``; at termination the duals are the balancing
    prices and the primal flows clear the market within ``tol``.
    """
    inner = fixed_point_prices(problem, demand, damping=damping, tol=tol,
                               max_iter=max_iter, cda_tol=cda_tol, rho0=rho0)
    rho = inner.prices.rho
    d = demand.demand(rho)
    return SingleLevelSolution(
        flows=inner.report.solution,
        demand_served=d,
        prices=inner.prices,
        report=inner.report,
        converged=inner.converged,
        iterations=inner.iterations,
        trace=inner.trace,
    )


@dataclass
class ProfitSolve:
    prices: PriceVector
    revenue: float
    matches: np.ndarray
    stationary: bool
    evaluations: int


def profit(prices: np.ndarray, problem: CdaProblem, demand: DemandModel,
           cda_tol: float = 1e-8) -> tuple[float, np.ndarray]:
    """Platform revenue at ``prices``: sum_s rho_s * n_s.

    Matches n_s = min(arriving supply, requested demand), demand clamped
    at zero so evaluation stays meaningful outside the price box.
    """
    prices = np.asarray(prices, dtype=float)
    rep = excess_supply(prices, problem, demand, cda_tol=cda_tol)
    d = demand.demand(prices, clamp=True)
    n = np.minimum(rep.solution.arriving_supply(), d)
    return float(prices @ n), n


def maximize_profit(problem: CdaProblem, demand: DemandModel,
                    box: tuple[np.ndarray, np.ndarray] | None = None,
                    tol: float = 0.05, budget: int = 4000,
                    cda_tol: float = 1e-8) -> ProfitSolve:
    """Revenue maximization by coordinate pattern search over the box.

    Starts at the box center with step = width/8 per axis, moves to the
    best improving axis neighbor, halves the step when no neighbor
    improves, and stops once the step drops below ``tol`` (yielding a
    stationarity certificate at that resolution) or the evaluation
    budget runs out.
    """
    if box is None:
        box = price_bounds(demand, problem.total_supply)
    lo, hi = np.asarray(box[0], dtype=float), np.asarray(box[1], dtype=float)
    rho = 0.5 * (lo + hi)
    step = (hi - lo) / 8.0
    cache: dict[tuple, tuple[float, np.ndarray]] = {}
    evals = 0

    def value(p: np.ndarray) -> tuple[float, np.ndarray]:
        nonlocal evals
        key = tuple(np.round(p, 12))
        if key not in cache:
            cache[key] = profit(p, problem, demand, cda_tol=cda_tol)
            evals += 1
        return cache[key]

    best_rev, best_n = value(rho)
    stationary = False
    while evals < budget:
        candidates = []
        for j in range(len(rho)):
            for sign in (+1.0, -1.0):
                trial = rho.copy()
                trial[j] = float(np.clip(trial[j] + sign * step[j], lo[j], hi[j]))
                if trial[j] != rho[j]:
                    candidates.append(trial)
        improved = False
        cand_best = None
        for trial in candidates:
            if evals >= budget:
                break
            rev, n = value(trial)
            if rev > best_rev + 1e-12 and (cand_best is None or rev > cand_best[0]):
                cand_best = (rev, n, trial)
        if cand_best is not None:
            best_rev, best_n, rho = cand_best
            improved = True
        if not improved:
            step = step / 2.0
            if float(step.max()) < tol:
                stationary = True
                break
    pv = PriceVector(rho, lo, hi, tuple(problem.destinations))
    return ProfitSolve(pv, best_rev, best_n, stationary, evals)


def aggregate_clearing_price(demand: DemandModel, total_supply: float) -> float:
    """Single uniform price clearing the aggregate market.

    Solves sum_s (D_s - b_s * rho) = Qbar, the natural uniform-pricing
    counterpart of the per-destination balancing problem.
    """
    return float((demand.D.sum() - total_supply) / demand.b.sum())
