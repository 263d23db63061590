"""Small-instance ground truth for cross-checking the production solvers.

Everything here is deliberately independent of the Evans engine: path
enumeration by depth-first search, a path-flow user-equilibrium solve
via SLSQP on the Beckmann objective (with its own inline link-cost
formulas), and exhaustive grid search over the price box. Oracles
refuse instances too large to enumerate honestly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .cda import CdaProblem, solve_cda
from .network import CostKind, Network, ODPair
from .pricing import DemandModel, price_bounds

__all__ = [
    "PathSet",
    "GridSearchResult",
    "enumerate_paths",
    "path_ue_oracle",
    "grid_price_oracle",
    "MAX_ENUM_NODES",
    "MAX_GRID_DESTINATIONS",
]

MAX_ENUM_NODES = 8
MAX_GRID_DESTINATIONS = 3


@dataclass(frozen=True)
class PathSet:
    """All simple paths of one OD pair, as link-position sequences."""

    od: ODPair
    paths: tuple[tuple[int, ...], ...]


def enumerate_paths(network: Network, od: ODPair) -> PathSet:
    """Every simple path from od.origin to od.destination by DFS."""
    if network.n_nodes > MAX_ENUM_NODES:
        raise ValueError(
            f"refusing to enumerate paths on > {MAX_ENUM_NODES} nodes")
    if od.origin == od.destination:
        return PathSet(od, ())
    found: list[tuple[int, ...]] = []
    stack: list[int] = []
    visited = {od.origin}

    def dfs(node: int) -> None:
        if node == od.destination:
            found.append(tuple(stack))
            return
        for pos, head in network.out_links(node):
            if head in visited:
                continue
            visited.add(head)
            stack.append(pos)
            dfs(head)
            stack.pop()
            visited.remove(head)

    dfs(od.origin)
    return PathSet(od, tuple(found))


def path_ue_oracle(network: Network, od_demands: Mapping[tuple[int, int], float],
                   tol: float = 1e-12) -> np.ndarray:
    """Wardrop link flows by minimizing the Beckmann objective over paths.

    Enumerates all simple paths per OD and hands the convex program
    (with its exact gradient) to SLSQP. Independent of the production
    assignment code on purpose.
    """
    if network.n_nodes > MAX_ENUM_NODES:
        raise ValueError(
            f"refusing to enumerate paths on > {MAX_ENUM_NODES} nodes")
    t0 = np.array([l.t0 for l in network.links])
    cap = np.array([l.capacity for l in network.links])
    coeff = np.array([l.bpr_coeff for l in network.links])
    power = np.array([float(l.bpr_power) for l in network.links])
    for link in network.links:
        if link.cost_kind is not CostKind.BPR:
            raise ValueError("oracle supports BPR-only networks")

    ods = sorted((rs, d) for rs, d in od_demands.items() if d > 0)
    incidence_rows: list[np.ndarray] = []
    groups: list[tuple[int, int, float]] = []  # (start, stop, demand)
    for (r, s), d in ods:
        ps = enumerate_paths(network, ODPair(r, s))
        if not ps.paths:
            raise ValueError(f"no path for OD {(r, s)}")
        start = len(incidence_rows)
        for path in ps.paths:
            row = np.zeros(network.n_links)
            for pos in path:
                row[pos] += 1.0
            incidence_rows.append(row)
        groups.append((start, len(incidence_rows), d))
    if not incidence_rows:
        return np.zeros(network.n_links)
    pmat = np.array(incidence_rows)

    def link_time(v: np.ndarray) -> np.ndarray:
        return t0 * (1.0 + coeff * (v / cap) ** power)

    def beckmann(x: np.ndarray) -> float:
        v = pmat.T @ x
        return float(np.sum(t0 * v + t0 * coeff * v ** (power + 1)
                            / ((power + 1) * cap**power)))

    def grad(x: np.ndarray) -> np.ndarray:
        return pmat @ link_time(pmat.T @ x)

    x0 = np.concatenate([
        np.full(stop - start, d / (stop - start))
        for start, stop, d in groups])
    constraints = [
        {"type": "eq",
         "fun": (lambda x, a=start, b=stop, dd=d: float(np.sum(x[a:b]) - dd)),
         "jac": (lambda x, a=start, b=stop: np.concatenate(
             [np.zeros(a), np.ones(b - a), np.zeros(len(x) - b)]))}
        for start, stop, d in groups]
    res = minimize(beckmann, x0, jac=grad, method="SLSQP",
                   bounds=[(0.0, None)] * len(x0), constraints=constraints,
                   options={"maxiter": 1000, "ftol": tol})
    x = np.maximum(res.x, 0.0)
    return pmat.T @ x


@dataclass
class GridSearchResult:
    balance_rho: np.ndarray
    balance_total_m: float
    revenue_rho: np.ndarray
    revenue: float
    resolution: int


def grid_price_oracle(problem: CdaProblem, demand: DemandModel,
                      resolution: int = 201, cda_tol: float = 1e-8
                      ) -> GridSearchResult:
    """Exhaustive price-grid search over the feasibility box.

    Every grid point re-solves the CDA; returns the grid argmin of total
    |imbalance| and the grid argmax of revenue, breaking ties toward the
    lexicographically smallest price vector (the iteration order).
    """
    n_dest = len(problem.destinations)
    if n_dest > MAX_GRID_DESTINATIONS:
        raise ValueError(
            f"refusing grids over > {MAX_GRID_DESTINATIONS} destinations")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    lo, hi = price_bounds(demand, problem.total_supply)
    axes = [np.linspace(lo[j], hi[j], resolution) for j in range(n_dest)]
    best_m: tuple[float, np.ndarray] | None = None
    best_rev: tuple[float, np.ndarray] | None = None
    for combo in itertools.product(*axes):
        rho = np.array(combo)
        sol = solve_cda(replace(problem, prices=rho), tol=cda_tol)
        supply = sol.arriving_supply()
        d = demand.demand(rho)
        total_m = float(np.abs(supply - d).sum())
        revenue = float(rho @ np.minimum(supply, np.maximum(d, 0.0)))
        if best_m is None or total_m < best_m[0]:
            best_m = (total_m, rho)
        if best_rev is None or revenue > best_rev[0]:
            best_rev = (revenue, rho)
    assert best_m is not None and best_rev is not None
    return GridSearchResult(balance_rho=best_m[1], balance_total_m=best_m[0],
                            revenue_rho=best_rev[1], revenue=best_rev[0],
                            resolution=resolution)
