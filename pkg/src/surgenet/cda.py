"""Combined distribution and assignment for driver relocation.

Given locational prices, drivers choose a destination by multinomial
logit and route themselves (together with any background traffic) to a
Wardrop user equilibrium. Both choices are the optimum of one convex
program whose objective adds the Beckmann congestion integral to an
entropy term carrying the drivers' utilities; the solver is an
Evans-style partial linearization: shortest paths, an exact logit
response for the distribution, all-or-nothing auxiliary flows, and an
exact one-dimensional line search.

The diagonalized variant handles augmented networks whose driver wait
links have non-separable matching costs by freezing the rider flows,
solving the separable program, updating the riders, and iterating.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp, xlogy

from .matching import MatchingModel, rider_equilibrium
from .network import CostKind, Network, shortest_path

__all__ = [
    "UtilityCoefficients",
    "CdaProblem",
    "EquilibriumSolution",
    "DiagonalizedSolution",
    "WardropReport",
    "driver_utility",
    "logit_distribution",
    "solve_cda",
    "check_wardrop",
    "total_travel_time",
    "solve_diagonalized",
]

log = logging.getLogger(__name__)

_LOG_EVERY = 200


@dataclass(frozen=True)
class UtilityCoefficients:
    """Deterministic driver utility beta0_s - beta1 * t_rs + beta2 * rho_s.

    ``beta0`` is either a scalar applied to every destination or a
    mapping from destination node id to attractiveness.
    """

    beta0: float | Mapping[int, float]
    beta1: float
    beta2: float

    def __post_init__(self) -> None:
        if self.beta1 <= 0:
            raise ValueError("time coefficient beta1 must be positive")

    def attract(self, destination: int) -> float:
        if isinstance(self.beta0, Mapping):
            return float(self.beta0[destination])
        return float(self.beta0)


def driver_utility(coeffs: UtilityCoefficients, t_rs: float, rho_s: float,
                   destination: int | None = None) -> float:
    """beta0_s - beta1 * t_rs + beta2 * rho_s."""
    if isinstance(coeffs.beta0, Mapping):
        if destination is None:
            raise ValueError("per-destination beta0 requires a destination id")
        b0 = coeffs.attract(destination)
    else:
        b0 = float(coeffs.beta0)
    return b0 - coeffs.beta1 * t_rs + coeffs.beta2 * rho_s


def logit_distribution(utilities: Sequence[float], total: float) -> np.ndarray:
    """Split ``total`` across alternatives proportional to exp(utility).

    Uses a max shift so arbitrarily large utilities stay finite; the
    result sums to ``total`` exactly up to float rounding.
    """
    u = np.asarray(utilities, dtype=float)
    if u.size == 0:
        raise ValueError("at least one destination required")
    if total < 0:
        raise ValueError("total must be non-negative")
    w = np.exp(u - u.max())
    return total * w / w.sum()


@dataclass(frozen=True)
class CdaProblem:
    """Inputs of one lower-level equilibrium solve.

    ``supplies`` maps driver origin r -> Q_r; ``prices`` is aligned with
    ``destinations``. ``background`` maps fixed OD pairs (s, k) to their
    vehicle flow (the delta_sk * Dbar_s products); shares must be
    non-negative with per-origin sums at most the total departing flow.
    """

    network: Network
    supplies: Mapping[int, float]
    destinations: tuple[int, ...]
    prices: np.ndarray
    coeffs: UtilityCoefficients
    background: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "prices", np.asarray(self.prices, dtype=float))
        if len(self.prices) != len(self.destinations):
            raise ValueError("prices must align with destinations")
        if not self.destinations:
            raise ValueError("at least one destination required")
        if len(set(self.destinations)) != len(self.destinations):
            raise ValueError("duplicate destinations")
        if not self.supplies:
            raise ValueError("at least one driver origin required")
        total = 0.0
        for r, q in self.supplies.items():
            if q < 0:
                raise ValueError(f"negative driver supply at {r}")
            total += q
        if total <= 0:
            raise ValueError("total driver supply must be positive")
        for (s, k), d in self.background.items():
            if d < 0:
                raise ValueError(f"negative background demand for {(s, k)}")
        self._check_reachability()

    def _check_reachability(self) -> None:
        net = self.network
        zero = np.zeros(net.n_links)
        needed: dict[int, set[int]] = {}
        for r in self.supplies:
            needed.setdefault(r, set()).update(
                s for s in self.destinations if s != r)
        for (s, k), d in self.background.items():
            if d > 0 and s != k:
                needed.setdefault(s, set()).add(k)
        for origin, targets in needed.items():
            labels, _ = shortest_path(net, zero, origin)
            for t in targets:
                if not np.isfinite(labels[t]):
                    raise ValueError(
                        f"destination {t} unreachable from origin {origin}")

    @property
    def total_supply(self) -> float:
        return float(sum(self.supplies.values()))


@dataclass
class EquilibriumSolution:
    """Flows, times and certificates returned by the CDA solver.

    ``q[i, j]`` is the relocation flow from ``origins[i]`` to
    ``destinations[j]``; ``v`` aggregates every vehicle class per link;
    ``v_od[i, j]`` is the per-OD driver link-flow vector, and
    ``v_background`` the same for fixed background OD pairs.
    """

    origins: tuple[int, ...]
    destinations: tuple[int, ...]
    q: np.ndarray
    v: np.ndarray
    t_od: np.ndarray
    objective: float
    rel_gap: float
    iterations: int
    converged: bool
    v_od: np.ndarray
    v_background: dict[tuple[int, int], np.ndarray]

    def supply_at(self, destination: int) -> float:
        j = self.destinations.index(destination)
        return float(self.q[:, j].sum())

    def arriving_supply(self) -> np.ndarray:
        return self.q.sum(axis=0)


class _LinkCosts:
    """Vectorized time and Beckmann-integral evaluation per link.

    Wait links (cost kind matching_wait) need ``wait_costs`` mapping the
    link position to (a0_effective, own_flow_exponent), where the
    effective coefficient already absorbs the frozen cross flow.
    """

    def __init__(self, network: Network,
                 wait_costs: Mapping[int, tuple[float, float]] | None = None):
        kinds = [l.cost_kind for l in network.links]
        n = network.n_links
        self.n = n
        bpr = [i for i, k in enumerate(kinds) if k is CostKind.BPR]
        wait = [i for i, k in enumerate(kinds) if k is CostKind.MATCHING_WAIT]
        if wait and not wait_costs:
            raise ValueError(
                "network has matching-wait links; use solve_diagonalized")
        self.bpr_idx = np.array(bpr, dtype=np.int64)
        self.t0 = np.array([network.links[i].t0 for i in bpr])
        power = np.array([float(network.links[i].bpr_power) for i in bpr])
        cap = np.array([network.links[i].capacity for i in bpr])
        coeff = np.array([network.links[i].bpr_coeff for i in bpr])
        self.power = power
        # time = t0 + k * v**p ; integral = t0*v + k * v**(p+1)/(p+1)
        self.k = self.t0 * coeff / cap**power
        self.wait_idx = np.array(wait, dtype=np.int64)
        if wait:
            missing = [i for i in wait if i not in wait_costs]
            if missing:
                raise ValueError(f"missing wait cost for link positions {missing}")
            self.wait_a0 = np.array([wait_costs[i][0] for i in wait])
            self.wait_a1 = np.array([wait_costs[i][1] for i in wait])
            if np.any(self.wait_a1 <= 0):
                raise ValueError("own-flow wait exponent must be positive")
        else:
            self.wait_a0 = np.zeros(0)
            self.wait_a1 = np.zeros(0)

    def times(self, v: np.ndarray) -> np.ndarray:
        t = np.zeros(self.n)
        vb = v[self.bpr_idx]
        t[self.bpr_idx] = self.t0 + self.k * vb**self.power
        if self.wait_idx.size:
            t[self.wait_idx] = self.wait_a0 * v[self.wait_idx] ** self.wait_a1
        return t

    def dtimes(self, v: np.ndarray) -> np.ndarray:
        """Marginal link time dt/dv, the diagonal cost Hessian."""
        d = np.zeros(self.n)
        vb = v[self.bpr_idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            db = self.k * self.power * vb ** (self.power - 1.0)
        d[self.bpr_idx] = np.where(np.isfinite(db), db, 0.0)
        if self.wait_idx.size:
            vw = np.maximum(v[self.wait_idx], 1e-12)
            d[self.wait_idx] = self.wait_a0 * self.wait_a1 \
                * vw ** (self.wait_a1 - 1.0)
        return d

    def integrals_total(self, v: np.ndarray) -> float:
        vb = v[self.bpr_idx]
        total = float(np.sum(self.t0 * vb + self.k * vb ** (self.power + 1)
                             / (self.power + 1)))
        if self.wait_idx.size:
            vw = v[self.wait_idx]
            total += float(np.sum(self.wait_a0 * vw ** (self.wait_a1 + 1)
                                  / (self.wait_a1 + 1)))
        return total


def _walk_path(preds: np.ndarray, tails: np.ndarray, origin: int, dest: int
               ) -> list[int]:
    path: list[int] = []
    node = dest
    while node != origin:
        pos = preds[node]
        if pos < 0:
            raise RuntimeError(f"no path from {origin} to {dest}")
        path.append(pos)
        node = tails[pos]
    return path


@dataclass(frozen=True)
class _WaitBlock:
    """Destination wait links kept exact in the Evans subproblem.

    Arrays align with the engine's sorted destination order; the wait
    cost of destination j is a0eff[j] * f_j**a1[j] on link positions[j],
    whose flow equals the arriving relocation total f_j by construction.
    """

    positions: np.ndarray  # link position per destination
    connectors: np.ndarray  # road node feeding the wait link
    a0eff: np.ndarray
    a1: np.ndarray


def _aux_wait_targets(u_road: np.ndarray, q_supply: np.ndarray,
                      base_util: np.ndarray, b1: float, wait: _WaitBlock,
                      d_start: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact minimizer of the partially linearized subproblem with waits.

    The optimality system pairs shadow waits w_j = a0eff_j * f_j**a1_j
    with logit column totals f at utilities base - b1 * (u_road + w).
    Only wait differences move the logit, so we solve in the bounded
    difference space d_j = w_j - w_ref, where the per-coordinate residual

        r_j(d) = [wait_j(f(d)) - wait_ref(f(d))] - d_j

    is strictly decreasing in d_j and brackets over a box a few hundred
    utils wide no matter how astronomical the wait levels get. Cyclic
    bisection over that box is therefore robust. Returns
    (q_hat, f_hat, d) with d reusable as the next warm start.
    """
    expo = base_util[None, :] - b1 * u_road  # exponent at zero wait
    n_s = base_util.size

    def softmax_totals(d: np.ndarray) -> np.ndarray:
        x = expo - b1 * d[None, :]
        shift = x - x.max(axis=1, keepdims=True)
        ex = np.exp(shift)
        p = ex / ex.sum(axis=1, keepdims=True)
        return q_supply @ p

    def wait_of(f: np.ndarray) -> np.ndarray:
        return wait.a0eff * np.maximum(f, 0.0) ** wait.a1

    if n_s == 1:
        f = np.array([float(q_supply.sum())])
        q_hat = q_supply[:, None].copy()
        return q_hat, f, np.zeros(1)
    if np.all(wait.a0eff <= 0.0):
        ex = np.exp(expo - expo.max(axis=1, keepdims=True))
        q_hat = q_supply[:, None] * ex / ex.sum(axis=1, keepdims=True)
        return q_hat, q_hat.sum(axis=0), np.zeros(n_s)

    ref = n_s - 1
    d_box = (750.0 + float(expo.max() - expo.min())) / b1
    d = np.clip(np.asarray(d_start, dtype=float).copy(), -d_box, d_box)
    d[ref] = 0.0

    for _ in range(100):
        d_prev = d.copy()
        for j in range(n_s):
            if j == ref:
                continue
            # factor the softmax so each bisection step is O(R)
            x = expo - b1 * d[None, :]
            x[:, j] = -np.inf
            m = np.maximum(np.max(x, axis=1), expo[:, j])
            others = np.exp(x - m[:, None])
            others[:, j] = 0.0
            a_all = others.sum(axis=1)
            a_ref = others[:, ref]
            b_j = np.exp(expo[:, j] - m)

            def residual(dj: float) -> float:
                xj = math.exp(min(max(-b1 * dj, -700.0), 700.0))
                denom = a_all + b_j * xj
                f_j = float(q_supply @ (b_j * xj / denom))
                f_ref = float(q_supply @ (a_ref / denom))
                w_j = wait.a0eff[j] * f_j ** wait.a1[j]
                w_ref = wait.a0eff[ref] * f_ref ** wait.a1[ref]
                return (w_j - w_ref) - dj

            lo, hi = -d_box, d_box
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if residual(mid) > 0:
                    lo = mid
                else:
                    hi = mid
            d[j] = 0.5 * (lo + hi)
        if float(np.max(np.abs(d - d_prev))) <= 1e-11 * (1.0 + d_box):
            break

    f_hat = softmax_totals(d)
    x = expo - b1 * d[None, :]
    shift = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shift)
    q_hat = q_supply[:, None] * ex / ex.sum(axis=1, keepdims=True)
    return q_hat, q_hat.sum(axis=0), d


def _evans(problem: CdaProblem, costs: _LinkCosts, tol: float, max_iter: int,
           init: "EquilibriumSolution | None" = None,
           wait: _WaitBlock | None = None,
           assign_steps: int = 3) -> EquilibriumSolution:
    net = problem.network
    n_links = net.n_links
    tails = np.array([l.tail for l in net.links], dtype=np.int64)

    origins = tuple(sorted(problem.supplies))
    dests = tuple(sorted(problem.destinations))
    dest_order = [problem.destinations.index(s) for s in dests]
    q_supply = np.array([problem.supplies[r] for r in origins])
    rho = np.asarray(problem.prices, dtype=float)[dest_order]
    beta0 = np.array([problem.coeffs.attract(s) for s in dests])
    b1, b2 = problem.coeffs.beta1, problem.coeffs.beta2
    dest_ids = np.array(dests, dtype=np.int64)

    bg = sorted((s, k, d) for (s, k), d in problem.background.items() if d > 0)
    bg_demand = np.array([d for _, _, d in bg])
    sp_origins = sorted(set(origins) | {s for s, _, _ in bg})

    n_r, n_s = len(origins), len(dests)
    w_warm = np.zeros(n_s)

    def entropy_term(q: np.ndarray) -> float:
        return float(np.sum(xlogy(q, q) - q * (1.0 + beta0 + b2 * rho)) / b1)

    def objective(v: np.ndarray, q: np.ndarray) -> float:
        return costs.integrals_total(v) + entropy_term(q)

    def targets_and_aux(v: np.ndarray, q_cur: np.ndarray | None = None,
                        build_aon: bool = True):
        """Shortest paths at t(v); target distribution and AON flows.

        Without wait links the distribution target is the closed-form
        logit at current OD times; with them, the destination wait terms
        stay exact in the subproblem (they are too steep to linearize).
        Passing ``q_cur`` freezes the distribution (assignment-only
        step), used to relax route flows between distribution updates.
        """
        nonlocal w_warm
        t = costs.times(v)
        labels = {}
        preds = {}
        for o in sp_origins:
            labels[o], preds[o] = shortest_path(net, t, o)
        u = np.array([labels[r][dest_ids] for r in origins])
        if q_cur is not None:
            q_hat = q_cur
            l_aux = math.nan
        elif wait is None:
            util = beta0[None, :] + b2 * rho[None, :] - b1 * u
            shift = util - util.max(axis=1, keepdims=True)
            ex = np.exp(shift)
            q_hat = q_supply[:, None] * ex / ex.sum(axis=1, keepdims=True)
            lse = logsumexp(util, axis=1)
            with np.errstate(divide="ignore"):
                logq = np.where(q_supply > 0,
                                np.log(np.maximum(q_supply, 1e-300)), 0.0)
            l_aux = float(np.sum(q_supply * (logq - lse - 1.0)) / b1)
        else:
            u_road = np.array([labels[r][wait.connectors] for r in origins])
            q_hat, f_hat, w_hat = _aux_wait_targets(
                u_road, q_supply, beta0 + b2 * rho, b1, wait, w_warm)
            w_warm = w_hat
            l_aux = float(np.sum(q_hat * u_road)) + entropy_term(q_hat)
            l_aux += float(np.sum(wait.a0eff * f_hat ** (wait.a1 + 1.0)
                                  / (wait.a1 + 1.0)))

        for (s, k, d) in bg:
            l_aux += d * float(labels[s][k])
        if not build_aon:
            return t, u, q_hat, None, None, None, l_aux
        aon_od = np.zeros((n_r, n_s, n_links))
        for i, r in enumerate(origins):
            for j, s in enumerate(dests):
                flow = q_hat[i, j]
                if flow > 0 and r != s:
                    for pos in _walk_path(preds[r], tails, r, s):
                        aon_od[i, j, pos] += flow
        aon_bg = np.zeros((len(bg), n_links))
        for bi, (s, k, d) in enumerate(bg):
            if s != k:
                for pos in _walk_path(preds[s], tails, s, k):
                    aon_bg[bi, pos] += d
        v_aux = aon_od.sum(axis=(0, 1)) + aon_bg.sum(axis=0)
        return t, u, q_hat, v_aux, aon_od, aon_bg, l_aux

    if init is not None:
        if tuple(init.origins) != origins:
            raise ValueError("warm-start origins do not match")
        col = [init.destinations.index(s) for s in dests]
        q = init.q[:, col].copy()
        v = init.v.copy()
        v_od = init.v_od[:, col, :].copy()
        if bg:
            bg_v = np.stack([init.v_background[(s, k)] for (s, k, _) in bg])
        else:
            bg_v = np.zeros((0, n_links))
    else:
        _, _, q, v, v_od, bg_v, _ = targets_and_aux(np.zeros(n_links))

    lb_best = -math.inf
    rel_gap = math.inf
    converged = False
    iterations = 0
    u_final: np.ndarray | None = None
    conj: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    # step cycle: one certified Evans step, then per assign_steps one
    # route-space (assignment) and one demand-scaling step each
    cycle = ["full"] + ["assign", "scale"] * assign_steps

    for it in range(max_iter + 1):
        kind = cycle[it % len(cycle)]
        if it == max_iter:
            kind = "full"
        full = kind == "full"
        t, u, q_hat, v_aux, aon_od, aon_bg, l_aux = targets_and_aux(
            v, q_cur=q if kind == "assign" else None,
            build_aon=kind != "scale")
        u_final = u
        if kind == "scale":
            # move the distribution along current route patterns: the
            # auxiliary point rescales each OD's flows to the target
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(q > 0, q_hat / np.maximum(q, 1e-300), 1.0)
            aon_od = v_od * ratio[:, :, None]
            aon_bg = bg_v
            v_aux = aon_od.sum(axis=(0, 1)) + aon_bg.sum(axis=0)
        if full:
            f_cur = objective(v, q)
            lin_cur = float(t @ v) + entropy_term(q)
            if wait is not None:
                # wait terms are exact (not linearized) in the subproblem
                vw = v[wait.positions]
                lin_cur -= float(t[wait.positions] @ vw)
                lin_cur += float(np.sum(wait.a0eff * vw ** (wait.a1 + 1.0)
                                        / (wait.a1 + 1.0)))
            lb = f_cur - lin_cur + l_aux
            lb_best = max(lb_best, lb)
            rel_gap = (f_cur - lb_best) / max(abs(lb_best), 1e-12)
            if it % _LOG_EVERY == 0:
                log.debug("iter=%d rel_gap=%.3e obj=%.10g", it, rel_gap, f_cur)
            if rel_gap <= tol:
                converged = True
                break
        if it == max_iter:
            break

        if kind != "assign":
            conj = None  # distribution moved: conjugacy no longer applies
        else:
            # conjugate direction in route space (distribution frozen)
            if conj is not None:
                s_v, s_od, s_bg = conj
                h = costs.dtimes(v)
                a = s_v - v
                b_dir = v_aux - v
                num = float(np.sum(h * a * b_dir))
                den = num - float(np.sum(h * a * a))
                alpha = num / den if den < 0 else 0.0
                alpha = min(max(alpha, 0.0), 0.999)
                if alpha > 0:
                    v_aux = alpha * s_v + (1.0 - alpha) * v_aux
                    aon_od = alpha * s_od + (1.0 - alpha) * aon_od
                    aon_bg = alpha * s_bg + (1.0 - alpha) * aon_bg
            conj = (v_aux, aon_od, aon_bg)

        dv = v_aux - v
        dq = q_hat - q
        dq_sum = float(np.abs(dq).sum())

        def dphi(theta: float) -> float:
            vt = v + theta * dv
            val = float(costs.times(vt) @ dv)
            if dq_sum > 0:
                qt = np.maximum(q + theta * dq, 1e-300)
                term = np.where(dq != 0.0,
                                dq * (np.log(qt) - beta0 - b2 * rho), 0.0)
                val += float(term.sum()) / b1
            return val

        lo, hi = 0.0, 1.0
        if dphi(1.0) <= 0:
            theta = 1.0
        elif dphi(0.0) >= 0:
            if full:
                # no descent along the auxiliary direction: numerical stall
                break
            theta = 0.0
        else:
            while hi - lo > 1e-10:
                mid = 0.5 * (lo + hi)
                if dphi(mid) < 0:
                    lo = mid
                else:
                    hi = mid
            theta = 0.5 * (lo + hi)

        if theta > 0:
            keep = 1.0 - theta
            v = keep * v + theta * v_aux
            q = keep * q + theta * q_hat
            v_od = keep * v_od + theta * aon_od
            bg_v = keep * bg_v + theta * aon_bg
        iterations = it + 1

    log.debug("final iter=%d rel_gap=%.3e obj=%.10g converged=%s",
              iterations, rel_gap, objective(v, q), converged)

    # map internal sorted order back to the caller's ordering
    out_dest_pos = {s: j for j, s in enumerate(dests)}
    cols = [out_dest_pos[s] for s in problem.destinations]
    q_out = q[:, cols]
    t_out = u_final[:, cols]
    v_od_out = v_od[:, cols, :]
    return EquilibriumSolution(
        origins=origins,
        destinations=tuple(problem.destinations),
        q=q_out,
        v=v,
        t_od=t_out,
        objective=objective(v, q),
        rel_gap=rel_gap,
        iterations=iterations,
        converged=converged,
        v_od=v_od_out,
        v_background={(s, k): bg_v[bi] for bi, (s, k, _) in enumerate(bg)},
    )


def solve_cda(problem: CdaProblem, tol: float = 1e-6, max_iter: int = 10000
              ) -> EquilibriumSolution:
    """Solve the combined distribution and assignment program.

    The returned solution satisfies Wardrop's principle on used routes,
    logit consistency of the relocation flows, and ``rel_gap <= tol``
    where the gap compares the objective with its best partial
    linearization lower bound. On ``max_iter`` exhaustion the best
    iterate comes back flagged ``converged=False`` rather than raising.
    """
    costs = _LinkCosts(problem.network)
    return _evans(problem, costs, tol, max_iter)


@dataclass
class WardropReport:
    """Per-OD excess of used-path times over the shortest-path time."""

    excess: dict[tuple[int, int], float]
    min_time: dict[tuple[int, int], float]
    used_paths: dict[tuple[int, int], int]
    tol: float

    @property
    def max_relative_excess(self) -> float:
        worst = 0.0
        for od, e in self.excess.items():
            base = max(self.min_time[od], 1e-12)
            worst = max(worst, e / base)
        return worst

    @property
    def ok(self) -> bool:
        return all(
            e <= self.tol * max(self.min_time[od], 1e-12)
            for od, e in self.excess.items())


def _decompose_paths(v_od: np.ndarray, net: Network, origin: int, dest: int,
                     times: np.ndarray, total: float
                     ) -> list[tuple[float, float]]:
    """Split one OD's link flows into (flow, time) path pairs."""
    resid = v_od.copy()
    out: list[tuple[float, float]] = []
    floor = max(1e-12, 1e-9 * max(total, 1.0))
    for _ in range(10000):
        node = origin
        path: list[int] = []
        seen = {origin}
        while node != dest:
            best_pos, best_flow = -1, floor
            for pos, head in net.out_links(node):
                if resid[pos] > best_flow:
                    best_pos, best_flow = pos, resid[pos]
            if best_pos < 0:
                return out
            node = net.links[best_pos].head
            path.append(best_pos)
            if node in seen:
                # cycle crumb: cancel it and retry
                cut = next(i for i, p in enumerate(path)
                           if net.links[p].tail == node)
                cyc = path[cut:]
                resid[cyc] -= resid[cyc].min()
                break
            seen.add(node)
        else:
            flow = float(resid[path].min())
            out.append((flow, float(times[path].sum())))
            resid[path] -= flow
    return out


def check_wardrop(problem: CdaProblem, solution: EquilibriumSolution,
                  tol: float = 1e-4) -> WardropReport:
    """Certify the first Wardrop principle on the returned flows.

    Small networks (up to 8 nodes) get an exact positive-flow path
    decomposition; larger ones are bounded through the label conditions
    label(tail) + t - label(head) >= 0 summed over used links.
    """
    net = problem.network
    costs = _LinkCosts(problem.network) if not any(
        l.cost_kind is CostKind.MATCHING_WAIT for l in net.links) else None
    if costs is not None:
        t = costs.times(solution.v)
    else:  # diagonalized caller passes equilibrium times via t_od; rebuild bpr part
        raise ValueError("check_wardrop expects a plain (non-augmented) problem")
    small = net.n_nodes <= 8
    tails = np.array([l.tail for l in net.links])
    heads = np.array([l.head for l in net.links])
    excess: dict[tuple[int, int], float] = {}
    min_time: dict[tuple[int, int], float] = {}
    used_cnt: dict[tuple[int, int], int] = {}
    labels_cache: dict[int, np.ndarray] = {}
    for i, r in enumerate(solution.origins):
        if r not in labels_cache:
            labels_cache[r], _ = shortest_path(net, t, r)
        labels = labels_cache[r]
        for j, s in enumerate(solution.destinations):
            od = (r, s)
            q_od = float(solution.q[i, j])
            min_time[od] = 0.0 if r == s else float(labels[s])
            if r == s or q_od <= 0:
                excess[od] = 0.0
                used_cnt[od] = 0
                continue
            if small:
                paths = _decompose_paths(solution.v_od[i, j], net, r, s, t, q_od)
                thresh = 1e-6 * q_od
                used = [(f, c) for f, c in paths if f > thresh]
                used_cnt[od] = len(used)
                worst = max((c for _, c in used), default=min_time[od])
                excess[od] = max(0.0, worst - min_time[od])
            else:
                flows = solution.v_od[i, j]
                mask = flows > 1e-6 * q_od
                slack = labels[tails] + t - labels[heads]
                excess[od] = float(np.maximum(slack[mask], 0.0).sum())
                used_cnt[od] = int(mask.sum())
    return WardropReport(excess, min_time, used_cnt, tol)


def total_travel_time(solution: EquilibriumSolution, network: Network) -> float:
    """Vehicle-minutes of road travel, sum of v_a * t_a(v_a) over BPR links."""
    total = 0.0
    for pos, link in enumerate(network.links):
        if link.cost_kind is CostKind.BPR:
            v = float(solution.v[pos])
            p = link.bpr_power
            total += v * link.t0 * (1.0 + link.bpr_coeff * (v / link.capacity) ** p)
    return total


@dataclass
class DiagonalizedSolution:
    """Joint driver/rider outcome of the diagonalization loop.

    ``markets`` aligns the flow arrays; ``f_d`` are arriving driver
    flows per market and ``f_r`` the riders' best response to them.
    Convergence is not guaranteed in theory, so callers must tolerate
    ``converged=False`` results.
    """

    equilibrium: EquilibriumSolution
    markets: tuple[int, ...]
    f_d: np.ndarray
    f_r: np.ndarray
    converged: bool
    outer_iterations: int
    max_flow_change: float


def solve_diagonalized(problem: CdaProblem, model: MatchingModel,
                       tol: float = 1e-6, max_outer: int = 200,
                       damping: float = 0.5,
                       cda_tol: float = 1e-8, cda_max_iter: int = 10000,
                       init: DiagonalizedSolution | None = None
                       ) -> DiagonalizedSolution:
    """Two-sided equilibrium on an augmented network by diagonalization.

    Alternates (i) a driver CDA in which each driver wait link s'->s
    costs a0 * v**a1 * fR**a2 with the rider flow frozen, and (ii) a
    rider best response per market. Rider flow updates are damped;
    termination is max per-market flow change <= tol, with the best
    iterate returned and flagged when the budget runs out.
    """
    net = problem.network
    if not net.augmented:
        raise ValueError("solve_diagonalized needs an augmented network")
    dfit, rfit = model.driver_fit, model.rider_fit
    if dfit.a1 <= 0:
        raise ValueError("driver wait must increase in own flow (a1 > 0)")
    market_link: dict[int, int] = {}
    for ml in net.augmented.values():
        market_link[ml.market] = net.link_position(ml.driver_wait_link)
    for s in problem.destinations:
        if s not in market_link:
            raise ValueError(f"destination {s} is not an augmented market node")
    markets = tuple(problem.destinations)
    market_set = set(markets)
    demand = np.array([model.rider_demand[s] for s in markets])
    rho = np.asarray(problem.prices, dtype=float)
    floor = model.flow_floor

    if init is not None:
        f_r = init.f_r.copy()
        state: EquilibriumSolution | None = init.equilibrium
    else:
        f_r = demand / 2.0
        state = None

    best: tuple[float, EquilibriumSolution, np.ndarray, np.ndarray] | None = None
    f_d_prev = None
    converged = False
    outer = 0
    change = math.inf
    sol: EquilibriumSolution | None = None
    # rider wait links (and any market not priced here) carry no driver
    # flow; cost them at zero so the cost model is total
    passive_links: dict[int, tuple[float, float]] = {}
    connector: dict[int, int] = {}
    for ml in net.augmented.values():
        passive_links[net.link_position(ml.rider_wait_link)] = (0.0, 1.0)
        connector[ml.market] = ml.connector
        if ml.market not in market_set:
            passive_links[net.link_position(ml.driver_wait_link)] = (0.0, 1.0)
    sorted_markets = sorted(markets)
    col_of = {s: j for j, s in enumerate(markets)}
    wait_block_template = _WaitBlock(
        positions=np.array([market_link[s] for s in sorted_markets]),
        connectors=np.array([connector[s] for s in sorted_markets]),
        a0eff=np.zeros(len(markets)),
        a1=np.full(len(markets), dfit.a1),
    )
    for outer in range(1, max_outer + 1):
        wait_costs = dict(passive_links)
        a0eff = np.zeros(len(markets))
        for jj, s in enumerate(sorted_markets):
            coeff = dfit.a0 * max(f_r[col_of[s]], floor) ** dfit.a2
            wait_costs[market_link[s]] = (coeff, dfit.a1)
            a0eff[jj] = coeff
        wait_block = _WaitBlock(wait_block_template.positions,
                                wait_block_template.connectors,
                                a0eff, wait_block_template.a1)
        costs = _LinkCosts(net, wait_costs)
        sol = _evans(problem, costs, cda_tol, cda_max_iter, init=state,
                     wait=wait_block)
        state = sol
        f_d = sol.arriving_supply()
        f_r_resp = np.array([
            rider_equilibrium(max(f_d[j], floor), rho[j], demand[j],
                              model.rider_coeffs, rfit)
            for j in range(len(markets))])
        change = float(np.max(np.abs(f_r_resp - f_r)))
        if f_d_prev is not None:
            change = max(change, float(np.max(np.abs(f_d - f_d_prev))))
        f_d_prev = f_d
        if best is None or change < best[0]:
            best = (change, sol, f_d, f_r_resp)
        f_r = f_r + damping * (f_r_resp - f_r)
        if change <= tol:
            converged = True
            break

    assert best is not None
    _, sol_b, f_d_b, f_r_b = best
    return DiagonalizedSolution(
        equilibrium=sol_b, markets=markets, f_d=f_d_b, f_r=f_r_b,
        converged=converged, outer_iterations=outer, max_flow_change=best[0])
