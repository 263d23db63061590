"""Matching-time machinery for two-sided driver/rider markets.

A Cobb-Douglas matching function m = alpha0 * N_D**alpha1 * N_R**alpha2
drives queue dynamics for vacant drivers and waiting riders. Average
waits are obtained by numerical integration, then compressed into a
power law t_i = a0 * f_i**a1 * f_{-i}**a2 by log-linear regression.
The power law becomes the cost of wait links in an augmented network,
and riders pick ride-sourcing versus driving by a binary logit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .network import (
    CostKind,
    Link,
    MarketLinks,
    Network,
    Node,
    NodeKind,
    build_network,
)

__all__ = [
    "MatchingParams",
    "WaitFit",
    "QueueSimConfig",
    "RiderCoefficients",
    "MatchingModel",
    "simulate_queue",
    "fit_wait_regression",
    "wait_time",
    "augment_network",
    "rider_equilibrium",
    "default_flow_grid",
]

FLOW_FLOOR = 1e-6


@dataclass(frozen=True)
class MatchingParams:
    """Cobb-Douglas matching rate m = alpha0 * N_D**alpha1 * N_R**alpha2."""

    alpha0: float
    alpha1: float
    alpha2: float

    def __post_init__(self) -> None:
        if self.alpha0 < 0 or self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("matching elasticities must be positive")

    def rate(self, n_d: float, n_r: float) -> float:
        return self.alpha0 * max(n_d, 0.0) ** self.alpha1 * max(n_r, 0.0) ** self.alpha2


@dataclass(frozen=True)
class WaitFit:
    """Fitted power law t = a0 * f_own**a1 * f_cross**a2."""

    a0: float
    a1: float
    a2: float
    r_squared: float = 1.0
    sample_count: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {"a0": self.a0, "a1": self.a1, "a2": self.a2,
             "r_squared": self.r_squared, "sample_count": self.sample_count})

    @classmethod
    def from_json(cls, text: str) -> "WaitFit":
        d = json.loads(text)
        return cls(d["a0"], d["a1"], d["a2"], d.get("r_squared", 1.0),
                   d.get("sample_count", 0))


@dataclass(frozen=True)
class QueueSimConfig:
    horizon: float = 60.0
    dt: float = 0.01
    n_d0: float = 0.0
    n_r0: float = 0.0

    def __post_init__(self) -> None:
        if self.horizon <= 0 or self.dt <= 0:
            raise ValueError("horizon and dt must be positive")
        if self.dt > self.horizon / 100:
            raise ValueError("dt must be at most horizon/100")
        if self.n_d0 < 0 or self.n_r0 < 0:
            raise ValueError("initial queue lengths must be non-negative")


@dataclass(frozen=True)
class RiderCoefficients:
    """Binary-logit utility of ride-sourcing: beta0p - beta1p*t - beta2p*rho."""

    beta0p: float
    beta1p: float
    beta2p: float

    def __post_init__(self) -> None:
        if self.beta1p <= 0:
            raise ValueError("waiting-time coefficient must be positive")


@dataclass(frozen=True)
class MatchingModel:
    """Everything the diagonalized solver needs about one market side.

    ``rider_demand`` maps market node id -> total travelers D_s choosing
    between ride-sourcing and driving at that location.
    """

    driver_fit: WaitFit
    rider_fit: WaitFit
    rider_coeffs: RiderCoefficients
    rider_demand: Mapping[int, float]
    flow_floor: float = FLOW_FLOOR


def _simulate_batch(f_d: np.ndarray, f_r: np.ndarray, params: MatchingParams,
                    cfg: QueueSimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized RK4 over many (f_d, f_r) pairs at once.

    State is clamped at zero after each step; total waits accumulate by
    the trapezoid rule.
    """
    steps = int(round(cfg.horizon / cfg.dt))
    dt = cfg.horizon / steps
    n_d = np.full_like(f_d, cfg.n_d0, dtype=float)
    n_r = np.full_like(f_r, cfg.n_r0, dtype=float)
    tot_d = np.zeros_like(n_d)
    tot_r = np.zeros_like(n_r)

    a0, a1, a2 = params.alpha0, params.alpha1, params.alpha2

    def rhs(nd: np.ndarray, nr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = a0 * np.maximum(nd, 0.0) ** a1 * np.maximum(nr, 0.0) ** a2
        return f_d - m, f_r - m

    for _ in range(steps):
        k1d, k1r = rhs(n_d, n_r)
        k2d, k2r = rhs(n_d + 0.5 * dt * k1d, n_r + 0.5 * dt * k1r)
        k3d, k3r = rhs(n_d + 0.5 * dt * k2d, n_r + 0.5 * dt * k2r)
        k4d, k4r = rhs(n_d + dt * k3d, n_r + dt * k3r)
        n_d1 = np.maximum(0.0, n_d + dt * (k1d + 2 * k2d + 2 * k3d + k4d) / 6.0)
        n_r1 = np.maximum(0.0, n_r + dt * (k1r + 2 * k2r + 2 * k3r + k4r) / 6.0)
        tot_d += 0.5 * dt * (n_d + n_d1)
        tot_r += 0.5 * dt * (n_r + n_r1)
        n_d, n_r = n_d1, n_r1

    t_d = tot_d / (f_d * cfg.horizon)
    t_r = tot_r / (f_r * cfg.horizon)
    return t_d, t_r


def simulate_queue(f_d: float, f_r: float, params: MatchingParams,
                   cfg: QueueSimConfig = QueueSimConfig()) -> tuple[float, float]:
    """Average driver and rider waiting times over the study period.

    Integrates the queue dynamics dN_i/dt = f_i - m(N_D, N_R) with a
    fixed-step 4th-order scheme, accumulates total waits by trapezoid,
    and normalizes by f_i * T.
    """
    if f_d <= 0 or f_r <= 0:
        raise ValueError("arrival rates must be positive")
    t_d, t_r = _simulate_batch(np.array([f_d]), np.array([f_r]), params, cfg)
    return float(t_d[0]), float(t_r[0])


def default_flow_grid(low: float = 0.5, high: float = 60.0, n: int = 10
                      ) -> list[tuple[float, float]]:
    """Log-spaced n-by-n grid of (f_d, f_r) sample points."""
    axis = np.exp(np.linspace(math.log(low), math.log(high), n))
    return [(float(fd), float(fr)) for fd in axis for fr in axis]


def _ols_power_law(f_own: np.ndarray, f_cross: np.ndarray, t: np.ndarray) -> WaitFit:
    x = np.column_stack([np.ones_like(f_own), np.log(f_own), np.log(f_cross)])
    y = np.log(t)
    rank = np.linalg.matrix_rank(x)
    if rank < 3:
        raise ValueError("flow grid is collinear in log space")
    coef, _, _, _ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return WaitFit(a0=float(np.exp(coef[0])), a1=float(coef[1]), a2=float(coef[2]),
                   r_squared=r2, sample_count=len(t))


def fit_wait_regression(params: MatchingParams, cfg: QueueSimConfig = QueueSimConfig(),
                        f_grid: Sequence[tuple[float, float]] | None = None,
                        ) -> tuple[WaitFit, WaitFit]:
    """Simulate waits on a flow grid and fit the power law per side.

    Returns ``(driver_fit, rider_fit)``; each regresses ln t_i on
    (1, ln f_i, ln f_{-i}) by ordinary least squares.
    """
    if f_grid is None:
        f_grid = default_flow_grid()
    if len(f_grid) < 9:
        raise ValueError("need at least 9 grid points")
    f_d = np.array([p[0] for p in f_grid], dtype=float)
    f_r = np.array([p[1] for p in f_grid], dtype=float)
    if np.any(f_d <= 0) or np.any(f_r <= 0):
        raise ValueError("grid flows must be positive")
    t_d, t_r = _simulate_batch(f_d, f_r, params, cfg)
    driver = _ols_power_law(f_d, f_r, t_d)
    rider = _ols_power_law(f_r, f_d, t_r)
    return driver, rider


def write_samples_csv(path: str, params: MatchingParams,
                      cfg: QueueSimConfig = QueueSimConfig(),
                      f_grid: Sequence[tuple[float, float]] | None = None) -> None:
    """Dump the regression sample matrix as f_d,f_r,t_d,t_r rows."""
    if f_grid is None:
        f_grid = default_flow_grid()
    f_d = np.array([p[0] for p in f_grid], dtype=float)
    f_r = np.array([p[1] for p in f_grid], dtype=float)
    t_d, t_r = _simulate_batch(f_d, f_r, params, cfg)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["f_d", "f_r", "t_d", "t_r"])
        for row in zip(f_d, f_r, t_d, t_r):
            writer.writerow([f"{x:.12g}" for x in row])


def wait_time(fit: WaitFit, f_own: float, f_cross: float) -> float:
    """Power-law wait a0 * f_own**a1 * f_cross**a2 in minutes.

    Undefined at zero flow; callers floor flows at FLOW_FLOOR first.
    """
    if f_own <= 0 or f_cross <= 0:
        raise ValueError("flows must be positive")
    return fit.a0 * f_own**fit.a1 * f_cross**fit.a2


def augment_network(g: Network, rider_nodes: Iterable[int]) -> Network:
    """Add market, connector and rider-source structure per rider node.

    For each rider node s the original node keeps its road links and
    plays the connector role (s'); a market node (s) and a rider source
    (s'') are appended, wired with a driver wait link s'->s, a rider
    wait link s''->s and a zero-cost drive link s''->s'. Driver
    relocation to s then terminates at the market node, so matching time
    rides on the last link. Node and link counts grow by 2 and 3 per
    rider node.
    """
    rider_nodes = sorted(set(rider_nodes))
    if g.augmented is not None:
        raise ValueError("network is already augmented")
    for s in rider_nodes:
        if not (0 <= s < g.n_nodes):
            raise ValueError(f"rider node {s} not in network")
    if not rider_nodes:
        return g

    nodes = list(g.nodes)
    links = list(g.links)
    next_node = g.n_nodes
    next_link = max((l.id for l in g.links), default=-1) + 1
    markets: dict[int, MarketLinks] = {}
    for s in rider_nodes:
        nodes[s] = Node(s, NodeKind.CONNECTOR)
        market = next_node
        source = next_node + 1
        next_node += 2
        nodes.append(Node(market, NodeKind.MARKET))
        nodes.append(Node(source, NodeKind.RIDER_SOURCE))
        driver_wait = Link(next_link, s, market, 0.0, 1.0, 1,
                           cost_kind=CostKind.MATCHING_WAIT)
        rider_wait = Link(next_link + 1, source, market, 0.0, 1.0, 1,
                          cost_kind=CostKind.MATCHING_WAIT)
        drive = Link(next_link + 2, source, s, 0.0, 1.0, 1,
                     cost_kind=CostKind.ZERO)
        next_link += 3
        links.extend([driver_wait, rider_wait, drive])
        markets[s] = MarketLinks(market=market, connector=s, source=source,
                                 driver_wait_link=driver_wait.id,
                                 rider_wait_link=rider_wait.id,
                                 drive_link=drive.id)
    return build_network(nodes, links, augmented=markets)


def rider_equilibrium(f_d: float, rho: float, demand: float,
                      coeffs: RiderCoefficients, fit: WaitFit,
                      bracket_tol: float = 1e-10) -> float:
    """Ride-sourcing flow solving the riders' one-market choice problem.

    The strictly convex objective has derivative
    t_R(f_d, f) + (1/beta1p) * [ln f - ln(D - f) + beta2p*rho - beta0p],
    which runs from -inf at 0+ to +inf at D-, so bisection on (0, D)
    always finds the unique interior root.
    """
    if f_d <= 0:
        raise ValueError("driver flow must be positive")
    if demand <= 0:
        raise ValueError("rider demand must be positive")
    c = coeffs
    f_cross = max(f_d, FLOW_FLOOR) ** fit.a2

    def deriv(f: float) -> float:
        t_r = fit.a0 * f**fit.a1 * f_cross
        return t_r + (math.log(f) - math.log(demand - f)
                      + c.beta2p * rho - c.beta0p) / c.beta1p

    lo, hi = 0.0, demand
    # midpoint of (0, D) always exists; derivative sign drives the bracket
    while hi - lo > bracket_tol:
        mid = 0.5 * (lo + hi)
        if deriv(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
