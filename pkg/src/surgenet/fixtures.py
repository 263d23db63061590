"""Packaged test instances: three-node, Sioux Falls, and a 5-node net.

The three-node instance has one driver node (0) and two rider nodes
(1, 2); all links share t0 = 10 min and capacity 10 veh/h except the
pair between nodes 0 and 2 at capacity 5, with quadratic BPR delay.
Sioux Falls carries 24 nodes and 76 links with 4th-order BPR costs,
12 driver nodes and 12 rider nodes, supply 50 per driver node and
demand 300 - 5 rho per rider node.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .cda import CdaProblem, UtilityCoefficients
from .matching import MatchingModel, RiderCoefficients, WaitFit, augment_network
from .network import Network, load_network
from .pricing import DemandModel

__all__ = [
    "three_node_network",
    "three_node_problem",
    "three_node_matching",
    "sioux_falls_network",
    "sioux_falls_problem",
    "sioux_falls_matching",
    "five_node_problem",
    "REFERENCE_WAIT_FIT",
]

#: Reference least-squares wait-time coefficients for the base matching
#: configuration (alpha0=0.1, alpha1=alpha2=0.6).
REFERENCE_WAIT_FIT = WaitFit(a0=6.29, a1=2.24, a2=-2.40)

THREE_NODE_SUPPLY = 50.0
SIOUX_FALLS_SUPPLY = 50.0


def _read_data(name: str) -> str:
    return resources.files("surgenet.data").joinpath(name).read_text()


def three_node_network() -> Network:
    return load_network(_read_data("three_node.net"))


def three_node_problem(beta2: float = 0.6, prices: np.ndarray | None = None
                       ) -> tuple[CdaProblem, DemandModel]:
    """Three-node instance: 50 drivers at node 0, riders at nodes 1 and 2."""
    net = three_node_network().with_roles(driver_origins=[0],
                                          rider_destinations=[1, 2])
    coeffs = UtilityCoefficients(beta0=0.0, beta1=1.0, beta2=beta2)
    if prices is None:
        prices = np.zeros(2)
    problem = CdaProblem(network=net, supplies={0: THREE_NODE_SUPPLY},
                         destinations=(1, 2), prices=prices, coeffs=coeffs)
    demand = DemandModel(D=np.array([300.0, 300.0]), b=np.array([5.0, 5.0]))
    return problem, demand


def three_node_matching(fit: WaitFit = REFERENCE_WAIT_FIT,
                        rider_attractiveness: float = 24.0,
                        prices: np.ndarray | None = None
                        ) -> tuple[CdaProblem, MatchingModel]:
    """Augmented three-node instance for the matching-time upper level.

    Rider utility keeps beta1' = 1 and beta2' = 0.6; the attractiveness
    constant is calibrated so the non-trivial equilibrium sits in the
    high-thirties price range bracketed by the standard starting boxes.
    """
    base = three_node_network()
    net = augment_network(base, [1, 2])
    assert net.augmented is not None
    markets = tuple(net.augmented[s].market for s in (1, 2))
    coeffs = UtilityCoefficients(beta0=0.0, beta1=1.0, beta2=0.6)
    if prices is None:
        prices = np.zeros(2)
    problem = CdaProblem(network=net, supplies={0: THREE_NODE_SUPPLY},
                         destinations=markets, prices=prices, coeffs=coeffs)
    model = MatchingModel(
        driver_fit=fit, rider_fit=fit,
        rider_coeffs=RiderCoefficients(beta0p=rider_attractiveness,
                                       beta1p=1.0, beta2p=0.6),
        rider_demand={m: 300.0 for m in markets})
    return problem, model


def sioux_falls_network() -> Network:
    return load_network(_read_data("sioux_falls.net"))


def sioux_falls_driver_nodes() -> tuple[int, ...]:
    # paper numbering 2, 4, ..., 24
    return tuple(range(1, 24, 2))


def sioux_falls_rider_nodes() -> tuple[int, ...]:
    # paper numbering 1, 3, ..., 23
    return tuple(range(0, 24, 2))


def sioux_falls_problem(beta2: float = 0.6, prices: np.ndarray | None = None
                        ) -> tuple[CdaProblem, DemandModel]:
    """Sioux Falls: 12 driver nodes at Q=50, 12 rider nodes, d = 300 - 5 rho."""
    drivers = sioux_falls_driver_nodes()
    riders = sioux_falls_rider_nodes()
    net = sioux_falls_network().with_roles(driver_origins=drivers,
                                           rider_destinations=riders)
    coeffs = UtilityCoefficients(beta0=0.0, beta1=1.0, beta2=beta2)
    if prices is None:
        prices = np.zeros(len(riders))
    problem = CdaProblem(network=net,
                         supplies={r: SIOUX_FALLS_SUPPLY for r in drivers},
                         destinations=riders, prices=prices, coeffs=coeffs)
    demand = DemandModel(D=np.full(len(riders), 300.0),
                         b=np.full(len(riders), 5.0))
    return problem, demand


def sioux_falls_matching(fit: WaitFit = REFERENCE_WAIT_FIT,
                         rider_attractiveness: float = 32.0,
                         prices: np.ndarray | None = None
                         ) -> tuple[CdaProblem, MatchingModel]:
    """Augmented Sioux Falls for matching-time runs (expensive)."""
    riders = sioux_falls_rider_nodes()
    drivers = sioux_falls_driver_nodes()
    net = augment_network(sioux_falls_network(), riders)
    assert net.augmented is not None
    markets = tuple(net.augmented[s].market for s in riders)
    coeffs = UtilityCoefficients(beta0=0.0, beta1=1.0, beta2=0.6)
    if prices is None:
        prices = np.zeros(len(markets))
    problem = CdaProblem(network=net,
                         supplies={r: SIOUX_FALLS_SUPPLY for r in drivers},
                         destinations=markets, prices=prices, coeffs=coeffs)
    model = MatchingModel(
        driver_fit=fit, rider_fit=fit,
        rider_coeffs=RiderCoefficients(beta0p=rider_attractiveness,
                                       beta1p=1.0, beta2p=0.6),
        rider_demand={m: 300.0 for m in markets})
    return problem, model


def five_node_problem(seed: int = 5, prices: np.ndarray | None = None
                      ) -> tuple[CdaProblem, DemandModel]:
    """Seeded 5-node instance: ring plus chords, 2 origins, 2 destinations."""
    rng = np.random.default_rng(seed)
    pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0),
             (1, 0), (2, 1), (3, 2), (4, 3), (0, 4),
             (0, 2), (2, 0), (1, 3), (3, 1)]
    lines = ["nodes 5"]
    for i, (a, b) in enumerate(pairs, start=1):
        t0 = float(rng.integers(4, 10))
        cap = float(rng.integers(15, 40))
        lines.append(f"{i} {a} {b} {t0} {cap} 2")
    net = load_network("\n".join(lines)).with_roles(driver_origins=[0, 1],
                                                    rider_destinations=[3, 4])
    coeffs = UtilityCoefficients(beta0=0.0, beta1=1.0, beta2=0.6)
    if prices is None:
        prices = np.zeros(2)
    problem = CdaProblem(network=net, supplies={0: 30.0, 1: 30.0},
                         destinations=(3, 4), prices=prices, coeffs=coeffs)
    demand = DemandModel(D=np.array([150.0, 150.0]), b=np.array([4.0, 4.0]))
    return problem, demand
