"""Spatial pricing of ride-sourcing services on congested road networks.

Lower level: a combined distribution and assignment (CDA) equilibrium
of driver relocation, routing, and (optionally) rider mode choice with
matching queues. Upper level: unique supply-demand balancing prices by
fixed point, bisection, or single-level dual decomposition when
matching time is ignored, and an augmented-Walrasian maxinf search when
it is not; plus a profit-maximizing alternative objective.
"""

from .network import (
    CostKind,
    Link,
    Network,
    NetworkParseError,
    Node,
    NodeKind,
    ODPair,
    bpr_integral,
    bpr_time,
    build_network,
    load_network,
    shortest_path,
)
from .cda import (
    CdaProblem,
    DiagonalizedSolution,
    EquilibriumSolution,
    UtilityCoefficients,
    WardropReport,
    check_wardrop,
    driver_utility,
    logit_distribution,
    solve_cda,
    solve_diagonalized,
    total_travel_time,
)
from .matching import (
    MatchingModel,
    MatchingParams,
    QueueSimConfig,
    RiderCoefficients,
    WaitFit,
    augment_network,
    fit_wait_regression,
    rider_equilibrium,
    simulate_queue,
    wait_time,
)
from .pricing import (
    DemandModel,
    ImbalanceReport,
    PriceVector,
    aggregate_clearing_price,
    bisection_prices,
    excess_supply,
    fixed_point_prices,
    maximize_profit,
    price_bounds,
    profit,
    solve_single_level,
)
from .walrasian import (
    JointEquilibriumEvaluator,
    WalrasSchedule,
    algorithm1,
    augmented_w,
    es_squared,
    maximize_over_box,
    project_simplex,
    walrasian_w,
)

__version__ = "0.1.0"
