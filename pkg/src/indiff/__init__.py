"""Engine for discrete-time trading at market indifference prices.

Market makers with bounded-risk-aversion utilities quote cash balances
that leave their conditional expected utilities unchanged by each trade.
The package evolves that system on finite scenario trees, searches
superreplication prices with attainment diagnostics, characterizes
completeness of binomial models, and verifies the exponential-tail and
risk-aversion conditions under which extreme positions force extreme
losses.
"""

from .binomial import (BinomialModel, attainable_ratio_interval, completeness_check,
                       replicate, replication_verify)
from .dynamics import (SystemPath, conjugacy_check, evolve, indifference_step,
                       investor_pnl)
from .errors import (BudgetExceeded, ConfigError, IndiffError, Infeasible,
                     InvalidParams, MultiAssetUnsupported, NonConvergence,
                     NotBinomial, Overflow, StabilizationMissing)
from .pareto import (MarketMakerPanel, ParetoAllocation, UtilitySpec,
                     conditional_utility_floor, envelope_bounds, initial_weights,
                     representative_risk_aversion, representative_utility)
from .superrep import (SearchConfig, SuperrepResult, cash_ratio_asymptotics,
                       counterexample_run, counterexample_tree,
                       efficient_friction_probe, superreplication_price)
from .tails import (BNSParams, LevyTriplet, bns_laplace, bns_sample_paths,
                    bns_tails_check, decreasing_tails_check, levy_exponent,
                    levy_tails_check, tail_dominance)
from .tree import (ConditionalDistribution, ScenarioTree, Strategy, binomial_tree,
                   conditional_distribution, conditional_expectation,
                   conditional_extrema, extrema_processes, single_period_tree)

__version__ = "0.1.0"
