"""Privacy-preserving approximate analytics over client data streams.

Clients sample themselves, randomize bucketized answers bit by bit, and
XOR-split the result across relays; the aggregator joins the shares,
de-biases windowed counts, and attaches combined sampling and
randomization error bounds.
"""

from .aggregator import Aggregator, HistoricalStore, WindowEstimate, estimate_window, historical_query
from .approx import srs_estimate, stratified_estimate, t_quantile
from .client import ClientAgent, ClientConfig, LocalStore, answer_epoch
from .harness import Scenario, run_scenario, sweep
from .privacy import RRCoins, debias_count, eps_dp, eps_rr, eps_zk, invert_budget
from .query import Budget, BucketSpec, ExecutionParams, Predicate, Query
from .transport import PlainMessage, Relay, join_decrypt, split_encrypt

__version__ = "0.1.0"

__all__ = [
    "Aggregator", "HistoricalStore", "WindowEstimate", "estimate_window", "historical_query",
    "srs_estimate", "stratified_estimate", "t_quantile",
    "ClientAgent", "ClientConfig", "LocalStore", "answer_epoch",
    "Scenario", "run_scenario", "sweep",
    "RRCoins", "debias_count", "eps_dp", "eps_rr", "eps_zk", "invert_budget",
    "Budget", "BucketSpec", "ExecutionParams", "Predicate", "Query",
    "PlainMessage", "Relay", "join_decrypt", "split_encrypt",
]
