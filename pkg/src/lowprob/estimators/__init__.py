"""Estimators of Pr[argmax = t] under an independent-token input distribution."""
from .activation import (
    AcceptanceInterval,
    AcceptingVector,
    ActivationSample,
    GldStats,
    WhiteningTransform,
    acceptance_interval,
    acceptance_intervals,
    collect_activations,
    count_accepting_pairs,
    gap_stats,
    gaussian_tail,
    gld,
    gld_estimate,
    gld_stats,
    logit_gap,
    qld,
    qld_from_activations,
    shortest_accepting_vector,
    whiten,
)
from .importance import (
    ChainRun,
    itgis,
    mh_acceptance_ratio,
    mhis,
    mhis_proposal,
    naive_mc,
    run_chains,
)
from .records import METHODS, EstimateRecord, EstimatorBudget, read_records, write_records


def run_estimator(method, weights, dist, t, budget=None, T=1.0, rng=None):
    """Dispatch by method name; ``budget`` may be an ``EstimatorBudget`` or a call count."""
    if budget is None or isinstance(budget, int):
        budget = EstimatorBudget.for_method(method, budget or 2**12)
    if method == "itgis":
        return itgis(weights, dist, t, budget, T=T, rng=rng)
    if method == "mhis":
        return mhis(weights, dist, t, budget, T=T, rng=rng)
    if method == "qld":
        return qld(weights, dist, t, budget.n_samples, rng=rng)
    if method == "gld":
        return gld(weights, dist, t, budget.n_samples, rng=rng)
    if method == "naive":
        return naive_mc(weights, dist, t, budget, rng=rng)
    raise ValueError(f"unknown method {method!r}")
