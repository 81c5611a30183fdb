"""Importance-sampling estimators: independent-token gradient (ITGIS) and
Metropolis-Hastings (MHIS), plus plain Monte Carlo for comparison."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ..dist import TokenDistribution, log_pmf, sample, tilt_independent
from ..errors import InputError, NumericError
from ..microlm import ModelWeights, argmax_token, forward_logits, logits_and_grad
from ..rng import as_generator
from .records import EstimateRecord, EstimatorBudget

DEFAULT_ALPHA = 0.9


def naive_mc(weights, dist, t, budget=None, rng=None) -> EstimateRecord:
    """Fraction of samples from ``dist`` whose argmax is ``t``.

    Draws batches exactly the way ``itgis`` does, so with an untilted proposal
    the two consume the random stream identically.
    """
    budget = budget or EstimatorBudget.for_method("naive", 2**12)
    budget.check("naive")
    rng = as_generator(rng)
    hits = 0
    for _ in range(budget.n_batches):
        x = sample(dist, rng, budget.batch_size)
        hits += int(np.sum(argmax_token(forward_logits(weights, x)) == t))
    n = budget.n_batches * budget.batch_size
    return EstimateRecord("naive", int(t), hits / n, n, {"n_positive": hits})


def itgis(
    weights: ModelWeights,
    dist: TokenDistribution,
    t: int,
    budget: EstimatorBudget | None = None,
    T: float = 1.0,
    alpha: float = DEFAULT_ALPHA,
    rng=None,
) -> EstimateRecord:
    """Independent-token gradient importance sampling.

    Each batch samples from ``p`` tilted by the current score table, then folds
    the batch-mean one-hot gradient of logit ``t`` into the scores with an
    exponentially weighted moving average (decay ``alpha``). The result is the
    mean of the per-batch importance estimates.
    """
    if not T > 0:
        raise InputError("temperature must be positive")
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    budget = budget or EstimatorBudget.for_method("itgis", 2**12)
    budget.check("itgis")
    rng = as_generator(rng)

    scores = np.zeros_like(dist.probs)
    weighted_sum = np.zeros_like(dist.probs)
    weight_total = 0.0
    batch_estimates = []
    n_positive = 0
    for j in range(budget.n_batches):
        try:
            q = tilt_independent(dist, scores, T)
        except NumericError as e:
            raise NumericError(
                f"ITGIS batch {j}: tilted proposal degenerate (T={T}, "
                f"max |score|={np.abs(scores).max():.3g})"
            ) from e
        x = sample(q, rng, budget.batch_size)
        logits, grads = logits_and_grad(weights, x, t)

        weighted_sum = grads.mean(axis=0) + alpha * weighted_sum
        weight_total = 1.0 + alpha * weight_total
        scores = weighted_sum / weight_total

        hit = argmax_token(logits) == t
        n_positive += int(hit.sum())
        log_ratio = log_pmf(dist, x[hit]) - log_pmf(q, x[hit])
        batch_estimates.append(np.exp(log_ratio).sum() / budget.batch_size)

    estimate = float(np.mean(batch_estimates))
    if not np.isfinite(estimate):
        raise NumericError("ITGIS produced a non-finite estimate")
    return EstimateRecord(
        "itgis", int(t), estimate, budget.n_batches * budget.batch_size,
        {"n_positive": n_positive, "temperature": T,
         "batch_estimates_std": float(np.std(batch_estimates))},
    )


# ----------------------------------------------------------------------------
# Metropolis-Hastings


def _proposal_logprobs(dist: TokenDistribution, pos: np.ndarray, g: np.ndarray, T: float) -> np.ndarray:
    """log of the replacement distribution ∝ p_pos(w) exp(g_w / T), rows [C, V]."""
    z = dist.log_probs[pos] + g / T
    return z - logsumexp(z, axis=1, keepdims=True)


def _propose(weights, dist, t, x, grads, T, rng):
    """Batched proposal: one position per chain resampled from the gradient tilt."""
    C, k = x.shape
    rows = np.arange(C)
    pos = rng.integers(0, k, size=C)
    fwd_table = _proposal_logprobs(dist, pos, grads[rows, pos], T)
    new_tok = np.argmax(fwd_table + rng.gumbel(size=fwd_table.shape), axis=1)
    x_new = x.copy()
    x_new[rows, pos] = new_tok
    logits_new, grads_new = logits_and_grad(weights, x_new, t)
    rev_table = _proposal_logprobs(dist, pos, grads_new[rows, pos], T)
    log_k = np.log(k)
    fwd = fwd_table[rows, new_tok] - log_k
    rev = rev_table[rows, x[rows, pos]] - log_k
    return x_new, pos, fwd, rev, logits_new, grads_new


def mhis_proposal(weights, dist, t, x, T, rng):
    """Propose ``x'`` from ``x``; returns ``(x', log φ(x'|x), log φ(x|x'))``.

    The log weights include the 1/k position choice, so for ``x' != x`` they are
    the exact proposal probabilities. A batch ``x`` of shape [C, k] gives one
    independent proposal per row and array-valued weights.
    """
    x = np.asarray(x, dtype=np.int64)
    single = x.ndim == 1
    xb = x[None] if single else x
    _, grads = logits_and_grad(weights, xb, t)
    x_new, _, fwd, rev, _, _ = _propose(weights, dist, t, xb, grads, T, as_generator(rng))
    if single:
        return x_new[0], float(fwd[0]), float(rev[0])
    return x_new, fwd, rev


def _log_ratio(dist, T, x, x_new, mt, mt_new, fwd, rev):
    lp = log_pmf(dist, x_new) - log_pmf(dist, x)
    return lp + (mt_new - mt) / T + rev - fwd


def mh_acceptance_ratio(weights, dist, t, T, x, x_new, logweights) -> float:
    """``q(x')φ(x|x') / (q(x)φ(x'|x))`` for ``q ∝ p exp(M_t / T)``, unclipped."""
    x = np.asarray(x)
    x_new = np.asarray(x_new)
    if x.shape != x_new.shape or np.count_nonzero(x != x_new) > 1:
        raise InputError("x and x' must differ in at most one position")
    fwd, rev = logweights
    mt, mt_new = forward_logits(weights, np.stack([x, x_new]))[:, t]
    return float(np.exp(_log_ratio(dist, T, x, x_new, mt, mt_new, fwd, rev)))


@dataclass
class ChainRun:
    """Kept states of a batch of MH walks (``[n_kept, n_chains, k]``)."""

    states: np.ndarray
    target_logits: np.ndarray
    hits: np.ndarray
    n_accepted: int
    n_proposed: int
    model_calls: int


def run_chains(weights, dist, t, T, n_chains, n_burn, n_kept, rng, x0=None) -> ChainRun:
    """Independent MH walks targeting ``q(x) ∝ p(x) exp(M_t(x) / T)``."""
    if not T > 0:
        raise InputError("temperature must be positive")
    rng = as_generator(rng)
    x = sample(dist, rng, n_chains) if x0 is None else np.array(x0, dtype=np.int64)
    logits, grads = logits_and_grad(weights, x, t)
    calls = len(x)
    states = np.empty((n_kept, n_chains, dist.k), dtype=np.int64)
    target_logits = np.empty((n_kept, n_chains))
    hits = np.empty((n_kept, n_chains), dtype=bool)
    n_accepted = 0
    for step in range(n_burn + n_kept):
        x_new, _, fwd, rev, logits_new, grads_new = _propose(weights, dist, t, x, grads, T, rng)
        calls += n_chains
        log_r = _log_ratio(dist, T, x, x_new, logits[:, t], logits_new[:, t], fwd, rev)
        if np.any(np.isnan(log_r)):
            raise NumericError("NaN in Metropolis-Hastings acceptance ratio")
        accept = np.log(rng.random(n_chains)) < log_r
        n_accepted += int(accept.sum())
        x = np.where(accept[:, None], x_new, x)
        logits = np.where(accept[:, None], logits_new, logits)
        grads = np.where(accept[:, None, None], grads_new, grads)
        if step >= n_burn:
            i = step - n_burn
            states[i] = x
            target_logits[i] = logits[:, t]
            hits[i] = argmax_token(logits) == t
    return ChainRun(states, target_logits, hits, n_accepted, (n_burn + n_kept) * n_chains, calls)


def mhis(
    weights: ModelWeights,
    dist: TokenDistribution,
    t: int,
    budget: EstimatorBudget | None = None,
    T: float = 1.0,
    rng=None,
) -> EstimateRecord:
    """Metropolis-Hastings importance sampling.

    The walk targets ``q ∝ p exp(M_t / T)``. With ``Z = E_p[exp(M_t / T)]``
    estimated from the same kept samples as ``1 / mean(exp(-M_t / T))``, the
    importance weight ``p/q`` is ``Z exp(-M_t / T)``.
    """
    budget = budget or EstimatorBudget.for_method("mhis", 2**12)
    budget.check("mhis")
    run = run_chains(weights, dist, t, T, budget.n_chains, budget.n_burn, budget.n_kept, rng)
    log_w = -run.target_logits.ravel() / T
    hits = run.hits.ravel()
    log_mean_inv = logsumexp(log_w) - np.log(len(log_w))
    if hits.any():
        estimate = float(np.exp(logsumexp(log_w[hits]) - logsumexp(log_w)))
    else:
        estimate = 0.0
    if not np.isfinite(estimate):
        raise NumericError("MHIS produced a non-finite estimate")
    return EstimateRecord(
        "mhis", int(t), estimate, run.model_calls,
        {"n_positive": int(hits.sum()), "temperature": T,
         "acceptance_rate": run.n_accepted / run.n_proposed,
         "log_normalizer": float(-log_mean_inv)},
    )
