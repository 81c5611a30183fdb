"""Activation-extrapolation estimators.

QLD whitens the pre-unembed activations, splits each whitened sample into a
component along a chosen direction and a perpendicular remainder, and counts
how many of the n² recombined pairs land in the acceptance region

    S = {u : argmax((A u + mu) @ W_U) = t},

which is an intersection of half-spaces. GLD summarizes the gap between the
target logit and the best competitor by its mean and standard deviation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr

from ..dist import TokenDistribution, sample
from ..errors import ConvergenceError, InputError, NumericError
from ..microlm import ModelWeights, argmax_token, pre_unembed
from ..rng import as_generator
from .records import EstimateRecord

EPS_REL = 1e-6
DEFAULT_N_REPS = 200
DEFAULT_TOL = 1e-6
SHRINK = 0.99


@dataclass(frozen=True)
class WhiteningTransform:
    mu: np.ndarray
    A: np.ndarray
    eps: float

    def whiten(self, v: np.ndarray) -> np.ndarray:
        return solve_triangular(self.A, (np.asarray(v) - self.mu).T, lower=True).T

    def unwhiten(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u) @ self.A.T + self.mu

    def margin_system(self, W_U: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Half-spaces of S: ``normals @ u + offsets >= 0`` for each competitor.

        Row ``j`` is ``logit_t(u) - logit_j(u)``; also returns the competitor ids.
        """
        W_U = np.asarray(W_U)
        if not 0 <= t < W_U.shape[1]:
            raise InputError("target token out of range")
        Wt = self.A.T @ W_U
        c = self.mu @ W_U
        others = np.delete(np.arange(W_U.shape[1]), t)
        normals = (Wt[:, t][:, None] - Wt[:, others]).T
        offsets = c[t] - c[others]
        return normals, offsets, others


def whiten(samples, eps: float | None = None) -> tuple[WhiteningTransform, np.ndarray]:
    """Empirical whitening ``u = A^{-1}(v - mu)`` with ``A A^T = Sigma + eps I``.

    Sigma uses the population (divide-by-n) convention; by default
    ``eps = 1e-6 * trace(Sigma) / d`` (or ``1e-6`` if the trace is zero).
    """
    v = np.asarray(samples, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise InputError("whitening needs at least 2 samples of shape [n, d]")
    n, d = v.shape
    mu = v.mean(axis=0)
    xc = v - mu
    sigma = xc.T @ xc / n
    if eps is None:
        tr = np.trace(sigma)
        eps = EPS_REL * tr / d if tr > 0 else EPS_REL
    try:
        A = np.linalg.cholesky(sigma + eps * np.eye(d))
    except np.linalg.LinAlgError as e:
        raise NumericError(f"Cholesky factorization failed with eps={eps:g}") from e
    u = solve_triangular(A, xc.T, lower=True).T
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite whitened samples")
    return WhiteningTransform(mu, A, float(eps)), u


@dataclass(frozen=True)
class AcceptingVector:
    point: np.ndarray
    direction: np.ndarray
    steps: int
    origin_accepted: bool


def shortest_accepting_vector(
    transform: WhiteningTransform,
    W_U,
    t: int,
    n_reps: int = DEFAULT_N_REPS,
    tol: float = DEFAULT_TOL,
    rng=None,
) -> AcceptingVector:
    """Approximate ``argmin_{u in S} |u|`` by random constraint projection.

    From the origin, repeatedly project onto a uniformly chosen violated
    half-space. Once the point is in S (margins >= -tol) it is shrunk by 0.99
    until ``n_reps`` steps have passed; the first member reached by a projection
    after that is returned. Gives up after ``100 * n_reps`` steps.

    If the origin itself is in S the direction is undefined; the mean of the
    half-space normals is returned instead and ``origin_accepted`` is set.
    """
    rng = as_generator(rng)
    normals, offsets, _ = transform.margin_system(W_U, t)
    norms_sq = np.einsum("ij,ij->i", normals, normals)
    d = normals.shape[1]
    if np.all(offsets >= -tol):
        direction = normals.mean(axis=0)
        nrm = np.linalg.norm(direction)
        direction = direction / nrm if nrm > 0 else np.eye(d)[0]
        return AcceptingVector(np.zeros(d), direction, 0, True)

    x = np.zeros(d)
    for step in range(1, 100 * n_reps + 1):
        margins = normals @ x + offsets
        violated = np.flatnonzero(margins < -tol)
        projected = False
        if len(violated):
            j = violated[rng.integers(len(violated))]
            if norms_sq[j] == 0:
                raise ConvergenceError("constraint with zero normal is unsatisfiable")
            x = x - (margins[j] / norms_sq[j]) * normals[j]
            projected = True
        if np.all(normals @ x + offsets >= -tol):
            if step < n_reps or not projected:
                x = SHRINK * x
            else:
                return AcceptingVector(x, x / np.linalg.norm(x), step, False)
    raise ConvergenceError(
        f"no accepting vector after {100 * n_reps} steps (region empty or tol too tight)"
    )


@dataclass(frozen=True)
class AcceptanceInterval:
    lo: float
    hi: float
    empty: bool

    def __contains__(self, a: float) -> bool:
        return (not self.empty) and self.lo <= a <= self.hi


def _intervals(slopes: np.ndarray, intercepts: np.ndarray):
    """Solve ``a * slopes + intercepts >= 0`` jointly over the last axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        roots = -intercepts / slopes
    lo = np.max(np.where(slopes > 0, roots, -np.inf), axis=-1)
    hi = np.min(np.where(slopes < 0, roots, np.inf), axis=-1)
    flat_bad = np.any((slopes == 0) & (intercepts < 0), axis=-1)
    empty = flat_bad | (lo > hi)
    return lo, hi, empty


def acceptance_intervals(B, direction, transform, W_U, t):
    """Vectorized ``acceptance_interval`` for each row of ``B``; returns (lo, hi, empty)."""
    normals, offsets, _ = transform.margin_system(W_U, t)
    slopes = normals @ direction
    intercepts = np.asarray(B) @ normals.T + offsets
    return _intervals(slopes, intercepts)


def acceptance_interval(b, direction, transform, W_U, t) -> AcceptanceInterval:
    """``{a : a * direction + b in S}``, a single (possibly empty or unbounded) interval."""
    lo, hi, empty = acceptance_intervals(np.asarray(b)[None], direction, transform, W_U, t)
    return AcceptanceInterval(float(lo[0]), float(hi[0]), bool(empty[0]))


def count_accepting_pairs(u, direction, transform, W_U, t) -> int:
    """Number of pairs (i, j) with ``a_i d + b_j`` in S, in O(n log n + nV)."""
    u = np.asarray(u)
    alphas = u @ direction
    B = u - np.outer(alphas, direction)
    lo, hi, empty = acceptance_intervals(B, direction, transform, W_U, t)
    alphas = np.sort(alphas)
    counts = np.searchsorted(alphas, hi, side="right") - np.searchsorted(alphas, lo, side="left")
    return int(np.sum(np.where(empty, 0, np.maximum(counts, 0))))


@dataclass(frozen=True)
class ActivationSample:
    """Pre-unembed activations collected once and shared across targets."""

    v: np.ndarray
    transform: WhiteningTransform
    u: np.ndarray
    winners: np.ndarray


def collect_activations(weights, dist, n, rng=None, batch: int = 2**14) -> ActivationSample:
    if n < 2:
        raise InputError("need at least 2 samples")
    rng = as_generator(rng)
    parts = []
    done = 0
    while done < n:
        b = min(batch, n - done)
        parts.append(pre_unembed(weights, sample(dist, rng, b)))
        done += b
    v = np.concatenate(parts)
    transform, u = whiten(v)
    return ActivationSample(v, transform, u, argmax_token(v @ weights.W_U))


def qld_from_activations(
    acts: ActivationSample, W_U, t: int,
    n_reps: int = DEFAULT_N_REPS, tol: float = DEFAULT_TOL, rng=None,
) -> EstimateRecord:
    n = len(acts.u)
    diagonal = float(np.mean(acts.winners == t))
    diag = {"diagonal_estimate": diagonal}
    if np.all(acts.winners == t):
        return EstimateRecord("qld", int(t), diagonal, n, dict(diag, fallback="all_samples_accept"))
    try:
        sv = shortest_accepting_vector(acts.transform, W_U, t, n_reps=n_reps, tol=tol, rng=rng)
    except ConvergenceError as e:
        return EstimateRecord("qld", int(t), diagonal, n, dict(diag, fallback=f"shortest_vector: {e}"))
    count = count_accepting_pairs(acts.u, sv.direction, acts.transform, W_U, t)
    diag.update(
        pair_count=count,
        shortest_norm=float(np.linalg.norm(sv.point)),
        projection_steps=sv.steps,
        origin_accepted=sv.origin_accepted,
    )
    return EstimateRecord("qld", int(t), count / n**2, n, diag)


def qld(weights: ModelWeights, dist: TokenDistribution, t: int, n: int = 2**12, rng=None, **kw) -> EstimateRecord:
    """Quadratic logit decomposition estimate of Pr[argmax = t]."""
    rng = as_generator(rng)
    acts = collect_activations(weights, dist, n, rng)
    return qld_from_activations(acts, weights.W_U, t, rng=rng, **kw)


# ----------------------------------------------------------------------------
# Gaussian logit difference


@dataclass(frozen=True)
class GldStats:
    mu: float
    sigma: float


def logit_gap(logits, t: int) -> np.ndarray:
    """``logit_t - max_{j != t} logit_j`` per row."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    others = np.delete(logits, t, axis=1)
    return logits[:, t] - others.max(axis=1)


def gap_stats(gaps) -> GldStats:
    gaps = np.asarray(gaps, dtype=np.float64)
    return GldStats(float(gaps.mean()), float(gaps.std()))


def gld_stats(weights, dist, t: int, n: int = 2**12, rng=None, batch: int = 2**14) -> GldStats:
    if n < 2:
        raise InputError("need at least 2 samples")
    rng = as_generator(rng)
    gaps = []
    done = 0
    while done < n:
        b = min(batch, n - done)
        gaps.append(logit_gap(pre_unembed(weights, sample(dist, rng, b)) @ weights.W_U, t))
        done += b
    return gap_stats(np.concatenate(gaps))


def gaussian_tail(stats: GldStats) -> float:
    """Pr[N(mu, sigma^2) >= 0]."""
    if stats.sigma == 0:
        return 1.0 if stats.mu >= 0 else 0.0
    return float(np.exp(log_ndtr(stats.mu / stats.sigma)))


def gld(weights, dist, t: int, n: int = 2**12, rng=None) -> EstimateRecord:
    """Raw GLD record: the gap statistics, with the plain Gaussian tail as the estimate."""
    stats = gld_stats(weights, dist, t, n, rng)
    return EstimateRecord("gld", int(t), gaussian_tail(stats), n,
                          {"mu": stats.mu, "sigma": stats.sigma})


def gld_estimate(stats: GldStats, a: float, b: float, c: float, eps: float) -> float:
    """``exp(-(a mu / (sigma + eps))^2 + b) + c``."""
    denom = stats.sigma + eps
    if not denom > 0:
        raise InputError("sigma + eps must be positive")
    return float(np.exp(-((a * stats.mu / denom) ** 2) + b) + c)
