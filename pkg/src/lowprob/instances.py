"""Small reproducible model/distribution pairs used by the tests and demos."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dist import TokenDistribution, uniform
from .errors import InputError
from .groundtruth import _enumerate_batches, exhaustive_distribution
from .microlm import ModelSpec, ModelWeights, forward_logits, init_weights

DEFAULT_GOALS = (5e-3, 2.5e-3, 1e-3, 5e-4, 2.5e-4)


def with_logit_offsets(weights: ModelWeights, offsets) -> ModelWeights:
    """Add the constant ``offsets[j]`` to logit ``j`` for every input.

    The final layer norm emits ``g * n + b`` where ``n`` always has zero mean,
    so its dot product with ``u = 1/g`` is the constant ``b @ u``. A rank-one
    unembed update along ``u`` is therefore an exact per-token logit shift.
    """
    g = weights["ln_final_w"]
    if np.any(g == 0):
        raise InputError("final layer-norm scale has a zero entry")
    u = 1.0 / g
    bu = float(weights["ln_final_b"] @ u)
    if abs(bu) < 1e-8:
        raise InputError("final layer-norm bias is orthogonal to 1/scale; offsets cannot be added")
    off = np.asarray(offsets, dtype=np.float64)
    return weights.replace(unembed=weights.W_U + np.outer(u / bu, off))


def calibrate_offsets(logits: np.ndarray, goals: dict, probs=None, sweeps: int = 20, rtol: float = 1e-3) -> np.ndarray:
    """Offsets making each token ``j`` in ``goals`` win with probability ``goals[j]``.

    ``logits`` is the full table over an enumerated input space with weights
    ``probs`` (uniform if omitted). Coordinate-wise: for fixed other offsets,
    token ``j`` wins exactly when its offset exceeds a per-row threshold, so
    the update is a weighted quantile of those thresholds.
    """
    L = np.asarray(logits, dtype=np.float64)
    w = np.full(len(L), 1.0 / len(L)) if probs is None else np.asarray(probs, dtype=np.float64)
    off = np.zeros(L.shape[1])
    for _ in range(sweeps):
        for j, goal in goals.items():
            thr = np.delete(L + off, j, axis=1).max(axis=1) - L[:, j]
            order = np.argsort(thr, kind="stable")
            cum = np.cumsum(w[order])
            i = min(np.searchsorted(cum, goal), len(thr) - 1)
            off[j] = thr[order[i]]
        won = np.bincount(np.argmax(L + off, axis=1), weights=w, minlength=L.shape[1])
        if all(abs(won[j] - g) <= rtol * g + 1.0 / len(L) for j, g in goals.items()):
            break
    return off


@dataclass(frozen=True)
class Instance:
    weights: ModelWeights
    dist: TokenDistribution
    probs: np.ndarray

    def band(self, lo: float, hi: float) -> list[int]:
        return [int(t) for t in np.flatnonzero((self.probs >= lo) & (self.probs <= hi))]


def enumerable_instance(n_layers=1, d_model=16, vocab_size=8, k=6, seed=0, goals=DEFAULT_GOALS) -> Instance:
    """Uniform inputs over ``vocab_size**k`` sequences with calibrated rare tokens.

    The ``len(goals)`` tokens that win least often in the random model get
    constant logit offsets so that they win with roughly the goal
    probabilities. ``probs`` is then recomputed exactly by enumeration. The
    defaults give 262,144 sequences and five tokens between 2.5e-4 and 5e-3.
    """
    spec = ModelSpec(n_layers, d_model, 4, 2 * d_model, vocab_size, k)
    dist = uniform(k, vocab_size)
    w = init_weights(spec, seed)
    parts = [(forward_logits(w, x), p) for x, p in _enumerate_batches(dist, 2**16)]
    L = np.concatenate([a for a, _ in parts])
    P = np.concatenate([p for _, p in parts])
    freq = np.bincount(np.argmax(L, axis=1), weights=P, minlength=vocab_size)
    rare = np.argsort(freq, kind="stable")[: len(goals)]
    # rarest base token gets the smallest goal
    off = calibrate_offsets(L, dict(zip(rare.tolist(), sorted(goals))), P)
    w = with_logit_offsets(w, off)
    return Instance(w, dist, exhaustive_distribution(w, dist))
