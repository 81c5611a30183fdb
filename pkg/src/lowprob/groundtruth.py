"""Ground-truth argmax probabilities: exact enumeration and Monte Carlo counts."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dist import TokenDistribution, sample
from .errors import InputError
from .microlm import ModelWeights, argmax_token, forward_logits
from .rng import stream

log = logging.getLogger(__name__)

DEFAULT_ENUM_CAP = 2**20
DEFAULT_BATCH = 2**14


@dataclass(frozen=True)
class TokenCounts:
    counts: np.ndarray
    n_samples: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.sum() != self.n_samples:
            raise InputError("counts do not sum to n_samples")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.n_samples

    def __add__(self, other: "TokenCounts") -> "TokenCounts":
        return TokenCounts(self.counts + other.counts, self.n_samples + other.n_samples)


@dataclass(frozen=True)
class TargetSet:
    tokens: tuple[int, ...]
    probabilities: tuple[float, ...]

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(zip(self.tokens, self.probabilities))


def _enumerate_batches(dist: TokenDistribution, batch: int):
    """Yield (tokens [b, k], probs [b]) over the support, in lexicographic order."""
    supports = dist.supports
    sizes = np.array([len(s) for s in supports], dtype=np.int64)
    total = int(np.prod(sizes))
    strides = np.ones(dist.k, dtype=np.int64)
    for i in range(dist.k - 2, -1, -1):
        strides[i] = strides[i + 1] * sizes[i + 1]
    for start in range(0, total, batch):
        flat = np.arange(start, min(start + batch, total), dtype=np.int64)
        digits = (flat[:, None] // strides[None, :]) % sizes[None, :]
        tokens = np.empty_like(digits)
        probs = np.ones(len(flat))
        for i in range(dist.k):
            tokens[:, i] = supports[i][digits[:, i]]
            probs *= dist.probs[i, tokens[:, i]]
        yield tokens, probs


def exhaustive_distribution(
    weights: ModelWeights,
    dist: TokenDistribution,
    cap: int = DEFAULT_ENUM_CAP,
    batch: int = DEFAULT_BATCH,
) -> np.ndarray:
    """Exact probability of every token being the argmax, shape [V]."""
    size = dist.support_size()
    if size > cap:
        raise InputError(f"support has {size} sequences, over the enumeration cap {cap}")
    out = np.zeros(weights.spec.vocab_size)
    for tokens, probs in _enumerate_batches(dist, batch):
        winners = argmax_token(forward_logits(weights, tokens))
        out += np.bincount(winners, weights=probs, minlength=len(out))
    return out


def exhaustive_probability(weights, dist, t: int, cap: int = DEFAULT_ENUM_CAP) -> float:
    """Exact Pr[argmax = t] by enumerating the support."""
    return float(exhaustive_distribution(weights, dist, cap=cap)[t])


def exhaustive_expectation(weights, dist, fn, cap: int = DEFAULT_ENUM_CAP) -> float:
    """E_p[fn(logits)] by enumeration; ``fn`` maps [b, V] logits to [b] values."""
    size = dist.support_size()
    if size > cap:
        raise InputError(f"support has {size} sequences, over the enumeration cap {cap}")
    total = 0.0
    for tokens, probs in _enumerate_batches(dist, DEFAULT_BATCH):
        total += float(probs @ fn(forward_logits(weights, tokens)))
    return total


def _count_shard(weights, dist, n, rng, batch):
    counts = np.zeros(weights.spec.vocab_size, dtype=np.int64)
    done = 0
    while done < n:
        b = min(batch, n - done)
        winners = argmax_token(forward_logits(weights, sample(dist, rng, b)))
        counts += np.bincount(winners, minlength=len(counts))
        done += b
    return TokenCounts(counts, n)


def monte_carlo_counts(
    weights: ModelWeights,
    dist: TokenDistribution,
    n: int,
    seed: int = 0,
    *,
    shard_size: int = 2**16,
    threads: int = 1,
    batch: int = DEFAULT_BATCH,
) -> TokenCounts:
    """Argmax counts over ``n`` samples.

    Shard ``s`` draws from ``stream(seed, "ground_truth", s)``, so the result
    depends only on ``(seed, n, shard_size)``, not on ``threads``.
    """
    if n < 1:
        raise InputError("n must be at least 1")
    n_shards = -(-n // shard_size)
    sizes = [min(shard_size, n - s * shard_size) for s in range(n_shards)]

    def run(s):
        return _count_shard(weights, dist, sizes[s], stream(seed, "ground_truth", s), batch)

    if threads > 1 and n_shards > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, range(n_shards)))
    else:
        parts = [run(s) for s in range(n_shards)]
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total


def select_targets(
    probabilities,
    band: tuple[float, float],
    m: int,
    rng: np.random.Generator,
) -> TargetSet:
    """Uniform random subset of at most ``m`` tokens with probability in ``band``.

    Accepts a ``TokenCounts`` or a probability vector. Tokens with zero
    estimated probability never qualify. If fewer than ``m`` qualify, all are
    returned.
    """
    lo, hi = band
    if not lo < hi:
        raise InputError("band must satisfy lo < hi")
    if isinstance(probabilities, TokenCounts):
        probabilities = probabilities.probabilities
    p = np.asarray(probabilities, dtype=np.float64)
    qualifying = np.flatnonzero((p >= lo) & (p <= hi) & (p > 0))
    if len(qualifying) == 0:
        log.warning("no tokens with probability in [%g, %g]", lo, hi)
        return TargetSet((), ())
    if len(qualifying) > m:
        qualifying = np.sort(rng.choice(qualifying, size=m, replace=False))
    return TargetSet(tuple(int(t) for t in qualifying), tuple(float(p[t]) for t in qualifying))


# ----------------------------------------------------------------------------
# persistence


def write_counts(path, counts: TokenCounts, meta: dict) -> None:
    """CSV (token, count, probability) plus ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    probs = counts.probabilities
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["token", "count", "probability"])
        for t, c in enumerate(counts.counts):
            w.writerow([t, int(c), repr(float(probs[t]))])
    sidecar = dict(meta, n_samples=counts.n_samples)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def write_probabilities(path, probs, meta: dict) -> None:
    """Same layout as ``write_counts`` for exact probabilities (count column empty)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["token", "count", "probability"])
        for t, p in enumerate(probs):
            w.writerow([t, "", repr(float(p))])
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_probabilities(path) -> np.ndarray:
    with Path(path).open() as f:
        rows = list(csv.DictReader(f))
    out = np.zeros(len(rows))
    for row in rows:
        out[int(row["token"])] = float(row["probability"])
    return out


def write_targets(path, targets: TargetSet, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["token", "probability"])
        for t, p in targets:
            w.writerow([t, repr(p)])
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_targets(path) -> TargetSet:
    with Path(path).open() as f:
        rows = list(csv.DictReader(f))
    return TargetSet(
        tuple(int(r["token"]) for r in rows), tuple(float(r["probability"]) for r in rows)
    )
