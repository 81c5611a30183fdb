"""Independent-token input distributions.

A ``TokenDistribution`` is a product of per-position categoricals stored as a
dense ``[k, V]`` probability table. Sampling is inverse-CDF restricted to each
position's support, so zero-probability tokens are never drawn and importance
weights never divide by zero.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, NumericError

NORM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TokenDistribution:
    probs: np.ndarray
    name: str = ""
    _cdf: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise InputError("probs must be a [k, V] table with k >= 1")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise InputError("probabilities must be finite and non-negative")
        sums = p.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise InputError(f"rows must sum to 1, got {sums}")
        # renormalize away the last few ulps so every row sums to 1 within NORM_TOL
        p = p / sums[:, None]
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        supports, cdfs = [], []
        for row in p:
            sup = np.flatnonzero(row > 0)
            c = np.cumsum(row[sup])
            c /= c[-1]
            supports.append(sup)
            cdfs.append(c)
        object.__setattr__(self, "_cdf", (tuple(supports), tuple(cdfs)))

    @property
    def k(self) -> int:
        return self.probs.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[1]

    @property
    def supports(self) -> tuple[np.ndarray, ...]:
        return self._cdf[0]

    @property
    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def support_size(self) -> int:
        """Number of sequences with positive probability."""
        return int(np.prod([len(s) for s in self.supports], dtype=object))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.probs.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.probs, dtype="<f8").tobytes())
        return h.hexdigest()


def sample(dist: TokenDistribution, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw one sequence ``[k]`` or a batch ``[size, k]``."""
    n = 1 if size is None else int(size)
    u = rng.random((n, dist.k))
    out = np.empty((n, dist.k), dtype=np.int64)
    supports, cdfs = dist._cdf
    for i in range(dist.k):
        idx = np.searchsorted(cdfs[i], u[:, i], side="right")
        np.minimum(idx, len(supports[i]) - 1, out=idx)
        out[:, i] = supports[i][idx]
    return out[0] if size is None else out


def log_pmf(dist: TokenDistribution, x) -> np.ndarray | float:
    """Sum of per-position log probabilities; ``-inf`` off the support."""
    x = np.asarray(x)
    single = x.ndim == 1
    x2 = x[None] if single else x
    if x2.ndim != 2 or x2.shape[1] != dist.k:
        raise InputError(f"expected sequences of length {dist.k}, got shape {x.shape}")
    if x2.size and (x2.min() < 0 or x2.max() >= dist.vocab_size):
        raise InputError("token id out of range")
    lp = dist.log_probs[np.arange(dist.k), x2].sum(axis=1)
    return float(lp[0]) if single else lp


def tilt_independent(dist: TokenDistribution, scores, T: float) -> TokenDistribution:
    """Boltzmann tilt ``q_i(w) ∝ p_i(w) exp(s_i(w) / T)`` per position."""
    if not T > 0:
        raise InputError("temperature must be positive")
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != dist.probs.shape:
        raise InputError(f"score table shape {s.shape} != {dist.probs.shape}")
    if not np.all(np.isfinite(s)):
        raise InputError("scores must be finite")
    if not np.any(s):
        return TokenDistribution(dist.probs, name=dist.name)
    logq = dist.log_probs + s / T
    logq -= logq.max(axis=1, keepdims=True)
    q = np.exp(logq)
    z = q.sum(axis=1, keepdims=True)
    if np.any(z <= 0) or not np.all(np.isfinite(z)):
        raise NumericError("tilted distribution underflowed at some position")
    q /= z
    # keep the support exact even when exp() underflows far in the tail
    on_support = dist.probs > 0
    q[on_support] = np.maximum(q[on_support], np.finfo(np.float64).tiny)
    return TokenDistribution(q / q.sum(axis=1, keepdims=True), name=dist.name)


def uniform(k: int, vocab_size: int, tokens=None) -> TokenDistribution:
    row = np.zeros(vocab_size)
    idx = np.arange(vocab_size) if tokens is None else np.asarray(tokens)
    row[idx] = 1.0 / len(idx)
    return TokenDistribution(np.tile(row, (k, 1)))


def point_mass(x, vocab_size: int) -> TokenDistribution:
    x = np.asarray(x)
    p = np.zeros((len(x), vocab_size))
    p[np.arange(len(x)), x] = 1.0
    return TokenDistribution(p)


# ----------------------------------------------------------------------------
# manifests
#
# {
#   "format": "lowprob-dist/1", "k": 8, "vocab_size": 64, "name": "alt",
#   "positions": [ <position spec>, ... ]      # cycled to length k
# }
#
# position spec, one of:
#   {"probs": [...]}                                   explicit table row
#   {"uniform": [token ids]}                           uniform over a subset
#   {"weighted": {"tokens": [...], "weights": [...]}}  normalized weights
#   {"zipf": {"tokens": [...], "exponent": 1.1}}       rank-frequency weights
#   {"point": token id}


def _position_row(spec: dict, vocab_size: int) -> np.ndarray:
    row = np.zeros(vocab_size)
    if "probs" in spec:
        row = np.asarray(spec["probs"], dtype=np.float64)
        if row.shape != (vocab_size,):
            raise ConfigError("explicit probs must have vocab_size entries")
        return row / row.sum()
    if "uniform" in spec:
        toks = np.asarray(spec["uniform"], dtype=np.int64)
        row[toks] = 1.0
    elif "weighted" in spec:
        toks = np.asarray(spec["weighted"]["tokens"], dtype=np.int64)
        row[toks] = np.asarray(spec["weighted"]["weights"], dtype=np.float64)
    elif "zipf" in spec:
        toks = np.asarray(spec["zipf"]["tokens"], dtype=np.int64)
        expo = float(spec["zipf"].get("exponent", 1.0))
        row[toks] = 1.0 / np.arange(1, len(toks) + 1) ** expo
    elif "point" in spec:
        row[int(spec["point"])] = 1.0
    else:
        raise ConfigError(f"unknown position spec {spec!r}")
    if row.sum() <= 0:
        raise ConfigError(f"position spec has no mass: {spec!r}")
    return row / row.sum()


def from_manifest(doc: dict) -> TokenDistribution:
    try:
        k = int(doc["k"])
        vocab_size = int(doc["vocab_size"])
        positions = doc["positions"]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad distribution manifest: {e}") from e
    if k < 1 or not positions:
        raise ConfigError("manifest needs k >= 1 and at least one position spec")
    rows = [_position_row(positions[i % len(positions)], vocab_size) for i in range(k)]
    try:
        return TokenDistribution(np.stack(rows), name=doc.get("name", ""))
    except InputError as e:
        raise ConfigError(str(e)) from e


def to_manifest(dist: TokenDistribution) -> dict:
    return {
        "format": "lowprob-dist/1",
        "name": dist.name,
        "k": dist.k,
        "vocab_size": dist.vocab_size,
        "positions": [{"probs": row.tolist()} for row in dist.probs],
    }


def load_dist(path: str | Path) -> TokenDistribution:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read distribution manifest {path}: {e}") from e
    return from_manifest(doc)


def save_dist(doc: dict | TokenDistribution, path: str | Path) -> Path:
    if isinstance(doc, TokenDistribution):
        doc = to_manifest(doc)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def synthetic_manifest(family: str, k: int, vocab_size: int, seed: int = 0, **kw) -> dict:
    """Manifests for the built-in tokenizer-free families.

    ``uniform``      every position uniform over ``n_tokens`` fixed tokens
    ``zipf``         every position Zipf-weighted over a seeded token subset
    ``alternating``  two disjoint subsets alternating by position
    ``prefix``       fixed point-mass prefix, then a Zipf-weighted tail
    """
    from .rng import stream

    rng = stream(seed, "dist", family)
    n_tokens = int(kw.get("n_tokens", min(vocab_size, 16)))
    if n_tokens > vocab_size:
        raise ConfigError("n_tokens exceeds vocab_size")
    perm = rng.permutation(vocab_size)
    if family == "uniform":
        positions = [{"uniform": sorted(perm[:n_tokens].tolist())}]
    elif family == "zipf":
        positions = [{"zipf": {"tokens": perm[:n_tokens].tolist(),
                               "exponent": float(kw.get("exponent", 1.0))}}]
    elif family == "alternating":
        half = max(1, min(n_tokens, vocab_size // 2))
        positions = [{"uniform": sorted(perm[:half].tolist())},
                     {"uniform": sorted(perm[half:2 * half].tolist())}]
    elif family == "prefix":
        n_prefix = int(kw.get("n_prefix", 2))
        if n_prefix >= k:
            raise ConfigError("prefix must be shorter than k")
        tail = {"zipf": {"tokens": perm[:n_tokens].tolist(),
                         "exponent": float(kw.get("exponent", 1.0))}}
        positions = [{"point": int(t)} for t in perm[-n_prefix:]] + [tail] * (k - n_prefix)
    else:
        raise ConfigError(f"unknown distribution family {family!r}")
    return {
        "format": "lowprob-dist/1",
        "name": f"{family}-s{seed}",
        "k": k,
        "vocab_size": vocab_size,
        "positions": positions,
    }
