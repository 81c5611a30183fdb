"""A small decoder-only transformer with an exact input gradient.

Pre-layer-norm blocks, learned positional embeddings, causal attention,
exact (erf) GELU, and a final layer norm before the unembed. All arithmetic
is float64. Only the logits at the final position are exposed.

The backward pass is written out by hand: the only derivative anyone needs is
that of a single output logit with respect to the one-hot input encoding.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import ConfigError, InputError, NumericError

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int
    d_model: int
    n_heads: int
    d_mlp: int
    vocab_size: int
    max_seq_len: int
    activation: str = "gelu_exact"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_mlp", "vocab_size", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be at least 1")
        if self.activation != "gelu_exact":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_mlp": self.d_mlp,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        try:
            return cls(**known)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def _layer_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    d, m = spec.d_model, spec.d_mlp
    return {
        "ln1_w": (d,), "ln1_b": (d,),
        "W_Q": (d, d), "b_Q": (d,),
        "W_K": (d, d), "b_K": (d,),
        "W_V": (d, d), "b_V": (d,),
        "W_O": (d, d), "b_O": (d,),
        "ln2_w": (d,), "ln2_b": (d,),
        "W_in": (d, m), "b_in": (m,),
        "W_out": (m, d), "b_out": (d,),
    }


def tensor_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor, in serialization order."""
    shapes = {
        "token_embedding": (spec.vocab_size, spec.d_model),
        "positional_embedding": (spec.max_seq_len, spec.d_model),
    }
    for layer in range(spec.n_layers):
        for name, shape in _layer_shapes(spec).items():
            shapes[f"blocks.{layer}.{name}"] = shape
    shapes["ln_final_w"] = (spec.d_model,)
    shapes["ln_final_b"] = (spec.d_model,)
    shapes["unembed"] = (spec.d_model, spec.vocab_size)
    return shapes


@dataclass(frozen=True)
class ModelWeights:
    """Immutable parameter set. ``tensors`` maps names from ``tensor_shapes``."""

    spec: ModelSpec
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = tensor_shapes(self.spec)
        if set(expected) != set(self.tensors):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ConfigError(f"tensor mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        frozen = {}
        for name, shape in expected.items():
            arr = np.array(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name}: non-finite entries")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)
        blocks = []
        for layer in range(self.spec.n_layers):
            prefix = f"blocks.{layer}."
            blocks.append({k[len(prefix):]: v for k, v in frozen.items() if k.startswith(prefix)})
        object.__setattr__(self, "_blocks", tuple(blocks))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def W_U(self) -> np.ndarray:
        return self.tensors["unembed"]

    @property
    def token_embedding(self) -> np.ndarray:
        return self.tensors["token_embedding"]

    def block(self, layer: int) -> dict[str, np.ndarray]:
        return self._blocks[layer]

    def replace(self, **updates: np.ndarray) -> "ModelWeights":
        """Copy with some tensors swapped out (names as in ``tensor_shapes``)."""
        tensors = dict(self.tensors)
        tensors.update(updates)
        return ModelWeights(self.spec, tensors)

    def digest(self) -> str:
        """sha256 of the float32 little-endian blob this model serializes to."""
        return hashlib.sha256(weights_to_blob(self)).hexdigest()


def zero_weights(spec: ModelSpec) -> ModelWeights:
    return ModelWeights(spec, {n: np.zeros(s) for n, s in tensor_shapes(spec).items()})


def init_weights(spec: ModelSpec, seed: int, unembed_gain: float = 1.0) -> ModelWeights:
    """Seeded Gaussian initialization.

    Matrices and biases are N(0, 1/d_model); layer-norm scales are 1 + N(0, 0.01).
    Values are rounded to float32 so that a save/load round trip is exact.
    """
    from .rng import stream

    rng = stream(seed, "model")
    scale = 1.0 / math.sqrt(spec.d_model)
    tensors = {}
    for name, shape in tensor_shapes(spec).items():
        base = name.rsplit(".", 1)[-1]
        if base.startswith("ln") and base.endswith("_w"):
            arr = 1.0 + 0.1 * rng.standard_normal(shape)
        elif base.startswith("ln") and base.endswith("_b"):
            arr = 0.1 * rng.standard_normal(shape)
        else:
            arr = scale * rng.standard_normal(shape)
        if name == "unembed":
            arr = arr * unembed_gain
        tensors[name] = arr.astype(np.float32).astype(np.float64)
    return ModelWeights(spec, tensors)


# ----------------------------------------------------------------------------
# elementwise pieces


def gelu(z):
    """Exact GELU, z * Phi(z)."""
    z = np.asarray(z, dtype=np.float64)
    out = 0.5 * z * (1.0 + erf(z / _SQRT2))
    return out if out.ndim else float(out)


def _gelu_grad(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _layer_norm(x, w, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * w + b, (xhat, inv)


def _layer_norm_back(dy, w, cache):
    xhat, inv = cache
    dxhat = dy * w
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# ----------------------------------------------------------------------------
# forward / backward


def _check_tokens(weights: ModelWeights, x) -> tuple[np.ndarray, bool]:
    tokens = np.asarray(x)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise InputError("token input must be 1-D (one sequence) or 2-D (batch)")
    if tokens.shape[1] < 1 or tokens.shape[1] > weights.spec.max_seq_len:
        raise InputError(
            f"sequence length {tokens.shape[1]} outside [1, {weights.spec.max_seq_len}]"
        )
    if tokens.size and (not np.issubdtype(tokens.dtype, np.integer)):
        raise InputError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= weights.spec.vocab_size):
        raise InputError("token id out of range")
    return tokens.astype(np.int64), single


def _embed_onehot(weights: ModelWeights, onehot: np.ndarray) -> np.ndarray:
    k = onehot.shape[-2]
    if k < 1 or k > weights.spec.max_seq_len:
        raise InputError(f"sequence length {k} outside [1, {weights.spec.max_seq_len}]")
    return onehot @ weights.token_embedding + weights["positional_embedding"][:k]


def _run(weights: ModelWeights, x0: np.ndarray, keep_cache: bool):
    """Residual stream -> (pre-unembed v [B, d], cache).

    Only the final position feeds the logits, so the last block computes its
    queries and MLP at that position alone (keys and values still use all).
    """
    spec = weights.spec
    B, k, d = x0.shape
    H, dh = spec.n_heads, spec.d_head
    x = x0
    caches = []
    for layer in range(spec.n_layers):
        p = weights.block(layer)
        qs = slice(k - 1, k) if layer == spec.n_layers - 1 else slice(0, k)
        kq = qs.stop - qs.start
        h, ln1 = _layer_norm(x, p["ln1_w"], p["ln1_b"])
        q = (h[:, qs] @ p["W_Q"] + p["b_Q"]).reshape(B, kq, H, dh).transpose(0, 2, 1, 3)
        kk = (h @ p["W_K"] + p["b_K"]).reshape(B, k, H, dh).transpose(0, 2, 1, 3)
        vv = (h @ p["W_V"] + p["b_V"]).reshape(B, k, H, dh).transpose(0, 2, 1, 3)
        scores = (q @ kk.transpose(0, 1, 3, 2)) / math.sqrt(dh)
        mask = np.arange(k)[None, :] > np.arange(qs.start, qs.stop)[:, None]
        if mask.any():
            scores = np.where(mask, -np.inf, scores)
        att = _softmax(scores)
        z = (att @ vv).transpose(0, 2, 1, 3).reshape(B, kq, d)
        x = x[:, qs] + z @ p["W_O"] + p["b_O"]
        h2, ln2 = _layer_norm(x, p["ln2_w"], p["ln2_b"])
        pre = h2 @ p["W_in"] + p["b_in"]
        x = x + gelu(pre) @ p["W_out"] + p["b_out"]
        if keep_cache:
            caches.append((qs, ln1, q, kk, vv, att, ln2, pre))
    v, lnf = _layer_norm(x[:, -1, :], weights["ln_final_w"], weights["ln_final_b"])
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite pre-unembed activation")
    return v, (caches, lnf)


def _backward(weights: ModelWeights, cache, dv: np.ndarray, k: int) -> np.ndarray:
    """d(output)/d(residual input) given d(output)/dv, shape [B, k, d]."""
    spec = weights.spec
    caches, lnf = cache
    B, d = dv.shape
    H, dh = spec.n_heads, spec.d_head
    dx = _layer_norm_back(dv, weights["ln_final_w"], lnf)[:, None, :]
    if spec.n_layers == 0:
        out = np.zeros((B, k, d))
        out[:, -1] = dx[:, 0]
        return out
    for layer in reversed(range(spec.n_layers)):
        p = weights.block(layer)
        qs, ln1, q, kk, vv, att, ln2, pre = caches[layer]
        kq = qs.stop - qs.start
        # MLP branch
        dpre = (dx @ p["W_out"].T) * _gelu_grad(pre)
        dx = dx + _layer_norm_back(dpre @ p["W_in"].T, p["ln2_w"], ln2)
        # attention branch
        dz = (dx @ p["W_O"].T).reshape(B, kq, H, dh).transpose(0, 2, 1, 3)
        datt = dz @ vv.transpose(0, 1, 3, 2)
        dvv = att.transpose(0, 1, 3, 2) @ dz
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
        dq = (dscores @ kk).transpose(0, 2, 1, 3).reshape(B, kq, d)
        dkk = (dscores.transpose(0, 1, 3, 2) @ q).transpose(0, 2, 1, 3).reshape(B, k, d)
        dvv = dvv.transpose(0, 2, 1, 3).reshape(B, k, d)
        dh_ = dkk @ p["W_K"].T + dvv @ p["W_V"].T
        dh_[:, qs] += dq @ p["W_Q"].T
        dx_in = _layer_norm_back(dh_, p["ln1_w"], ln1)
        dx_in[:, qs] += dx
        dx = dx_in
    return dx


def pre_unembed(weights: ModelWeights, x) -> np.ndarray:
    """Final-position activation right before the unembed, [d] or [B, d]."""
    tokens, single = _check_tokens(weights, x)
    v, _ = _run(weights, weights.token_embedding[tokens] + weights["positional_embedding"][: tokens.shape[1]], False)
    return v[0] if single else v


def forward_logits(weights: ModelWeights, x) -> np.ndarray:
    """Final-position logits, [V] or [B, V]. Equal to ``pre_unembed(x) @ W_U``."""
    v = pre_unembed(weights, x)
    logits = v @ weights.W_U
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return logits


def forward_logits_onehot(weights: ModelWeights, onehot: np.ndarray) -> np.ndarray:
    """Logits for a (possibly fractional) one-hot encoding [k, V] or [B, k, V]."""
    onehot = np.asarray(onehot, dtype=np.float64)
    single = onehot.ndim == 2
    if single:
        onehot = onehot[None]
    v, _ = _run(weights, _embed_onehot(weights, onehot), False)
    logits = v @ weights.W_U
    return logits[0] if single else logits


def logits_and_grad(weights: ModelWeights, x, t) -> tuple[np.ndarray, np.ndarray]:
    """Logits and d(logit t)/d(one-hot input) from one forward+backward pass.

    ``t`` is a token id or, for batched ``x``, an array with one target per row.
    Returns logits [B, V] and gradients [B, k, V] (leading axis dropped for a
    single sequence).
    """
    tokens, single = _check_tokens(weights, x)
    B, k = tokens.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    if t.min() < 0 or t.max() >= weights.spec.vocab_size:
        raise InputError("target token out of range")
    x0 = weights.token_embedding[tokens] + weights["positional_embedding"][:k]
    v, cache = _run(weights, x0, True)
    logits = v @ weights.W_U
    dv = weights.W_U[:, t].T
    dx0 = _backward(weights, cache, dv, k)
    grad = dx0 @ weights.token_embedding.T
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(grad))):
        raise NumericError("non-finite logits or gradient")
    if single:
        return logits[0], grad[0]
    return logits, grad


def grad_target_logit(weights: ModelWeights, x, t: int) -> np.ndarray:
    """Gradient of logit ``t`` with respect to the one-hot input, [k, V]."""
    return logits_and_grad(weights, x, t)[1]


def argmax_token(logits: np.ndarray) -> np.ndarray:
    """Argmax with ties broken toward the lowest token id."""
    return np.argmax(logits, axis=-1)


# ----------------------------------------------------------------------------
# serialization

BLOB_DTYPE = "<f4"


def weights_to_blob(weights: ModelWeights) -> bytes:
    parts = [
        np.ascontiguousarray(weights.tensors[name], dtype=BLOB_DTYPE).tobytes()
        for name in tensor_shapes(weights.spec)
    ]
    return b"".join(parts)


def save_model(weights: ModelWeights, manifest_path: str | Path) -> Path:
    """Write ``<name>.json`` manifest plus ``<name>.bin`` float32 blob."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    blob = weights_to_blob(weights)
    entries, offset = [], 0
    for name, shape in tensor_shapes(weights.spec).items():
        entries.append({"name": name, "shape": list(shape), "offset": offset})
        offset += 4 * int(np.prod(shape))
    manifest = {
        "format": "lowprob-model/1",
        "spec": weights.spec.to_dict(),
        "blob": blob_path.name,
        "dtype": "float32-le",
        "sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_model(manifest_path: str | Path) -> ModelWeights:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
        spec = ModelSpec.from_dict(manifest["spec"])
        blob = (manifest_path.parent / manifest["blob"]).read_bytes()
        entries = manifest["tensors"]
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read model manifest {manifest_path}: {e}") from e
    tensors = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = int(entry["offset"])
        if start + 4 * count > len(blob):
            raise ConfigError(f"tensor {entry['name']} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return ModelWeights(spec, tensors)
