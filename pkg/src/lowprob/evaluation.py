"""Scoring and calibration of raw estimates.

Raw method outputs are mapped through a monotone fit before scoring: for most
methods ``x -> a x^c + b``, and for GLD ``(mu, sigma) -> exp(-(a mu / (sigma +
eps))^2 + b) + c``. Fits minimize the chosen loss (Itakura-Saito by default)
and are reported in-sample and by leave-one-out cross-validation.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import InputError, NumericError
from .estimators.activation import GldStats

log = logging.getLogger(__name__)

LOSSES = ("is", "log_mse")
B_FLOOR = 1e-300
LOG_B_FLOOR = float(np.log(B_FLOOR))
N_STARTS = 8
MAX_ITER = 500
DEFAULT_TEMPERATURES = tuple(float(t) for t in np.geomspace(0.2, 5.0, 9))


class FitWarning(UserWarning):
    pass


def _check_pos(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any(~(p > 0)) or np.any(~(q > 0)):
        raise InputError("losses are defined only for strictly positive p and q")
    return p, q


def is_loss(p, q):
    """Itakura-Saito loss ``p/q - ln(p/q) - 1``."""
    p, q = _check_pos(p, q)
    return _is_from_log_ratio(np.log(p) - np.log(q))


def log_mse(p, q):
    """Squared error in log space, ``(ln p - ln q)^2``."""
    p, q = _check_pos(p, q)
    return (np.log(p) - np.log(q)) ** 2


def _is_from_log_ratio(lr):
    # expm1 keeps precision for ratios near 1
    return np.expm1(lr) - lr


def _loss_from_logs(log_p, log_q, loss: str):
    lr = log_p - log_q
    if loss == "is":
        return _is_from_log_ratio(np.minimum(lr, 700.0))
    if loss == "log_mse":
        return lr**2
    raise InputError(f"unknown loss {loss!r}")


def loss_fn(loss: str) -> Callable:
    return {"is": is_loss, "log_mse": log_mse}[loss]


def optimal_constant(truths, loss: str = "is") -> float:
    """Constant minimizing mean loss: arithmetic mean (IS) or geometric mean (log-MSE)."""
    p = np.asarray(truths, dtype=np.float64)
    if p.size == 0:
        raise InputError("need at least one truth")
    if loss == "is":
        return float(p.mean())
    if loss == "log_mse":
        return float(np.exp(np.log(p).mean()))
    raise InputError(f"unknown loss {loss!r}")


# ----------------------------------------------------------------------------
# fits


@dataclass(frozen=True)
class FitParams:
    """``x -> a x^c + b``."""

    a: float
    b: float
    c: float
    converged: bool = True

    def log_predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        with np.errstate(divide="ignore"):
            power = np.log(self.a) + self.c * np.log(x)
        return np.logaddexp(power, np.log(self.b))

    def predict(self, x) -> np.ndarray:
        return np.exp(self.log_predict(x))


@dataclass(frozen=True)
class FitParams4:
    """``(mu, sigma) -> exp(-(a mu / (sigma + eps))^2 + b) + c``."""

    a: float
    b: float
    c: float
    eps: float
    converged: bool = True

    def log_predict(self, stats) -> np.ndarray:
        mu, sigma = _stats_arrays(stats)
        z = self.a * mu / (sigma + self.eps)
        return np.logaddexp(-(z**2) + self.b, np.log(self.c))

    def predict(self, stats) -> np.ndarray:
        return np.exp(self.log_predict(stats))


def _stats_arrays(stats):
    if isinstance(stats, GldStats):
        stats = [stats]
    mu = np.array([s.mu for s in stats], dtype=np.float64)
    sigma = np.array([s.sigma for s in stats], dtype=np.float64)
    return mu, sigma


def _multistart(objective, starts, bounds):
    """L-BFGS-B from each start; ``objective`` returns ``(value, gradient)``."""
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    best, best_val, converged = None, np.inf, False
    for x0 in starts:
        x0 = np.clip(np.asarray(x0, dtype=np.float64), lo, hi)
        res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": MAX_ITER, "ftol": 1e-15, "gtol": 1e-12})
        if np.isfinite(res.fun) and res.fun < best_val:
            # a line-search stop at machine precision is still a converged fit
            best, best_val, converged = res.x, float(res.fun), bool(res.success or res.nit < MAX_ITER)
    if best is None:
        raise NumericError("fit objective was not finite at any start")
    if not converged:
        warnings.warn("fit did not converge within the iteration cap; returning best found",
                      FitWarning, stacklevel=3)
    return best, best_val, converged


def _dloss_dpred(log_p, pred, loss):
    """Loss and its derivative with respect to the log prediction."""
    lr = log_p - pred
    if loss == "is":
        lr = np.minimum(lr, 700.0)
        return _is_from_log_ratio(lr), -np.expm1(lr)
    if loss == "log_mse":
        return lr**2, -2.0 * lr
    raise InputError(f"unknown loss {loss!r}")


def _regression_start(x, y):
    """Least-squares slope and intercept of y on x (slope 1 if x is constant)."""
    if len(x) >= 2 and np.ptp(x) > 0:
        slope, intercept = np.polyfit(x, y, 1)
        return float(slope), float(intercept)
    return 1.0, float(np.mean(y - x)) if len(x) else 0.0


def fit_affine(estimates, truths, loss: str = "is") -> FitParams:
    """Fit ``x -> a x^c + b`` (a, c > 0, b >= 1e-300) minimizing total loss.

    Search runs in ``(ln a, c, ln b)`` with bounded L-BFGS-B on the exact
    gradient, from 8 deterministic data-driven starts.
    """
    q = np.asarray(estimates, dtype=np.float64)
    p = np.asarray(truths, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 1 or len(q) < 3:
        raise InputError("need matching 1-D estimates and truths of length >= 3")
    if np.any(q < 0) or np.any(~(p > 0)):
        raise InputError("estimates must be >= 0 and truths > 0")
    log_p = np.log(p)
    pos = q > 0
    # zero estimates only ever see b; give them a finite log so gradients stay clean
    log_q = np.where(pos, np.log(np.where(pos, q, 1.0)), 0.0)

    def objective(theta):
        ln_a, c, ln_b = theta
        A = np.where(pos, ln_a + c * log_q, -np.inf)
        pred = np.logaddexp(A, ln_b)
        val, g = _dloss_dpred(log_p, pred, loss)
        wa = np.exp(A - pred)
        wb = np.exp(ln_b - pred)
        grad = np.array([np.sum(g * wa), np.sum(g * wa * log_q), np.sum(g * wb)])
        return float(np.sum(val)), grad

    const = float(np.log(optimal_constant(p, loss)))
    floor = float(log_p.min()) - 4.0
    starts = []
    if pos.sum() >= 1:
        c0, a0 = _regression_start(log_q[pos], log_p[pos])
        c0 = float(np.clip(c0, 0.05, 10.0))
        a1 = float(np.mean(log_p[pos] - log_q[pos]))
        starts += [(a0, c0, floor), (a1, 1.0, floor), (a0, c0, const), (a1, 1.0, const)]
        for c in (0.5, 2.0):
            starts.append((float(np.mean(log_p[pos] - c * log_q[pos])), c, floor))
    starts += [(0.0, 1.0, const), (0.0, 1.0, LOG_B_FLOOR)]
    bounds = [(-700.0, 700.0), (1e-3, 20.0), (LOG_B_FLOOR, 0.0)]
    theta, _, converged = _multistart(objective, starts[:N_STARTS], bounds)
    return FitParams(float(np.exp(theta[0])), float(np.exp(theta[2])), float(theta[1]), converged)


def fit_gld(stats: Sequence[GldStats], truths, loss: str = "is") -> FitParams4:
    """Fit the four GLD parameters (a >= 0, b real, c >= 1e-300, eps >= 1e-12)."""
    mu, sigma = _stats_arrays(stats)
    p = np.asarray(truths, dtype=np.float64)
    if len(p) != len(mu) or len(p) < 4:
        raise InputError("need matching stats and truths of length >= 4")
    if np.any(~(p > 0)):
        raise InputError("truths must be > 0")
    log_p = np.log(p)

    def objective(theta):
        a, b, ln_c, ln_eps = theta
        eps = np.exp(ln_eps)
        s = sigma + eps
        z = a * mu / s
        E = -(z**2) + b
        pred = np.logaddexp(E, ln_c)
        val, g = _dloss_dpred(log_p, pred, loss)
        we = np.exp(E - pred)
        wc = np.exp(ln_c - pred)
        grad = np.array([
            np.sum(g * we * (-2.0 * z * mu / s)),
            np.sum(g * we),
            np.sum(g * wc),
            np.sum(g * we * 2.0 * z**2 * eps / s),
        ])
        return float(np.sum(val)), grad

    const = float(np.log(optimal_constant(p, loss)))
    spread = float(np.mean(sigma)) if np.mean(sigma) > 0 else 1.0
    floor = float(log_p.min()) - 4.0
    starts = []
    for ln_eps in (np.log(1e-3 * spread), np.log(spread)):
        r2 = (mu / (sigma + np.exp(ln_eps))) ** 2
        slope, intercept = _regression_start(r2, log_p)
        a0 = float(np.sqrt(-slope)) if slope < 0 else 0.5
        starts += [(a0, intercept, floor, ln_eps), (a0, intercept, const, ln_eps)]
        for a in (0.3, 1.0):
            starts.append((a, float(np.mean(log_p + (a * mu / (sigma + np.exp(ln_eps))) ** 2)), floor, ln_eps))
    starts[-1] = (0.0, const, LOG_B_FLOOR, 0.0)
    bounds = [(0.0, 100.0), (-700.0, 700.0), (LOG_B_FLOOR, 0.0), (np.log(1e-12), np.log(1e6))]
    theta, _, converged = _multistart(objective, starts[:N_STARTS], bounds)
    a, b, ln_c, ln_eps = theta
    return FitParams4(float(a), float(b), float(np.exp(ln_c)), float(np.exp(ln_eps)), converged)


# ----------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    method: str
    truths: np.ndarray
    raw: list
    fitted: np.ndarray
    losses: np.ndarray
    loocv_fitted: np.ndarray
    loocv_losses: np.ndarray
    params: object
    loss: str = "is"
    tokens: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses))

    @property
    def loocv_loss(self) -> float:
        return float(np.mean(self.loocv_losses))

    def summary(self) -> dict:
        return {
            "method": self.method,
            "loss": self.loss,
            "n_targets": len(self.truths),
            "mean_loss": self.mean_loss,
            "loocv_loss": self.loocv_loss,
            "params": asdict(self.params) if hasattr(self.params, "__dataclass_fields__") else self.params,
            **self.labels,
        }

    def write(self, csv_path, json_path=None) -> None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with csv_path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["token", "truth", "raw", "fitted", "loss", "loocv_fitted", "loocv_loss"])
            for i, truth in enumerate(self.truths):
                raw = self.raw[i]
                raw = f"{raw.mu!r};{raw.sigma!r}" if isinstance(raw, GldStats) else repr(float(raw))
                token = self.tokens[i] if self.tokens else i
                w.writerow([token, repr(float(truth)), raw, repr(float(self.fitted[i])),
                            repr(float(self.losses[i])), repr(float(self.loocv_fitted[i])),
                            repr(float(self.loocv_losses[i]))])
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _subset(xs, idx):
    return [xs[i] for i in idx] if isinstance(xs, list) else np.asarray(xs)[idx]


def loocv(xs, truths, fitter: Callable = fit_affine, loss: str = "is", method: str = "") -> EvalReport:
    """In-sample fit plus leave-one-out refits scored on each held-out point."""
    p = np.asarray(truths, dtype=np.float64)
    n = len(p)
    if n < 4:
        raise InputError("LOOCV needs at least 4 points")
    xs = list(xs) if not isinstance(xs, np.ndarray) else xs
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FitWarning)
        params = fitter(xs, p, loss)
        fitted = params.predict(xs)
        held = np.empty(n)
        for i in range(n):
            keep = np.delete(np.arange(n), i)
            sub = fitter(_subset(xs, keep), p[keep], loss)
            held[i] = sub.predict(_subset(xs, [i]))[0]
    fn = loss_fn(loss)
    return EvalReport(method, p, list(xs), fitted, fn(p, fitted), held, fn(p, held), params, loss)


def constant_report(truths, loss: str = "is") -> EvalReport:
    """Optimal-constant baseline, in-sample and leave-one-out."""
    p = np.asarray(truths, dtype=np.float64)
    n = len(p)
    const = optimal_constant(p, loss)
    held = np.array([optimal_constant(np.delete(p, i), loss) for i in range(n)])
    fn = loss_fn(loss)
    return EvalReport("constant", p, [0.0] * n, np.full(n, const), fn(p, np.full(n, const)),
                      held, fn(p, held), {"constant": const}, loss)


def evaluate_records(records, truths, loss: str = "is") -> EvalReport:
    """Fit and score one method's records against ground truth (GLD aware)."""
    records = list(records)
    method = records[0].method
    if method == "gld":
        xs = [GldStats(r.diagnostics["mu"], r.diagnostics["sigma"]) for r in records]
        report = loocv(xs, truths, fit_gld, loss, method)
    else:
        report = loocv(np.array([r.raw_estimate for r in records]), truths, fit_affine, loss, method)
    report.tokens = [r.target for r in records]
    return report


# ----------------------------------------------------------------------------
# temperature tuning


def tune_temperature(
    method: str,
    weights,
    dist,
    targets,
    grid: Sequence[float] = DEFAULT_TEMPERATURES,
    budget=None,
    seed: int = 0,
    loss: str = "is",
    runner: Callable | None = None,
) -> tuple[float, dict]:
    """Temperature from ``grid`` with the lowest mean fitted loss on ``targets``.

    ``targets`` is a ``TargetSet`` or a sequence of ``(token, probability)``.
    Ties go to the lower temperature. Returns ``(T, {T: loss})``.
    """
    from .estimators import run_estimator
    from .rng import stream

    grid = sorted(float(T) for T in grid)
    if not grid:
        raise InputError("temperature grid is empty")
    pairs = list(targets)
    if len(grid) == 1:
        return grid[0], {}
    run = runner or (lambda T, tok, rng: run_estimator(method, weights, dist, tok, budget, T=T, rng=rng))
    tokens = [int(tok) for tok, _ in pairs]
    truths = np.array([p for _, p in pairs], dtype=np.float64)
    table = {}
    for gi, T in enumerate(grid):
        raw = np.array([run(T, tok, stream(seed, "tune", method, gi, tok)).raw_estimate for tok in tokens])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FitWarning)
            if len(tokens) >= 3:
                fitted = fit_affine(raw, truths, loss).predict(raw)
            else:
                fitted = np.full(len(truths), optimal_constant(truths, loss))
        table[T] = float(np.mean(loss_fn(loss)(truths, fitted)))
    best = grid[0]
    for T in grid[1:]:
        if table[T] < table[best]:
            best = T
    return best, table


def write_reports(reports: Sequence[EvalReport], csv_path, json_path=None, extra: dict | None = None) -> None:
    """One CSV row per (method, token) across reports, plus a JSON summary list."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "token", "truth", "raw", "fitted", "loss", "loocv_fitted", "loocv_loss"])
        for rep in reports:
            for i, truth in enumerate(rep.truths):
                raw = rep.raw[i]
                raw = f"{raw.mu!r};{raw.sigma!r}" if isinstance(raw, GldStats) else repr(float(raw))
                token = rep.tokens[i] if rep.tokens else i
                w.writerow([rep.method, token, repr(float(truth)), raw, repr(float(rep.fitted[i])),
                            repr(float(rep.losses[i])), repr(float(rep.loocv_fitted[i])),
                            repr(float(rep.loocv_losses[i]))])
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    doc = {"reports": [rep.summary() for rep in reports]}
    if extra:
        doc.update(extra)
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
