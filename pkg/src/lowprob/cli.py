"""Command-line pipeline: models, distributions, ground truth, estimation, evaluation.

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 stage failure.
All randomness comes from one root seed through ``rng.stream(seed, stage, ...)``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dist import from_manifest, load_dist, save_dist, synthetic_manifest
from .errors import ConfigError, LowProbError, NumericError
from .estimators import METHODS, EstimatorBudget, read_records, run_estimator, write_records
from .evaluation import (
    DEFAULT_TEMPERATURES,
    LOSSES,
    constant_report,
    evaluate_records,
    tune_temperature,
    write_reports,
)
from .groundtruth import (
    DEFAULT_ENUM_CAP,
    exhaustive_distribution,
    monte_carlo_counts,
    read_probabilities,
    read_targets,
    select_targets,
    write_counts,
    write_probabilities,
    write_targets,
)
from .microlm import ModelSpec, init_weights, load_model, save_model
from .rng import stream

log = logging.getLogger("lowprob")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_STAGE = 0, 2, 3, 4
THREADS_ENV = "LOWPROB_THREADS"
SCHEMAS = {
    "ground_truth.csv": "token,count,probability/1",
    "targets.csv": "token,probability/1",
    "estimates.csv": "method,target,raw_estimate,calls,diagnostics/1",
    "evaluation.csv": "method,token,truth,raw,fitted,loss,loocv_fitted,loocv_loss/1",
}
TEMPERED = ("itgis", "mhis")


class StageError(LowProbError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    model: str
    dist: str
    out: str
    seed: int = 0
    budget: int = 2**12
    band: tuple = (1e-6, 1e-4)
    m: int = 64
    methods: tuple = ("itgis", "mhis", "qld", "gld")
    temperature: object = 1.0
    ground_truth: object = "auto"
    tune_band: tuple = (1e-4, 1e-2)
    tune_m: int = 16
    loss: str = "is"

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = path.parent
        for key in ("model", "dist", "out"):
            if key not in doc:
                raise ConfigError(f"config needs {key!r}")
            doc[key] = str((base / doc[key]).resolve()) if not Path(doc[key]).is_absolute() else doc[key]
        for key in ("band", "tune_band", "methods"):
            if key in doc:
                doc[key] = tuple(doc[key])
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for key in ("model", "dist"):
            if not Path(getattr(self, key)).exists():
                raise ConfigError(f"{key} path does not exist: {getattr(self, key)}")
        for name, band in (("band", self.band), ("tune_band", self.tune_band)):
            if len(band) != 2 or not 0 <= band[0] < band[1]:
                raise ConfigError(f"{name} must be [lo, hi] with 0 <= lo < hi")
        if self.budget < 4:
            raise ConfigError("budget must be at least 4")
        if self.m < 1 or self.tune_m < 1:
            raise ConfigError("m and tune_m must be positive")
        bad = [mth for mth in self.methods if mth not in METHODS]
        if bad or not self.methods:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if self.temperature != "tune" and not (isinstance(self.temperature, (int, float)) and self.temperature > 0):
            raise ConfigError("temperature must be a positive number or \"tune\"")
        gt = self.ground_truth
        if not (gt in ("auto", "exact") or (isinstance(gt, int) and gt >= 1)):
            raise ConfigError("ground_truth must be \"auto\", \"exact\" or a sample count")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")

    def digest(self) -> str:
        doc = asdict(self)
        doc.pop("out")
        return hashlib.sha256(_canonical(doc)).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    model_hash: str
    dist_hash: str
    version: str
    seeds: dict
    schemas: dict
    timestamps: dict = field(default_factory=dict)

    def digest(self) -> str:
        """Hash of everything except timestamps, so reruns share it."""
        doc = asdict(self)
        doc.pop("timestamps")
        return hashlib.sha256(_canonical(doc)).hexdigest()

    def write(self, path: Path) -> None:
        _write_json(path, dict(asdict(self), manifest_hash=self.digest()))


# ----------------------------------------------------------------------------
# stage helpers shared by the subcommands and the pipeline


def ground_truth_stage(weights, dist, mode, seed, threads, cap=DEFAULT_ENUM_CAP):
    """Returns (probabilities, counts or None, meta)."""
    exact = mode == "exact" or (mode == "auto" and dist.support_size() <= cap)
    if exact:
        probs = exhaustive_distribution(weights, dist, cap=cap)
        return probs, None, {"method": "exhaustive", "support_size": dist.support_size()}
    n = int(mode) if isinstance(mode, int) else 2**24
    counts = monte_carlo_counts(weights, dist, n, seed, threads=threads)
    return counts.probabilities, counts, {"method": "monte_carlo", "n": n, "seed": seed}


def estimate_stage(method, weights, dist, tokens, budget, T, seed, threads):
    """One record per token; each token draws from its own stream."""

    def one(tok):
        return run_estimator(method, weights, dist, tok, budget, T=T, rng=stream(seed, "estimate", method, tok))

    if threads > 1 and len(tokens) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, tokens))
    return [one(tok) for tok in tokens]


def _budget(method, total):
    return EstimatorBudget.for_method(method, total)


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_model(args) -> int:
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read model spec {args.spec}: {e}") from e
        spec = ModelSpec.from_dict(doc)
    else:
        spec = ModelSpec(args.layers, args.d_model, args.heads, args.d_mlp or 4 * args.d_model,
                         args.vocab_size, args.seq_len)
    path = save_model(init_weights(spec, args.seed), args.out)
    print(path)
    return EXIT_OK


def cmd_gen_dist(args) -> int:
    kw = {}
    if args.n_tokens is not None:
        kw["n_tokens"] = args.n_tokens
    if args.exponent is not None:
        kw["exponent"] = args.exponent
    if args.n_prefix is not None:
        kw["n_prefix"] = args.n_prefix
    doc = synthetic_manifest(args.family, args.k, args.vocab_size, args.seed, **kw)
    from_manifest(doc)  # validate before writing
    print(save_dist(doc, args.out))
    return EXIT_OK


def cmd_ground_truth(args) -> int:
    weights, dist = load_model(args.model), load_dist(args.dist)
    mode = "exact" if args.exact else (args.samples if args.samples else "auto")
    probs, counts, meta = ground_truth_stage(weights, dist, mode, args.seed, args.threads)
    meta.update(model_hash=weights.digest(), dist_hash=dist.digest())
    if counts is not None:
        write_counts(args.out, counts, meta)
    else:
        write_probabilities(args.out, probs, meta)
    print(args.out)
    return EXIT_OK


def cmd_select_targets(args) -> int:
    probs = read_probabilities(args.ground_truth)
    lo, hi = args.band
    ts = select_targets(probs, (lo, hi), args.m, stream(args.seed, "select"))
    write_targets(args.out, ts, {"band": [lo, hi], "m": args.m, "seed": args.seed,
                                 "source": str(args.ground_truth)})
    print(f"{len(ts)} targets -> {args.out}")
    return EXIT_OK


def cmd_tune_temp(args) -> int:
    weights, dist = load_model(args.model), load_dist(args.dist)
    targets = read_targets(args.targets)
    grid = args.grid or DEFAULT_TEMPERATURES
    best, table = tune_temperature(args.method, weights, dist, targets, grid=grid,
                                   budget=_budget(args.method, args.budget), seed=args.seed, loss=args.loss)
    doc = {"method": args.method, "temperature": best, "losses": {repr(k): v for k, v in table.items()}}
    if args.out:
        _write_json(Path(args.out), doc)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_estimate(args) -> int:
    weights, dist = load_model(args.model), load_dist(args.dist)
    targets = read_targets(args.targets)
    recs = estimate_stage(args.method, weights, dist, list(targets.tokens), _budget(args.method, args.budget),
                          args.temperature, args.seed, args.threads)
    write_records(args.out, recs)
    print(args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    targets = read_targets(args.targets)
    truth = dict(zip(targets.tokens, targets.probabilities))
    records = read_records(args.records)
    by_method: dict[str, list] = {}
    for r in records:
        if r.target not in truth:
            raise ConfigError(f"record for token {r.target} has no ground truth in {args.targets}")
        by_method.setdefault(r.method, []).append(r)
    reports = [evaluate_records(recs, [truth[r.target] for r in recs], args.loss)
               for _, recs in sorted(by_method.items())]
    const = constant_report(np.array(targets.probabilities), args.loss)
    const.tokens = list(targets.tokens)
    write_reports(reports + [const], args.out)
    for rep in reports + [const]:
        print(f"{rep.method:8s} mean={rep.mean_loss:.6g} loocv={rep.loocv_loss:.6g}")
    return EXIT_OK


def run_pipeline(cfg: RunConfig, threads: int = 1) -> Path:
    """Run all stages into ``cfg.out``; returns the output directory."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = out / "FAILED"
    if failed.exists():
        failed.unlink()
    weights, dist = load_model(cfg.model), load_dist(cfg.dist)
    seeds = {name: [cfg.seed, name] for name in ("ground_truth", "select", "tune", "estimate")}
    manifest = RunManifest(cfg.digest(), weights.digest(), dist.digest(), __version__, seeds, SCHEMAS,
                           {"started": time.strftime("%Y-%m-%dT%H:%M:%S%z")})
    manifest.write(out / "run_manifest.json")
    mhash = manifest.digest()
    meta = {"manifest_hash": mhash}

    def stage(name, fn):
        log.info("stage %s", name)
        try:
            return fn()
        except Exception as e:  # tag and re-raise; caller writes the FAILED marker
            raise StageError(name, e) from e

    probs, counts, gt_meta = stage("ground_truth", lambda: ground_truth_stage(
        weights, dist, cfg.ground_truth, cfg.seed, threads))
    if counts is not None:
        write_counts(out / "ground_truth.csv", counts, dict(gt_meta, **meta))
    else:
        write_probabilities(out / "ground_truth.csv", probs, dict(gt_meta, **meta))

    targets = stage("select", lambda: select_targets(probs, cfg.band, cfg.m, stream(cfg.seed, "select")))
    write_targets(out / "targets.csv", targets, dict(meta, band=list(cfg.band), m=cfg.m))
    if len(targets) < 4:
        raise StageError("select", ValueError(f"only {len(targets)} targets in band {cfg.band}; need at least 4"))

    temps = {}
    for method in cfg.methods:
        if method not in TEMPERED:
            continue
        if cfg.temperature != "tune":
            temps[method] = float(cfg.temperature)
            continue
        tune_targets = stage("tune", lambda: select_targets(
            probs, cfg.tune_band, cfg.tune_m, stream(cfg.seed, "select", "tune")))
        best, table = stage("tune", lambda: tune_temperature(
            method, weights, dist, tune_targets, budget=_budget(method, cfg.budget), seed=cfg.seed, loss=cfg.loss))
        temps[method] = best
        _write_json(out / f"tuning_{method}.json",
                    dict(meta, method=method, temperature=best, losses={repr(k): v for k, v in table.items()},
                         tokens=list(tune_targets.tokens)))

    records = []
    for method in cfg.methods:
        records += stage("estimate", lambda: estimate_stage(
            method, weights, dist, list(targets.tokens), _budget(method, cfg.budget),
            temps.get(method, 1.0), cfg.seed, threads))
    write_records(out / "estimates.csv", records)
    _write_json(out / "estimates.json", dict(meta, temperatures=temps, budget=cfg.budget))

    def evaluate():
        truth = np.array(targets.probabilities)
        reports = [evaluate_records([r for r in records if r.method == m], truth, cfg.loss) for m in cfg.methods]
        const = constant_report(truth, cfg.loss)
        const.tokens = list(targets.tokens)
        calls = {m: float(np.mean([r.model_calls_used for r in records if r.method == m])) for m in cfg.methods}
        write_reports(reports + [const], out / "evaluation.csv",
                      extra=dict(meta, mean_model_calls=calls, budget=cfg.budget))
        return reports + [const]

    reports = stage("evaluate", evaluate)
    for rep in reports:
        log.info("%-8s mean loss %.6g, LOOCV %.6g", rep.method, rep.mean_loss, rep.loocv_loss)
    return out


def cmd_pipeline(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.out:
        cfg = RunConfig(**dict(asdict(cfg), out=args.out))
    try:
        out = run_pipeline(cfg, args.threads)
    except StageError as e:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "FAILED").write_text(f"stage: {e.stage}\nerror: {type(e.cause).__name__}: {e.cause}\n")
        raise
    print(out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point


def _band(s):
    return float(s)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lowprob", description="Low-probability estimation for small transformers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")

    sp = sub.add_parser("gen-model", help="write a seeded random model")
    sp.add_argument("--spec", help="JSON file with ModelSpec fields")
    sp.add_argument("--layers", type=int, default=1)
    sp.add_argument("--d-model", type=int, default=16)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--d-mlp", type=int, default=None)
    sp.add_argument("--vocab-size", type=int, default=32)
    sp.add_argument("--seq-len", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_model)

    sp = sub.add_parser("gen-dist", help="write a synthetic distribution manifest")
    sp.add_argument("--family", choices=["uniform", "zipf", "alternating", "prefix"], required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--vocab-size", type=int, required=True)
    sp.add_argument("--n-tokens", type=int)
    sp.add_argument("--exponent", type=float)
    sp.add_argument("--n-prefix", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_dist)

    sp = sub.add_parser("ground-truth", help="exact or sampled argmax probabilities")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dist", required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--exact", action="store_true")
    g.add_argument("--samples", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    threads(sp)
    sp.set_defaults(fn=cmd_ground_truth)

    sp = sub.add_parser("select-targets", help="random targets within a probability band")
    sp.add_argument("--ground-truth", required=True)
    sp.add_argument("--band", type=_band, nargs=2, metavar=("LO", "HI"), default=(1e-6, 1e-4))
    sp.add_argument("--m", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_select_targets)

    sp = sub.add_parser("tune-temp", help="pick a temperature on tuning targets")
    sp.add_argument("--method", choices=TEMPERED, required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--dist", required=True)
    sp.add_argument("--targets", required=True)
    sp.add_argument("--budget", type=int, default=2**12)
    sp.add_argument("--grid", type=float, nargs="+")
    sp.add_argument("--loss", choices=LOSSES, default="is")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_tune_temp)

    sp = sub.add_parser("estimate", help="run one estimator on every target")
    sp.add_argument("--method", choices=METHODS, required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--dist", required=True)
    sp.add_argument("--targets", required=True)
    sp.add_argument("--budget", type=int, default=2**12)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    threads(sp)
    sp.set_defaults(fn=cmd_estimate)

    sp = sub.add_parser("evaluate", help="fit and score estimate records")
    sp.add_argument("--records", required=True)
    sp.add_argument("--targets", required=True)
    sp.add_argument("--loss", choices=LOSSES, default="is")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("pipeline", help="run every stage from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="override the config's output directory")
    threads(sp)
    sp.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "threads") and args.threads is None:
            args.threads = default_threads()
        if getattr(args, "threads", 1) < 1:
            raise ConfigError("--threads must be >= 1")
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(e.cause, NumericError) else EXIT_STAGE
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LowProbError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
