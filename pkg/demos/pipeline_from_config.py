"""Drive the command-line pipeline from Python on a generated model.

Writes a random 1-layer model, a uniform input distribution and a JSON run
config into a scratch directory, then runs ground truth, target selection,
temperature tuning, estimation and evaluation. Equivalent shell:

    lowprob gen-model --layers 1 --d-model 16 --vocab-size 64 --seq-len 6 --out model.json
    lowprob gen-dist --family uniform --k 6 --vocab-size 64 --n-tokens 64 --out dist.json
    lowprob pipeline --config config.json

    python demos/pipeline_from_config.py [output_dir]
"""
import json
import sys
import tempfile
from pathlib import Path

from lowprob import cli

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="lowprob-demo-"))
root.mkdir(parents=True, exist_ok=True)
cli.main(["gen-model", "--layers", "1", "--d-model", "16", "--vocab-size", "64", "--seq-len", "6",
          "--seed", "0", "--out", str(root / "model.json")])
cli.main(["gen-dist", "--family", "uniform", "--k", "6", "--vocab-size", "64", "--n-tokens", "64",
          "--out", str(root / "dist.json")])
(root / "config.json").write_text(json.dumps({
    "model": "model.json", "dist": "dist.json", "out": "run", "seed": 0,
    "budget": 2**12, "band": [1e-5, 1e-3], "m": 24, "ground_truth": 2**20,
    "temperature": "tune", "tune_band": [1e-3, 1e-1], "tune_m": 8,
}, indent=2))
rc = cli.main(["pipeline", "--config", str(root / "config.json")])
if rc:
    sys.exit(rc)
summary = json.loads((root / "run" / "evaluation.json").read_text())
print(f"results in {root / 'run'}")
for rep in summary["reports"]:
    print(f"{rep['method']:>8}  {rep['n_targets']} targets  fitted IS loss {rep['mean_loss']:.3f}  "
          f"LOOCV {rep['loocv_loss']:.3f}")
