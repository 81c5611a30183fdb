"""Why recombining activation components helps, on two Gaussian coordinates.

The target fires when ``alpha * a + sqrt(1 - alpha^2) * b > 4`` for
independent standard normals. Pairing ``a`` from one sample with ``b`` from
another gives n^2 synthetic points from n samples. When both coordinates
contribute (alpha near 1/sqrt(2)) this finds the rare event far more often
than looking at the n matched pairs alone.

    python demos/pair_counting_advantage.py
"""
import numpy as np
from scipy.stats import norm

from lowprob.estimators import WhiteningTransform, count_accepting_pairs
from lowprob.rng import stream

p = norm.cdf(-4.0)
tr = WhiteningTransform(np.array([0.0, 0.0, 1.0]), np.eye(3), 0.0)
e_a = np.array([1.0, 0.0, 0.0])
print(f"p = {p:.3e}")
print(f"{'alpha':>6} {'n':>6}  {'pair > 0':>8}  {'pair in [p/2, 2p]':>17}  {'naive > 0':>9}")
for alpha in (1.0, 2 / np.sqrt(5), 1 / np.sqrt(2)):
    beta = np.sqrt(1 - alpha**2)
    # logit_t = alpha a + beta b, competitor logit = 4 via the constant coordinate
    W_U = np.array([[alpha, 0.0], [beta, 0.0], [0.0, 4.0]])
    for n in (512, 2048, 8192):
        pos = near = naive = 0
        for seed in range(50):
            ab = stream(seed, "demo", n).standard_normal((n, 2))
            u = np.column_stack([ab, np.zeros(n)])
            est = count_accepting_pairs(u, e_a, tr, W_U, 0) / n**2
            pos += est > 0
            near += p / 2 <= est <= 2 * p
            naive += np.any(ab @ [alpha, beta] > 4)
        print(f"{alpha:6.3f} {n:6d}  {pos:6d}/50  {near:15d}/50  {naive:7d}/50")
