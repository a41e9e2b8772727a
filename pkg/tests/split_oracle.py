"""Brute-force split enumeration used as the reference for best_split."""

import numpy as np


def brute_force_split(X, g, h, lam, gamma, min_child_weight=0.0):
    """Scan every (feature, threshold) pair with plain Python loops.

    Returns (feature, threshold, gain) or None. Ties keep the first
    candidate seen, which is the lowest feature and then the lowest threshold.
    """
    n, d = X.shape
    G, H = float(np.sum(g)), float(np.sum(h))
    best = None
    for f in range(d):
        values = sorted(set(X[:, f].tolist()))
        for lo, hi in zip(values, values[1:]):
            t = 0.5 * (lo + hi)
            GL = HL = 0.0
            for i in np.argsort(X[:, f], kind="stable"):
                if X[i, f] < t:
                    GL += g[i]
                    HL += h[i]
            GR, HR = G - GL, H - HL
            if HL < min_child_weight or HR < min_child_weight:
                continue
            gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - (GL + GR) ** 2 / (HL + HR + lam)) - gamma
            if best is None or gain > best[2]:
                best = (f, t, gain)
    if best is None or not best[2] > 0:
        return None
    return best


def random_instance(rng, dyadic):
    n = int(rng.integers(2, 65))
    d = int(rng.integers(1, 6))
    X = rng.integers(0, 8, size=(n, d)).astype(float) if rng.random() < 0.5 else rng.normal(size=(n, d))
    if dyadic:
        g = rng.integers(-8, 9, n) / 8.0
        h = rng.integers(1, 9, n) / 8.0
    else:
        g = rng.normal(size=n)
        h = rng.uniform(0.01, 1.0, n)
    lam = float(rng.choice([0.0, 0.5, 1.0, 2.0]))
    gamma = float(rng.choice([0.0, 0.0, 0.1]))
    return X, g, h, lam, gamma
