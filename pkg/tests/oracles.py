"""Independent scalar-loop reference computations shared by the unit and acceptance tests."""

import itertools
import math

import numpy as np


def infonce_two_loop(q, k, tau):
    b = len(q)
    total = 0.0
    for i in range(b):
        logits = [math.fsum(float(q[i, c]) * float(k[j, c]) for c in range(q.shape[1])) / tau for j in range(b)]
        top = max(logits)
        denom = math.fsum(math.exp(x - top) for x in logits)
        total += -(logits[i] - top - math.log(denom))
    return total / b


def bce_loop(pred, target, floor=1e-7):
    acc = []
    for p, y in zip(np.ravel(pred), np.ravel(target)):
        p = min(max(float(p), floor), 1.0 - floor)
        acc.append(-(y * math.log(p) + (1 - y) * math.log(1 - p)))
    return math.fsum(acc) / len(acc)


def kappa_direct(cm):
    """Quadratic weighted kappa from the observed/expected double sums."""
    g = len(cm)
    n = math.fsum(math.fsum(row) for row in cm)
    rows = [math.fsum(cm[i]) for i in range(g)]
    cols = [math.fsum(cm[i][j] for i in range(g)) for j in range(g)]
    num = den = 0.0
    for i in range(g):
        for j in range(g):
            w = (i - j) ** 2 / (g - 1) ** 2
            num += w * cm[i][j]
            den += w * rows[i] * cols[j] / n
    return 1.0 - num / den


def brute_force_kept(scores, n_remove):
    """Best-sum subset by exhaustive search; equal sums resolved by removing higher indices."""
    n = len(scores)
    best_key, best = None, None
    for kept in itertools.combinations(range(n), n - n_remove):
        total = math.fsum(scores[i] for i in kept)
        removed = sorted(set(range(n)) - set(kept), reverse=True)
        key = (total, removed)
        if best_key is None or key > best_key:
            best_key, best = key, kept
    return np.array(best, dtype=np.int64)
