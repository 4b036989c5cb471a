"""Independent reference implementations used by the tests.

Each oracle is written for clarity (explicit loops, no shared helpers with
the package) so agreement is meaningful.
"""
import math

import numpy as np


def brute_force_rates(targets, nontargets):
    """Miss/false-alarm rates at -inf, every midpoint between adjacent distinct scores, and +inf."""
    allscores = sorted(set(list(targets) + list(nontargets)))
    cands = [-math.inf] + [(a + b) / 2 for a, b in zip(allscores, allscores[1:])] + [math.inf]
    rates = []
    for th in cands:
        miss = sum(1 for s in targets if s < th) / len(targets)
        fa = sum(1 for s in nontargets if s >= th) / len(nontargets)
        rates.append((miss, fa))
    return rates


def eer_oracle(targets, nontargets):
    """Intersect the segment joining consecutive operating points with the line miss == fa."""
    pts = brute_force_rates(targets, nontargets)
    for k, (miss, fa) in enumerate(pts):
        if fa <= miss:
            if fa == miss or k == 0:
                return miss
            m0, f0 = pts[k - 1]
            # solve f0 + w (fa - f0) == m0 + w (miss - m0)
            w = (f0 - m0) / ((f0 - m0) - (fa - miss))
            return m0 + w * (miss - m0)
    raise AssertionError("curves never cross")


def min_dcf_oracle(targets, nontargets, p_target=0.01, c_miss=1.0, c_fa=1.0):
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    return min((c_miss * m * p_target + c_fa * f * (1 - p_target)) / norm
               for m, f in brute_force_rates(targets, nontargets))


def softmax_xent(logits, label):
    """Cross-entropy of a single logit row, via math.fsum in plain python."""
    top = max(logits)
    lse = top + math.log(math.fsum(math.exp(z - top) for z in logits))
    return lse - logits[label]


def aam_oracle(emb, weights, label, margin, scale):
    e = np.asarray(emb, dtype=np.float64)
    e = e / math.sqrt(float(np.dot(e, e)))
    logits = []
    for j, w in enumerate(np.asarray(weights, dtype=np.float64)):
        c = float(np.dot(e, w) / math.sqrt(float(np.dot(w, w))))
        if j == label:
            c = math.cos(math.acos(max(-1.0, min(1.0, c))) + margin)
        logits.append(scale * c)
    return softmax_xent(logits, label)


def unweighted_stats(h, eps=1e-6):
    """Per-channel mean and std over time of one [C, T] matrix, loop form."""
    C, T = h.shape
    mu = np.array([sum(h[c]) / T for c in range(C)])
    sd = np.array([math.sqrt(max(sum(v * v for v in h[c]) / T - mu[c] ** 2, eps)) for c in range(C)])
    return mu, sd


def weighted_stats(h, alpha, eps=1e-6):
    C, T = h.shape
    mu = np.array([sum(alpha[c, t] * h[c, t] for t in range(T)) for c in range(C)])
    sd = np.array([math.sqrt(max(sum(alpha[c, t] * h[c, t] ** 2 for t in range(T)) - mu[c] ** 2, eps))
                   for c in range(C)])
    return mu, sd


def triangular2(it, lr_min, lr_max, cycle):
    i, x = divmod(it, cycle)
    x = x / cycle
    return lr_min + (lr_max - lr_min) * (1 - abs(2 * x - 1)) / (2 ** i)
