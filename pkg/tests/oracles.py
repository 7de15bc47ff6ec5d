"""Brute-force numpy references, written without looking at the torch code paths."""

import math

import numpy as np


def cmf_direction(anchor, other, tau, intra=False):
    """Mean over i of -log(exp(s_ii) / sum of candidate exps); also returns per-row term counts."""
    n = anchor.shape[0]
    losses, counts = [], []
    for i in range(n):
        num = math.exp(float(np.dot(anchor[i], other[i])) / tau)
        den, terms = 0.0, 0
        for j in range(n):
            den += math.exp(float(np.dot(anchor[i], other[j])) / tau)
            terms += 1
        if intra:
            for j in range(n):
                if j != i:
                    den += math.exp(float(np.dot(anchor[i], anchor[j])) / tau)
                    terms += 1
        losses.append(-math.log(num / den))
        counts.append(terms)
    return sum(losses) / n, counts


def cmf_full_matrix(za, zb, tau, alpha=0.5, beta=0.5):
    """Builds the 2N x 2N similarity matrix, masks intra-modality blocks, then evaluates termwise."""
    n = za.shape[0]
    z = np.concatenate([za, zb])
    sim = np.empty((2 * n, 2 * n))
    for r in range(2 * n):
        for c in range(2 * n):
            sim[r, c] = float(np.dot(z[r], z[c])) / tau
    a2b = b2a = 0.0
    for i in range(n):
        row = [sim[i, n + j] for j in range(n)]
        a2b += -(sim[i, n + i] - math.log(sum(math.exp(v) for v in row)))
        row = [sim[n + i, j] for j in range(n)]
        b2a += -(sim[n + i, i] - math.log(sum(math.exp(v) for v in row)))
    return alpha * a2b / n + beta * b2a / n


def usage_entropy(ya, yb):
    n, k = ya.shape
    h = 0.0
    for j in range(k):
        pa = sum(ya[r, j] for r in range(n)) / n
        pb = sum(yb[r, j] for r in range(n)) / n
        p = 0.5 * (pa + pb)
        if p > 0:
            h -= p * math.log(p)
    return h


def mpc(ya, yb, tau_hat, lambda_pr, normalize=True):
    """Enumerates all 2*N_cls columns; negatives are every column except the anchor and its positive."""
    k = ya.shape[1]
    cols = []
    for y in (ya, yb):
        for j in range(k):
            q = np.array(y[:, j], dtype=np.float64)
            if normalize:
                q = q / math.sqrt(sum(v * v for v in q))
            cols.append(q)
    total = 0.0
    for side in (0, 1):
        for i in range(k):
            anchor = cols[side * k + i]
            pos = cols[(1 - side) * k + i]
            num = math.exp(float(np.dot(anchor, pos)) / tau_hat)
            den = 0.0
            for c, q in enumerate(cols):
                if c == side * k + i:
                    continue
                den += math.exp(float(np.dot(anchor, q)) / tau_hat)
            total += -math.log(num / den)
    return total / (2 * k) + lambda_pr * usage_entropy(ya, yb), usage_entropy(ya, yb)


def mpc_term_count(k):
    # one positive plus 2k - 2 negatives
    return 1 + (2 * k - 2)


def nll(probs, labels):
    return sum(-math.log(probs[r, labels[r]]) for r in range(len(labels))) / len(labels)


def central_difference(f, x, idx, h=1e-5):
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def prob_rows(rng, n, k):
    x = rng.standard_normal((n, k))
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def accuracy_count(y_true, y_pred):
    hits = 0
    for t, p in zip(y_true, y_pred):
        hits += int(t == p)
    return hits / len(y_true)


def argmax_lowest(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def pearson(x, y):
    mx, my = sum(x) / len(x), sum(y) / len(y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)
