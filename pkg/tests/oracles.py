"""Independent reference implementations used only by the tests.

Each oracle takes a deliberately different route from the code it checks:
explicit loops, brute-force enumeration or composition from primitives.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from tbcough import autodiff as ad


def lstm_unfused(x, mask, w_ih, w_hh, b, reverse=False):
    """Single-direction LSTM composed from elementwise/matmul primitives."""
    B, T, _ = x.shape
    H = w_hh.shape[0]
    h = ad.Tensor(np.zeros((B, H), dtype=x.dtype))
    c = ad.Tensor(np.zeros((B, H), dtype=x.dtype))
    outs = [None] * T
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        a = x[:, t, :] @ w_ih + h @ w_hh + b
        i = ad.sigmoid(a[:, :H])
        f = ad.sigmoid(a[:, H:2 * H])
        g = ad.tanh(a[:, 2 * H:3 * H])
        o = ad.sigmoid(a[:, 3 * H:])
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        m = mask[:, t:t + 1].astype(x.dtype)
        h = h_new * m + h * (1 - m)
        c = c_new * m + c * (1 - m)
        outs[t] = h
    return ad.stack(outs, axis=1)


def auc_pairwise(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly; ties count half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def eer_sweep(scores, labels):
    """EER by sweeping every candidate threshold and counting errors directly.

    Candidates: midpoints of adjacent distinct scores plus one point beyond
    each end. Returns (gamma, eer) at the interpolated FPR = FNR crossing.
    """
    scores = [float(s) for s in scores]
    u = sorted(set(scores))
    span = max(u[-1] - u[0], 1e-6)
    cands = [u[-1] + span] + [(u[k] + u[k + 1]) / 2 for k in range(len(u) - 2, -1, -1)] + [u[0] - span]
    n_pos = sum(1 for l in labels if l == 1)
    n_neg = len(labels) - n_pos
    pts = []
    for t in cands:
        fp = sum(1 for s, l in zip(scores, labels) if l == 0 and s >= t)
        fn = sum(1 for s, l in zip(scores, labels) if l == 1 and s < t)
        pts.append((t, fp / n_neg, fn / n_pos))
    for (t0, fpr0, fnr0), (t1, fpr1, fnr1) in zip(pts, pts[1:]):
        d0, d1 = fpr0 - fnr0, fpr1 - fnr1
        if d1 == 0:
            return min(max(t1, 0.0), 1.0), fpr1
        if d0 < 0 < d1:
            lam = -d0 / (d1 - d0)
            return (min(max(t0 + lam * (t1 - t0), 0.0), 1.0), fpr0 + lam * (fpr1 - fpr0))
    raise AssertionError("no crossing")


def ge2e_bruteforce(emb: np.ndarray, labels, w: float, b: float) -> float:
    """Softmax GE2E with explicit loops over embeddings and classes."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = list(labels)
    classes = sorted(set(labels))

    def cos(u, v):
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

    total = 0.0
    for i, (e, j) in enumerate(zip(emb, labels)):
        sims = {}
        for k in classes:
            members = [emb[n] for n in range(len(emb)) if labels[n] == k and not (k == j and n == i)]
            centroid = np.mean(members, axis=0)
            sims[k] = w * cos(e, centroid) + b
        lse = math.log(sum(math.exp(s) for s in sims.values()))
        total += lse - sims[j]
    return total


def best_subsets(score, n_bins: int, max_size: int):
    """Exhaustive best subset of each size (ties: lexicographically smallest)."""
    out = {}
    for k in range(1, max_size + 1):
        best = None
        for combo in itertools.combinations(range(n_bins), k):
            s = score(list(combo))
            if best is None or s > best[1]:
                best = (list(combo), s)
        out[k] = best
    return out


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g
