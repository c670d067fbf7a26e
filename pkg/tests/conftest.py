"""Shared test helpers: independent brute-force references and generators.

Everything here is deliberately written as straightforward loops, independent
of the vectorized implementation paths it is used to check.
"""

import numpy as np

from anytime_exits.logit_store import LogitDataset


# -- generators --------------------------------------------------------------

def synthetic_eenn(n, m, k, seed, strengths=None):
    """iid samples whose later exits carry a stronger class signal."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=n).astype(np.int32)
    strengths = np.linspace(0.5, 3.0, m) if strengths is None else np.asarray(strengths)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    logits = (
        onehot[:, None, :] * strengths[None, :, None]
        + rng.standard_normal((n, m, k))
    )
    return LogitDataset.from_arrays(logits, labels)


# -- finite differences ------------------------------------------------------

def finite_difference(model, x, y, loss_fn, step=1e-5):
    flat = model.get_flat()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        p = flat.copy()
        p[i] += step
        model.set_flat(p)
        up = loss_fn(model, x, y)
        p[i] -= 2 * step
        model.set_flat(p)
        down = loss_fn(model, x, y)
        grad[i] = (up - down) / (2 * step)
    model.set_flat(flat)
    return grad


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


# -- brute-force metric references -------------------------------------------

def brute_max_drop(seq):
    best = 0.0
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            best = max(best, max(seq[i] - seq[j], 0.0))
    return best


def brute_max_rise(seq):
    best = 0.0
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            best = max(best, max(seq[j] - seq[i], 0.0))
    return best


def brute_counts(values, thresholds):
    return [sum(1 for v in values if v >= t) for t in thresholds]


def brute_mono_zero(rows):
    n = len(rows)
    mono = sum(1 for r in rows if all(r[i] <= r[i + 1] for i in range(len(r) - 1)))
    zero = sum(1 for r in rows if not any(r))
    return 100.0 * mono / n, 100.0 * zero / n


def brute_overthinking(rows):
    oracle = sum(1 for r in rows if any(r)) / len(rows)
    final = sum(1 for r in rows if r[-1]) / len(rows)
    return oracle, final, oracle - final


def brute_hi(rows):
    m = len(rows[0])
    out = []
    for j in range(m):
        wrong = [r for r in rows if not r[j]]
        if j == 0 or not wrong:
            out.append(0.0)
        else:
            saved = sum(1 for r in wrong if any(r[:j]))
            out.append(100.0 * saved / len(wrong))
    return out


def brute_learn_forget(rows, first_only=False):
    m = len(rows[0])
    learned = [0] * m
    forgot = [0] * m
    for r in rows:
        for j in range(m):
            if r[j] and not any(r[:j]):
                learned[j] += 1
        done = False
        for j in range(1, m):
            if r[j - 1] and not r[j]:
                if not (first_only and done):
                    forgot[j] += 1
                done = True
    return learned, forgot


def brute_ece(confs, correct, n_bins):
    n = len(confs)
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = [
            i for i, c in enumerate(confs)
            if (lo <= c < hi) or (b == n_bins - 1 and c == 1.0)
        ]
        if not members:
            continue
        acc = sum(correct[i] for i in members) / len(members)
        conf = sum(confs[i] for i in members) / len(members)
        total += len(members) / n * abs(acc - conf)
    return total


def brute_entropy(p):
    return -sum(v * np.log(v) for v in p if v > 0)


def brute_auroc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


def brute_intersect(members):
    """Pairwise fold intersection, an independent path to the same product."""
    lo, hi = members[0]
    for a, b in members[1:]:
        lo, hi = max(lo, a), min(hi, b)
        if lo >= hi:
            return None
    return (lo, hi)
