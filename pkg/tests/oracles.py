"""Independent reference implementations with explicit loops.

Nothing here imports from ``oen``; these are the yardsticks the package is
checked against.
"""

import math


def cos_sim(u, v, eps=1e-12):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu < eps or nv < eps:
        return 0.0
    return dot / (nu * nv)


def self_orth(bank):
    rows = [list(r) for r in bank]
    total = 0.0
    for i in range(len(rows)):
        for j in range(len(rows)):
            if i != j:
                total += cos_sim(rows[i], rows[j]) ** 2
    return 0.5 * total


def inter_orth(bank, prev_banks):
    if not prev_banks:
        return 0.0
    rows = [list(r) for r in bank]
    acc = 0.0
    for prev in prev_banks:
        for u in rows:
            for v in prev:
                acc += cos_sim(u, list(v)) ** 2
    return acc / len(prev_banks)


def brier(probs, labels):
    """probs: list over pixels of per-class probability lists."""
    k = len(probs[0])
    total = 0.0
    for p, y in zip(probs, labels):
        total += sum((p[c] - (1.0 if c == y else 0.0)) ** 2 for c in range(k)) / k
    return total / len(probs)


def stratified_brier(probs, labels, cls):
    sel = [p[cls] for p, y in zip(probs, labels) if y == cls]
    if not sel:
        return None
    return sum((1.0 - q) ** 2 for q in sel) / len(sel)


def dice(pred_labels, true_labels, cls):
    a = sum(1 for p in pred_labels if p == cls)
    b = sum(1 for t in true_labels if t == cls)
    both = sum(1 for p, t in zip(pred_labels, true_labels) if p == cls and t == cls)
    if a + b == 0:
        return 1.0
    return 2.0 * both / (a + b)
