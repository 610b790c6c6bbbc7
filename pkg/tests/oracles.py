"""Slow, loop-based reference implementations used to cross-check the library."""
import itertools
import math
from fractions import Fraction

import numpy as np

IGNORE = 65535


def confusion(gt, pred, c):
    t = [[0] * (c + 1) for _ in range(c + 1)]
    for g, p in zip(np.asarray(gt).ravel().tolist(), np.asarray(pred).ravel().tolist()):
        if g == IGNORE:
            continue
        t[g][p] += 1
    return t


def miou(pairs, c):
    """Exact mean IoU (as a Fraction, in percent) over classes with non-empty union."""
    t = [[0] * (c + 1) for _ in range(c + 1)]
    for gt, pred in pairs:
        part = confusion(gt, pred, c)
        for i in range(c + 1):
            for j in range(c + 1):
                t[i][j] += part[i][j]
    ious = []
    for i in range(c + 1):
        union = sum(t[i]) + sum(row[i] for row in t) - t[i][i]
        if union:
            ious.append(Fraction(t[i][i], union))
    return 100 * sum(ious) / len(ious)


def band(mask, r):
    """Mask pixels within distance r of a non-mask pixel (outside the image counts)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    outside = [(i, j) for i in range(-1, h + 1) for j in range(-1, w + 1)
               if not (0 <= i < h and 0 <= j < w) or not mask[i, j]]
    out = np.zeros_like(mask)
    for i, j in zip(*np.nonzero(mask)):
        out[i, j] = any((i - a) ** 2 + (j - b) ** 2 <= r * r for a, b in outside)
    return out


def boundary_miou(pairs, c, r):
    inter = [0] * (c + 1)
    union = [0] * (c + 1)
    for gt, pred in pairs:
        gt, pred = np.asarray(gt), np.asarray(pred)
        valid = gt != IGNORE
        for k in range(c + 1):
            gb = band(gt == k, r)
            pb = band(pred == k, r)
            inter[k] += int(np.sum(gb & pb & valid))
            union[k] += int(np.sum((gb | pb) & valid))
    ious = [Fraction(i, u) for i, u in zip(inter, union) if u]
    return 100 * sum(ious) / len(ious)


def img_acc(pred, gt_set):
    counts = {}
    for p in np.asarray(pred).ravel().tolist():
        if p not in (0, IGNORE):
            counts[p] = counts.get(p, 0) + 1
    if not counts:
        return False
    best = min(counts, key=lambda k: (-counts[k], k))
    return best in gt_set


def f_beta(gt, pred, beta_sq=Fraction(3, 10)):
    tp = fp = fn = 0
    for g, p in zip(np.asarray(gt).ravel().tolist(), np.asarray(pred).ravel().tolist()):
        if g == IGNORE:
            continue
        gf, pf = g != 0, p != 0
        tp += gf and pf
        fp += pf and not gf
        fn += gf and not pf
    if tp + fn == 0:
        return None
    if tp == 0:
        return Fraction(0)
    prec = Fraction(tp, tp + fp)
    rec = Fraction(tp, tp + fn)
    return (1 + beta_sq) * prec * rec / (beta_sq * prec + rec)


def best_assignment(s):
    """Exhaustive maximum of sum_i S[i, f(i)] and the lexicographically smallest optimal f (1-based)."""
    n = len(s)
    best, arg = None, None
    for perm in itertools.permutations(range(n)):
        v = sum(int(s[i][perm[i]]) for i in range(n))
        if best is None or v > best:
            best, arg = v, perm
    return best, [j + 1 for j in arg]


def radius(h, w, d):
    return max(1, math.floor(d * math.hypot(h, w) + 0.5))
