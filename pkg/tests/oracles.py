"""Independent reference implementations, written as plain loops.

None of these call into the package; they exist to check it.
"""

import math
import statistics


def info_nce(q, kp, queue, tau):
    total = 0.0
    for b in range(len(q)):
        pos = sum(x * y for x, y in zip(q[b], kp[b])) / tau
        logits = [pos] + [sum(x * y for x, y in zip(q[b], z)) / tau for z in queue]
        m = max(logits)
        total += m + math.log(sum(math.exp(v - m) for v in logits)) - pos
    return total / len(q)


def cross_correlation(za, zb):
    b, d = len(za), len(za[0])
    c = [[0.0] * d for _ in range(d)]
    for i in range(d):
        for j in range(d):
            num = sum(za[k][i] * zb[k][j] for k in range(b))
            na = math.sqrt(sum(za[k][i] ** 2 for k in range(b)))
            nb = math.sqrt(sum(zb[k][j] ** 2 for k in range(b)))
            c[i][j] = num / (na * nb)
    return c


def barlow_twins(c, lam):
    total = 0.0
    for i in range(len(c)):
        for j in range(len(c)):
            total += (1 - c[i][j]) ** 2 if i == j else lam * c[i][j] ** 2
    return total


def auroc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def f1_count(preds, labels):
    tp = sum(1 for p, y in zip(preds, labels) if p and y)
    fp = sum(1 for p, y in zip(preds, labels) if p and not y)
    fn = sum(1 for p, y in zip(preds, labels) if not p and y)
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def _rbf(rows, fraction):
    n = len(rows)
    dist = [[math.sqrt(sum((a - b) ** 2 for a, b in zip(rows[i], rows[j]))) for j in range(n)] for i in range(n)]
    sigma = fraction * statistics.median(dist[i][j] for i in range(n) for j in range(i + 1, n))
    return [[math.exp(-dist[i][j] ** 2 / (2 * sigma ** 2)) for j in range(n)] for i in range(n)]


def _centered(k):
    n = len(k)
    row = [sum(k[i]) / n for i in range(n)]
    col = [sum(k[i][j] for i in range(n)) / n for j in range(n)]
    tot = sum(row) / n
    return [[k[i][j] - row[i] - col[j] + tot for j in range(n)] for i in range(n)]


def cka_rbf(x, y, fraction=0.8):
    kc, lc = _centered(_rbf(x, fraction)), _centered(_rbf(y, fraction))
    n = len(kc)
    dot = lambda a, b: sum(a[i][j] * b[i][j] for i in range(n) for j in range(n))
    return dot(kc, lc) / math.sqrt(dot(kc, kc) * dot(lc, lc))


def ks_binned(a, b, num_bins=40):
    lo, hi = min(min(a), min(b)), max(max(a), max(b))
    if lo == hi:
        return 0.0
    width = (hi - lo) / num_bins

    def bin_of(v):
        i = int((v - lo) // width)
        # guard against floor rounding right at an edge
        while i > 0 and v < lo + i * width:
            i -= 1
        while i < num_bins - 1 and v >= lo + (i + 1) * width:
            i += 1
        return min(max(i, 0), num_bins - 1)

    ca, cb = [0] * num_bins, [0] * num_bins
    for v in a:
        ca[bin_of(v)] += 1
    for v in b:
        cb[bin_of(v)] += 1
    best, fa, fb = 0.0, 0, 0
    for i in range(num_bins):
        fa += ca[i]
        fb += cb[i]
        best = max(best, abs(fa / len(a) - fb / len(b)))
    return best
