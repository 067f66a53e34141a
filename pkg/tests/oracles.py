"""Independent reference computations used by the tests.

Everything here is written with plain loops or direct numpy so it shares no
code path with the package under test.
"""
import numpy as np


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            c[i, j] = s
    return c


def naive_conv2d(x, w, stride=1):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                s += x[b, ch, i * stride + di, j * stride + dj] * w[o, ch, di, dj]
                    out[b, o, i, j] = s
    return out


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-5):
    """Entrywise relative error ``|a-b| / max(|a|, |b|, floor)``; returns the maximum."""
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def ce_per_sample(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + np.log(sum(np.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def brute_wanda(w, x):
    """``|W_ij| * ||X_j||`` from the raw ``samples x in`` activation matrix, by loops."""
    out = np.zeros(w.shape)
    for j in range(w.shape[1]):
        acc = 0.0
        for s in range(x.shape[0]):
            v = float(x[s, j])
            acc += v * v
        norm = np.sqrt(acc)
        for i in range(w.shape[0]):
            out[i, j] = abs(float(w[i, j])) * norm
    return out


def _prune_group(values, k):
    # sort by (score, index) and drop the first k
    order = sorted(range(len(values)), key=lambda t: (values[t], t))
    keep = [1.0] * len(values)
    for t in order[:k]:
        keep[t] = 0.0
    return keep


def sort_oracle_mask(scores, sparsity, scope):
    rows, cols = scores.shape
    if scope == "per_layer":
        flat = [float(v) for v in scores.ravel()]
        return np.array(_prune_group(flat, int(sparsity * len(flat) // 1))).reshape(rows, cols)
    return np.array([_prune_group([float(v) for v in r], int(sparsity * cols // 1)) for r in scores])


def nm_oracle_mask(scores, n, m):
    rows, cols = scores.shape
    out = np.zeros((rows, cols))
    for i in range(rows):
        for g in range(0, cols, m):
            idx = sorted(range(g, g + m), key=lambda t: (-scores[i, t], t))
            for t in idx[:n]:
                out[i, t] = 1.0
    return out


def scalar_quantize(v, max_abs, bits):
    """One value onto the symmetric grid, rounding half away from zero by hand."""
    lim = 2 ** (bits - 1) - 1
    if max_abs == 0:
        return 0
    t = v / (max_abs / lim)
    mag = int(abs(t) + 0.5)
    q = mag if t >= 0 else -mag
    return max(-lim, min(lim, q))


def two_pass_stats(a):
    """Per-column min, max, mean, population std, max-abs by an explicit two-pass scan."""
    rows, cols = a.shape
    mn, mx, mean, std, max_abs = (np.zeros(cols) for _ in range(5))
    for j in range(cols):
        col = [float(a[i, j]) for i in range(rows)]
        m = sum(col) / rows
        mean[j] = m
        std[j] = np.sqrt(sum((v - m) ** 2 for v in col) / rows)
        mn[j], mx[j] = min(col), max(col)
        max_abs[j] = max(abs(v) for v in col)
    return mn, mx, mean, std, max_abs
