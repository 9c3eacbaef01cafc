"""Independent reference implementations written as literal loops over the definitions."""
import math

import numpy as np


def _softmax_row(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def _vecmat(x, W):
    return [sum(x[i] * W[i][j] for i in range(len(x))) for j in range(len(W[0]))]


def oracle_tfa(x, wq, wk, wv, phi):
    """Straight-line per-frame q/k/v, kernel-weighted keys/values, then per-frame attention."""
    T, N, _ = len(x), len(x[0]), len(x[0][0])
    q = [[_vecmat(x[t][n], wq) for n in range(N)] for t in range(T)]
    k = [[_vecmat(x[t][n], wk) for n in range(N)] for t in range(T)]
    v = [[_vecmat(x[t][n], wv) for n in range(N)] for t in range(T)]
    dk = len(wq[0])
    out = []
    for t in range(T):
        k_hat = [[sum(phi[t][tau] * k[tau][n][j] for tau in range(T)) for j in range(dk)] for n in range(N)]
        v_hat = [[sum(phi[t][tau] * v[tau][n][j] for tau in range(T)) for j in range(dk)] for n in range(N)]
        frame = []
        for n in range(N):
            scores = [sum(q[t][n][j] * k_hat[m][j] for j in range(dk)) / math.sqrt(dk) for m in range(N)]
            a = _softmax_row(scores)
            frame.append([sum(a[m] * v_hat[m][j] for m in range(N)) for j in range(dk)])
        out.append(frame)
    return np.array(out)


def oracle_cross(fv, fc, wq, wk, wv):
    dk = len(wq[0])
    out = []
    for row in fv:
        q = _vecmat(row, wq)
        keys = [_vecmat(c, wk) for c in fc]
        vals = [_vecmat(c, wv) for c in fc]
        a = _softmax_row([sum(q[j] * key[j] for j in range(dk)) / math.sqrt(dk) for key in keys])
        out.append([row[j] + sum(a[m] * vals[m][j] for m in range(len(fc))) for j in range(dk)])
    return np.array(out)


def triple_sum(u, s, v):
    """dW[j, k] = sum_{t1, t2} S[t1, t2] U[j, t1] V[k, t2], as explicit loops."""
    d, r = u.shape
    out = np.zeros((d, d))
    for j in range(d):
        for k in range(d):
            acc = 0.0
            for t1 in range(r):
                for t2 in range(r):
                    acc += s[t1, t2] * u[j, t1] * v[k, t2]
            out[j, k] = acc
    return out


def brute_hausdorff(a, b):
    def directed(p, q):
        worst = 0.0
        for y0, x0 in p:
            best = min(math.sqrt((y0 - y1) * (y0 - y1) + (x0 - x1) * (x0 - x1)) for y1, x1 in q)
            worst = max(worst, best)
        return worst
    return max(directed(a, b), directed(b, a))


def brute_assd(a, b):
    def mins(p, q):
        return [min(math.sqrt((y0 - y1) * (y0 - y1) + (x0 - x1) * (x0 - x1)) for y1, x1 in q) for y0, x0 in p]
    d = mins(a, b) + mins(b, a)
    return math.fsum(d) / len(d)


def literal_l(areas, points=32):
    peak = max(areas)
    norm = [v / peak for v in areas]
    n = len(norm)
    curve = []
    for i in range(points):
        t = i / (points - 1) * (n - 1)
        j = min(int(math.floor(t)), n - 2)
        frac = t - j
        curve.append(norm[j] * (1 - frac) + norm[j + 1] * frac)
    second = [abs(curve[i + 1] + curve[i - 1] - 2 * curve[i]) for i in range(1, points - 1)]
    return sum(second) / len(second)


def literal_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)
