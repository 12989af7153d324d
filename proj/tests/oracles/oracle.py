"""Straight-line numpy reimplementation of the attention stack.

Independent of the C++ code: only the documented conventions are shared
(centred conv taps with zero padding, pooling windows [floor(i*n/m),
ceil((i+1)*n/m)), nearest-neighbour upsampling, relative projected-gradient
step). Parameters come from the closed-form `wave` generator so both sides
build identical inputs. Writes expected_values.inc next to this file.
"""
import math
import os

import numpy as np


def wave(count, a, c, s):
    return s * np.sin(a * (np.arange(count) + 1) + c)


def mat(rows, cols, a, c, s):
    return wave(rows * cols, a, c, s).reshape(rows, cols)


def kernel(k, d_in, d_out, a, c, s):
    return wave(k * d_in * d_out, a, c, s).reshape(k, d_in, d_out)


def conv1d(x, w, stride, dilation):
    k = w.shape[0]
    half = (k - 1) // 2
    rows = x.shape[0]
    n_out = rows if stride == 1 else rows // stride
    y = np.zeros((n_out, w.shape[2]))
    for j in range(n_out):
        for t in range(k):
            p = j * stride + (t - half) * dilation
            if 0 <= p < rows:
                y[j] += x[p] @ w[t]
    return y


def pool(x, n_out):
    rows = x.shape[0]
    out = np.zeros((n_out, x.shape[1]))
    for i in range(n_out):
        lo = (i * rows) // n_out
        hi = -((-(i + 1) * rows) // n_out)
        out[i] = x[lo:hi].max(axis=0)
    return out


def upsample(o, n):
    m = o.shape[0]
    return np.stack([o[(i * m) // n] for i in range(n)])


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attend(xq, wq, wk, v, dk):
    return softmax((xq @ wq) @ (xq @ wk).T / math.sqrt(dk)) @ v


def project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = max(j for j in range(len(u)) if u[j] - (css[j] - 1) / (j + 1) > 0)
    theta = (css[rho] - 1) / (rho + 1)
    return np.maximum(v - theta, 0)


def co_weights(cands, target, lam, iters, step, tol):
    L = len(cands)
    G = np.array([[np.sum(a * b) for b in cands] for a in cands])
    b = np.array([np.sum(c * target) for c in cands])
    alpha = step / (2 * np.trace(G))
    w = np.full(L, 1.0 / L)
    for _ in range(iters):
        nxt = project_simplex(w - alpha * (2 * (G @ w - b) + lam))
        change = np.max(np.abs(nxt - w))
        w = nxt
        if change < tol:
            break
    return w


def attention_case():
    n, d, dk = 8, 4, 2
    x = mat(n, d, 0.7, 0.1, 1.0)
    wv = mat(d, d, 0.5, 0.2, 0.6)
    x1 = pool(x, 4)
    x2 = pool(x1, 2)
    v0 = x @ wv
    v1 = pool(v0, 4)
    v2 = pool(v1, 2)
    outs = []
    for s, (xl, vl) in enumerate([(x1, v1), (x2, v2)]):
        wq = mat(d, dk, 0.9 + 0.2 * s, 0.3, 0.8)
        wk = mat(d, dk, 1.3 + 0.2 * s, -0.4, 0.8)
        outs.append(upsample(attend(xl, wq, wk, vl, dk), n))
    return outs


def hybrid_case():
    n, d, dk, r, depth = 16, 8, 4, 2, 2
    x = mat(n, d, 0.37, 0.05, 1.0)
    down = [kernel(3, d, d, 0.11 + 0.07 * l, 0.2, 0.35) for l in range(depth)]
    local = [kernel(3, d, d, 0.13 + 0.05 * s, -0.3, 0.3) for s in range(depth)]
    bias = [wave(d, 0.9, 0.1 * s, 0.2) for s in range(depth)]
    wg = mat(d, d, 0.21, 0.4, 0.35)
    wq = [mat(d, dk, 0.31 + 0.1 * s, 0.0, 0.5) for s in range(depth)]
    wk = [mat(d, dk, 0.47 + 0.1 * s, 0.7, 0.5) for s in range(depth)]
    wv = mat(d, d, 0.17, -0.2, 0.35)

    # Gated pyramid: gate computed on a provisional downsample of the finer level.
    levels = [x]
    for l in range(depth):
        prev = levels[-1]
        provisional = conv1d(prev, down[l], r, 1)
        gate = upsample(1 / (1 + np.exp(-(provisional @ wg))), prev.shape[0])
        levels.append(conv1d(gate * prev, down[l], r, 1))

    values = [x @ wv]
    for l in range(depth):
        values.append(conv1d(values[-1], down[l], r, 1))

    cands = []
    for s in range(depth):
        xl = levels[s + 1]
        xl = xl + np.maximum(conv1d(xl, local[s], 1, 2) + bias[s], 0)
        cands.append(upsample(attend(xl, wq[s], wk[s], values[s + 1], dk), n))

    w = co_weights(cands, values[0], 0.1, 50, 1.0, 1e-8)
    y = x + sum(wi * c for wi, c in zip(w, cands))
    return w, y


def emit(name, arr):
    flat = ", ".join(repr(float(v)) for v in np.asarray(arr).ravel())
    return f"inline const std::vector<double> {name}{{{flat}}};\n"


def main():
    u1, u2 = attention_case()
    w, y = hybrid_case()
    body = "// Generated by oracle.py; do not edit.\n"
    body += emit("kAttentionScale1", u1)
    body += emit("kAttentionScale2", u2)
    body += emit("kHybridWeights", w)
    body += emit("kHybridOutput", y)
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "expected_values.inc")
    with open(path, "w") as f:
        f.write(body)
    print("weights", w)


if __name__ == "__main__":
    main()
