"""Straight-line reference implementations used as test oracles.

Everything here is written independently of the package internals: plain Python
loops, mpmath for closed forms, and torch.nn.functional only for convolutions.
"""

import math

import mpmath
import numpy as np
import torch
import torch.nn.functional as F

mpmath.mp.dps = 40


def zoh_scalar(a, delta, b):
    """High-precision ``(exp(delta*a), (exp(delta*a) - 1)/(delta*a) * delta*b)``."""
    a, delta, b = mpmath.mpf(a), mpmath.mpf(delta), mpmath.mpf(b)
    z = delta * a
    a_bar = mpmath.exp(z)
    factor = mpmath.mpf(1) if z == 0 else mpmath.expm1(z) / z
    return float(a_bar), float(factor * delta * b)


def recurrence(a_bar, b_bar, c, x):
    """``h_t = a_bar*h + b_bar*x_t``, ``y_t = sum(c*h)`` with plain loops."""
    n = len(a_bar)
    h = [0.0] * n
    out = []
    for xt in x:
        h = [a_bar[k] * h[k] + b_bar[k] * xt for k in range(n)]
        out.append(sum(c[k] * h[k] for k in range(n)))
    return np.array(out)


def selective_scan(x, delta, A, Bm, C):
    """Per-step discretized scan for one sequence.

    Args:
        x: (T, D); delta: (D,); A, Bm, C: (T, N).
    """
    x = np.asarray(x, dtype=np.float64)
    nt, nd = x.shape
    nn_ = A.shape[1]
    y = np.zeros((nt, nd))
    for d in range(nd):
        h = [0.0] * nn_
        for t in range(nt):
            acc = 0.0
            for n in range(nn_):
                z = float(delta[d]) * float(A[t, n])
                phi = 1.0 if z == 0 else math.expm1(z) / z
                h[n] = math.exp(z) * h[n] + phi * float(delta[d]) * float(Bm[t, n]) * x[t, d]
                acc += float(C[t, n]) * h[n]
            y[t, d] = acc
    return y


def scan_paths(fm):
    """Four traversal orders of a (C, H, W) array built pixel by pixel."""
    c, h, w = fm.shape
    row = [(i, j) for i in range(h) for j in range(w)]
    col = [(i, j) for j in range(w) for i in range(h)]
    orders = [row, row[::-1], col, col[::-1]]
    return orders, [np.stack([fm[:, i, j] for i, j in order], axis=1) for order in orders]


def layer_norm(x, gain, bias, eps=1e-5):
    mean = x.mean(axis=0, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=0, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain[:, None, None] + bias[:, None, None]


def gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def _conv(x, weight, bias, stride=1, padding=0, transpose=False):
    t = torch.as_tensor(x, dtype=torch.float64)[None]
    w = torch.as_tensor(weight, dtype=torch.float64)
    b = torch.as_tensor(bias, dtype=torch.float64)
    if transpose:
        return F.conv_transpose2d(t, w, b, stride=stride)[0].numpy()
    return F.conv2d(t, w, b, stride=stride, padding=padding)[0].numpy()


def ss2d(fm, state, prefix):
    c, h, w = fm.shape
    orders, paths = scan_paths(fm)
    out = np.zeros_like(fm)
    for k, (order, seq) in enumerate(zip(orders, paths)):
        p = f"{prefix}.scans.{k}."
        seq = seq.T  # (L, C)
        delta = np.log1p(np.exp(state[p + "delta_raw"]))
        A = -np.log1p(np.exp(seq @ state[p + "proj_A.weight"].T + state[p + "proj_A.bias"]))
        Bm = seq @ state[p + "proj_B.weight"].T + state[p + "proj_B.bias"]
        Cm = seq @ state[p + "proj_C.weight"].T + state[p + "proj_C.bias"]
        y = selective_scan(seq, delta, A, Bm, Cm)
        for t, (i, j) in enumerate(order):
            out[:, i, j] += y[t]
    return out


def block(fm, state, prefix):
    u = fm + ss2d(layer_norm(fm, state[prefix + ".norm1.weight"], state[prefix + ".norm1.bias"]), state,
                  prefix + ".ss2d")
    v = layer_norm(u, state[prefix + ".norm2.weight"], state[prefix + ".norm2.bias"])
    lp = prefix + ".lefn."
    v = gelu(_conv(v, state[lp + "expand.weight"], state[lp + "expand.bias"]))
    v = gelu(_conv(v, state[lp + "local.weight"], state[lp + "local.bias"], padding=1))
    v = gelu(_conv(v, state[lp + "project.weight"], state[lp + "project.bias"]))
    return u + v


def unet_forward(state, blocks_per_stage, x):
    """Forward pass of the UNet from a float64 numpy state dict; ``x`` is (1, H, W)."""

    def stage(fm, name):
        for i in range(blocks_per_stage):
            fm = block(fm, state, f"{name}.{i}")
        return fm

    def conv(fm, name, **kw):
        return _conv(fm, state[name + ".weight"], state[name + ".bias"], **kw)

    e1 = stage(conv(x, "input_proj", padding=1), "enc1")
    e2 = stage(conv(e1, "down1", stride=2), "enc2")
    b = stage(conv(e2, "down2", stride=2), "bottleneck")
    d = conv(b, "up2", stride=2, transpose=True)
    d = stage(np.concatenate([d, e2]), "dec2")
    d = conv(d, "up1", stride=2, transpose=True)
    d = stage(np.concatenate([d, e1]), "dec1")
    return conv(conv(d, "reduce"), "output_proj", padding=1)


# ---------------------------------------------------------------------------
# Metrics


def mean(xs):
    return sum(xs) / len(xs)


def ssim(p, t, c1=1e-4, c2=9e-4):
    p, t = list(np.ravel(p)), list(np.ravel(t))
    mp, mt = mean(p), mean(t)
    vp = mean([(a - mp) ** 2 for a in p])
    vt = mean([(b - mt) ** 2 for b in t])
    cov = mean([(a - mp) * (b - mt) for a, b in zip(p, t)])
    return ((2 * mp * mt + c1) * (2 * cov + c2)) / ((mp ** 2 + mt ** 2 + c1) * (vp + vt + c2))


def psnr(p, t):
    err = mean([(a - b) ** 2 for a, b in zip(np.ravel(p), np.ravel(t))])
    return math.inf if err == 0 else 10 * math.log10(1.0 / err)


def pearson(p, t):
    p, t = list(np.ravel(p)), list(np.ravel(t))
    mp, mt = mean(p), mean(t)
    num = sum((a - mp) * (b - mt) for a, b in zip(p, t))
    den = math.sqrt(sum((a - mp) ** 2 for a in p)) * math.sqrt(sum((b - mt) ** 2 for b in t))
    return num / den


def average_ranks(values):
    """1-based ranks; tied values share the mean of the positions they occupy."""
    values = list(np.ravel(values))
    ranks = []
    for v in values:
        below = sum(1 for u in values if u < v)
        equal = sum(1 for u in values if u == v)
        ranks.append(below + (equal + 1) / 2)
    return ranks


def spearman(p, t):
    return pearson(average_ranks(p), average_ranks(t))
