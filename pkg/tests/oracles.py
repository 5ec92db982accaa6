"""Scalar reference implementations used as test oracles.

Everything here works on nested Python lists / scalars with explicit loops so
that it shares no code path with the vectorised package implementation.
"""

import math
from collections import deque

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def linear(vec, weight, bias):
    """weight: rows = outputs (torch.nn.Linear layout)."""
    return [sum(weight[o][i] * vec[i] for i in range(len(vec))) + bias[o] for o in range(len(weight))]


def relu(vec):
    return [max(0.0, v) for v in vec]


def bilinear_sample(img, y, x):
    """Sample a 2D list at fractional (y, x)."""
    h, w = len(img), len(img[0])
    y0 = min(int(math.floor(y)), h - 1)
    x0 = min(int(math.floor(x)), w - 1)
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = img[y0][x0] * (1 - fx) + img[y0][x1] * fx
    bottom = img[y1][x0] * (1 - fx) + img[y1][x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_align_corners(img, th, tw):
    h, w = len(img), len(img[0])
    out = [[0.0] * tw for _ in range(th)]
    for i in range(th):
        for j in range(tw):
            y = 0.0 if th == 1 else i * (h - 1) / (th - 1)
            x = 0.0 if tw == 1 else j * (w - 1) / (tw - 1)
            out[i][j] = bilinear_sample(img, y, x)
    return out


def se_gate(fmap, fc1_w, fc1_b, fc2_w, fc2_b):
    """fmap[c][y][x] -> gated copy."""
    c = len(fmap)
    h, w = len(fmap[0]), len(fmap[0][0])
    pooled = [sum(fmap[k][y][x] for y in range(h) for x in range(w)) / (h * w) for k in range(c)]
    gates = [sigmoid(v) for v in linear(relu(linear(pooled, fc1_w, fc1_b)), fc2_w, fc2_b)]
    return [[[fmap[k][y][x] * gates[k] for x in range(w)] for y in range(h)] for k in range(c)]


def cosine_map(a, b, eps=1e-8):
    c = len(a)
    h, w = len(a[0]), len(a[0][0])
    out = [[0.0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            dot = sum(a[k][y][x] * b[k][y][x] for k in range(c))
            na = math.sqrt(sum(a[k][y][x] ** 2 for k in range(c)))
            nb = math.sqrt(sum(b[k][y][x] ** 2 for k in range(c)))
            out[y][x] = 0.0 if na < eps or nb < eps else dot / (na * nb)
    return out


def gcu(f, s, u, se_f, se_u, s_proj=None):
    """Returns (residual[y][x], updated[c][y][x]); se_* are (fc1_w, fc1_b, fc2_w, fc2_b)."""
    c = len(f)
    h, w = len(f[0]), len(f[0][0])
    if s_proj is not None:
        pw, pb = s_proj
        sh, sw = len(s[0]), len(s[0][0])
        s = [[[sum(pw[o][i] * s[i][y][x] for i in range(len(s))) + pb[o] for x in range(sw)] for y in range(sh)]
             for o in range(len(pw))]
    ru = [resize_align_corners(s[k], h, w) for k in range(c)]
    gu = se_gate(u, *se_u)
    gf = se_gate(f, *se_f)
    prod = [[[ru[k][y][x] * gu[k][y][x] for x in range(w)] for y in range(h)] for k in range(c)]
    r = cosine_map(prod, gf)
    updated = [[[r[y][x] * f[k][y][x] + f[k][y][x] for x in range(w)] for y in range(h)] for k in range(c)]
    return r, updated


def softmax(vals):
    m = max(vals)
    e = [math.exp(v - m) for v in vals]
    s = sum(e)
    return [v / s for v in e]


def attention_tokens(u_tokens, r_tokens, q, k, v, o):
    """u_tokens: list of C-vectors; r_tokens: list of 1-vectors; q/k/v/o: (weight, bias)."""
    qs = [linear(t, *q) for t in u_tokens]
    ks = [linear(t, *k) for t in r_tokens]
    vs = [linear(t, *v) for t in r_tokens]
    d = len(qs[0])
    out = []
    for qi in qs:
        weights = softmax([sum(qi[j] * kj[j] for j in range(d)) / math.sqrt(d) for kj in ks])
        mixed = [sum(weights[t] * vs[t][j] for t in range(len(vs))) for j in range(d)]
        out.append(linear(mixed, *o))
    return out


def importance(u_tokens, conv, fc1, fc2, fc3):
    conv_out = [linear(t, *conv) for t in u_tokens]
    c = len(conv_out[0])
    pooled = [sum(t[j] for t in conv_out) / len(conv_out) for j in range(c)]
    hidden = relu(linear(relu(linear(pooled, *fc1)), *fc2))
    return sigmoid(linear(hidden, *fc3)[0])


def counting_oracle(pred, gt):
    tp = fp = fn = tn = 0
    for y in range(pred.shape[0]):
        for x in range(pred.shape[1]):
            p, g = bool(pred[y, x]), bool(gt[y, x])
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
            else:
                tn += 1

    def div(a, b, empty):
        return a / b if b else empty

    return {
        "dice": div(2 * tp, 2 * tp + fp + fn, 1.0),
        "iou": div(tp, tp + fp + fn, 1.0),
        "precision": div(tp, tp + fp, 1.0),
        "recall": div(tp, tp + fn, 1.0),
        "fpr": div(fp, fp + tn, 0.0),
        "vose": div(fp, tp + fn, 0.0),
    }


def bfs_components(mask, hu, threshold=130.0):
    """Flood fill over face neighbours, seeds visited in raster order."""
    keep = np.zeros(mask.shape, dtype=bool)
    for idx in np.ndindex(*mask.shape):
        keep[idx] = bool(mask[idx]) and hu[idx] > threshold
    labels = np.zeros(mask.shape, dtype=int)
    current = 0
    steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    for seed in np.ndindex(*mask.shape):
        if not keep[seed] or labels[seed]:
            continue
        current += 1
        labels[seed] = current
        queue = deque([seed])
        while queue:
            z, y, x = queue.popleft()
            for dz, dy, dx in steps:
                n = (z + dz, y + dy, x + dx)
                if all(0 <= n[k] < mask.shape[k] for k in range(3)) and keep[n] and not labels[n]:
                    labels[n] = current
                    queue.append(n)
    return labels
