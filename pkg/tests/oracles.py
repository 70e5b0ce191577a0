"""Reference implementations written directly from the definitions, in plain
Python/NumPy loops. They share no code with the package."""

import math
from fractions import Fraction

import numpy as np


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def lstm_cell(W, U, b, x, h, c):
    """W, U, b: dicts keyed by gate f/i/o/c holding nested lists; x, h, c lists."""
    m = len(h)

    def pre(g, r):
        return (sum(W[g][r][k] * x[k] for k in range(len(x)))
                + sum(U[g][r][k] * h[k] for k in range(m)) + b[g][r])

    h_new, c_new = [], []
    for r in range(m):
        f = _sig(pre("f", r))
        i = _sig(pre("i", r))
        o = _sig(pre("o", r))
        cc = f * c[r] + i * math.tanh(pre("c", r))
        c_new.append(cc)
        h_new.append(o * math.tanh(cc))
    return h_new, c_new


def lstm_params_as_lists(params):
    get = lambda name: getattr(params, name).numpy().astype(float).tolist()
    gates = "fioc"
    return ({g: get(f"W_{g}") for g in gates}, {g: get(f"U_{g}") for g in gates},
            {g: get(f"b_{g}") for g in gates})


def lstm_run(W, U, b, xs, m):
    h, c = [0.0] * m, [0.0] * m
    out = []
    for x in xs:
        h, c = lstm_cell(W, U, b, x, h, c)
        out.append(h)
    return out


def channel_attention(layers, proj_w, proj_b, F):
    """M_c for one C x H x W array: both descriptors through the LSTM stack,
    per-position projection, sum, sigmoid."""
    C = F.shape[0]
    flat = F.reshape(C, -1)
    total = [0.0] * C
    for desc in ([float(np.mean(flat[k])) for k in range(C)], [float(np.max(flat[k])) for k in range(C)]):
        seq = [[v] for v in desc]
        for (W, U, b) in layers:
            m = len(b["f"])
            seq = lstm_run(W, U, b, seq, m)
        for k in range(C):
            total[k] += sum(proj_w[k][r] * seq[k][r] for r in range(len(seq[k]))) + proj_b[k]
    return [_sig(t) for t in total]


def boundary(mask):
    h, w = mask.shape
    fg = mask.astype(bool)
    pts = []
    for y in range(h):
        for x in range(w):
            if not fg[y, x]:
                continue
            if any(0 <= y + dy < h and 0 <= x + dx < w and not fg[y + dy, x + dx]
                   for dy in (-1, 0, 1) for dx in (-1, 0, 1)):
                pts.append((y, x))
    return pts


def signed_distance(mask, d):
    """All-pairs: min Euclidean distance to a boundary pixel, clamped, signed.

    Squared distances are exact integers, so the square root is the only
    rounding step.
    """
    h, w = mask.shape
    fg = mask.astype(bool)
    pts = np.array(boundary(mask), dtype=np.int64).reshape(-1, 2)
    if len(pts):
        yy, xx = np.divmod(np.arange(h * w), w)
        sq = (yy[:, None] - pts[None, :, 0]) ** 2 + (xx[:, None] - pts[None, :, 1]) ** 2
        dist = np.minimum(np.sqrt(sq.min(axis=1).astype(np.float64)), float(d)).reshape(h, w)
    else:
        dist = np.full((h, w), float(d))
    return np.where(fg, dist, -dist)


def random_masks(count, size, seed):
    """Mixed corpus: empty, full, noise at several densities, and blobs."""
    rng = np.random.default_rng(seed)
    masks = [np.zeros((size, size), np.uint8), np.ones((size, size), np.uint8)]
    yy, xx = np.mgrid[:size, :size]
    while len(masks) < count:
        kind = len(masks) % 3
        if kind == 0:
            masks.append((rng.random((size, size)) < rng.uniform(0.05, 0.95)).astype(np.uint8))
        else:
            m = np.zeros((size, size), bool)
            for _ in range(rng.integers(1, 4)):
                cy, cx = rng.uniform(-4, size + 4, 2)
                r = rng.uniform(2, size / 2)
                m |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            masks.append(m.astype(np.uint8))
    return masks


def recount(pred, gt):
    """Confusion counts by visiting every pixel, then the seven metrics as Fractions."""
    tp = fp = fn = tn = 0
    for p, g in zip(np.asarray(pred).reshape(-1).tolist(), np.asarray(gt).reshape(-1).tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return (tp, fp, fn, tn), metrics_from_counts(tp, fp, fn, tn)


def metrics_from_counts(tp, fp, fn, tn):
    def q(a, b):
        return Fraction(a, b) if b else None

    prec, sens = q(tp, tp + fp), q(tp, tp + fn)
    f1 = None
    if prec is not None and sens is not None and prec + sens:
        f1 = 2 * prec * sens / (prec + sens)
    return {
        "accuracy": q(tp + tn, tp + fp + fn + tn),
        "specificity": q(tn, tn + fp),
        "precision": prec,
        "sensitivity": sens,
        "f1": f1,
        "jaccard": q(tp, tp + fp + fn),
        "dice": q(2 * tp, 2 * tp + fp + fn),
    }
