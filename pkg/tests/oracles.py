"""Independent reference implementations used only by the test suite.

Everything here is written the slow, obvious way (explicit loops, direct
formula transcription) so it shares no code path with the package under
test. Tolerances in the tests compare the fast implementations against
these.
"""

import math

import numpy as np


# ---------------------------------------------------------------------------
# linear algebra


def matmul_loops(a, b):
    """Triple-loop 2-d matrix product."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def softmax_ref(x, axis=-1):
    x = np.asarray(x, dtype=float)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm_ref(x, gain, bias, eps=1e-5):
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def gelu_ref(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def attention_ref(q, k, v, n_heads):
    """Per-sample, per-head scaled dot-product attention via explicit loops."""
    q, k, v = (np.asarray(t, dtype=float) for t in (q, k, v))
    n, tq, d = q.shape
    tk = k.shape[1]
    dh = d // n_heads
    out = np.zeros((n, tq, d))
    for b in range(n):
        for h in range(n_heads):
            qs = q[b, :, h * dh:(h + 1) * dh]
            ks = k[b, :, h * dh:(h + 1) * dh]
            vs = v[b, :, h * dh:(h + 1) * dh]
            scores = qs @ ks.T / math.sqrt(dh)
            w = softmax_ref(scores, axis=-1)
            out[b, :, h * dh:(h + 1) * dh] = w @ vs
    return out


def fd_gradient(f, x, indices=None, h=1e-5):
    """Central finite differences of scalar f at selected flat indices of x.

    Returns (indices, grads). f must not mutate x.
    """
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grads = []
    idx = []
    for i in indices:
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        grads.append((up - down) / (2.0 * h))
        idx.append(i)
    return np.array(idx), np.array(grads)


def rel_err(a, b):
    """|a-b| / max(1, |a|, |b|), elementwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


# ---------------------------------------------------------------------------
# contrastive losses and cross-entropy


def cos_ref(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def shsd_ref(z_s, z_t_sh, z_t_sp, tau):
    """Brute-force shared-alignment loss: anchor each modality's shared
    vector against the other's, with the specific tabular embeddings as the
    negative set. Positives do not appear in the denominator."""
    n = len(z_s)
    total = 0.0
    for i in range(n):
        den_st = sum(math.exp(cos_ref(z_s[i], z_t_sp[k]) / tau) for k in range(n))
        l_st = -cos_ref(z_s[i], z_t_sh[i]) / tau + math.log(den_st)
        den_ts = sum(math.exp(cos_ref(z_t_sh[i], z_t_sp[k]) / tau) for k in range(n))
        l_ts = -cos_ref(z_t_sh[i], z_s[i]) / tau + math.log(den_ts)
        total += l_st + l_ts
    return total / (2.0 * n)


def reg_ref(z_s, z_t_sp, y, tau):
    """Brute-force label-supervised contrastive pull between the specific
    tabular embeddings and the time-series embeddings."""
    n = len(y)
    total = 0.0
    for i in range(n):
        s_i = sum(1 for j in range(n) if y[j] == y[i])
        r_ts = 0.0
        den = sum(math.exp(cos_ref(z_t_sp[i], z_s[k]) / tau) for k in range(n))
        for j in range(n):
            if y[j] == y[i]:
                r_ts -= math.log(math.exp(cos_ref(z_t_sp[i], z_s[j]) / tau) / den)
        r_ts /= s_i
        r_st = 0.0
        den = sum(math.exp(cos_ref(z_s[i], z_t_sp[k]) / tau) for k in range(n))
        for j in range(n):
            if y[j] == y[i]:
                r_st -= math.log(math.exp(cos_ref(z_s[i], z_t_sp[j]) / tau) / den)
        r_st /= s_i
        total += r_ts + r_st
    return total / (2.0 * n)


def cross_entropy_ref(logits, y):
    logits = np.asarray(logits, dtype=float)
    n = len(y)
    total = 0.0
    for i in range(n):
        p = softmax_ref(logits[i])
        total -= math.log(p[y[i]])
    return total / n


def infonce_ref(z_a, z_b, tau):
    """Symmetric in-batch InfoNCE with diagonal positives; all candidates
    (positive included) stay in the denominator."""
    n = len(z_a)
    total = 0.0
    for i in range(n):
        den = sum(math.exp(cos_ref(z_a[i], z_b[k]) / tau) for k in range(n))
        total -= math.log(math.exp(cos_ref(z_a[i], z_b[i]) / tau) / den)
        den = sum(math.exp(cos_ref(z_b[i], z_a[k]) / tau) for k in range(n))
        total -= math.log(math.exp(cos_ref(z_b[i], z_a[i]) / tau) / den)
    return total / (2.0 * n)


def triplet_ref(z_a, z_b, margin):
    """Hardest-negative in-batch triplet loss, averaged over anchors.

    An anchor with no negative candidates (batch of one) contributes zero:
    there is nothing to push away from."""
    n = len(z_a)
    total = 0.0
    for i in range(n):
        negs = [cos_ref(z_a[i], z_b[k]) for k in range(n) if k != i]
        if not negs:
            continue
        pos = cos_ref(z_a[i], z_b[i])
        total += max(0.0, margin + max(negs) - pos)
    return total / n


# ---------------------------------------------------------------------------
# classification metrics


def auroc_ref(y_true, scores):
    """Pair-counting AUROC with half credit for ties."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=float)
    pos = scores[y_true == 1]
    neg = scores[y_true == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def auprc_ref(y_true, scores):
    """Area under precision-recall via step-wise sum over distinct
    descending thresholds: sum (R_k - R_{k-1}) * P_k."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=float)
    n_pos = int((y_true == 1).sum())
    thresholds = sorted(set(scores.tolist()), reverse=True)
    area = 0.0
    prev_recall = 0.0
    for th in thresholds:
        pred = scores >= th
        tp = int(((y_true == 1) & pred).sum())
        fp = int(((y_true == 0) & pred).sum())
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def ridge_r2(x, y, alpha=1e-3):
    """Mean R-squared over target columns of closed-form ridge regression."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    w = np.linalg.solve(xc.T @ xc + alpha * np.eye(x.shape[1]), xc.T @ yc)
    resid = yc - xc @ w
    ss_res = (resid ** 2).sum(axis=0)
    ss_tot = (yc ** 2).sum(axis=0)
    return float(np.mean(1.0 - ss_res / ss_tot))


def f1_macro_ref(y_true, y_pred, n_classes):
    """Macro F1 with 0/0 conventions resolved to 0."""
    f1s = []
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    for c in range(n_classes):
        tp = int(((y_true == c) & (y_pred == c)).sum())
        fp = int(((y_true != c) & (y_pred == c)).sum())
        fn = int(((y_true == c) & (y_pred != c)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        f1s.append(f1)
    return float(np.mean(f1s))
