"""Independent reference implementations used by the tests."""

import numpy as np


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Independent numerical gradient of scalar ``f`` at ``x`` (copied, not mutated)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x.copy())
        flat[i] = orig - step
        fm = f(x.copy())
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


# --- brute-force metric definitions ---------------------------------------------------
def confusion(truth, pred, classes):
    return {(a, b): sum(1 for t, p in zip(truth, pred) if t == a and p == b) for a in classes for b in classes}


def macro_prf1_oracle(truth, pred):
    classes = sorted(set(truth) | set(pred))
    cm = confusion(truth, pred, classes)
    ps, rs, fs = [], [], []
    for c in sorted(set(truth)):
        tp = cm[(c, c)]
        pred_c = sum(cm[(a, c)] for a in classes)
        true_c = sum(cm[(c, b)] for b in classes)
        p = tp / pred_c if pred_c else 0.0
        r = tp / true_c if true_c else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    n = len(ps)
    return sum(ps) / n, sum(rs) / n, sum(fs) / n


def accuracy_oracle(truth, pred):
    return sum(1 for t, p in zip(truth, pred) if t == p) / len(truth)


def auroc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def auprc_oracle(scores, labels):
    """Average precision by sweeping every distinct threshold from high to low."""
    n_pos = sum(labels)
    prev_recall, area = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(sel)
        recall = tp / n_pos
        precision = tp / len(sel)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def kappa_oracle(truth, pred):
    n = len(truth)
    classes = sorted(set(truth) | set(pred))
    p_o = sum(1 for t, p in zip(truth, pred) if t == p) / n
    p_e = sum((sum(1 for t in truth if t == c) / n) * (sum(1 for p in pred if p == c) / n) for c in classes)
    return 0.0 if p_e == 1 else (p_o - p_e) / (1 - p_e)
