"""Independent reference implementations used to check the production code.

Everything here is deliberately written differently from the package:
explicit member lists instead of Lance-Williams updates, pure-Python
scalar loops instead of vectorized numpy, and Fraction arithmetic instead
of floats. Keep it that way.
"""

from fractions import Fraction

import numpy as np


def naive_ward(points: np.ndarray) -> list[tuple[int, int, float, int]]:
    """O(N^3) agglomerator that recomputes every cluster distance directly.

    Distance between clusters A and B with explicit member lists:
    sqrt(2|A||B|/(|A|+|B|)) * ||mean(A) - mean(B)||.
    Ties break on the smallest (min id, max id) pair, like production.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    merges = []
    next_id = n
    while len(members) > 1:
        best_pair = None
        best_d2 = np.inf
        ids = sorted(members)
        for ai in range(len(ids)):
            for bi in range(ai + 1, len(ids)):
                a, b = ids[ai], ids[bi]
                na, nb = len(members[a]), len(members[b])
                gap = points[members[a]].mean(axis=0) - points[members[b]].mean(axis=0)
                d2 = 2.0 * na * nb / (na + nb) * float(gap @ gap)
                if d2 < best_d2:
                    best_d2 = d2
                    best_pair = (a, b)
        a, b = best_pair
        merged = members.pop(a) + members.pop(b)
        merges.append((a, b, float(np.sqrt(best_d2)), len(merged)))
        members[next_id] = merged
        next_id += 1
    return merges


def _scalar_sigmoid(x: float) -> float:
    import math

    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _scalar_lstm(gates, xs):
    """One LSTM direction over xs (list of lists), all scalar arithmetic."""
    import math

    w_i, w_f, w_g, w_o, b_i, b_f, b_g, b_o = gates
    h_size = len(b_i)
    h_prev = [0.0] * h_size
    c_prev = [0.0] * h_size
    states = []
    for x in xs:
        z = list(x) + list(h_prev)
        h_new = []
        c_new = []
        for r in range(h_size):
            a_i = sum(w_i[r][k] * z[k] for k in range(len(z))) + b_i[r]
            a_f = sum(w_f[r][k] * z[k] for k in range(len(z))) + b_f[r]
            a_g = sum(w_g[r][k] * z[k] for k in range(len(z))) + b_g[r]
            a_o = sum(w_o[r][k] * z[k] for k in range(len(z))) + b_o[r]
            i = _scalar_sigmoid(a_i)
            f = _scalar_sigmoid(a_f)
            g = math.tanh(a_g)
            o = _scalar_sigmoid(a_o)
            c = f * c_prev[r] + i * g
            h_new.append(o * math.tanh(c))
            c_new.append(c)
        states.append(h_new)
        h_prev, c_prev = h_new, c_new
    return states


def scalar_blstm_logits(model, embeddings: np.ndarray) -> np.ndarray:
    """Step-by-step scalar re-implementation of the tagger forward pass."""

    def gate_lists(gp):
        return (
            gp.w_i.tolist(), gp.w_f.tolist(), gp.w_g.tolist(), gp.w_o.tolist(),
            gp.b_i.tolist(), gp.b_f.tolist(), gp.b_g.tolist(), gp.b_o.tolist(),
        )

    xs = embeddings.tolist()
    fwd = _scalar_lstm(gate_lists(model.params.fwd), xs)
    bwd = list(reversed(_scalar_lstm(gate_lists(model.params.bwd), list(reversed(xs)))))
    w_out = model.params.w_out.tolist()
    b_out = model.params.b_out.tolist()
    n_classes = len(b_out)
    logits = []
    for t in range(len(xs)):
        hidden = fwd[t] + bwd[t]
        logits.append(
            [
                sum(hidden[k] * w_out[k][c] for k in range(len(hidden))) + b_out[c]
                for c in range(n_classes)
            ]
        )
    return np.array(logits)


def recount_confusion(
    pred_seqs, gold_seqs, num_classes: int
) -> dict[int, tuple[int, int, int, int]]:
    """Slot-by-slot one-vs-rest recount; class -1 keys the binary position task."""
    counts = {c: [0, 0, 0, 0] for c in range(num_classes)}
    counts[-1] = [0, 0, 0, 0]

    def bump(row, is_pred, is_gold):
        if is_pred and is_gold:
            row[0] += 1
        elif is_pred:
            row[1] += 1
        elif is_gold:
            row[2] += 1
        else:
            row[3] += 1

    for pred, gold in zip(pred_seqs, gold_seqs):
        assert len(pred) == len(gold)
        for p, g in zip(pred, gold):
            for c in range(num_classes):
                bump(counts[c], p == c, g == c)
            bump(counts[-1], p != 0, g != 0)
    return {c: tuple(v) for c, v in counts.items()}


def rational_metrics(tp: int, fp: int, fn: int, tn: int) -> dict[str, Fraction]:
    """Precision/recall/F/specificity as exact rationals (0 on empty denominators)."""

    def ratio(num, den):
        return Fraction(num, den) if den else Fraction(0)

    return {
        "precision": ratio(tp, tp + fp),
        "recall": ratio(tp, tp + fn),
        "f": ratio(2 * tp, 2 * tp + fp + fn),
        "specificity": ratio(tn, tn + fp),
    }


def finite_difference_gradients(loss_fn, params: dict[str, np.ndarray], eps: float):
    """Central finite differences of loss_fn() with respect to every entry."""
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p, dtype=np.float64)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + eps
            hi = loss_fn()
            p[idx] = orig - eps
            lo = loss_fn()
            p[idx] = orig
            g[idx] = (hi - lo) / (2.0 * eps)
            it.iternext()
        grads[name] = g
    return grads
