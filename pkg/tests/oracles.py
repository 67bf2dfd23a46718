"""Independent brute-force reimplementations used as test oracles.

Everything here is deliberately written with plain Python loops and no code
shared with the library, so a bug in the vectorized implementation cannot
hide in its own oracle.
"""

import math

import numpy as np


def brute_redundancy(keys, pad_c):
    """keys [N, d] for one head/layer; pad_c [N] True where real."""
    n = keys.shape[0]
    n_real = int(sum(1 for i in range(n) if pad_c[i]))
    normed = []
    for i in range(n):
        norm = math.sqrt(float(sum(x * x for x in keys[i])))
        normed.append([float(x) / (norm + 1e-8) for x in keys[i]])
    raw = []
    for j in range(n):
        total = 0.0
        for i in range(n):
            if i == j:
                continue
            total += sum(a * b for a, b in zip(normed[i], normed[j]))
        raw.append(-total / n_real)
    # softmax over ALL positions (pads included), then zero the pads
    mx = max(raw)
    exps = [math.exp(r - mx) for r in raw]
    denom = sum(exps)
    r_scores = [e / denom for e in exps]
    for i in range(n):
        if not pad_c[i]:
            r_scores[i] = 0.0
    return raw, r_scores


def brute_importance(attn, pad_c, pad_a, group, rep):
    """attn [N_A, N_C, H, L] for one layer slice already chosen outside.

    Here attn is [N_A, N_C, H] for one layer; ``group`` selects the kv head,
    ``rep`` is queries per group. Max-pool over the group's query heads, then
    mean over real answer rows; pads get zero.
    """
    n_a, n_c, _ = attn.shape
    n_real_a = int(sum(1 for j in range(n_a) if pad_a[j]))
    scores = []
    for i in range(n_c):
        total = 0.0
        for j in range(n_a):
            if not pad_a[j]:
                continue
            pooled = max(float(attn[j, i, group * rep + h]) for h in range(rep))
            total += pooled
        scores.append(total / n_real_a)
    for i in range(n_c):
        if not pad_c[i]:
            scores[i] = 0.0
    return scores


def brute_force_select(keys, attn, pad_c, pad_a, lam, m):
    """Full per-(head,layer) selection oracle.

    keys [N_C, G, L, d], attn [N_A, N_C, H, L] (softmaxed rows), returns
    indices [m, G, L] with -1 at deficit slots.
    """
    n_c, n_groups, n_layers, _ = keys.shape
    n_heads = attn.shape[2]
    rep = n_heads // n_groups
    out = np.full((m, n_groups, n_layers), -1, dtype=np.int64)
    for g in range(n_groups):
        for l in range(n_layers):
            _, r_scores = brute_redundancy(keys[:, g, l, :], pad_c)
            i_scores = brute_importance(attn[:, :, :, l], pad_c, pad_a, g, rep)
            s = [lam * i_scores[i] + (1 - lam) * r_scores[i] for i in range(n_c)]
            candidates = [i for i in range(n_c) if pad_c[i]]
            # ties resolved toward the lower index
            ranked = sorted(candidates, key=lambda i: (-s[i], i))
            chosen = sorted(ranked[:m])
            for slot, idx in enumerate(chosen):
                out[slot, g, l] = idx
    return out


def softmax_list(xs):
    mx = max(xs)
    es = [math.exp(x - mx) for x in xs]
    z = sum(es)
    return [e / z for e in es]


def brute_cross_entropy(logits, target):
    """-log softmax(logits)[target] via explicit summation."""
    mx = max(float(x) for x in logits)
    z = sum(math.exp(float(x) - mx) for x in logits)
    return -(float(logits[target]) - mx - math.log(z))
