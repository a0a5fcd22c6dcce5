"""Independent float64 reference implementations used as test oracles.

Written from the formulas with plain numpy loops; shares no code with the
package.
"""

import math

import numpy as np


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_step(x, h, Wz, Wr, Wh):
    z = sigmoid(np.concatenate([x, h]) @ Wz)
    r = sigmoid(np.concatenate([x, h]) @ Wr)
    hh = np.tanh(np.concatenate([x, r * h]) @ Wh)
    return (1 - z) * h + z * hh


def params_of(model):
    """Copy every parameter of an IDSR module into float64 numpy arrays."""
    return {k: v.detach().double().numpy().copy() for k, v in model.named_parameters()}


def encode(P, items):
    E = P["item_embeddings"]
    h = np.zeros(E.shape[1])
    H = []
    for i in items:
        h = gru_step(E[i], h, P["encoder.W_z"], P["encoder.W_r"], P["encoder.W_h"])
        H.append(h)
    return np.array(H), h


def intents(P, H, F):
    M, _, d = P["W_Q"].shape
    reps = []
    for m in range(M):
        q = F @ P["W_Q"][m]
        K = H @ P["W_K"][m]
        V = H @ P["W_V"][m]
        a = softmax(K @ q / math.sqrt(d))
        reps.append(a @ V)
    reps = np.array(reps)
    weights = softmax([F @ r for r in reps])
    return reps, weights


def greedy_list(P, items, lam, n):
    """Re-score every remaining candidate from scratch at each step."""
    E = P["item_embeddings"]
    H, F = encode(P, items)
    reps, w = intents(P, H, F)
    rel = softmax(E @ F)
    pint = np.array([softmax(E @ r) for r in reps])
    h_y = np.zeros(E.shape[1])
    chosen = []
    for _ in range(n):
        unsat = softmax([-(h_y @ P["W_y"] @ r) for r in reps])
        best, best_s = None, -np.inf
        scores = {}
        for v in range(E.shape[0]):
            if v in chosen:
                continue
            s = lam * rel[v] + (1 - lam) * sum(w[m] * pint[m, v] * unsat[m] for m in range(len(w)))
            scores[v] = s
            if s > best_s:
                best, best_s = v, s
        chosen.append(best)
        h_y = gru_step(E[best], h_y, P["tracker.W_z"], P["tracker.W_r"], P["tracker.W_h"])
    return chosen


def idp_loss(P, items, target, lam, n, chosen):
    """Total loss for a fixed selection order, from the formulas."""
    E = P["item_embeddings"]
    H, F = encode(P, items)
    reps, w = intents(P, H, F)
    rel = softmax(E @ F)
    pint = np.array([softmax(E @ r) for r in reps])
    h_y = np.zeros(E.shape[1])
    p_star = []
    for t in range(n):
        unsat = softmax([-(h_y @ P["W_y"] @ r) for r in reps])
        cand = [v for v in range(E.shape[0]) if v not in chosen[:t]]
        S = {v: lam * rel[v] + (1 - lam) * sum(w[m] * pint[m, v] * unsat[m] for m in range(len(w))) for v in cand}
        p_star.append(S.get(target, 0.0) / sum(S.values()))
        h_y = gru_step(E[chosen[t]], h_y, P["tracker.W_z"], P["tracker.W_r"], P["tracker.W_h"])
    if target in chosen:
        t0 = chosen.index(target) + 1
        l_rel = -t0 * math.log(p_star[t0 - 1]) / n
    else:
        l_rel = -sum(math.log(p) for p in p_star) / n
    l_div = -sum(w[m] * (1 - np.prod([1 - pint[m, v] for v in chosen])) for m in range(len(w)))
    return lam * l_rel + (1 - lam) * l_div


def ild_double_loop(items, vectors):
    k = len(items)
    total = 0.0
    for a in range(k):
        for b in range(k):
            if a != b:
                diff = vectors[items[a]].astype(float) - vectors[items[b]].astype(float)
                total += math.sqrt(float((diff * diff).sum()))
    return total / (k * (k - 1))


def mmr_brute(cand, scores, vectors, theta, n):
    """Per-step exhaustive MMR with ties to the smaller item id."""
    chosen = []
    for _ in range(n):
        best = None
        for i, s in zip(cand, scores):
            if i in chosen:
                continue
            if chosen:
                dmin = min(math.dist(vectors[i], vectors[k]) for k in chosen)
            else:
                dmin = 0.0
            val = theta * s + (1 - theta) * dmin
            if best is None or val > best[0] or (val == best[0] and i < best[1]):
                best = (val, i)
        chosen.append(best[1])
    return chosen


def filter_fixpoint(events, min_user, min_item):
    """Repeated full scans: drop sparse users, then sparse items, until stable."""
    events = list(events)
    while True:
        users, items = {}, {}
        for u, i in events:
            users[u] = users.get(u, 0) + 1
            items[i] = items.get(i, 0) + 1
        kept = [(u, i) for u, i in events if users[u] >= min_user]
        items = {}
        for u, i in kept:
            items[i] = items.get(i, 0) + 1
        kept = [(u, i) for u, i in kept if items[i] >= min_item]
        if kept == events:
            return kept
        events = kept


def windows_brute(events, window):
    """events: (user, item, ts) in file order -> list of (user, inputs, target)."""
    out = []
    for u in sorted({e[0] for e in events}):
        mine = [(ts, pos, item) for pos, (uu, item, ts) in enumerate(events) if uu == u]
        items = [item for _, _, item in sorted(mine)]
        for s in range(len(items) - window):
            out.append((u, tuple(items[s:s + window]), items[s + window]))
    return out
