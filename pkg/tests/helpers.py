"""Independent oracles shared across the test modules.

Everything here is deliberately written against the plain definitions
(elementwise python/numpy arithmetic, exhaustive pairwise loops) so it cannot
share a bug with the production code paths it checks.
"""

import math

import numpy as np

from deeplinker.engine import Tape


def finite_difference_check(build_loss, params, n_probes=100, step=1e-5,
                            rtol=1e-6, atol_scale=1e-6, seed=0, avoid=None):
    """Compare tape gradients of a scalar loss against central differences.

    ``build_loss`` recomputes the loss from the current parameter values;
    ``params`` are the leaf tensors to probe.  ``avoid`` optionally maps a
    probed value to True when it sits too close to a kink to difference.
    Returns the worst relative error seen.
    """
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    grads = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    sizes = [p.values.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    worst = 0.0
    probed = 0
    guard = 0
    while probed < n_probes:
        guard += 1
        assert guard < 50 * n_probes, "could not find enough probe points"
        flat = int(rng.integers(total))
        pi = 0
        while flat >= sizes[pi]:
            flat -= sizes[pi]
            pi += 1
        tensor = params[pi]
        original = tensor.values.flat[flat]
        if avoid is not None and avoid(original):
            continue
        tensor.values.flat[flat] = original + step
        f_plus = float(build_loss().values[0, 0])
        tensor.values.flat[flat] = original - step
        f_minus = float(build_loss().values[0, 0])
        tensor.values.flat[flat] = original
        fd = (f_plus - f_minus) / (2.0 * step)
        ad = grads[pi].flat[flat]
        rel = abs(ad - fd) / max(abs(ad), abs(fd), atol_scale)
        worst = max(worst, rel)
        assert rel < rtol, (
            f"gradient mismatch at param {pi} flat index {flat}: "
            f"analytic {ad!r} vs finite-difference {fd!r} (rel {rel:.3g})"
        )
        probed += 1
    return worst


def brute_force_auc(probabilities, labels):
    """Exhaustive O(P*N) pairwise AUC with ties counted half."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    pos = probs[labels == 1]
    neg = probs[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (pos.size * neg.size)


def _softmax(logits):
    m = max(logits)
    exps = [math.exp(v - m) for v in logits]
    s = sum(exps)
    return [e / s for e in exps]


def _leaky(x, slope=0.2):
    return x if x > 0 else slope * x


def _elu_vec(v):
    return np.array([x if x > 0 else math.exp(x) - 1.0 for x in v])


def naive_encode(params, table, dense_features, node):
    """Scalar re-implementation of the two-layer encoder for one node.

    Walks the raw fixed-size sample rows entry by entry (multiplicities and
    all), so it is independent of the batched unique-node compute path.
    """
    cfg = params.config

    def layer1(v):
        merged = []
        for k in range(cfg.heads1):
            w = params.layer1.head_w(k)
            center = dense_features[v] @ w
            messages = [dense_features[j] @ w for j in table.hop1[v]]
            if cfg.attention == "all_ones":
                alphas = [1.0] * len(messages)
            else:
                a = params.layer1.head_attn(k)
                logits = [_leaky(float(a[:cfg.hidden] @ center + a[cfg.hidden:] @ m))
                          for m in messages]
                alphas = _softmax(logits)
            agg = sum(alpha * m for alpha, m in zip(alphas, messages))
            merged.append(_elu_vec(agg))
        return np.concatenate(merged)

    needed = set(table.hop1[node].tolist()) | {node}
    h1 = {v: layer1(v) for v in needed}
    outputs = []
    for k in range(cfg.heads2):
        w2 = params.layer2.head_w(k)
        center = h1[node] @ w2
        messages = [h1[j] @ w2 for j in table.hop1[node]]
        if cfg.attention == "all_ones":
            alphas = [1.0] * len(messages)
        else:
            a = params.layer2.head_attn(k)
            logits = [_leaky(float(a[:cfg.embed_dim] @ center + a[cfg.embed_dim:] @ m))
                      for m in messages]
            alphas = _softmax(logits)
        outputs.append(sum(alpha * m for alpha, m in zip(alphas, messages)))
    return np.mean(outputs, axis=0)


def densify(features):
    return np.asarray(features.csr().todense())
