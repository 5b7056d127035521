"""Independent brute-force oracles shared by the test modules.

Everything here is deliberately written against the raw math, not the
library under test: plain loops, numpy float64, no imports from embgen.
"""

import numpy as np


def kl_diag_gaussian(mu_q, logvar_q, mu_p, logvar_p):
    """Closed-form diagonal-Gaussian KL, elementwise then summed."""
    mu_q, logvar_q = np.asarray(mu_q, dtype=np.float64), np.asarray(logvar_q, dtype=np.float64)
    mu_p, logvar_p = np.asarray(mu_p, dtype=np.float64), np.asarray(logvar_p, dtype=np.float64)
    var_q, var_p = np.exp(logvar_q), np.exp(logvar_p)
    return float(np.sum(0.5 * (var_q / var_p + (mu_q - mu_p) ** 2 / var_p - 1.0
                               + logvar_p - logvar_q)))


def central_difference_grad(param_tensor, loss_fn, step=1e-4):
    """Per-element central finite differences of loss_fn wrt a torch parameter.

    Mutates the parameter in place and restores it; loss_fn() must re-evaluate
    the full loss from scratch.
    """
    flat = param_tensor.data.view(-1)
    grad = np.zeros(flat.numel())
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = loss_fn().item()
        flat[i] = orig - step
        down = loss_fn().item()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(tuple(param_tensor.shape))


def edit_distance(ref_tokens, hyp_tokens):
    """Levenshtein distance with uniform costs via full DP table."""
    n, m = len(ref_tokens), len(hyp_tokens)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref_tokens[i - 1] != hyp_tokens[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    return int(d[n, m])


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def pairwise_same_set(matrix):
    """Mean/std/count of cosine over unordered distinct index pairs."""
    vals = []
    n = matrix.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            vals.append(cosine(matrix[i], matrix[j]))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std()), len(vals)


def pairwise_cross_set(matrix_a, ids_a, matrix_b, ids_b, exclude_same_utterance=False):
    """Mean/std/count over the full cross product, optionally skipping matched ids."""
    vals = []
    for i in range(matrix_a.shape[0]):
        for j in range(matrix_b.shape[0]):
            if exclude_same_utterance and ids_a[i] == ids_b[j]:
                continue
            vals.append(cosine(matrix_a[i], matrix_b[j]))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std()), len(vals)


def corresponding(matrix_a, ids_a, matrix_b, ids_b):
    """Mean/std/count over pairs joined by utterance id."""
    lookup = {u: j for j, u in enumerate(ids_b)}
    vals = [cosine(matrix_a[i], matrix_b[lookup[u]]) for i, u in enumerate(ids_a) if u in lookup]
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std()), len(vals)


def grouped_pairs_mean(matrix, groups, sources):
    """Stability oracle: within-group pairs whose sources differ."""
    vals = []
    for rows in groups.values():
        for a in range(len(rows)):
            for b in range(a + 1, len(rows)):
                i, j = rows[a], rows[b]
                if sources[i] == sources[j]:
                    continue
                vals.append(cosine(matrix[i], matrix[j]))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std()), len(vals)
