"""Shared test utilities: random tensors, brute-force oracles, finite differences."""
import itertools

import numpy as np

from focalsconv.sparse_tensor import build


def random_tensor(rng, shape=(8, 8, 8), density=0.05, channels=3, batch=1,
                  dtype=np.float64, min_n=1):
    X, Y, Z = shape
    total = X * Y * Z * batch
    n = max(min_n, int(round(density * total)))
    flat = rng.choice(total, size=min(n, total), replace=False)
    b, rest = np.divmod(flat, X * Y * Z)
    x, rest = np.divmod(rest, Y * Z)
    y, z = np.divmod(rest, Z)
    coords = np.stack([b, x, y, z], axis=1)
    feats = rng.standard_normal((len(coords), channels))
    return build(coords, feats, shape, batch, dtype=dtype)


def brute_force_pairs(inp_coords, out_coords, kernel, stride=(1, 1, 1), pad=None):
    """Double loop over (output, kernel position); returns {(j, in_row, out_row)}."""
    kernel = tuple(kernel)
    pad = tuple(k // 2 for k in kernel) if pad is None else tuple(pad)
    lookup = {tuple(c): i for i, c in enumerate(np.asarray(inp_coords).tolist())}
    pairs = set()
    for o, q in enumerate(np.asarray(out_coords).tolist()):
        j = 0
        for kz in range(kernel[2]):
            for ky in range(kernel[1]):
                for kx in range(kernel[0]):
                    src = (q[0], stride[0] * q[1] + kx - pad[0], stride[1] * q[2] + ky - pad[1],
                           stride[2] * q[3] + kz - pad[2])
                    if src in lookup:
                        pairs.add((j, lookup[src], o))
                    j += 1
    return pairs


def brute_force_regular_outputs(inp_coords, shape, kernel, stride, pad):
    """Every output cell of the strided grid whose support touches an input."""
    occupied = {tuple(c) for c in np.asarray(inp_coords).tolist()}
    out_shape = [(n + 2 * p - k) // s + 1 for n, p, k, s in zip(shape, pad, kernel, stride)]
    batches = sorted({c[0] for c in occupied})
    outs = []
    for b in batches:
        for qz in range(out_shape[2]):
            for qy in range(out_shape[1]):
                for qx in range(out_shape[0]):
                    hit = False
                    for kx, ky, kz in itertools.product(*(range(k) for k in kernel)):
                        src = (b, stride[0] * qx + kx - pad[0], stride[1] * qy + ky - pad[1],
                               stride[2] * qz + kz - pad[2])
                        if src in occupied:
                            hit = True
                            break
                    if hit:
                        outs.append((b, qx, qy, qz))
    return outs


def numeric_grad(f, arr, eps=1e-5, entries=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place and restored).

    ``entries`` limits the check to that many randomly chosen flat indices.
    Returns ``(flat_indices, grads)``.
    """
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if entries is not None and entries < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=entries, replace=False))
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * eps)
    return idx, out


def rel_error(analytic, numeric):
    """Max abs difference relative to the larger of the two gradients' max magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0) / scale)


# acceptance result lines, echoed by conftest at the end of the session
ACCEPTANCE_LINES = []
