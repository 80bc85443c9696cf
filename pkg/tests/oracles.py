"""Brute-force reference implementations the tests check against.

Everything here is written for clarity over speed (explicit loops,
exhaustive enumeration) and stays independent of the package's own code
paths.
"""

from itertools import product

import numpy as np


def masked_pool_loops(F: np.ndarray, M: np.ndarray) -> np.ndarray:
    h, w, c = F.shape
    acc = np.zeros(c, dtype=np.float64)
    count = 0
    for i in range(h):
        for j in range(w):
            if M[i, j]:
                acc += F[i, j]
                count += 1
    return acc / count


def conv2d_loops(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation; x (h, w, cin), weight (cout, cin, kh, kw)."""
    h, w, cin = x.shape
    cout, _, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((h, w, cout), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                acc = bias[o]
                for di in range(kh):
                    for dj in range(kw):
                        si, sj = i + di - ph, j + dj - pw
                        if 0 <= si < h and 0 <= sj < w:
                            for ci in range(cin):
                                acc += weight[o, ci, di, dj] * x[si, sj, ci]
                out[i, j, o] = acc
    return out


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return 1.0 - float(a @ b) / (na * nb)


def kmeans_objective(X: np.ndarray, labels: np.ndarray) -> float:
    """Best-possible cosine objective for fixed assignments (optimal centroids)."""
    total = 0.0
    for k in np.unique(labels):
        members = X[labels == k]
        units = []
        for m in members:
            n = np.linalg.norm(m)
            units.append(m / n if n > 0 else m)
        centroid = np.mean(units, axis=0)
        for m in members:
            total += cosine_distance(m, centroid)
    return total


def best_two_partition(X: np.ndarray) -> tuple[frozenset, float]:
    """Exhaustive search over all 2-partitions; returns (one side, objective)."""
    n = X.shape[0]
    best, best_obj = None, np.inf
    for bits in range(1, 2 ** (n - 1)):
        labels = np.array([(bits >> i) & 1 for i in range(n)])
        obj = kmeans_objective(X, labels)
        if obj < best_obj:
            best_obj = obj
            best = frozenset(np.flatnonzero(labels == 1).tolist())
    return best, best_obj


def nn_downsample_loops(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = mask.shape
    out = np.zeros((h, w), dtype=mask.dtype)
    for i in range(h):
        for j in range(w):
            out[i, j] = mask[(i * H) // h, (j * W) // w]
    return out


def occlusion_loops(footprints: list[np.ndarray]) -> list[np.ndarray]:
    """Visible region per object when later footprints occlude earlier ones."""
    visible = []
    for i, fp in enumerate(footprints):
        vis = fp.copy()
        for later in footprints[i + 1 :]:
            vis = vis & ~later
        visible.append(vis)
    return visible


def confusion_loops(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    tp = fp = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if pred[i, j] and gt[i, j]:
                tp += 1
            elif pred[i, j] and not gt[i, j]:
                fp += 1
            elif not pred[i, j] and gt[i, j]:
                fn += 1
    return tp, fp, fn


def central_difference(f, params: list, step: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar f() w.r.t. a list of torch tensors."""
    import torch

    def value() -> float:
        with torch.no_grad():
            return float(f())

    grads = []
    for p in params:
        g = np.zeros(p.numel(), dtype=np.float64)
        flat = p.detach().reshape(-1)
        for idx in range(flat.numel()):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + step
            up = value()
            with torch.no_grad():
                flat[idx] = orig - step
            down = value()
            with torch.no_grad():
                flat[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads.append(g.reshape(tuple(p.shape)))
    return grads


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def all_partitions_into(cells: list, n: int):
    """All ways to assign `cells` to n labeled groups (some possibly empty)."""
    for assignment in product(range(n), repeat=len(cells)):
        yield np.array(assignment)
