"""Cosine k-NN classification of embeddings with a k sweep on weighted F1."""

from dataclasses import dataclass

import numpy as np

from .metrics import F1Report, f1_report

DEFAULT_K_GRID = (1, 3, 5, 7, 11, 15, 21, 31)

# queries per similarity block; bounds the (block, n_train, dim) temporary
_BLOCK = 64


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


@dataclass
class KnnIndex:
    vectors: np.ndarray  # (n, dim) float64, unit rows
    labels: np.ndarray  # (n,) int
    classes: np.ndarray  # sorted unique class ids

    @classmethod
    def fit(cls, embeddings, labels) -> "KnnIndex":
        vectors = l2_normalize(embeddings)
        labels = np.asarray(labels, dtype=np.int64)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ValueError("k-NN index needs at least one training vector")
        if labels.shape != (vectors.shape[0],):
            raise ValueError("one label per training vector is required")
        return cls(vectors, labels, np.unique(labels))

    def __len__(self):
        return self.vectors.shape[0]

    def similarities(self, queries) -> np.ndarray:
        q = l2_normalize(np.atleast_2d(queries))
        out = np.empty((q.shape[0], len(self)))
        # elementwise product + last-axis sum: each pair is reduced the same way
        # wherever it sits, so row order cannot perturb the values
        for s in range(0, q.shape[0], _BLOCK):
            blk = q[s : s + _BLOCK]
            out[s : s + _BLOCK] = (blk[:, None, :] * self.vectors[None, :, :]).sum(axis=-1)
        return out

    def predict(self, queries, k: int) -> np.ndarray:
        if not 1 <= k <= len(self):
            raise ValueError(f"k={k} outside [1, {len(self)}]")
        sims = self.similarities(queries)
        cls_idx = np.searchsorted(self.classes, self.labels)
        n_cls = self.classes.size
        preds = np.empty(sims.shape[0], dtype=np.int64)
        for i, row in enumerate(sims):
            # nearest first; equal similarity -> smaller class id first
            order = np.lexsort((self.labels, -row))[:k]
            votes = np.bincount(cls_idx[order], minlength=n_cls)
            mass = np.bincount(cls_idx[order], weights=row[order], minlength=n_cls)
            # max votes, then max similarity mass, then smallest class id
            best = np.lexsort((np.arange(n_cls), -mass, -votes))[0]
            preds[i] = self.classes[best]
        return preds


def knn_predict(index: KnnIndex, query_vector, k: int) -> int:
    return int(index.predict(np.asarray(query_vector)[None, :], k)[0])


def sweep_k(train, val, k_grid=DEFAULT_K_GRID, class_set=None):
    """Pick the k maximising weighted F1 on ``val`` (ties -> smaller k).

    ``train`` and ``val`` are ``(embeddings, labels)`` pairs.
    """
    grid = sorted(set(int(k) for k in k_grid))
    if not grid:
        raise ValueError("k grid is empty")
    index = KnnIndex.fit(*train)
    val_x, val_y = val
    val_y = np.asarray(val_y, dtype=np.int64)
    if val_y.size == 0:
        raise ValueError("validation set is empty")
    if class_set is None:
        class_set = np.union1d(index.classes, val_y)
    best_k, best = None, None
    for k in grid:
        report = f1_report(index.predict(val_x, k), val_y, class_set)
        if best is None or report.weighted_f1 > best.weighted_f1:
            best_k, best = k, report
    return best_k, best


def random_split(n: int, seed: int, train_frac: float = 0.75):
    """Seeded random partition of ``range(n)`` into (train, val) index arrays."""
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_frac * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def report_json(best_k: int, report: F1Report) -> dict:
    doc = report.to_json()
    doc["k"] = best_k
    return doc
