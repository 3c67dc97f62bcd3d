"""Embedding files, bag assembly and a deterministic toy featurizer.

On-disk embedding format (little endian)::

    b"EMB1" | u32 n | u32 dim | n * dim float32, row-major

with the row ids stored next to it in ``<file>.ids.json`` as a JSON array.
"""

import csv
import json
import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import FormatError, ManifestError
from .rasters import as_rgb

logger = logging.getLogger(__name__)

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")
N_BINS = 16
RAW_DIM = 3 * N_BINS + 6


@dataclass
class EmbeddingMatrix:
    ids: list
    data: np.ndarray  # (n, dim) float32

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise FormatError(f"embedding data must be 2-D, got shape {self.data.shape}")
        if len(self.ids) != self.data.shape[0]:
            raise FormatError(f"{len(self.ids)} ids for {self.data.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise FormatError("embedding ids are not unique")
        if not np.isfinite(self.data).all():
            raise FormatError("embeddings contain non-finite values")
        self._row = {k: i for i, k in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return len(self.ids)

    def rows(self, ids) -> np.ndarray:
        try:
            idx = [self._row[i] for i in ids]
        except KeyError as exc:
            raise ManifestError(f"no embedding for id {exc.args[0]!r}") from None
        return self.data[idx]

    def __contains__(self, key):
        return key in self._row


@dataclass
class LabeledTileSet:
    embeddings: EmbeddingMatrix
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.embeddings),):
            raise FormatError(f"{self.labels.shape[0]} labels for {len(self.embeddings)} embeddings")


@dataclass
class Bag:
    slide_id: str
    label: int
    instance_ids: list
    embeddings: np.ndarray  # (n, dim)


def ids_path(path) -> Path:
    return Path(str(path) + ".ids.json")


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, dim = matrix.data.shape
    payload = np.ascontiguousarray(matrix.data, dtype="<f4").tobytes()
    path.write_bytes(_HEADER.pack(MAGIC, n, dim) + payload)
    ids_path(path).write_text(json.dumps(matrix.ids) + "\n")


def read_embeddings(path) -> EmbeddingMatrix:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * n * dim
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=n * dim).reshape(n, dim)
    try:
        ids = json.loads(ids_path(path).read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: missing id sidecar {ids_path(path).name}") from None
    if not isinstance(ids, list) or len(ids) != n:
        raise FormatError(f"{path}: id sidecar does not list {n} ids")
    return EmbeddingMatrix(ids, data.astype(np.float32))


def import_csv(path) -> EmbeddingMatrix:
    """Rows of ``id,v1,v2,...``; a header row is skipped when its second cell is not numeric."""
    ids, rows = [], []
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec:
                continue
            try:
                values = [float(v) for v in rec[1:]]
            except ValueError:
                if i == 0:
                    continue
                raise FormatError(f"{path}:{i + 1}: non-numeric value") from None
            ids.append(rec[0])
            rows.append(values)
    if rows and len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: rows have different lengths")
    data = np.asarray(rows, dtype=np.float32).reshape(len(rows), len(rows[0]) if rows else 0)
    return EmbeddingMatrix(ids, data)


def read_labels(path) -> dict:
    """``id,label`` CSV (header optional) -> {id: int label}."""
    out = {}
    with open(path, newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec:
                continue
            if i == 0 and rec[1].strip().lower() == "label":
                continue
            out[rec[0]] = int(rec[1])
    return out


def write_labels(labels: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for k, v in labels.items():
            w.writerow([k, int(v)])


def labeled_set(matrix: EmbeddingMatrix, labels: dict) -> LabeledTileSet:
    missing = [i for i in matrix.ids if i not in labels]
    if missing:
        raise ManifestError(f"no label for id {missing[0]!r}")
    return LabeledTileSet(matrix, [labels[i] for i in matrix.ids])


@lru_cache(maxsize=16)
def _projection(dim: int, seed: int) -> np.ndarray:
    proj = np.random.default_rng(seed).standard_normal((dim, RAW_DIM))
    proj.flags.writeable = False
    return proj


def raw_features(image) -> np.ndarray:
    """Per-channel 16-bin normalised histograms followed by per-channel mean and std (in [0, 1])."""
    image = as_rgb(image)
    flat = image.reshape(-1, 3)
    n = flat.shape[0]
    feats = np.empty(RAW_DIM, dtype=np.float64)
    for c in range(3):
        feats[c * N_BINS : (c + 1) * N_BINS] = np.bincount(flat[:, c] >> 4, minlength=N_BINS) / n
    scaled = flat.astype(np.float64) / 255.0
    feats[3 * N_BINS : 3 * N_BINS + 3] = scaled.mean(axis=0)
    feats[3 * N_BINS + 3 :] = scaled.std(axis=0)
    return feats


def toy_featurizer(image, dim: int = 64, seed: int = 7) -> np.ndarray:
    """Seeded random projection of colour statistics, L2-normalised.

    A cheap, deterministic stand-in for a frozen backbone so that the whole
    pipeline (including online pasting during MIL training) can run.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    v = _projection(dim, seed) @ raw_features(image)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def embed_images(items, dim: int = 64, seed: int = 7) -> EmbeddingMatrix:
    """``items`` is an iterable of ``(id, image)`` pairs."""
    ids, rows = [], []
    for key, image in items:
        ids.append(key)
        rows.append(toy_featurizer(image, dim, seed))
    data = np.asarray(rows, dtype=np.float32).reshape(len(rows), dim)
    return EmbeddingMatrix(ids, data)


def assemble_bags(manifests, embeddings: EmbeddingMatrix) -> list:
    """One bag per slide manifest, instances in manifest order (id = tile path)."""
    bags = []
    for m in manifests:
        if m.label is None:
            raise ManifestError(f"slide {m.slide_id} has unknown label; bags need a label")
        ids = [t.path for t in m.tiles]
        if not ids:
            logger.warning("slide %s has an empty bag", m.slide_id)
        data = embeddings.rows(ids) if ids else np.zeros((0, embeddings.dim), dtype=np.float32)
        bags.append(Bag(m.slide_id, int(m.label), ids, data))
    return bags
