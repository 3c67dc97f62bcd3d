"""Synthetic corpora for experiments and smoke runs.

Two worlds are provided:

* embedding-space bags: negative instances ~ N(0, I), positive bags hold a
  few instances ~ N(shift * u, I) for a fixed unit vector u;
* image-space tiles: pale, low-saturation "negative" textures, with positive
  tiles carrying one strongly stained blob. Cells for pasting are cut from
  the same two textures, and embeddings come from the toy featurizer.

Also renders slide rasters with a stained deposit region and a cell bank
directory laid out like the public datasets (PNGs + ``labels.csv``).
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .c3p import CellBank, CellImage, sub_rng
from .features import Bag, EmbeddingMatrix, LabeledTileSet, toy_featurizer
from .rasters import save_png

# fixed so train and test splits share the same positive direction
_DIRECTION_SEED = 20_240_601


def positive_direction(dim: int) -> np.ndarray:
    u = np.random.default_rng(_DIRECTION_SEED).standard_normal(dim)
    return u / np.linalg.norm(u)


@dataclass
class SyntheticBag:
    bag: Bag
    instance_labels: np.ndarray


def gaussian_bags(n_bags: int, seed: int, n_instances: int = 200, dim: int = 32,
                  positives=(1, 5), shift: float = 2.0, prefix: str = "bag"):
    """Half the bags (rounded down) are positive, in shuffled order."""
    rng = sub_rng(seed, 10)
    u = positive_direction(dim)
    labels = np.zeros(n_bags, dtype=int)
    labels[: n_bags // 2] = 1
    rng.shuffle(labels)
    out = []
    for b, Y in enumerate(labels):
        H = rng.standard_normal((n_instances, dim))
        y = np.zeros(n_instances, dtype=int)
        if Y:
            m = int(rng.integers(positives[0], positives[1] + 1))
            idx = rng.choice(n_instances, size=m, replace=False)
            H[idx] += shift * u
            y[idx] = 1
        ids = [f"{prefix}{b:04d}/{i:04d}" for i in range(n_instances)]
        out.append(SyntheticBag(Bag(f"{prefix}{b:04d}", int(Y), ids, H), y))
    return out


# texture colours (RGB): pale pink background, bluish negative cells, dark
# magenta positive cells
_BACKGROUND = np.array([236, 222, 228])
_NEG_CELL = np.array([170, 180, 215])
_POS_CELL = np.array([120, 40, 110])


def _texture(rng, h, w, base, noise=10.0):
    img = base[None, None, :] + rng.normal(0.0, noise, (h, w, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _blob(rng, canvas, colour, size):
    """Stamp an elliptical blob of ``colour`` texture at a random place."""
    h, w = canvas.shape[:2]
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    inside = ((yy - c) / (size / 2.0)) ** 2 + ((xx - c) / (size / 2.2)) ** 2 <= 1.0
    patch = _texture(rng, size, size, colour)
    site = canvas[y0 : y0 + size, x0 : x0 + size]
    site[inside] = patch[inside]


def render_tile(rng, positive: bool, size: int = 32, n_neg_cells: int = 2) -> np.ndarray:
    tile = _texture(rng, size, size, _BACKGROUND)
    for _ in range(n_neg_cells):
        _blob(rng, tile, _NEG_CELL, max(4, size // 5))
    if positive:
        _blob(rng, tile, _POS_CELL, max(4, size // 4))
    return tile


def render_cell(rng, positive: bool, size: int) -> np.ndarray:
    """A cell crop: the cell texture filling an ellipse on background."""
    cell = _texture(rng, size, size, _BACKGROUND)
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    inside = ((yy - c) / (size / 2.4)) ** 2 + ((xx - c) / (size / 2.6)) ** 2 <= 1.0
    patch = _texture(rng, size, size, _POS_CELL if positive else _NEG_CELL)
    cell[inside] = patch[inside]
    return cell


def synthetic_cell_bank(n_per_class: int, seed: int, size: int = 10) -> CellBank:
    rng = sub_rng(seed, 20)
    cells = []
    for label in (0, 1):
        for i in range(n_per_class):
            cells.append(CellImage(render_cell(rng, bool(label), size), label, "synthetic",
                                   "pos" if label else "neg", cell_id=f"cell{label}_{i:03d}"))
    return CellBank(cells)


@dataclass
class ImageWorld:
    bags: list  # list of SyntheticBag with featurizer embeddings
    images: dict  # tile id -> RGB array


def image_bags(n_bags: int, seed: int, n_instances: int = 200, tile_px: int = 32, dim: int = 32,
               feat_seed: int = 7, positives=(1, 1), prefix: str = "slide") -> ImageWorld:
    """Bags of rendered tiles; positive bags hold ``positives`` stained-blob tiles."""
    rng = sub_rng(seed, 30)
    labels = np.zeros(n_bags, dtype=int)
    labels[: n_bags // 2] = 1
    rng.shuffle(labels)
    images, out = {}, []
    for b, Y in enumerate(labels):
        pos_idx = set()
        if Y:
            m = int(rng.integers(positives[0], positives[1] + 1))
            pos_idx = set(int(i) for i in rng.choice(n_instances, size=m, replace=False))
        ids, feats, y = [], [], []
        for i in range(n_instances):
            tid = f"{prefix}{b:04d}/{i:04d}"
            img = render_tile(rng, i in pos_idx, tile_px)
            images[tid] = img
            ids.append(tid)
            feats.append(toy_featurizer(img, dim, feat_seed))
            y.append(int(i in pos_idx))
        out.append(SyntheticBag(Bag(f"{prefix}{b:04d}", int(Y), ids, np.asarray(feats)), np.asarray(y)))
    return ImageWorld(out, images)


def labeled_tiles(n_pos: int, n_neg: int, seed: int, tile_px: int = 32, dim: int = 32,
                  feat_seed: int = 7) -> LabeledTileSet:
    rng = sub_rng(seed, 40)
    ids, feats, labels = [], [], []
    for i in range(n_pos + n_neg):
        positive = i < n_pos
        img = render_tile(rng, positive, tile_px)
        ids.append(f"eval{i:05d}")
        feats.append(toy_featurizer(img, dim, feat_seed))
        labels.append(int(positive))
    return LabeledTileSet(EmbeddingMatrix(ids, np.asarray(feats, dtype=np.float32)), labels)


def render_slide(seed: int, width: int, height: int, positive: bool = False,
                 n_cells: int = 400, cell_px: int = 40) -> np.ndarray:
    """White slide with a stained elliptical deposit populated by cells."""
    rng = sub_rng(seed, 50)
    img = np.full((height, width, 3), 245, dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width]
    cy, cx = height / 2.0, width / 2.0
    deposit = ((yy - cy) / (0.42 * height)) ** 2 + ((xx - cx) / (0.42 * width)) ** 2 <= 1.0
    img[deposit] = _texture(rng, int(deposit.sum()), 1, _BACKGROUND, noise=6.0)[:, 0, :]
    ys, xs = np.nonzero(deposit)
    for j in range(n_cells):
        k = int(rng.integers(ys.size))
        y0 = min(max(ys[k] - cell_px // 2, 0), height - cell_px)
        x0 = min(max(xs[k] - cell_px // 2, 0), width - cell_px)
        colour = _POS_CELL if positive and j % 25 == 0 else _NEG_CELL
        _blob(rng, img[y0 : y0 + cell_px, x0 : x0 + cell_px], colour, cell_px)
    return img


def write_cell_directory(directory, n_per_class: int, seed: int, size: int = 48) -> Path:
    """Cell bank on disk: ``cellNNN.png`` files and ``labels.csv``."""
    directory = Path(directory)
    rng = sub_rng(seed, 60)
    rows = []
    for label in (0, 1):
        tags = ("LD", "MD", "SD", "CIS") if label else ("NS", "NI", "NC")
        for i in range(n_per_class):
            name = f"cell{label}_{i:03d}.png"
            save_png(render_cell(rng, bool(label), size), directory / name)
            rows.append((name, "herlev", tags[i % len(tags)], label))
    with open(directory / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "dataset", "class", "label"])
        w.writerows(rows)
    return directory
