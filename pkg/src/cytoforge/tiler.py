"""Slide tiling: cell-deposit detection, grid tile extraction and per-slide manifests."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ManifestError
from .rasters import as_rgb, save_png

logger = logging.getLogger(__name__)

TILE_PX = 320
DEFAULT_MPP = 0.50

# below this HSV saturation (0..255) a pixel is background whatever Otsu says;
# keeps blank or near-uniform slides from producing a noise mask
MIN_SATURATION = 20

LABEL_NAMES = {0: "negative", 1: "positive", None: "unknown"}
LABEL_VALUES = {v: k for k, v in LABEL_NAMES.items()}


@dataclass(frozen=True)
class DepositParams:
    morph_radius: int = 8
    min_component_area: int = 10_000
    min_tissue_frac: float = 0.05

    def __post_init__(self):
        if self.morph_radius < 0:
            raise ValueError("morph_radius must be >= 0")
        if self.min_component_area < 0:
            raise ValueError("min_component_area must be >= 0")
        if not 0.0 <= self.min_tissue_frac <= 1.0:
            raise ValueError("min_tissue_frac must lie in [0, 1]")


@dataclass(frozen=True)
class TileRecord:
    slide_id: str
    grid_row: int
    grid_col: int
    origin: tuple
    tissue_frac: float
    path: str = ""

    def to_json(self) -> dict:
        return {
            "row": self.grid_row,
            "col": self.grid_col,
            "x": self.origin[0],
            "y": self.origin[1],
            "tissue_frac": self.tissue_frac,
            "path": self.path,
        }


@dataclass
class SlideManifest:
    slide_id: str
    label: int | None
    microns_per_pixel: float = DEFAULT_MPP
    tiles: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "label": LABEL_NAMES[self.label],
            "mpp": self.microns_per_pixel,
            "tiles": [t.to_json() for t in self.tiles],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SlideManifest":
        expected = {"slide_id", "label", "mpp", "tiles"}
        if set(doc) != expected:
            raise ManifestError(f"slide manifest keys {sorted(doc)} != {sorted(expected)}")
        if doc["label"] not in LABEL_VALUES:
            raise ManifestError(f"unknown slide label {doc['label']!r}")
        tiles = [
            TileRecord(
                slide_id=doc["slide_id"],
                grid_row=int(t["row"]),
                grid_col=int(t["col"]),
                origin=(int(t["x"]), int(t["y"])),
                tissue_frac=float(t["tissue_frac"]),
                path=str(t["path"]),
            )
            for t in doc["tiles"]
        ]
        _check_unique(tiles)
        return cls(doc["slide_id"], LABEL_VALUES[doc["label"]], float(doc["mpp"]), tiles)


def parse_label(text: str) -> int | None:
    """Accept pos/neg/unknown spellings used on the command line."""
    key = str(text).strip().lower()
    if key in ("1", "pos", "positive"):
        return 1
    if key in ("0", "neg", "negative"):
        return 0
    if key in ("unknown", "none", "?"):
        return None
    raise ValueError(f"unrecognised slide label {text!r}")


def saturation(image: np.ndarray) -> np.ndarray:
    """HSV saturation scaled to 0..255 (uint8)."""
    rgb = as_rgb(image).astype(np.int32)
    hi = rgb.max(axis=2)
    lo = rgb.min(axis=2)
    sat = np.zeros(hi.shape, dtype=np.int32)
    nz = hi > 0
    # integer round-half-up of 255 * (hi - lo) / hi
    sat[nz] = (510 * (hi[nz] - lo[nz]) + hi[nz]) // (2 * hi[nz])
    return sat.astype(np.uint8)


def otsu_threshold(values: np.ndarray) -> int | None:
    """Otsu threshold on uint8 data; pixels ``> t`` form the foreground.

    Returns None when the data hold a single value (no split exists).
    """
    hist = np.bincount(values.ravel(), minlength=256).astype(np.float64)
    p = hist / hist.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * np.arange(256))
    mu_t = mu[-1]
    denom = omega * (1.0 - omega)
    valid = denom > 1e-12
    if not valid.any():
        return None
    between = np.full(256, -1.0)
    between[valid] = (mu_t * omega[valid] - mu[valid]) ** 2 / denom[valid]
    return int(np.argmax(between))


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    # Euclidean disk: p is set iff some mask pixel lies within distance radius
    if not mask.any():
        return np.zeros_like(mask)
    return ndimage.distance_transform_edt(~mask) <= radius


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    return ~_dilate(~mask, radius)


def close_open(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological closing then opening with a disk of ``radius``.

    The image border is handled by edge replication so a full mask stays full.
    """
    if radius <= 0:
        return mask.copy()
    pad = 2 * radius + 1
    m = np.pad(mask, pad, mode="edge")
    m = _erode(_dilate(m, radius), radius)
    m = _dilate(_erode(m, radius), radius)
    return m[pad:-pad, pad:-pad]


def drop_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    if min_area <= 1 or not mask.any():
        return mask.copy()
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def detect_cell_deposit(image, params: DepositParams = DepositParams()) -> np.ndarray:
    """Boolean mask of the stained cell-deposit area.

    Saturation channel, Otsu threshold, close/open with a disk, then small
    connected components are dropped. An empty mask is a valid outcome.
    """
    sat = saturation(image)
    t = otsu_threshold(sat)
    cut = MIN_SATURATION if t is None else max(t, MIN_SATURATION)
    mask = sat > cut
    mask = close_open(mask, params.morph_radius)
    return drop_small_components(mask, params.min_component_area)


def extract_tiles(image, mask, tile_px: int = TILE_PX, min_tissue_frac: float = 0.05, slide_id: str = ""):
    """Full, non-overlapping grid tiles anchored at (0, 0), in row-major order.

    A tile is kept when the fraction of mask pixels inside it is at least
    ``min_tissue_frac``.
    """
    image = as_rgb(image)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    if tile_px < 1:
        raise ValueError("tile_px must be >= 1")
    h, w = mask.shape
    rows, cols = h // tile_px, w // tile_px
    if rows == 0 or cols == 0:
        return []
    # per-tile coverage in one reshape instead of a python double loop
    grid = mask[: rows * tile_px, : cols * tile_px].reshape(rows, tile_px, cols, tile_px)
    frac = grid.sum(axis=(1, 3), dtype=np.int64) / float(tile_px * tile_px)
    tiles = []
    for r in range(rows):
        for c in range(cols):
            f = float(frac[r, c])
            if f >= min_tissue_frac:
                tiles.append(TileRecord(slide_id, r, c, (c * tile_px, r * tile_px), f))
    return tiles


def tile_path(slide_id: str, row: int, col: int) -> str:
    return f"tiles/{slide_id}/t_{row:04d}_{col:04d}.png"


def _check_unique(tiles):
    seen = set()
    for t in tiles:
        key = (t.grid_row, t.grid_col)
        if key in seen:
            raise ManifestError(f"duplicate tile at grid position {key}")
        seen.add(key)


def build_slide_manifest(slide_id, label, tiles, out_dir, image=None, tile_px: int = TILE_PX,
                         mpp: float = DEFAULT_MPP) -> SlideManifest:
    """Write tile PNGs (when ``image`` is given) and ``<out_dir>/<slide_id>.json``."""
    _check_unique(tiles)
    out_dir = Path(out_dir)
    records = []
    for t in tiles:
        rel = tile_path(slide_id, t.grid_row, t.grid_col)
        if image is not None:
            x, y = t.origin
            save_png(image[y : y + tile_px, x : x + tile_px], out_dir / rel)
        records.append(TileRecord(slide_id, t.grid_row, t.grid_col, t.origin, t.tissue_frac, rel))
    manifest = SlideManifest(slide_id, label, mpp, records)
    write_manifest(manifest, out_dir / f"{slide_id}.json")
    if not records:
        logger.warning("slide %s produced no tiles", slide_id)
    return manifest


def write_manifest(manifest: SlideManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


def read_manifest(path) -> SlideManifest:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    return SlideManifest.from_json(doc)


def read_manifest_dir(directory) -> list:
    """All slide manifests (``*.json`` with a ``tiles`` key) directly under ``directory``."""
    out = []
    for p in sorted(Path(directory).glob("*.json")):
        doc = json.loads(p.read_text())
        if isinstance(doc, dict) and "tiles" in doc:
            out.append(SlideManifest.from_json(doc))
    return out


def tile_slide(image, slide_id, label, out_dir, tile_px: int = TILE_PX,
               params: DepositParams = DepositParams()) -> SlideManifest:
    image = as_rgb(image)
    mask = detect_cell_deposit(image, params)
    tiles = extract_tiles(image, mask, tile_px, params.min_tissue_frac, slide_id)
    return build_slide_manifest(slide_id, label, tiles, out_dir, image=image, tile_px=tile_px)
