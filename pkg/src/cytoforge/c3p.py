"""Cell copy-pasting (C3P): paste labelled single-cell images onto unlabelled tiles.

Three pasting techniques are supported:

* ``paste``   - the pasting site is overwritten with the cell pixels;
* ``blend``   - the site becomes ``(1 - lam) * cell + lam * canvas`` with lam
  drawn uniformly from the policy's ``lambda_range``;
* ``poisson`` - seamless cloning of the cell into the canvas.

Cells are pasted on canvases of the same polarity (positive cells on tiles
from positive slides, negative cells on tiles from negative slides), with a
per-polarity application probability. The pasted tile takes the cell label.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ManifestError
from .poisson import SolverParams, seamless_clone
from .rasters import as_rgb, load_rgb, save_png

logger = logging.getLogger(__name__)

MODES = ("paste", "blend", "poisson")

# fine-grained class tags considered cytology-positive, per source dataset
POSITIVE_CLASSES = {
    "herlev": {"LD", "MD", "SD", "CIS"},
    "sipakmed": {"K", "D"},
}
NEGATIVE_CLASSES = {
    "herlev": {"NS", "NI", "NC"},
    "sipakmed": {"M", "SI", "P"},
}


@dataclass
class CellImage:
    pixels: np.ndarray
    label: int
    dataset_tag: str = "other"
    class_tag: str = ""
    mask: np.ndarray | None = None
    cell_id: str = ""

    def __post_init__(self):
        self.pixels = as_rgb(self.pixels)
        if self.label not in (0, 1):
            raise ValueError(f"cell label must be 0 or 1, got {self.label!r}")
        ds = self.dataset_tag.lower()
        if ds in POSITIVE_CLASSES:
            tag = self.class_tag.upper()
            if tag not in POSITIVE_CLASSES[ds] | NEGATIVE_CLASSES[ds]:
                raise ValueError(f"class {self.class_tag!r} is not a {ds} class")
            if (tag in POSITIVE_CLASSES[ds]) != (self.label == 1):
                raise ValueError(f"{ds} class {tag} is inconsistent with label {self.label}")
        if self.mask is not None and np.shape(self.mask) != self.pixels.shape[:2]:
            raise DimensionError("cell mask must match the cell image size")

    @property
    def size(self) -> tuple:
        return self.pixels.shape[1], self.pixels.shape[0]


class CellBank:
    """Labelled cells grouped by binary label."""

    def __init__(self, cells):
        self.cells = list(cells)
        self.by_label = {0: [], 1: []}
        for c in self.cells:
            self.by_label[c.label].append(c)

    def __len__(self):
        return len(self.cells)

    @classmethod
    def from_directory(cls, directory) -> "CellBank":
        """Load ``labels.csv`` (columns ``file,dataset,class,label``) and its PNGs."""
        directory = Path(directory)
        cells = []
        with open(directory / "labels.csv", newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"file", "dataset", "class", "label"} - set(reader.fieldnames or [])
            if missing:
                raise ManifestError(f"labels.csv lacks columns {sorted(missing)}")
            for row in reader:
                cells.append(
                    CellImage(
                        load_rgb(directory / row["file"]),
                        int(row["label"]),
                        row["dataset"],
                        row["class"],
                        cell_id=row["file"],
                    )
                )
        return cls(cells)


@dataclass(frozen=True)
class PastePolicy:
    mode: str = "poisson"
    p_pos: float = 1.0
    p_neg: float = 0.5
    lambda_range: tuple = (0.0, 1.0)
    canvases_per_class: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("p_pos", "p_neg"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.lambda_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("lambda_range must satisfy 0 <= lo <= hi <= 1")
        if self.canvases_per_class < 1:
            raise ValueError("canvases_per_class must be >= 1")

    def probability(self, polarity: int) -> float:
        return self.p_pos if polarity == 1 else self.p_neg

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda_range"] = list(self.lambda_range)
        return d


@dataclass
class PastedTile:
    image: np.ndarray
    label: int
    canvas_id: str
    pasted: bool
    cell_id: str | None = None
    offset: tuple | None = None
    mode: str | None = None
    lam: float | None = None


def sample_paste_location(canvas_wh, cell_wh, rng) -> tuple:
    """Uniform top-left corner among all positions keeping the cell inside the canvas."""
    cw, ch = canvas_wh
    w, h = cell_wh
    if w > cw or h > ch:
        raise DimensionError(f"cell {w}x{h} does not fit on canvas {cw}x{ch}")
    x = int(rng.integers(0, cw - w + 1))
    y = int(rng.integers(0, ch - h + 1))
    return x, y


def _site(cell, canvas, offset):
    cell = as_rgb(cell)
    canvas = as_rgb(canvas)
    x, y = offset
    h, w = cell.shape[:2]
    if x < 0 or y < 0 or x + w > canvas.shape[1] or y + h > canvas.shape[0]:
        raise DimensionError(
            f"cell {w}x{h} at ({x}, {y}) falls outside canvas {canvas.shape[1]}x{canvas.shape[0]}"
        )
    return cell, canvas, (slice(y, y + h), slice(x, x + w))


def paste(cell, canvas, offset) -> np.ndarray:
    cell, canvas, site = _site(cell, canvas, offset)
    out = canvas.copy()
    out[site] = cell
    return out


def blend(cell, canvas, offset, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"blend weight must lie in [0, 1], got {lam}")
    cell, canvas, site = _site(cell, canvas, offset)
    out = canvas.copy()
    mixed = (1.0 - lam) * cell.astype(np.float64) + lam * canvas[site].astype(np.float64)
    # values are non-negative: half-up equals half-away-from-zero
    out[site] = np.clip(np.floor(mixed + 0.5), 0, 255).astype(np.uint8)
    return out


def poisson_paste(cell, canvas, offset, solver_params: SolverParams = SolverParams(), mask=None) -> np.ndarray:
    """Seamless cloning; omega defaults to the cell rectangle minus its border.

    When a cell mask is given it is intersected with that interior.
    """
    cell = as_rgb(cell)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).copy()
        mask[0, :] = mask[-1, :] = False
        mask[:, 0] = mask[:, -1] = False
    return seamless_clone(cell, canvas, offset, mask=mask, params=solver_params)


def apply_c3p(canvas, polarity: int, cell_bank: CellBank, policy: PastePolicy, rng,
              canvas_id: str = "", solver_params: SolverParams = SolverParams()) -> PastedTile:
    """Paste a same-polarity cell on ``canvas`` with the policy's probability for that polarity."""
    canvas = as_rgb(canvas)
    p = policy.probability(polarity)
    cells = cell_bank.by_label[polarity]
    if p > 0 and not cells:
        raise ValueError(f"cell bank holds no cells with label {polarity}")
    u = rng.random()
    if not u < p:
        return PastedTile(canvas.copy(), polarity, canvas_id, pasted=False)
    cell = cells[int(rng.integers(len(cells)))]
    offset = sample_paste_location((canvas.shape[1], canvas.shape[0]), cell.size, rng)
    lam = None
    if policy.mode == "paste":
        image = paste(cell.pixels, canvas, offset)
    elif policy.mode == "blend":
        lam = float(rng.uniform(*policy.lambda_range))
        image = blend(cell.pixels, canvas, offset, lam)
    else:
        image = poisson_paste(cell.pixels, canvas, offset, solver_params, cell.mask)
    return PastedTile(image, cell.label, canvas_id, True, cell.cell_id, offset, policy.mode, lam)


def sub_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, keys...) pair; stable across runs and platforms."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=keys))


def subsample_pool(pool, count: int, rng):
    if len(pool) <= count:
        return list(pool)
    keep = np.sort(rng.choice(len(pool), size=count, replace=False))
    return [pool[i] for i in keep]


@dataclass
class PastedDataset:
    policy: PastePolicy
    items: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"policy": self.policy.to_json(), "items": self.items}


def generate_pasted_dataset(cell_bank: CellBank, canvas_pools: dict, policy: PastePolicy, n_outputs: int,
                            out_dir, solver_params: SolverParams = SolverParams()) -> PastedDataset:
    """Write ``n_outputs`` pasted tiles under ``out_dir/images`` plus ``out_dir/manifest.json``.

    ``canvas_pools`` maps polarity (0/1) to a list of ``(canvas_id, image_or_path)``.
    Output ``i`` draws from the pool of polarity ``i % 2`` using its own
    generator derived from ``(seed, i)``, so outputs can be produced in any order.
    """
    out_dir = Path(out_dir)
    pools = {}
    for pol in (0, 1):
        pool = list(canvas_pools.get(pol, []))
        if n_outputs > pol and not pool:
            raise ValueError(f"canvas pool for label {pol} is empty")
        pools[pol] = subsample_pool(pool, policy.canvases_per_class, sub_rng(policy.seed, 0, pol))

    dataset = PastedDataset(policy)
    for i in range(n_outputs):
        pol = i % 2
        rng = sub_rng(policy.seed, 1, i)
        canvas_id, src = pools[pol][int(rng.integers(len(pools[pol])))]
        canvas = load_rgb(src) if isinstance(src, (str, Path)) else src
        tile = apply_c3p(canvas, pol, cell_bank, policy, rng, canvas_id, solver_params)
        rel = f"images/{i:06d}.png"
        save_png(tile.image, out_dir / rel)
        dataset.items.append(
            {
                "path": rel,
                "label": tile.label,
                "cell_id": tile.cell_id,
                "canvas_id": canvas_id,
                "x": tile.offset[0] if tile.pasted else None,
                "y": tile.offset[1] if tile.pasted else None,
                "mode": tile.mode if tile.pasted else "none",
                "lambda": tile.lam,
            }
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(dataset.to_json(), indent=1) + "\n")
    logger.info("wrote %d pasted tiles to %s", n_outputs, out_dir)
    return dataset
