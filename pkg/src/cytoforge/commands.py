"""Stage implementations shared by the command line and the pipeline runner.

Every public function here is one stage. Its keyword parameters are the
stage's configuration keys (and, with dashes, the CLI options); the return
value is a flat dict of metrics and output paths.
"""

import json
import logging
from pathlib import Path

import numpy as np

from . import features, knn, mil, tiler
from .c3p import CellBank, PastePolicy, generate_pasted_dataset
from .errors import ManifestError
from .poisson import seamless_clone
from .rasters import load_rgb, save_png

logger = logging.getLogger(__name__)


def tile(input: str, slide_id: str, label: str, out: str, tile_px: int = 320, min_tissue_frac: float = 0.05,
         morph_radius: int = 8, min_component_area: int = 10_000) -> dict:
    image = load_rgb(input)
    params = tiler.DepositParams(morph_radius, min_component_area, min_tissue_frac)
    manifest = tiler.tile_slide(image, slide_id, tiler.parse_label(label), out, tile_px, params)
    return {"n_tiles": len(manifest.tiles), "manifest": str(Path(out) / f"{slide_id}.json")}


def poisson(source: str, target: str, x: int, y: int, out: str) -> dict:
    result = seamless_clone(load_rgb(source), load_rgb(target), (x, y))
    save_png(result, out)
    return {"out": out}


def _slide_manifests(paths, polarity=None):
    """(manifest, root_dir) pairs from manifest files or directories of manifests.

    Directories contribute only slides of ``polarity`` when it is given.
    """
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out += [(m, p) for m in tiler.read_manifest_dir(p) if polarity is None or m.label == polarity]
        else:
            out.append((tiler.read_manifest(p), p.parent))
    return out


def _canvas_pool(paths, polarity):
    return [(t.path, str(root / t.path)) for m, root in _slide_manifests(paths, polarity) for t in m.tiles]


def augment(cells: str, canvases_pos: list[str], canvases_neg: list[str], out: str, mode: str = "poisson",
            p_pos: float = 1.0, p_neg: float = 0.5, canvases_per_class: int = 2000, n: int = 4000,
            seed: int = 7, lambda_lo: float = 0.0, lambda_hi: float = 1.0) -> dict:
    bank = CellBank.from_directory(cells)
    policy = PastePolicy(mode, p_pos, p_neg, (lambda_lo, lambda_hi), canvases_per_class, seed)
    pools = {1: _canvas_pool(canvases_pos, 1), 0: _canvas_pool(canvases_neg, 0)}
    ds = generate_pasted_dataset(bank, pools, policy, n, out)
    n_pasted = sum(1 for it in ds.items if it["cell_id"] is not None)
    return {"n_items": len(ds.items), "n_pasted": n_pasted, "manifest": str(Path(out) / "manifest.json")}


def _image_items(path):
    """(id, path-on-disk, label or None) for a pasted manifest, slide manifest(s) or PNG directory."""
    p = Path(path)
    if p.is_file():
        doc = json.loads(p.read_text())
        if "items" in doc:
            return [(it["path"], p.parent / it["path"], it["label"]) for it in doc["items"]]
        m = tiler.SlideManifest.from_json(doc)
        return [(t.path, p.parent / t.path, None) for t in m.tiles]
    manifests = tiler.read_manifest_dir(p)
    if manifests:
        return [(t.path, p / t.path, None) for m in manifests for t in m.tiles]
    return [(str(f.relative_to(p)), f, None) for f in sorted(p.rglob("*.png"))]


def embed(images: list[str], out: str, dim: int = 64, seed: int = 7) -> dict:
    items = [it for src in images for it in _image_items(src)]
    matrix = features.embed_images(((i, load_rgb(f)) for i, f, _ in items), dim, seed)
    features.write_embeddings(matrix, out)
    result = {"n": len(matrix), "out": out}
    labels = {i: lab for i, _, lab in items if lab is not None}
    if labels and len(labels) == len(items):
        features.write_labels(labels, out + ".labels.csv")
        result["labels"] = out + ".labels.csv"
    return result


def import_embeddings(csv: str, out: str) -> dict:
    matrix = features.import_csv(csv)
    features.write_embeddings(matrix, out)
    return {"n": len(matrix), "out": out}


def _labeled(emb_path, labels_path=""):
    matrix = features.read_embeddings(emb_path)
    labels = features.read_labels(labels_path or emb_path + ".labels.csv")
    return features.labeled_set(matrix, labels)


def knn_eval(train: str, report: str, train_labels: str = "", val: str = "", val_labels: str = "",
             k_grid: list[int] = knn.DEFAULT_K_GRID, split: float = 0.75, seed: int = 0) -> dict:
    """Sweep k on a validation set; without ``val`` a seeded split of ``train`` is used."""
    tr = _labeled(train, train_labels)
    tr_x, tr_y = tr.embeddings.data, tr.labels
    if val:
        va = _labeled(val, val_labels)
        va_x, va_y = va.embeddings.data, va.labels
    else:
        i_tr, i_va = knn.random_split(len(tr_y), seed, split)
        tr_x, tr_y, va_x, va_y = tr_x[i_tr], tr_y[i_tr], tr_x[i_va], tr_y[i_va]
    grid = [k for k in k_grid if k <= len(tr_y)] or [1]
    best_k, rep = knn.sweep_k((tr_x, tr_y), (va_x, va_y), grid)
    doc = knn.report_json(best_k, rep)
    Path(report).parent.mkdir(parents=True, exist_ok=True)
    Path(report).write_text(json.dumps(doc, indent=1) + "\n")
    return {"k": best_k, "weighted_f1": rep.weighted_f1, "report": report}


def _bags(bags_dir, embeddings):
    manifests = [m for m in tiler.read_manifest_dir(bags_dir) if m.label is not None]
    if not manifests:
        raise ManifestError(f"no labelled slide manifests in {bags_dir}")
    return features.assemble_bags(manifests, embeddings)


def mil_train(bags: str, embeddings: str, out: str, k: int = 8, slide_batch: int = 16, tile_batch: int = 8,
              lambda_tile: float = 0.1, c3p: str = "off", epochs: int = 50, seed: int = 0, lr: float = 1e-3,
              hidden: int = 128, cells: str = "", mode: str = "poisson", p_pos: float = 1.0, p_neg: float = 0.5,
              feat_seed: int = 7, pasted: str = "", pasted_labels: str = "", val_bags: str = "",
              val_tiles: str = "", val_tile_labels: str = "", log: str = "") -> dict:
    """Train top-k MIL; online pasting reads canvases from the bag directory's tile files.

    Validation bags are looked up in the same embedding file as the training bags.
    """
    emb = features.read_embeddings(embeddings)
    bag_list = _bags(bags, emb)
    val_list = _bags(val_bags, emb) if val_bags else None
    val_set = _labeled(val_tiles, val_tile_labels) if val_tiles else None
    config = mil.TrainConfig(k=k, slide_batch=slide_batch, tile_batch=tile_batch, lambda_tile=lambda_tile,
                             lr=lr, epochs=epochs, seed=seed, hidden=hidden, c3p_mode=c3p)
    source, pasted_set = None, None
    if c3p == "online":
        if not cells:
            raise ValueError("online pasting needs --cells")
        root = Path(bags)
        source = mil.TileSource(
            loader=lambda tid: load_rgb(root / tid),
            cell_bank=CellBank.from_directory(cells),
            policy=PastePolicy(mode=mode, p_pos=p_pos, p_neg=p_neg, seed=seed),
            featurizer=lambda im: features.toy_featurizer(im, emb.dim, feat_seed),
        )
    elif c3p == "offline":
        pasted_set = _labeled(pasted, pasted_labels)
    params, entries, _ = mil.train(bag_list, config, source, pasted_set, val_list, val_set)
    mil.save_model(params, out, seed=seed, k=k)
    log = log or out + ".log.jsonl"
    with open(log, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")
    return {"final_loss": entries[-1]["loss"] if entries else None, "model": out, "log": log}


def mil_eval(model: str, bags: str, embeddings: str, report: str, tiles: str = "", tile_labels: str = "",
             k: int = 0) -> dict:
    params, meta = mil.load_model(model)
    k = k or meta["k"]
    bag_list = _bags(bags, features.read_embeddings(embeddings))
    tile_set = _labeled(tiles, tile_labels) if tiles else None
    rep = mil.evaluate(params, bag_list, tile_set, k, strict=False)
    Path(report).parent.mkdir(parents=True, exist_ok=True)
    Path(report).write_text(json.dumps(rep.to_json(), indent=1) + "\n")
    return {"slide_auc": rep.slide_auc, "tile_auc": rep.tile_auc, "report": report}


STAGES = {
    "tile": tile,
    "augment": augment,
    "embed": embed,
    "knn": knn_eval,
    "mil-train": mil_train,
    "mil-eval": mil_eval,
}


def summarize(values) -> dict:
    """Mean and population std of a list of numbers (None entries dropped)."""
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
