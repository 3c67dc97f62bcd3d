"""Top-k gated-attention MIL with a classifier shared by slides and tiles.

Forward pass for one bag ``H`` (n x D)::

    s_i   = g(h_i)                         instance positivity scores
    top   = indices of the k largest s_i   (constants for differentiation)
    e_i   = w . (tanh(V h_i) * sigmoid(U h_i))   for i in top
    alpha = softmax(e);  z = sum_i alpha_i h_i
    Y_hat = g(z)

with ``g(x) = sigmoid(g_w . x + g_b)``. Training minimises
``BCE(Y_hat, Y) + lambda_tile * mean BCE(g(h_t), y_t)`` over a batch of
labelled (pasted) tiles, with gradients derived by hand and Adam updates.
Hard-negative / confident-positive queues hold the highest-scoring tiles of
each negative / positive slide and serve as pasting canvases when pasting
runs online.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .c3p import CellBank, PastePolicy, apply_c3p, sub_rng
from .errors import ConfigError, FormatError
from .features import Bag, LabeledTileSet
from .metrics import auc

logger = logging.getLogger(__name__)

EPS_PROB = 1e-7
PARAM_FIELDS = ("V", "U", "w", "g_w", "g_b")
C3P_MODES = ("off", "offline", "online")


@dataclass
class MilParams:
    V: np.ndarray  # (L, D)
    U: np.ndarray  # (L, D)
    w: np.ndarray  # (L,)
    g_w: np.ndarray  # (D,)
    g_b: np.ndarray  # () scalar

    @classmethod
    def init(cls, dim: int, hidden: int = 128, seed: int = 0) -> "MilParams":
        rng = sub_rng(seed, 0)
        bound = 1.0 / np.sqrt(dim)
        return cls(
            V=rng.uniform(-bound, bound, (hidden, dim)),
            U=rng.uniform(-bound, bound, (hidden, dim)),
            w=rng.uniform(-bound, bound, hidden),
            g_w=rng.uniform(-bound, bound, dim),
            g_b=np.zeros(()),
        )

    @classmethod
    def zeros_like(cls, other: "MilParams") -> "MilParams":
        return cls(*(np.zeros_like(getattr(other, f)) for f in PARAM_FIELDS))

    @property
    def dim(self) -> int:
        return self.g_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.w.shape[0]

    def copy(self) -> "MilParams":
        return MilParams(*(np.array(getattr(self, f), dtype=np.float64) for f in PARAM_FIELDS))

    def items(self):
        return [(f, getattr(self, f)) for f in PARAM_FIELDS]

    def to_json(self) -> dict:
        return {f: getattr(self, f).tolist() for f in PARAM_FIELDS}

    @classmethod
    def from_json(cls, doc: dict) -> "MilParams":
        p = cls(*(np.asarray(doc[f], dtype=np.float64) for f in PARAM_FIELDS))
        L, D = p.V.shape
        if p.U.shape != (L, D) or p.w.shape != (L,) or p.g_w.shape != (D,) or p.g_b.shape != ():
            raise FormatError("inconsistent MIL parameter shapes")
        if not all(np.isfinite(a).all() for _, a in p.items()):
            raise FormatError("non-finite MIL parameters")
        return p


@dataclass(frozen=True)
class TrainConfig:
    k: int = 8
    slide_batch: int = 16
    tile_batch: int = 8
    lambda_tile: float = 0.1
    lr: float = 1e-3
    epochs: int = 50
    seed: int = 0
    hidden: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    queue_capacity: int = 10
    c3p_mode: str = "off"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.slide_batch < 1 or self.tile_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.lambda_tile < 0:
            raise ConfigError("lambda_tile must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        if self.c3p_mode not in C3P_MODES:
            raise ConfigError(f"c3p_mode must be one of {C3P_MODES}")


def sigmoid(x):
    out = expit(np.asarray(x, dtype=np.float64))
    return out if out.ndim else float(out)


def instance_scores(params: MilParams, H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    return sigmoid(H @ params.g_w + params.g_b)


def select_topk(scores, k: int) -> np.ndarray:
    """Indices of the ``min(k, n)`` largest scores, highest first, ties to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[: min(k, scores.size)]


def attention_aggregate(params: MilParams, H_top):
    """Gated attention pooling; returns (alpha, z)."""
    alpha, z, _ = _attend(params, np.asarray(H_top, dtype=np.float64))
    return alpha, z


def _attend(params, Hk):
    a = np.tanh(Hk @ params.V.T)  # (k, L)
    b = sigmoid(Hk @ params.U.T)  # (k, L)
    e = (a * b) @ params.w  # (k,)
    e = e - e.max()
    ex = np.exp(e)
    alpha = ex / ex.sum()
    z = alpha @ Hk
    return alpha, z, (a, b)


def slide_score(params: MilParams, z) -> float:
    return float(sigmoid(np.dot(params.g_w, z) + params.g_b))


def bag_label(instance_labels) -> int:
    return int(np.sum(np.asarray(instance_labels)) > 0)


def bce(pred, label):
    """Binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(pred, dtype=np.float64), EPS_PROB, 1.0 - EPS_PROB)
    y = np.asarray(label, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def combined_loss(slide_pred, slide_label, tile_preds, tile_labels, lambda_tile: float) -> float:
    slide = float(bce(slide_pred, slide_label))
    tile_preds = np.asarray(tile_preds, dtype=np.float64)
    tile = float(np.mean(bce(tile_preds, tile_labels))) if tile_preds.size else 0.0
    return slide + lambda_tile * tile


@dataclass
class BagForward:
    scores: np.ndarray
    top: np.ndarray
    alpha: np.ndarray
    z: np.ndarray
    pred: float
    cache: tuple


def forward_bag(params: MilParams, H, k: int, top=None) -> BagForward:
    H = np.asarray(H, dtype=np.float64)
    scores = instance_scores(params, H)
    if top is None:
        top = select_topk(scores, k)
    Hk = H[top]
    alpha, z, cache = _attend(params, Hk)
    return BagForward(scores, top, alpha, z, slide_score(params, z), (Hk,) + cache)


def _dlogit(pred, label):
    # derivative of clamped BCE w.r.t. the logit; zero where the clamp is active
    p = np.asarray(pred, dtype=np.float64)
    inside = (p > EPS_PROB) & (p < 1.0 - EPS_PROB)
    return np.where(inside, p - np.asarray(label, dtype=np.float64), 0.0)


def slide_gradients(params: MilParams, fwd: BagForward, label: int) -> MilParams:
    Hk, a, b = fwd.cache
    grads = MilParams.zeros_like(params)
    d = float(_dlogit(fwd.pred, label))
    grads.g_w += d * fwd.z
    grads.g_b += d
    # back through z = alpha @ Hk and the softmax
    c = Hk @ (d * params.g_w)
    de = fwd.alpha * (c - fwd.alpha @ c)
    ab = a * b
    grads.w += de @ ab
    d_ab = np.outer(de, params.w)
    grads.V += (d_ab * b * (1.0 - a * a)).T @ Hk
    grads.U += (d_ab * a * b * (1.0 - b)).T @ Hk
    return grads


def tile_gradients(params: MilParams, H_tiles, tile_labels) -> tuple:
    """Mean tile BCE and its gradient (only the shared classifier is involved)."""
    grads = MilParams.zeros_like(params)
    H_tiles = np.asarray(H_tiles, dtype=np.float64)
    if H_tiles.shape[0] == 0:
        return 0.0, grads
    preds = instance_scores(params, H_tiles)
    d = _dlogit(preds, tile_labels) / H_tiles.shape[0]
    grads.g_w += d @ H_tiles
    grads.g_b += d.sum()
    return float(np.mean(bce(preds, tile_labels))), grads


def _axpy(acc: MilParams, scale: float, g: MilParams):
    for f in PARAM_FIELDS:
        setattr(acc, f, getattr(acc, f) + scale * getattr(g, f))


def backward(params: MilParams, H, label: int, H_tiles, tile_labels, k: int, lambda_tile: float, top=None):
    """Combined loss for one bag plus a tile batch, and its analytic gradient.

    The top-k indices are held fixed (pass ``top`` to pin them explicitly).
    Returns ``(loss, grads)``.
    """
    fwd = forward_bag(params, H, k, top)
    grads = slide_gradients(params, fwd, label)
    tile_loss, tg = tile_gradients(params, np.asarray(H_tiles).reshape(-1, params.dim), tile_labels)
    _axpy(grads, lambda_tile, tg)
    loss = float(bce(fwd.pred, label)) + lambda_tile * tile_loss
    return loss, grads


class Adam:
    def __init__(self, params: MilParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = MilParams.zeros_like(params)
        self.v = MilParams.zeros_like(params)
        self.t = 0

    def step(self, params: MilParams, grads: MilParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for f in PARAM_FIELDS:
            g = getattr(grads, f)
            m = self.beta1 * getattr(self.m, f) + (1.0 - self.beta1) * g
            v = self.beta2 * getattr(self.v, f) + (1.0 - self.beta2) * g * g
            setattr(self.m, f, m)
            setattr(self.v, f, v)
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            setattr(params, f, getattr(params, f) - step)


@dataclass
class QueuePair:
    capacity: int = 10
    confident_positives: dict = field(default_factory=dict)
    hard_negatives: dict = field(default_factory=dict)

    def entries(self, polarity: int) -> list:
        """Flattened ``(slide_id, tile_id, score)`` list, in slide insertion order."""
        src = self.confident_positives if polarity == 1 else self.hard_negatives
        return [(s, t, sc) for s, lst in src.items() for t, sc in lst]


def update_queues(queues: QueuePair, slide_id, slide_label: int, scores, instance_ids) -> QueuePair:
    """Replace the slide's queue with its ``capacity`` highest-scoring tiles."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != len(instance_ids):
        raise ValueError("scores and instance ids are not aligned")
    top = select_topk(scores, queues.capacity) if scores.size else []
    kept = [(instance_ids[i], float(scores[i])) for i in top]
    target = queues.confident_positives if slide_label == 1 else queues.hard_negatives
    target[slide_id] = kept
    return queues


@dataclass
class TileSource:
    """What online pasting needs: canvases by tile id, cells, policy and the featurizer."""

    loader: object  # tile_id -> RGB image
    cell_bank: CellBank
    policy: PastePolicy
    featurizer: object  # RGB image -> embedding vector


def _draw_online_tiles(queues: QueuePair, source: TileSource, n: int, rng):
    pools = {1: queues.entries(1), 0: queues.entries(0)}
    if not pools[0] and not pools[1]:
        return np.zeros((0, 0)), np.zeros(0)
    feats, labels = [], []
    for i in range(n):
        pol = 1 - (i % 2)
        if not pools[pol]:
            pol = 1 - pol
        _, tile_id, _ = pools[pol][int(rng.integers(len(pools[pol])))]
        tile = apply_c3p(source.loader(tile_id), pol, source.cell_bank, source.policy, rng, tile_id)
        feats.append(source.featurizer(tile.image))
        labels.append(tile.label)
    return np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.float64)


def bag_prediction(params: MilParams, H, k: int) -> float:
    return forward_bag(params, H, k).pred


def train(bags, config: TrainConfig, tile_source: TileSource | None = None,
          pasted_set: LabeledTileSet | None = None, val_bags=None, val_tiles: LabeledTileSet | None = None,
          init: MilParams | None = None):
    """Fit MIL parameters; returns ``(params, log, queues)``.

    ``log`` holds one dict per epoch with the mean step loss and, when
    validation data are supplied and contain both classes, slide / tile AUC.
    """
    bags = [b for b in bags if len(b.instance_ids) > 0]
    if not bags:
        raise ConfigError("training needs at least one non-empty bag")
    dim = bags[0].embeddings.shape[1]
    if config.c3p_mode == "online" and tile_source is None:
        raise ConfigError("online pasting needs a tile source with a featurizer and cell bank")
    if config.c3p_mode == "offline" and pasted_set is None:
        raise ConfigError("offline pasting needs a pre-embedded pasted tile set")

    params = init.copy() if init is not None else MilParams.init(dim, config.hidden, config.seed)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    queues = QueuePair(config.queue_capacity)
    order_rng = sub_rng(config.seed, 1)
    tile_rng = sub_rng(config.seed, 2)
    log = []

    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(bags))
        losses = []
        for start in range(0, len(perm), config.slide_batch):
            batch = [bags[i] for i in perm[start : start + config.slide_batch]]
            grads = MilParams.zeros_like(params)
            step_loss = 0.0
            fwds = []
            for bag in batch:
                fwd = forward_bag(params, bag.embeddings, config.k)
                fwds.append(fwd)
                _axpy(grads, 1.0 / len(batch), slide_gradients(params, fwd, bag.label))
                step_loss += float(bce(fwd.pred, bag.label)) / len(batch)

            if config.c3p_mode != "off" and config.lambda_tile > 0:
                if config.c3p_mode == "online":
                    Ht, yt = _draw_online_tiles(queues, tile_source, config.tile_batch, tile_rng)
                else:
                    rows = tile_rng.integers(len(pasted_set.labels), size=config.tile_batch)
                    Ht = pasted_set.embeddings.data[rows].astype(np.float64)
                    yt = pasted_set.labels[rows].astype(np.float64)
                if len(yt):
                    tl, tg = tile_gradients(params, Ht, yt)
                    _axpy(grads, config.lambda_tile, tg)
                    step_loss += config.lambda_tile * tl

            opt.step(params, grads)
            for bag, fwd in zip(batch, fwds):
                update_queues(queues, bag.slide_id, bag.label, fwd.scores, bag.instance_ids)
            losses.append(step_loss)

        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "slide_auc_val": None, "tile_auc_val": None}
        if val_bags or val_tiles is not None:
            rep = evaluate(params, val_bags or [], val_tiles, config.k, strict=False)
            entry["slide_auc_val"] = rep.slide_auc
            entry["tile_auc_val"] = rep.tile_auc
        log.append(entry)
        logger.debug("epoch %d loss %.5f", epoch, entry["loss"])
    return params, log, queues


@dataclass
class EvalReport:
    slide_auc: float | None
    tile_auc: float | None
    per_seed: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"slide_auc": self.slide_auc, "tile_auc": self.tile_auc, "per_seed": self.per_seed}


def _maybe_auc(scores, labels, strict):
    labels = np.asarray(labels)
    if not strict and (labels.size == 0 or labels.min() == labels.max()):
        return None
    return auc(scores, labels)


def evaluate(params: MilParams, bags, tile_set: LabeledTileSet | None, k: int, strict: bool = True) -> EvalReport:
    """Slide AUC over bag predictions and tile AUC over the labelled tile set.

    With ``strict=False`` a metric whose inputs hold a single class is None
    instead of raising.
    """
    bags = [b for b in bags if len(b.instance_ids) > 0]
    slide = None
    if bags or strict:
        preds = [bag_prediction(params, b.embeddings, k) for b in bags]
        slide = _maybe_auc(preds, [b.label for b in bags], strict)
    tile = None
    if tile_set is not None:
        scores = instance_scores(params, tile_set.embeddings.data)
        tile = _maybe_auc(scores, tile_set.labels, strict)
    return EvalReport(slide, tile)


def aggregate_reports(reports, seeds) -> EvalReport:
    """Mean over seeds, keeping the per-seed values."""
    per_seed = [{"seed": s, "slide_auc": r.slide_auc, "tile_auc": r.tile_auc} for s, r in zip(seeds, reports)]

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    return EvalReport(mean(r.slide_auc for r in reports), mean(r.tile_auc for r in reports), per_seed)


def save_model(params: MilParams, path, seed: int = 0, k: int = 8) -> None:
    doc = {"dim": params.dim, "hidden": params.hidden, "seed": seed, "k": k}
    doc.update(params.to_json())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(doc) + "\n")


def load_model(path):
    """Returns ``(params, metadata)``."""
    doc = json.loads(Path(path).read_text())
    params = MilParams.from_json(doc)
    if params.dim != doc.get("dim") or params.hidden != doc.get("hidden"):
        raise FormatError(f"{path}: declared dims disagree with parameter arrays")
    return params, {k: doc[k] for k in ("dim", "hidden", "seed", "k")}
