"""Evaluation protocols: nucleus feature extraction, KNN / linear probe /
fine-tuned classification accuracy, and distance-matched detection F1."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from . import sampler
from .finetune import DetectionSet, decode_predictions, match_proposals
from .model import Model
from .numerics import AdamWConfig, AdamWState, SeededRng, bilinear_sample_many, optimizer_step, tensor
from .synth import CorpusEntry


@dataclass
class FeatureMatrix:
    features: np.ndarray           # [N, D]
    labels: np.ndarray             # [N]
    provenance: list               # (roi_id, nucleus index) per row

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class MetricsReport:
    task: str
    acc: float | None = None
    acc_per_k: dict | None = None
    f1_per_class: list | None = None
    f1_avg: float | None = None
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "acc": self.acc,
                           "acc_per_k": self.acc_per_k,
                           "f1_per_class": self.f1_per_class,
                           "f1_avg": self.f1_avg, "config": self.config,
                           "seed": self.seed}, indent=2)


def extract_nucleus_features(model: Model, image: torch.Tensor,
                             coords: np.ndarray) -> torch.Tensor:
    """Dense-map features interpolated at nucleus coordinates; [N, C]."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    side = image.shape[-1]
    if coords.size and (coords.min() < 0 or coords.max() > side):
        raise ValueError("coordinates outside the image bounds")
    bundle = model.forward_bundle(image)
    stride = side / bundle.f_map.shape[-1]
    return bilinear_sample_many(bundle.f_map, coords, stride)


def corpus_feature_matrix(model: Model, entries: list[CorpusEntry], mpp: float,
                          r_o: int, crops_per_roi: int, seed: int,
                          batch: int = 32) -> FeatureMatrix:
    """Features of surviving nuclei over deterministic random crops.

    Each ROI contributes ``crops_per_roi`` unaugmented crops at the given
    MPP; features come from the dense map at the nucleus coordinates.
    """
    rng = SeededRng(seed)
    views, view_meta = [], []
    for e in entries:
        patch = e.patch()
        for c in range(crops_per_roi):
            v = sampler.crop_with_provenance(patch, mpp, r_o,
                                             rng.child((e.roi_id, c)))
            if len(v.indices) == 0:
                continue
            views.append(v)
            view_meta.append((e.roi_id, e.classes))
    feats, labels, prov = [], [], []
    with torch.no_grad():
        for start in range(0, len(views), batch):
            chunk = views[start:start + batch]
            imgs = torch.stack([v.image for v in chunk])
            bundle = model.forward_bundle(imgs)
            stride = r_o / bundle.f_map.shape[-1]
            for j, v in enumerate(chunk):
                rows = bilinear_sample_many(bundle.f_map[j], v.coords, stride)
                feats.append(rows.numpy())
                roi_id, classes = view_meta[start + j]
                labels.append(classes[v.indices])
                prov.extend((roi_id, int(i)) for i in v.indices)
    if not feats:
        return FeatureMatrix(np.zeros((0, model.cfg.fmap_channels)),
                             np.zeros(0, dtype=np.int64), [])
    return FeatureMatrix(np.concatenate(feats), np.concatenate(labels), prov)


def knn_eval(train: FeatureMatrix, test: FeatureMatrix,
             ks=(10, 20, 100, 200, 500), weighted: bool = True,
             seed: int | None = None) -> MetricsReport:
    """Cosine-similarity weighted k-NN vote; reports per-k and best ACC."""
    if len(train) == 0:
        raise ValueError("empty train features")
    if len(test) == 0:
        raise ValueError("empty test features")
    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return x / np.maximum(n, 1e-12)
    sims = unit(test.features) @ unit(train.features).T
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    acc_per_k = {}
    for k in ks:
        kk = min(int(k), len(train))
        idx = np.argpartition(-sims, kk - 1, axis=1)[:, :kk]
        votes = np.zeros((len(test), n_classes))
        rows = np.arange(len(test))[:, None]
        w = sims[rows, idx] if weighted else np.ones_like(sims[rows, idx])
        lbl = train.labels[idx]
        for c in range(n_classes):
            votes[:, c] = (w * (lbl == c)).sum(axis=1)
        pred = votes.argmax(axis=1)
        acc_per_k[str(k)] = float((pred == test.labels).mean())
    best = max(acc_per_k.values())
    return MetricsReport(task="knn", acc=best, acc_per_k=acc_per_k,
                         config={"ks": list(ks), "weighted": weighted}, seed=seed)


@dataclass
class ProbeConfig:
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0


def linear_probe(train: FeatureMatrix, test: FeatureMatrix,
                 cfg: ProbeConfig | None = None,
                 return_weights: bool = False):
    """Single linear layer on frozen features: SGD, cosine-annealed lr,
    weights from N(0, 0.01), zero bias."""
    cfg = cfg or ProbeConfig()
    rng = SeededRng(cfg.seed)
    d = train.features.shape[1]
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    w = tensor(rng.normal(0.0, 0.01, size=(d, n_classes))).requires_grad_(True)
    b = torch.zeros(n_classes, dtype=torch.float64, requires_grad=True)
    x = tensor(train.features)
    y = torch.as_tensor(train.labels, dtype=torch.long)
    n = len(train)
    steps_per_epoch = max((n + cfg.batch_size - 1) // cfg.batch_size, 1)
    total = max(cfg.epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.arange(n)
        rng.child(("epoch", epoch)).shuffle(order)
        for start in range(0, n, cfg.batch_size):
            ids = torch.as_tensor(order[start:start + cfg.batch_size])
            logits = x[ids] @ w + b
            loss = F.cross_entropy(logits, y[ids])
            gw, gb = torch.autograd.grad(loss, [w, b])
            lr = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / total))
            with torch.no_grad():
                w -= lr * gw
                b -= lr * gb
            step += 1
    with torch.no_grad():
        pred = (tensor(test.features) @ w + b).argmax(dim=1).numpy()
    acc = float((pred == test.labels).mean())
    report = MetricsReport(task="linear", acc=acc, config=asdict(cfg), seed=cfg.seed)
    if return_weights:
        return report, (w.detach(), b.detach())
    return report


@dataclass
class TileExample:
    image: torch.Tensor
    coords: np.ndarray
    labels: np.ndarray


@dataclass
class FtClsConfig:
    lr: float = 1e-5
    epochs: int = 10
    batch_tiles: int = 4
    probe: ProbeConfig = None
    seed: int = 0

    def __post_init__(self):
        if self.probe is None:
            self.probe = ProbeConfig(seed=self.seed)


def _tile_features(model: Model, tiles: list[TileExample]) -> FeatureMatrix:
    feats, labels = [], []
    with torch.no_grad():
        for t in tiles:
            feats.append(extract_nucleus_features(model, t.image, t.coords).numpy())
            labels.append(t.labels)
    return FeatureMatrix(np.concatenate(feats), np.concatenate(labels),
                         [("tile", i) for i, t in enumerate(tiles)
                          for _ in range(len(t.labels))])


def finetune_cls_eval(model: Model, train_tiles: list[TileExample],
                      test_tiles: list[TileExample],
                      cfg: FtClsConfig | None = None) -> MetricsReport:
    """Unfreeze the backbone behind a probe-initialized linear classifier."""
    cfg = cfg or FtClsConfig()
    train_fm = _tile_features(model, train_tiles)
    test_fm = _tile_features(model, test_tiles)
    _, (w, b) = linear_probe(train_fm, test_fm, cfg.probe, return_weights=True)
    w = w.clone().requires_grad_(True)
    b = b.clone().requires_grad_(True)
    model.set_trainable(True)
    rng = SeededRng(cfg.seed)
    adam = AdamWConfig(lr=cfg.lr)
    opt = AdamWState()
    params = dict(model.params)
    params["_probe.w"] = w
    params["_probe.b"] = b
    for epoch in range(cfg.epochs):
        order = np.arange(len(train_tiles))
        rng.child(("epoch", epoch)).shuffle(order)
        for start in range(0, len(order), cfg.batch_tiles):
            ids = order[start:start + cfg.batch_tiles]
            losses = []
            for i in ids:
                t = train_tiles[int(i)]
                feats = extract_nucleus_features(model, t.image, t.coords)
                logits = feats @ w + b
                losses.append(F.cross_entropy(
                    logits, torch.as_tensor(t.labels, dtype=torch.long)))
            loss = torch.stack(losses).mean()
            grads_list = torch.autograd.grad(loss, list(params.values()),
                                             allow_unused=True)
            grads = {k: g for k, g in zip(params.keys(), grads_list) if g is not None}
            optimizer_step(params, grads, opt, adam)
    correct = total = 0
    with torch.no_grad():
        for t in test_tiles:
            feats = extract_nucleus_features(model, t.image, t.coords)
            pred = (feats @ w + b).argmax(dim=1).numpy()
            correct += int((pred == t.labels).sum())
            total += len(t.labels)
    return MetricsReport(task="ft", acc=correct / max(total, 1),
                         config={"lr": cfg.lr, "epochs": cfg.epochs}, seed=cfg.seed)


def detection_counts(pred: DetectionSet, gt_xy: np.ndarray, gt_class: np.ndarray,
                     radius: float, n_classes: int) -> np.ndarray:
    """Per-class (tp, fp, fn) under one-to-one distance matching."""
    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    gt_class = np.asarray(gt_class, dtype=np.int64)
    counts = np.zeros((n_classes, 3), dtype=np.int64)
    for c in range(n_classes):
        p_sel = pred.classes == c
        g_sel = gt_class == c
        pts = np.stack([pred.xs[p_sel], pred.ys[p_sel]], axis=1) \
            if p_sel.any() else np.zeros((0, 2))
        pairs, _, _ = match_proposals(pts, gt_xy[g_sel], radius)
        tp = len(pairs)
        counts[c] = (tp, int(p_sel.sum()) - tp, int(g_sel.sum()) - tp)
    return counts


def f1_from_counts(counts: np.ndarray) -> tuple[list[float], float]:
    f1s = []
    for tp, fp, fn in counts:
        denom = 2 * tp + fp + fn
        f1s.append(1.0 if denom == 0 else 2.0 * tp / denom)
    return f1s, float(np.mean(f1s))


def detection_f1(pred: DetectionSet, gt_xy, gt_class, radius: float,
                 n_classes: int, seed: int | None = None) -> MetricsReport:
    """Per-class and average F1; empty-vs-empty counts as a perfect class."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    counts = detection_counts(pred, gt_xy, gt_class, radius, n_classes)
    per_class, avg = f1_from_counts(counts)
    return MetricsReport(task="det", f1_per_class=per_class, f1_avg=avg,
                         config={"radius": radius}, seed=seed)


def detection_f1_corpus(items: list[tuple[DetectionSet, np.ndarray, np.ndarray]],
                        radius: float, n_classes: int,
                        seed: int | None = None) -> MetricsReport:
    """Aggregate counts across tiles, then compute per-class F1."""
    total = np.zeros((n_classes, 3), dtype=np.int64)
    for pred, gt_xy, gt_class in items:
        total += detection_counts(pred, gt_xy, gt_class, radius, n_classes)
    per_class, avg = f1_from_counts(total)
    return MetricsReport(task="det", f1_per_class=per_class, f1_avg=avg,
                         config={"radius": radius, "tiles": len(items)}, seed=seed)


def detect_tiles(model: Model, entries: list[CorpusEntry], score_floor: float,
                 suppression_radius: float):
    """Run the point heads on whole tiles; yields (pred, gt_xy, gt_class)."""
    out = []
    with torch.no_grad():
        for e in entries:
            patch = e.patch()
            bundle = model.forward_bundle(patch.image)
            offs, typs = model.heads_point(bundle.f_map)
            stride = patch.side / bundle.f_map.shape[-1]
            pred = decode_predictions(offs, typs, stride, score_floor,
                                      suppression_radius)
            out.append((pred, np.stack([e.xs, e.ys], axis=1)
                        if len(e.xs) else np.zeros((0, 2)), e.classes))
    return out
