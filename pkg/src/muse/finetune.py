"""Large field-of-view semi-supervised fine-tuning.

Annotated squares are re-cropped inside a larger window at a random offset;
supervised point regression and classification apply inside the annotated
region, and a confidence-filtered self-labeling consistency term applies to
predictions outside it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .distill import load_eval_model
from .model import Model, save_archive
from .numerics import AdamWConfig, AdamWState, SeededRng, TrainingError, optimizer_step
from .synth import CorpusEntry


@dataclass
class AnnotatedSample:
    roi_id: str
    image: torch.Tensor            # [3, H, W] source tile
    mpp: float
    ann_x: int                     # annotated square, source pixels
    ann_y: int
    ann_side: int
    gt_xy: np.ndarray              # [M, 2] nuclei inside the square, source pixels
    gt_class: np.ndarray           # [M]


@dataclass
class LfovSample:
    image: torch.Tensor            # [3, r', r'] expanded crop
    mpp: float
    omega: tuple[int, int, int]    # annotated square in crop coordinates (x, y, side)
    gt_xy: np.ndarray              # [M, 2] annotated nuclei, crop coordinates
    gt_class: np.ndarray
    offset: tuple[int, int]        # (dx, dy) drawn expansion offsets


@dataclass
class FtConfig:
    lam_reg: float = 5e-3
    lam_type: float = 1.0
    lam_cons_max: float = 0.1
    conf_threshold: float = 0.9
    match_radius: float = 6.0      # px at radius_base_mpp, scaled by (base/mpp)
    radius_base_mpp: float = 0.25
    expand_factor: float = 2.0     # r_a' = expand_factor * r_a
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-4
    lr_min: float = 1e-5
    weight_decay: float = 0.0
    score_floor: float = 0.5
    suppression_radius: float = 6.0
    log_every: int = 1

    def validate(self):
        if not 0.0 < self.conf_threshold < 1.0:
            raise ValueError("confidence threshold must be in (0, 1)")
        if min(self.lam_reg, self.lam_type, self.lam_cons_max) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.expand_factor < 1.0:
            raise ValueError("expansion factor must be >= 1")

    def radius_for(self, mpp: float) -> float:
        return self.match_radius * (self.radius_base_mpp / mpp)


@dataclass
class DetectionSet:
    """Typed, scored point predictions; class ids are 0-based foreground."""
    classes: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.classes)

    @staticmethod
    def empty() -> "DetectionSet":
        z = np.zeros(0)
        return DetectionSet(z.astype(np.int64), z, z, z)


def lambda_cons_schedule(i: int, n_epoch: int, lam_max: float = 0.1) -> float:
    """Cosine ramp 0 -> lam_max over the epochs, exact at both endpoints."""
    if not 0 <= i <= n_epoch:
        raise ValueError(f"epoch {i} outside [0, {n_epoch}]")
    if n_epoch == 0:
        return 0.0
    return 0.5 * lam_max * (1.0 - math.cos(math.pi * i / n_epoch))


def expand_lfov(sample: AnnotatedSample, r_prime: int, rng: SeededRng) -> LfovSample:
    """Re-crop the annotated square inside a window of side ``r_prime``.

    Offsets are uniform integers in [0, r' - r_a], clamped so the window
    stays inside the source image.
    """
    r_a = sample.ann_side
    if r_prime < r_a:
        raise ValueError(f"expanded side {r_prime} smaller than annotated side {r_a}")
    side = sample.image.shape[-1]
    if r_prime > side:
        raise ValueError(f"expanded side {r_prime} exceeds the source side {side}")

    def draw(a: int) -> int:
        lo = max(0, a + r_prime - side)
        hi = min(r_prime - r_a, a)
        return int(rng.integers(lo, hi + 1))

    dx = draw(sample.ann_x)
    dy = draw(sample.ann_y)
    x0 = sample.ann_x - dx
    y0 = sample.ann_y - dy
    crop = sample.image[:, y0:y0 + r_prime, x0:x0 + r_prime]
    gt = sample.gt_xy - np.array([x0, y0], dtype=np.float64)
    return LfovSample(image=crop, mpp=sample.mpp, omega=(dx, dy, r_a),
                      gt_xy=gt, gt_class=sample.gt_class.copy(), offset=(dx, dy))


def cell_centers(hf: int, wf: int, stride: float) -> np.ndarray:
    """Pixel centers of dense-map cells, flattened row-major to [hf*wf, 2]."""
    ys, xs = np.mgrid[0:hf, 0:wf].astype(np.float64)
    cx = (xs + 0.5) * stride
    cy = (ys + 0.5) * stride
    return np.stack([cx.ravel(), cy.ravel()], axis=1)


def match_proposals(points: np.ndarray, gts: np.ndarray, radius: float):
    """Minimum-total-distance one-to-one matching within ``radius``.

    Returns (pairs, matched_points_mask, matched_gt_mask); ties between
    equidistant proposals break toward the lower proposal index.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    n, m = len(points), len(gts)
    if n == 0 or m == 0:
        return [], np.zeros(n, dtype=bool), np.zeros(m, dtype=bool)
    dist = np.sqrt(((points[:, None, :] - gts[None, :, :]) ** 2).sum(-1))
    cost = np.where(dist <= radius, dist, 1e9)
    cost = cost + 1e-12 * np.arange(n)[:, None]
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if dist[r, c] <= radius]
    pmask = np.zeros(n, dtype=bool)
    gmask = np.zeros(m, dtype=bool)
    for r, c in pairs:
        pmask[r] = True
        gmask[c] = True
    return pairs, pmask, gmask


def decode_predictions(offsets: torch.Tensor, type_logits: torch.Tensor, stride: float,
                       score_floor: float = 0.0,
                       suppression_radius: float = 0.0) -> DetectionSet:
    """Turn head outputs into typed points.

    Each cell proposes its center plus offset; background-argmax cells and
    cells under the score floor are dropped, then greedy score-descending
    suppression removes points within the radius of an accepted point.
    """
    off = offsets.detach().numpy().reshape(2, -1)
    logits = type_logits.detach().numpy()
    k1 = logits.shape[0]
    logits = logits.reshape(k1, -1)
    hf, wf = offsets.shape[-2], offsets.shape[-1]
    anchors = cell_centers(hf, wf, stride)
    pts = anchors + off.T
    z = logits - logits.max(axis=0, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=0, keepdims=True)
    cls = probs.argmax(axis=0)
    score = probs[1:].max(axis=0)
    keep = (cls > 0) & (score >= score_floor)
    if not keep.any():
        return DetectionSet.empty()
    pts, cls, score = pts[keep], cls[keep] - 1, score[keep]
    order = np.lexsort((np.arange(len(score)), -score))
    accepted = []
    for i in order:
        p = pts[i]
        if all((p[0] - pts[j][0]) ** 2 + (p[1] - pts[j][1]) ** 2
               > suppression_radius ** 2 for j in accepted):
            accepted.append(i)
    accepted = np.array(accepted, dtype=np.int64)
    return DetectionSet(classes=cls[accepted].astype(np.int64),
                        xs=pts[accepted, 0], ys=pts[accepted, 1],
                        scores=score[accepted])


def ft_losses(offsets: torch.Tensor, type_logits: torch.Tensor, sample: LfovSample,
              cfg: FtConfig, lam_cons: float, stride: float) -> dict:
    """Supervised terms inside the annotated region, consistency outside.

    Regression is the mean squared coordinate residual of matched proposals
    in pixels squared; classification covers every in-region proposal with
    unmatched ones assigned to background; consistency is cross entropy of
    confident out-of-region predictions against their own detached argmax.
    """
    k1 = type_logits.shape[0]
    hf, wf = type_logits.shape[-2], type_logits.shape[-1]
    anchors = torch.as_tensor(cell_centers(hf, wf, stride))
    points = anchors + offsets.reshape(2, -1).transpose(0, 1)
    logits = type_logits.reshape(k1, -1).transpose(0, 1)

    pts = points.detach().numpy()
    ox, oy, r_a = sample.omega
    inside = ((pts[:, 0] >= ox) & (pts[:, 0] < ox + r_a)
              & (pts[:, 1] >= oy) & (pts[:, 1] < oy + r_a))
    in_idx = np.nonzero(inside)[0]
    out_idx = np.nonzero(~inside)[0]

    zero = torch.zeros((), dtype=torch.float64)
    radius = cfg.radius_for(sample.mpp)
    pairs, _, _ = match_proposals(pts[in_idx], sample.gt_xy, radius)

    l_reg = zero
    if pairs:
        pi = torch.as_tensor([in_idx[r] for r, _ in pairs])
        tgt = torch.as_tensor(sample.gt_xy[[c for _, c in pairs]])
        l_reg = ((points[pi] - tgt) ** 2).mean()

    l_type = zero
    if len(in_idx):
        targets = torch.zeros(len(in_idx), dtype=torch.long)
        for r, c in pairs:
            targets[r] = int(sample.gt_class[c]) + 1
        logp = F.log_softmax(logits[in_idx], dim=-1)
        l_type = -logp[torch.arange(len(in_idx)), targets].mean()

    l_cons = zero
    n_kept = 0
    if len(out_idx) and lam_cons > 0:
        with torch.no_grad():
            probs = torch.softmax(logits[out_idx], dim=-1)
            conf, pseudo = probs.max(dim=-1)
            kept = conf >= cfg.conf_threshold
        n_kept = int(kept.sum())
        if n_kept:
            rows = out_idx[kept.numpy()]
            logp = F.log_softmax(logits[rows], dim=-1)
            l_cons = -logp[torch.arange(n_kept), pseudo[kept]].mean()

    l_ft = cfg.lam_reg * l_reg + cfg.lam_type * l_type + lam_cons * l_cons
    return {"l_reg": l_reg, "l_type": l_type, "l_cons": l_cons, "l_ft": l_ft,
            "n_matched": len(pairs), "n_in": len(in_idx), "n_cons": n_kept}


def annotated_samples(entries: list[CorpusEntry]) -> list[AnnotatedSample]:
    samples = []
    for e in entries:
        if e.ann is None:
            raise ValueError(f"corpus entry {e.roi_id} has no annotated square")
        ax, ay, r_a = e.ann
        inside = ((e.xs >= ax) & (e.xs < ax + r_a) & (e.ys >= ay) & (e.ys < ay + r_a))
        patch = e.patch()
        samples.append(AnnotatedSample(
            roi_id=e.roi_id, image=patch.image, mpp=e.mpp,
            ann_x=ax, ann_y=ay, ann_side=r_a,
            gt_xy=np.stack([e.xs[inside], e.ys[inside]], axis=1)
            if inside.any() else np.zeros((0, 2)),
            gt_class=e.classes[inside]))
    return samples


def finetune(ckpt_path, entries: list[CorpusEntry], cfg: FtConfig, seed: int,
             out_dir) -> Path:
    """Fine-tune the pretrained backbone plus point heads on LFoV samples."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_eval_model(ckpt_path)
    model.set_trainable(True)
    samples = annotated_samples(entries)
    if not samples:
        raise ValueError("no annotated samples to fine-tune on")

    r_a = samples[0].ann_side
    r_prime = int(round(cfg.expand_factor * r_a))
    if r_prime % model.cfg.patch != 0:
        raise ValueError(f"expanded side {r_prime} not divisible by the patch size "
                         f"{model.cfg.patch}")

    rng = SeededRng(seed)
    adam = AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt = AdamWState()
    total_steps = max(cfg.epochs * ((len(samples) + cfg.batch_size - 1)
                                    // cfg.batch_size), 1)
    stride = min(model.cfg.strides)
    metrics_path = out / "metrics.jsonl"
    ckpt_out = out / "finetuned.muse"
    step = 0
    with open(metrics_path, "w") as mf:
        for epoch in range(cfg.epochs):
            lam_cons = lambda_cons_schedule(epoch, cfg.epochs, cfg.lam_cons_max)
            order = np.arange(len(samples))
            rng.child(("order", epoch)).shuffle(order)
            sums = {"l_reg": 0.0, "l_type": 0.0, "l_cons": 0.0, "l_ft": 0.0}
            for start in range(0, len(order), cfg.batch_size):
                batch_ids = order[start:start + cfg.batch_size]
                crops = [expand_lfov(samples[i], r_prime,
                                     rng.child(("expand", epoch, int(i))))
                         for i in batch_ids]
                imgs = torch.stack([c.image for c in crops])
                bundle = model.forward_bundle(imgs)
                offs, typs = model.heads_point(bundle.f_map)
                losses = [ft_losses(offs[j], typs[j], crops[j], cfg, lam_cons, stride)
                          for j in range(len(crops))]
                loss = torch.stack([l["l_ft"] for l in losses]).mean()
                if not torch.isfinite(loss):
                    raise TrainingError("non-finite fine-tune loss", step=step)
                params = model.params
                grads_list = torch.autograd.grad(loss, list(params.values()),
                                                 allow_unused=True)
                grads = {k: g for k, g in zip(params.keys(), grads_list)
                         if g is not None}
                # same warmup-free cosine decay as pretraining
                t = min(step / total_steps, 1.0)
                lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * t))
                optimizer_step(params, grads, opt, adam, lr=lr)
                step += 1
                for k in sums:
                    sums[k] += sum(float(l[k]) for l in losses) / len(losses)
            n_batches = max((len(order) + cfg.batch_size - 1) // cfg.batch_size, 1)
            if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
                rec = {"epoch": epoch + 1, "lam_cons": lam_cons,
                       **{k: v / n_batches for k, v in sums.items()}}
                mf.write(json.dumps(rec) + "\n")
    save_archive(ckpt_out, model.params,
                 {"model": asdict(model.cfg), "finetune": asdict(cfg)}, step=step)
    return ckpt_out
