"""Teacher-student pretraining: image-level distillation on CLS tokens plus
nucleus-level distillation on dense features sampled at matched nuclei.

The student sees every view; the teacher sees only the two global views and
is updated as an EMA of the student. Teacher logits are centered before the
tempered softmax to prevent collapse.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from . import sampler
from .model import Model, ModelConfig, model_config_from_dict, save_archive, load_archive
from .numerics import (AdamWConfig, AdamWState, SeededRng, TrainingError,
                       bilinear_sample_many, cross_entropy_rows, ema_update,
                       optimizer_step, softmax_t)
from .sampler import MultiCropConfig, ViewSet, match_views
from .synth import CorpusEntry


@dataclass
class DistillConfig:
    lam_image: float = 1.0
    lam_nu: float = 1.0
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.05
    tau_t_warmup_steps: int = 500
    ema_start: float = 0.996
    center_momentum: float = 0.9
    total_steps: int = 2000
    warmup_steps: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.04
    log_every: int = 50
    lfov: bool = False

    def validate(self):
        if self.lam_image < 0 or self.lam_nu < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau_s <= 0 or self.tau_t_start <= 0 or self.tau_t_end <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.ema_start <= 1.0:
            raise ValueError("ema momentum must be in [0, 1]")


@dataclass
class TrainerState:
    student: Model
    teacher: Model
    center_cls: torch.Tensor
    center_nu: torch.Tensor
    opt: AdamWState
    step: int = 0


def lr_at(step: int, cfg: DistillConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to cfg.lr_min."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    t = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * t))


def ema_momentum_at(step: int, cfg: DistillConfig) -> float:
    """Cosine ramp of the teacher momentum from ema_start to 1."""
    t = min(step / max(cfg.total_steps, 1), 1.0)
    return 1.0 - (1.0 - cfg.ema_start) * (math.cos(math.pi * t) + 1.0) / 2.0


def tau_t_at(step: int, cfg: DistillConfig) -> float:
    """Linear teacher-temperature warmup, then constant."""
    if cfg.tau_t_warmup_steps <= 0 or step >= cfg.tau_t_warmup_steps:
        return cfg.tau_t_end
    frac = step / cfg.tau_t_warmup_steps
    return cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * frac


def teacher_probs(logits: torch.Tensor, center: torch.Tensor, tau_t: float) -> torch.Tensor:
    """Centered tempered softmax; no gradient flows into the teacher."""
    return softmax_t(logits.detach() - center.detach(), tau_t)


def student_probs(logits: torch.Tensor, tau_s: float) -> torch.Tensor:
    return softmax_t(logits, tau_s)


def distill_pairs(n_global: int, n_views: int) -> list[tuple[int, int]]:
    """Ordered (teacher-global, student-view) pairs with distinct slots."""
    return [(g, v) for g in range(n_global) for v in range(n_views) if v != g]


def image_loss(t_probs: torch.Tensor, s_probs: torch.Tensor,
               n_global: int = 2) -> torch.Tensor:
    """Mean cross entropy over ordered (global, other-view) pairs.

    ``t_probs`` holds teacher probabilities for the global views only,
    ``s_probs`` student probabilities for every view (globals first).
    """
    if t_probs.shape[0] < 2:
        raise ValueError("image loss needs at least 2 global views")
    pairs = distill_pairs(n_global, s_probs.shape[0])
    t_rows = torch.stack([t_probs[g] for g, _ in pairs])
    s_rows = torch.stack([s_probs[v] for _, v in pairs])
    return cross_entropy_rows(t_rows, s_rows).mean()


def muse_loss(l_image: torch.Tensor, l_nu: torch.Tensor,
              lam_image: float, lam_nu: float) -> torch.Tensor:
    return lam_image * l_image + lam_nu * l_nu


def sample_nucleus_features(f_map: torch.Tensor, view: sampler.View,
                            positions: np.ndarray) -> torch.Tensor:
    """Bilinear features of the view's nuclei at the given position rows."""
    coords = view.coords[positions]
    if coords.size and (coords.min() < 0 or coords.max() > view.r_o):
        raise ValueError("nucleus coordinates outside the view bounds")
    stride = view.r_o / f_map.shape[-1]
    return bilinear_sample_many(f_map, coords, stride)


def nucleus_pair_loss(t_fmap: torch.Tensor, t_view: sampler.View,
                      s_fmap: torch.Tensor, s_view: sampler.View,
                      match: sampler.MatchSet, t_head, s_head,
                      center_nu: torch.Tensor, tau_t: float, tau_s: float) -> torch.Tensor:
    """One (teacher view, student view) term: mean prototype cross entropy
    over the matched nuclei. Returns 0 with no gradient when the match set
    is empty."""
    if len(match) == 0:
        return torch.zeros((), dtype=t_fmap.dtype)
    with torch.no_grad():
        ft = sample_nucleus_features(t_fmap, t_view, match.pairs[:, 0])
        tp = teacher_probs(t_head(ft), center_nu, tau_t)
    fs = sample_nucleus_features(s_fmap, s_view, match.pairs[:, 1])
    sp = student_probs(s_head(fs), tau_s)
    return cross_entropy_rows(tp, sp).mean()


def trainable_names(model: Model, cfg: DistillConfig) -> list[str]:
    names = []
    for k in model.params:
        if k.startswith("point."):
            continue
        if k.startswith("headcls") and cfg.lam_image == 0:
            continue
        if (k.startswith(("reasm", "dec", "fuse", "headnu"))
                and cfg.lam_nu == 0):
            continue
        names.append(k)
    return names


def init_trainer(model_cfg: ModelConfig, cfg: DistillConfig, rng: SeededRng) -> TrainerState:
    student = Model.init(model_cfg, rng.child("init"))
    for name in trainable_names(student, cfg):
        student.params[name].requires_grad_(True)
    teacher = student.clone(requires_grad=False)
    return TrainerState(
        student=student, teacher=teacher,
        center_cls=torch.zeros(model_cfg.k_proto_cls, dtype=torch.float64),
        center_nu=torch.zeros(model_cfg.k_proto_nu, dtype=torch.float64),
        opt=AdamWState(), step=0)


def _stack_views(viewsets: list[ViewSet]):
    """Batch global and local view images; returns row lookup helpers."""
    n_global = viewsets[0].n_global
    n_views = viewsets[0].n_views
    g_imgs = torch.stack([vs.views[g].image for vs in viewsets for g in range(n_global)])
    l_imgs = None
    if n_views > n_global:
        l_imgs = torch.stack([vs.views[v].image
                              for vs in viewsets for v in range(n_global, n_views)])
    return g_imgs, l_imgs, n_global, n_views


def _forward_views(model: Model, g_imgs, l_imgs, need_map: bool):
    """Encode (and optionally decode) both view-size groups in two calls."""
    out = {}
    for key, imgs in (("g", g_imgs), ("l", l_imgs)):
        if imgs is None:
            out[key] = (None, None)
            continue
        f_cls, levels = model.encode(imgs)
        f_map = None
        if need_map:
            side = imgs.shape[-1]
            maps = [model.reassemble(levels[k], k, side)
                    for k in range(model.cfg.n_levels)]
            f_map = model.decode(maps).permute(0, 3, 1, 2)
        out[key] = (f_cls, f_map)
    return out


def batch_losses(student: Model, teacher: Model, viewsets: list[ViewSet],
                 cfg: DistillConfig, center_cls: torch.Tensor, center_nu: torch.Tensor,
                 tau_t: float) -> dict:
    """Both distillation terms over a batch of view sets.

    Pure in its inputs; gradients flow into the student only. Returns the
    loss tensors plus the teacher logits needed for the center updates.
    """
    g_imgs, l_imgs, n_global, n_views = _stack_views(viewsets)
    need_map = cfg.lam_nu > 0
    b = len(viewsets)

    s_out = _forward_views(student, g_imgs, l_imgs, need_map)
    with torch.no_grad():
        t_out = _forward_views(teacher, g_imgs, None, need_map)

    def view_row(bi: int, v: int) -> tuple[str, int]:
        if v < n_global:
            return "g", bi * n_global + v
        n_local = n_views - n_global
        return "l", bi * n_local + (v - n_global)

    def flat_row(bi: int, v: int) -> int:
        key, row = view_row(bi, v)
        return row if key == "g" else b * n_global + row

    probs_err = 0.0
    pairs = distill_pairs(n_global, n_views)

    # image-level term
    l_image = torch.zeros((), dtype=torch.float64)
    t_cls_logits = None
    if cfg.lam_image > 0:
        with torch.no_grad():
            t_cls_logits = teacher.head_cls(t_out["g"][0])
            t_probs = teacher_probs(t_cls_logits, center_cls, tau_t)
        s_cls = s_out["g"][0] if s_out["l"][0] is None \
            else torch.cat([s_out["g"][0], s_out["l"][0]])
        s_probs = student_probs(student.head_cls(s_cls), cfg.tau_s)
        t_rows, s_rows = [], []
        for bi in range(b):
            for g, v in pairs:
                t_rows.append(bi * n_global + g)
                s_rows.append(flat_row(bi, v))
        l_image = cross_entropy_rows(t_probs[t_rows], s_probs[s_rows]).mean()
        with torch.no_grad():
            probs_err = max(probs_err,
                            float((t_probs.sum(dim=-1) - 1).abs().max()),
                            float((s_probs.sum(dim=-1) - 1).abs().max()))

    # nucleus-level term; all queries gathered in three batched lookups
    l_nu = torch.zeros((), dtype=torch.float64)
    t_nu_logits_all = None
    if cfg.lam_nu > 0:
        t_idx, t_xy = [], []
        q_idx = {"g": [], "l": []}
        q_xy = {"g": [], "l": []}
        q_slot = {"g": [], "l": []}
        seg = []
        n_q = 0
        for bi, vs in enumerate(viewsets):
            for g, v in pairs:
                match = match_views(vs.views[g], vs.views[v])
                if len(match) == 0:
                    continue
                tv, sv = vs.views[g], vs.views[v]
                t_idx.append(np.full(len(match), bi * n_global + g))
                t_xy.append(tv.coords[match.pairs[:, 0]])
                key, row = view_row(bi, v)
                q_idx[key].append(np.full(len(match), row))
                q_xy[key].append(sv.coords[match.pairs[:, 1]])
                q_slot[key].append(np.arange(n_q, n_q + len(match)))
                n_q += len(match)
                seg.append(len(match))
        if seg:
            r_g = viewsets[0].views[0].r_o
            with torch.no_grad():
                t_feats = bilinear_sample_batch(
                    t_out["g"][1], np.concatenate(t_idx), np.concatenate(t_xy),
                    r_g / t_out["g"][1].shape[-1])
                t_nu_logits_all = teacher.head_nu(t_feats)
                t_nu_probs = teacher_probs(t_nu_logits_all, center_nu, tau_t)
            chunks, slots = [], []
            for key in ("g", "l"):
                if not q_idx[key]:
                    continue
                fmaps = s_out[key][1]
                r_o = r_g if key == "g" else viewsets[0].views[n_global].r_o
                chunks.append(bilinear_sample_batch(
                    fmaps, np.concatenate(q_idx[key]), np.concatenate(q_xy[key]),
                    r_o / fmaps.shape[-1]))
                slots.append(np.concatenate(q_slot[key]))
            s_feats = torch.cat(chunks)[np.argsort(np.concatenate(slots))]
            s_nu_probs = student_probs(student.head_nu(s_feats), cfg.tau_s)
            ce = cross_entropy_rows(t_nu_probs, s_nu_probs)
            seg_id = torch.repeat_interleave(
                torch.arange(len(seg)), torch.as_tensor(seg))
            sums = torch.zeros(len(seg), dtype=torch.float64).index_add(0, seg_id, ce)
            counts = torch.as_tensor(seg, dtype=torch.float64)
            l_nu = (sums / counts).mean()
            with torch.no_grad():
                probs_err = max(probs_err,
                                float((t_nu_probs.sum(dim=-1) - 1).abs().max()),
                                float((s_nu_probs.sum(dim=-1) - 1).abs().max()))

    loss = muse_loss(l_image, l_nu, cfg.lam_image, cfg.lam_nu)
    return {"loss": loss, "l_image": l_image, "l_nu": l_nu,
            "t_cls_logits": t_cls_logits, "t_nu_logits": t_nu_logits_all,
            "probs_err": probs_err}


def train_step(state: TrainerState, viewsets: list[ViewSet], cfg: DistillConfig,
               adam: AdamWConfig | None = None, m_override: float | None = None) -> dict:
    """One optimization step over a batch of view sets."""
    cfg.validate()
    step = state.step
    lr = lr_at(step, cfg)
    m = ema_momentum_at(step, cfg) if m_override is None else m_override
    tau_t = tau_t_at(step, cfg)
    adam = adam or AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
    student, teacher = state.student, state.teacher

    out = batch_losses(student, teacher, viewsets, cfg,
                       state.center_cls, state.center_nu, tau_t)
    loss, l_image, l_nu = out["loss"], out["l_image"], out["l_nu"]
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss (l_image={float(l_image)}, l_nu={float(l_nu)})", step=step)
    if out["probs_err"] > 1e-6:
        raise TrainingError(f"probability rows drifted from 1 by {out['probs_err']}",
                            step=step)

    names = trainable_names(student, cfg)
    params = {k: student.params[k] for k in names}
    grads_list = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    grads = {k: g for k, g in zip(params.keys(), grads_list) if g is not None}
    optimizer_step(params, grads, state.opt, adam, lr=lr)

    with torch.no_grad():
        if m == 0.0:
            for k, tp in teacher.params.items():
                tp.copy_(student.params[k])
        elif m != 1.0:
            t_list = list(teacher.params.values())
            s_list = [student.params[k] for k in teacher.params]
            torch._foreach_mul_(t_list, m)
            torch._foreach_add_(t_list, s_list, alpha=1.0 - m)
        if out["t_cls_logits"] is not None:
            state.center_cls = ema_update(state.center_cls,
                                          out["t_cls_logits"].mean(dim=0),
                                          cfg.center_momentum)
        if out["t_nu_logits"] is not None:
            state.center_nu = ema_update(state.center_nu,
                                         out["t_nu_logits"].mean(dim=0),
                                         cfg.center_momentum)

    state.step += 1
    return {"step": state.step, "l_image": float(l_image.detach()),
            "l_nu": float(l_nu.detach()), "l_total": float(loss.detach()),
            "m": m, "tau_t": tau_t, "lr": lr}


def trainer_tensors(state: TrainerState) -> dict[str, torch.Tensor]:
    tensors = {}
    for k, v in state.student.params.items():
        tensors[f"student.{k}"] = v
    for k, v in state.teacher.params.items():
        tensors[f"teacher.{k}"] = v
    tensors["center.cls"] = state.center_cls
    tensors["center.nu"] = state.center_nu
    for k, v in state.opt.m.items():
        tensors[f"opt.m.{k}"] = v
    for k, v in state.opt.v.items():
        tensors[f"opt.v.{k}"] = v
    return tensors


def save_trainer(path, state: TrainerState, cfg: DistillConfig):
    config = {"model": asdict(state.student.cfg), "distill": asdict(cfg)}
    save_archive(path, trainer_tensors(state), config, step=state.step)


def load_trainer(path) -> tuple[TrainerState, DistillConfig]:
    tensors, config, step = load_archive(path)
    model_cfg = model_config_from_dict(config["model"])
    cfg = DistillConfig(**config["distill"])
    student = Model(model_cfg, {k[len("student."):]: v for k, v in tensors.items()
                                if k.startswith("student.")})
    teacher = Model(model_cfg, {k[len("teacher."):]: v.requires_grad_(False)
                                for k, v in tensors.items() if k.startswith("teacher.")})
    opt = AdamWState(step=step)
    for k, v in tensors.items():
        if k.startswith("opt.m."):
            opt.m[k[len("opt.m."):]] = v
        elif k.startswith("opt.v."):
            opt.v[k[len("opt.v."):]] = v
    state = TrainerState(student=student, teacher=teacher,
                         center_cls=tensors["center.cls"],
                         center_nu=tensors["center.nu"], opt=opt, step=step)
    for name in trainable_names(student, cfg):
        student.params[name].requires_grad_(True)
    return state, cfg


def load_eval_model(path, use_teacher: bool = True) -> Model:
    """Backbone for evaluation and fine-tuning; the EMA network by default."""
    tensors, config, _ = load_archive(path)
    model_cfg = model_config_from_dict(config["model"])
    prefix = "teacher." if use_teacher else "student."
    params = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if not params:
        params = dict(tensors)  # plain model archive
    return Model(model_cfg, params)


def pretrain(corpus: list[CorpusEntry], model_cfg: ModelConfig, cfg: DistillConfig,
             mc_cfg: MultiCropConfig, seed: int, out_dir,
             resume_path=None) -> Path:
    """Run the configured number of steps; writes metrics.jsonl and a final
    checkpoint under out_dir, returning the checkpoint path."""
    cfg.validate()
    if not corpus:
        raise ValueError("empty corpus")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(seed)
    if resume_path is not None:
        state, _ = load_trainer(resume_path)
        for name in trainable_names(state.student, cfg):
            state.student.params[name].requires_grad_(True)
    else:
        state = init_trainer(model_cfg, cfg, rng)
    start_step = state.step
    adam = AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)

    metrics_path = out / "metrics.jsonl"
    ckpt_path = out / "checkpoint.muse"
    with open(metrics_path, "w") as mf:
        for local_step in range(cfg.total_steps):
            step_rng = rng.child(("step", start_step + local_step))
            ids = step_rng.integers(0, len(corpus), size=cfg.batch_size)
            viewsets = [sampler.multi_crop(corpus[int(i)].patch(), mc_cfg,
                                           step_rng.child(("views", pos)), lfov=cfg.lfov)
                        for pos, i in enumerate(ids)]
            # schedules run over the local horizon so resumed runs ramp again
            state.step = local_step
            metrics = train_step(state, viewsets, cfg, adam=adam)
            state.step = start_step + local_step + 1
            metrics["step"] = state.step
            if (local_step + 1) % cfg.log_every == 0 or local_step + 1 == cfg.total_steps:
                mf.write(json.dumps(metrics) + "\n")
    save_trainer(ckpt_path, state, cfg)
    return ckpt_path
