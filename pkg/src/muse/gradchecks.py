"""Finite-difference verification of every differentiable primitive plus
the composite losses on a reduced configuration."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from . import distill, finetune, sampler, synth
from .model import Model, ModelConfig
from .numerics import (SeededRng, bilinear_sample_many, cross_entropy,
                       grad_check, conv3x3_nhwc, resize_bilinear, softmax_t, tensor)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(patch=4, dim=16, depth=4, heads=2, mlp_ratio=2.0,
                       c_d=8, c_f=4, pos_grid=4, head_hidden=32,
                       head_bottleneck=16, k_proto_cls=12, k_proto_nu=12, k_cls=3)


def tiny_synth_config() -> synth.SynthConfig:
    return synth.SynthConfig(roi_side=48, count_range=(6, 8),
                             radius_mean=(2.4, 2.8, 3.2), radius_jitter=0.2,
                             min_separation=7.0, ecc_range=(1.0, 1.2))


def _primitive_checks(rng: SeededRng, tolerance: float) -> dict:
    reports = {}

    def randn(*shape):
        return tensor(rng.normal(size=shape))

    x = randn(5, 7)
    w = randn(7, 3)
    reports["matmul"] = grad_check(
        lambda p: ((p["x"] @ p["w"]) ** 2).sum(), {"x": x, "w": w}, tolerance)

    reports["layer_norm"] = grad_check(
        lambda p: (F.layer_norm(p["x"], (7,), p["g"], p["b"]) ** 2).sum(),
        {"x": randn(5, 7), "g": randn(7), "b": randn(7)}, tolerance)

    reports["gelu"] = grad_check(
        lambda p: F.gelu(p["x"]).sum(), {"x": randn(4, 6)}, tolerance)

    def attention(p):
        q, k, v = p["q"], p["k"], p["v"]
        att = torch.softmax(q @ k.transpose(-1, -2) / 2.0, dim=-1)
        return ((att @ v) ** 2).sum()
    reports["softmax_attention"] = grad_check(
        attention, {"q": randn(2, 5, 4), "k": randn(2, 5, 4), "v": randn(2, 5, 4)},
        tolerance)

    reports["conv3x3"] = grad_check(
        lambda p: (conv3x3_nhwc(p["x"], p["w"], p["b"]) ** 2).sum(),
        {"x": randn(2, 5, 5, 3), "w": randn(3, 3, 3, 4), "b": randn(4)}, tolerance)

    xy = tensor(rng.uniform(0.5, 5.5, size=(6, 2)))
    reports["bilinear_sample"] = grad_check(
        lambda p: (bilinear_sample_many(p["m"], xy, 1.0) ** 2).sum(),
        {"m": randn(3, 6, 6)}, tolerance)

    reports["resize_bilinear"] = grad_check(
        lambda p: (resize_bilinear(p["x"], 7, 5) ** 2).sum(),
        {"x": randn(2, 4, 4)}, tolerance)

    target = softmax_t(randn(6), 1.0).detach()
    reports["softmax_cross_entropy"] = grad_check(
        lambda p: cross_entropy(target, softmax_t(p["z"], 0.5)),
        {"z": randn(6)}, tolerance)

    reports["quadratic"] = grad_check(
        lambda p: 0.5 * (p["p"] ** 2).sum(), {"p": randn(5)}, 1e-8)
    return reports


def _bundle_check(rng: SeededRng, tolerance: float, max_entries: int) -> dict:
    cfg = tiny_model_config()
    model = Model.init(cfg, rng.child("bundle-init"))
    img = tensor(rng.uniform(size=(3, 16, 16)))
    readout = tensor(rng.normal(size=(cfg.fmap_channels,)))

    def loss_fn(params):
        m = Model(cfg, params)
        bundle = m.forward_bundle(img)
        off, typ = m.heads_point(bundle.f_map)
        return ((bundle.f_cls ** 2).sum()
                + (bundle.f_map.mean(dim=(1, 2)) * readout).sum()
                + (m.head_cls(bundle.f_cls) ** 2).sum()
                + (off ** 2).mean() + (typ ** 2).mean())

    return {"forward_bundle": grad_check(loss_fn, model.params, tolerance,
                                         max_entries_per_param=max_entries,
                                         rng=rng.child("bundle-pick"))}


def _muse_loss_check(rng: SeededRng, tolerance: float, max_entries: int) -> dict:
    cfg = tiny_model_config()
    dcfg = distill.DistillConfig(batch_size=1, total_steps=10)
    roi = synth.generate_roi(tiny_synth_config(), rng.child("roi"))
    mc = sampler.MultiCropConfig(n_local=2, global_size=16, local_size=8,
                                 global_mpp=(0.5, 0.5), local_mpp=(0.5, 0.5))
    viewsets = [sampler.multi_crop(roi, mc, rng.child("views"))]
    n_matches = sum(len(sampler.match_views(viewsets[0].views[g], viewsets[0].views[v]))
                    for g, v in distill.distill_pairs(2, viewsets[0].n_views))
    if n_matches == 0:
        raise RuntimeError("gradcheck setup produced no nucleus matches")
    student = Model.init(cfg, rng.child("student"))
    teacher = student.clone()
    center_cls = tensor(rng.normal(0, 0.1, size=cfg.k_proto_cls))
    center_nu = tensor(rng.normal(0, 0.1, size=cfg.k_proto_nu))

    def loss_fn(params):
        out = distill.batch_losses(Model(cfg, params), teacher, viewsets, dcfg,
                                   center_cls, center_nu, tau_t=0.05)
        return out["loss"]

    return {"muse_loss": grad_check(loss_fn, student.params, tolerance,
                                    max_entries_per_param=max_entries,
                                    rng=rng.child("muse-pick"))}


def _ft_loss_check(rng: SeededRng, tolerance: float, max_entries: int) -> dict:
    cfg = tiny_model_config()
    # low threshold keeps the consistency branch active at initialization
    fcfg = finetune.FtConfig(conf_threshold=0.2, match_radius=4.0)
    model = Model.init(cfg, rng.child("ft-init"))
    img = tensor(rng.uniform(size=(3, 24, 24)))
    gt = np.array([[6.0, 7.0], [17.0, 15.0]])
    cls = np.array([0, 2], dtype=np.int64)
    sample = finetune.LfovSample(image=img, mpp=0.25, omega=(2, 2, 14),
                                 gt_xy=gt - 0.0, gt_class=cls, offset=(2, 2))
    stride = min(cfg.strides)

    def loss_fn(params):
        m = Model(cfg, params)
        bundle = m.forward_bundle(img)
        off, typ = m.heads_point(bundle.f_map)
        out = finetune.ft_losses(off, typ, sample, fcfg, lam_cons=0.05,
                                 stride=stride)
        return out["l_ft"]

    return {"ft_loss": grad_check(loss_fn, model.params, tolerance,
                                  max_entries_per_param=max_entries,
                                  rng=rng.child("ft-pick"))}


def run_gradcheck(tolerance: float = 1e-4, max_entries: int = 4,
                  seed: int = 0) -> dict:
    """All checks; returns name -> GradCheckReport."""
    rng = SeededRng(seed)
    reports = {}
    reports.update(_primitive_checks(rng.child("prims"), tolerance))
    reports.update(_bundle_check(rng.child("bundle"), tolerance, max_entries))
    reports.update(_muse_loss_check(rng.child("muse"), tolerance, max_entries))
    reports.update(_ft_loss_check(rng.child("ft"), tolerance, max_entries))
    return reports
