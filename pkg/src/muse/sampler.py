"""MPP-based cropping with nucleus provenance, multi-crop views, matching.

A crop of output resolution ``r_o`` at physical scale ``mpp_o`` takes a
source square of side ``S = round(mpp_o / mpp_e * r_o)`` and resizes it to
``r_o``. Nucleus coordinates ride along; the shared per-ROI index list
makes nuclei matchable across arbitrary crops of the same ROI.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .numerics import DTYPE, SeededRng, resize_bilinear, tensor
from .synth import RoiPatch


class CropInfeasibleError(ValueError):
    pass


@dataclass
class CropSpec:
    mpp_o: float
    r_o: int
    u: float            # source-rectangle top-left, source pixels
    v: float
    s: float            # realized source side


@dataclass
class View:
    image: torch.Tensor          # [3, r_o, r_o]
    mpp: float
    coords: np.ndarray           # [N, 2] view-pixel (x, y)
    indices: np.ndarray          # [N] nucleus indices within the source ROI
    flip_h: bool
    flip_v: bool
    roi_id: str
    crop: CropSpec

    @property
    def r_o(self) -> int:
        return self.crop.r_o


@dataclass
class AugmentConfig:
    h_flip_p: float = 0.5
    v_flip_p: float = 0.5
    brightness: float = 0.15     # multiplicative jitter half-range
    contrast: float = 0.15
    blur_p: float = 0.3
    blur_sigma: tuple[float, float] = (0.2, 1.0)


@dataclass
class MultiCropConfig:
    n_global: int = 2
    n_local: int = 4
    global_size: int = 64
    local_size: int = 32
    global_mpp: tuple[float, float] = (0.25, 0.5)
    local_mpp: tuple[float, float] = (0.25, 0.5)
    # large field-of-view variant sides, enabled by the trainer's lfov flag
    lfov_global_size: int = 128
    lfov_local_size: int = 56
    augment: AugmentConfig = None

    def __post_init__(self):
        if self.augment is None:
            self.augment = AugmentConfig()
        if self.local_size >= self.global_size:
            raise ValueError("local views must be smaller than global views")
        if min(*self.global_mpp, *self.local_mpp) <= 0:
            raise ValueError("MPP ranges must be positive")

    def sizes(self, lfov: bool) -> tuple[int, int]:
        if lfov:
            return self.lfov_global_size, self.lfov_local_size
        return self.global_size, self.local_size


@dataclass
class ViewSet:
    roi_id: str
    views: list[View]            # globals first
    n_global: int

    @property
    def n_views(self) -> int:
        return len(self.views)


@dataclass
class MatchSet:
    """Positions of shared nuclei in two views, one pair per shared index."""
    pairs: np.ndarray            # [M, 2] (position in view1, position in view2)
    indices: np.ndarray          # [M] the shared nucleus indices

    def __len__(self) -> int:
        return len(self.indices)


def build_index(nuclei) -> np.ndarray:
    """Stable per-ROI nucleus indices: position in the stored order."""
    return np.arange(len(nuclei), dtype=np.int64)


def source_side(mpp_e: float, mpp_o: float, r_o: int) -> int:
    """Realized source square side, rounded to the nearest integer pixel."""
    return int(np.floor(mpp_o / mpp_e * r_o + 0.5))


def crop_at(roi: RoiPatch, mpp_o: float, r_o: int, u: int, v: int) -> View:
    """Deterministic crop at source-rectangle top-left (u, v)."""
    if mpp_o <= 0:
        raise ValueError(f"mpp_o must be positive, got {mpp_o}")
    side = roi.side
    s = source_side(roi.base_mpp, mpp_o, r_o)
    if s > side:
        raise CropInfeasibleError(
            f"crop needs a {s} px source square (mpp_o={mpp_o}, r_o={r_o}) "
            f"but the ROI side is {side}")
    if not (0 <= u <= side - s and 0 <= v <= side - s):
        raise ValueError(f"crop origin ({u}, {v}) out of range for side {side}, s={s}")
    image = resize_bilinear(roi.image[:, v:v + s, u:u + s], r_o, r_o)
    xs = roi.coords()
    # survival is decided in the source frame so it matches rectangle
    # membership exactly; the affine map is applied to survivors only
    keep = (xs[:, 0] >= u) & (xs[:, 0] < u + s) & (xs[:, 1] >= v) & (xs[:, 1] < v + s)
    scale = r_o / s
    coords = (xs[keep] - np.array([u, v], dtype=np.float64)) * scale
    indices = build_index(roi.nuclei)[keep]
    return View(image=image, mpp=mpp_o, coords=coords, indices=indices,
                flip_h=False, flip_v=False, roi_id=roi.roi_id,
                crop=CropSpec(mpp_o=mpp_o, r_o=r_o, u=float(u), v=float(v), s=float(s)))


def crop_with_provenance(roi: RoiPatch, mpp_o: float, r_o: int, rng: SeededRng) -> View:
    """Random crop: top-left uniform over valid integer placements."""
    s = source_side(roi.base_mpp, mpp_o, r_o)
    if s > roi.side:
        raise CropInfeasibleError(
            f"crop needs a {s} px source square (mpp_o={mpp_o}, r_o={r_o}) "
            f"but the ROI side is {roi.side}")
    u = int(rng.integers(0, roi.side - s + 1))
    v = int(rng.integers(0, roi.side - s + 1))
    return crop_at(roi, mpp_o, r_o, u, v)


def back_project(view: View, coords: np.ndarray) -> np.ndarray:
    """Inverse affine: view-pixel coordinates back to source pixels."""
    spec = view.crop
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2).copy()
    if view.flip_h:
        c[:, 0] = spec.r_o - c[:, 0]
    if view.flip_v:
        c[:, 1] = spec.r_o - c[:, 1]
    return c * (spec.s / spec.r_o) + np.array([spec.u, spec.v], dtype=np.float64)


def _gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = 2
    xs = torch.arange(-radius, radius + 1, dtype=DTYPE)
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    k = k / k.sum()
    c = image.shape[0]
    x = torch.nn.functional.pad(image.unsqueeze(0), (radius,) * 4, mode="replicate")
    kx = k.reshape(1, 1, 1, -1).expand(c, 1, 1, -1)
    ky = k.reshape(1, 1, -1, 1).expand(c, 1, -1, 1)
    x = torch.nn.functional.conv2d(x, kx, groups=c)
    x = torch.nn.functional.conv2d(x, ky, groups=c)
    return x.squeeze(0)


def augment(view: View, cfg: AugmentConfig, rng: SeededRng) -> View:
    """Random flips plus photometric jitter; provenance stays consistent."""
    image = view.image
    coords = view.coords.copy()
    flip_h, flip_v = view.flip_h, view.flip_v
    r_o = view.r_o
    if rng.uniform() < cfg.h_flip_p:
        image = torch.flip(image, dims=(2,))
        coords[:, 0] = r_o - coords[:, 0]
        flip_h = not flip_h
    if rng.uniform() < cfg.v_flip_p:
        image = torch.flip(image, dims=(1,))
        coords[:, 1] = r_o - coords[:, 1]
        flip_v = not flip_v
    b = 1.0 + float(rng.uniform(-cfg.brightness, cfg.brightness))
    c = 1.0 + float(rng.uniform(-cfg.contrast, cfg.contrast))
    image = image * b
    image = (image - image.mean()) * c + image.mean()
    if rng.uniform() < cfg.blur_p:
        image = _gaussian_blur(image, float(rng.uniform(*cfg.blur_sigma)))
    image = image.clamp(0.0, 1.0)
    return View(image=image, mpp=view.mpp, coords=coords, indices=view.indices.copy(),
                flip_h=flip_h, flip_v=flip_v, roi_id=view.roi_id, crop=view.crop)


def multi_crop(roi: RoiPatch, cfg: MultiCropConfig, rng: SeededRng,
               lfov: bool = False) -> ViewSet:
    """2 global + n_local independently cropped and augmented views.

    Per-view MPP is drawn log-uniformly from the configured range.
    """
    g_size, l_size = cfg.sizes(lfov)
    views = []
    for i in range(cfg.n_global):
        mpp = rng.log_uniform(*cfg.global_mpp)
        views.append(augment(crop_with_provenance(roi, mpp, g_size, rng), cfg.augment, rng))
    for i in range(cfg.n_local):
        mpp = rng.log_uniform(*cfg.local_mpp)
        views.append(augment(crop_with_provenance(roi, mpp, l_size, rng), cfg.augment, rng))
    return ViewSet(roi_id=roi.roi_id, views=views, n_global=cfg.n_global)


def match_views(v1: View, v2: View) -> MatchSet:
    """Pairs of positions for the nucleus indices present in both views."""
    if v1.roi_id != v2.roi_id:
        raise ValueError(f"views come from different ROIs: {v1.roi_id!r} vs {v2.roi_id!r}")
    pos1 = {int(idx): i for i, idx in enumerate(v1.indices)}
    pairs = []
    shared = []
    for j, idx in enumerate(v2.indices):
        i = pos1.get(int(idx))
        if i is not None:
            pairs.append((i, j))
            shared.append(int(idx))
    order = np.argsort(np.asarray(shared, dtype=np.int64), kind="stable") \
        if shared else np.array([], dtype=np.int64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)[order]
    shared = np.asarray(shared, dtype=np.int64)[order]
    return MatchSet(pairs=pairs, indices=shared)
