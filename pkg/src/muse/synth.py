"""Synthetic histology-like ROI tiles with typed, point-annotated nuclei.

Each ROI is a smooth low-frequency background with anti-aliased elliptical
nuclei whose color and size depend on the class. Corpora are written as
8-bit PNGs plus a JSON-lines manifest; generation is fully deterministic
given the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .numerics import DTYPE, SeededRng, resize_bilinear, tensor


class GenerationError(RuntimeError):
    pass


@dataclass
class NucleusRecord:
    index: int
    x: float
    y: float
    class_id: int


@dataclass
class RoiPatch:
    roi_id: str
    image: torch.Tensor          # [3, H, W], values in [0, 1]
    base_mpp: float
    nuclei: list[NucleusRecord]

    @property
    def side(self) -> int:
        return self.image.shape[-1]

    def coords(self) -> np.ndarray:
        return np.array([[n.x, n.y] for n in self.nuclei], dtype=np.float64).reshape(-1, 2)

    def classes(self) -> np.ndarray:
        return np.array([n.class_id for n in self.nuclei], dtype=np.int64)


@dataclass
class SynthConfig:
    roi_side: int = 256
    base_mpp: float = 0.25          # the 40x convention
    k_cls: int = 3
    count_range: tuple[int, int] = (20, 60)
    radius_mean: tuple[float, ...] = (3.2, 4.0, 4.8)
    radius_jitter: float = 0.35
    color_mean: tuple[tuple[float, float, float], ...] = (
        (0.28, 0.18, 0.62),
        (0.75, 0.15, 0.25),
        (0.10, 0.55, 0.35),
    )
    color_jitter: float = 0.03
    ecc_range: tuple[float, float] = (1.0, 1.3)
    background_base: tuple[float, float, float] = (0.86, 0.79, 0.84)
    background_amplitude: float = 0.05
    min_separation: float = 15.0
    placement_retries: int = 1000
    ann_side: int | None = None     # emit an annotated square of this side when set

    def validate(self):
        if self.k_cls < 2:
            raise ValueError("k_cls must be >= 2")
        if not (0 < self.count_range[0] <= self.count_range[1]):
            raise ValueError(f"invalid count range {self.count_range}")
        if len(self.radius_mean) < self.k_cls or len(self.color_mean) < self.k_cls:
            raise ValueError("need per-class radius and color for every class")
        if min(self.radius_mean) <= 0:
            raise ValueError("radii must be positive")
        if self.ecc_range[0] < 1.0 or self.ecc_range[1] < self.ecc_range[0]:
            raise ValueError(f"invalid eccentricity range {self.ecc_range}")


def _background(cfg: SynthConfig, rng: SeededRng) -> np.ndarray:
    """Smooth texture: bilinear upsample of a coarse noise grid per channel."""
    side = cfg.roi_side
    coarse = rng.uniform(-1.0, 1.0, size=(3, 8, 8))
    smooth = resize_bilinear(tensor(coarse), side, side).numpy()
    img = np.asarray(cfg.background_base, dtype=np.float64)[:, None, None] \
        + cfg.background_amplitude * smooth
    return np.clip(img, 0.0, 1.0)


def _render_nucleus(img: np.ndarray, x: float, y: float, ax: float, ay: float,
                    theta: float, color: np.ndarray):
    """Alpha-composite an anti-aliased filled ellipse centered at (x, y).

    ax/ay are the semi-axes; the 1 px linear edge ramp is symmetric, so the
    pixel-mass centroid stays at the center.
    """
    side = img.shape[-1]
    reach = int(np.ceil(max(ax, ay) + 1.5))
    x0 = max(int(np.floor(x)) - reach, 0)
    x1 = min(int(np.ceil(x)) + reach, side)
    y0 = max(int(np.floor(y)) - reach, 0)
    y1 = min(int(np.ceil(y)) + reach, side)
    px = np.arange(x0, x1, dtype=np.float64) + 0.5
    py = np.arange(y0, y1, dtype=np.float64) + 0.5
    dx = px[None, :] - x
    dy = py[:, None] - y
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / ax
    v = (-dx * s + dy * c) / ay
    t = np.sqrt(u * u + v * v)
    alpha = np.clip(0.5 + (1.0 - t) * min(ax, ay), 0.0, 1.0)
    patch = img[:, y0:y1, x0:x1]
    img[:, y0:y1, x0:x1] = patch * (1.0 - alpha) + color[:, None, None] * alpha


def generate_roi(cfg: SynthConfig, rng: SeededRng, roi_id: str = "roi") -> RoiPatch:
    """Render one deterministic ROI with its nucleus records."""
    cfg.validate()
    img = _background(cfg, rng)
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    max_reach = (max(cfg.radius_mean[:cfg.k_cls]) + 3 * cfg.radius_jitter) \
        * np.sqrt(cfg.ecc_range[1])
    margin = max_reach + 2.0
    lo, hi = margin, cfg.roi_side - margin

    centers: list[tuple[float, float]] = []
    nuclei: list[NucleusRecord] = []
    for i in range(count):
        for attempt in range(cfg.placement_retries + 1):
            if attempt == cfg.placement_retries:
                raise GenerationError(
                    f"roi '{roi_id}': could not place nucleus {i} after "
                    f"{cfg.placement_retries} retries (density too high)")
            x = float(rng.uniform(lo, hi))
            y = float(rng.uniform(lo, hi))
            if all((x - cx) ** 2 + (y - cy) ** 2 >= cfg.min_separation ** 2
                   for cx, cy in centers):
                break
        centers.append((x, y))
        k = int(rng.integers(0, cfg.k_cls))
        r = max(float(cfg.radius_mean[k] + rng.normal(0.0, cfg.radius_jitter)), 2.6)
        ecc = float(rng.uniform(*cfg.ecc_range))
        ax, ay = r * np.sqrt(ecc), r / np.sqrt(ecc)
        theta = float(rng.uniform(0.0, np.pi))
        color = np.clip(np.asarray(cfg.color_mean[k], dtype=np.float64)
                        + rng.normal(0.0, cfg.color_jitter, size=3), 0.0, 1.0)
        _render_nucleus(img, x, y, ax, ay, theta, color)
        nuclei.append(NucleusRecord(index=i, x=x, y=y, class_id=k))

    return RoiPatch(roi_id=roi_id, image=tensor(img), base_mpp=cfg.base_mpp, nuclei=nuclei)


def _to_png_bytes(image: torch.Tensor) -> bytes:
    arr = (image.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    pil = Image.fromarray(np.moveaxis(arr, 0, -1), mode="RGB")
    import io
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def _manifest_entry(patch: RoiPatch, filename: str, ann: tuple[int, int, int] | None) -> dict:
    entry = {
        "roi_id": patch.roi_id,
        "file": filename,
        "mpp": patch.base_mpp,
        "width": patch.side,
        "height": patch.side,
        "nuclei": [{"index": n.index, "x": n.x, "y": n.y, "class": n.class_id}
                   for n in patch.nuclei],
    }
    if ann is not None:
        entry["ann_x"], entry["ann_y"], entry["ann_side"] = ann
    return entry


def generate_corpus(cfg: SynthConfig, n: int, rng: SeededRng, out_dir) -> list[dict]:
    """Write ``n`` ROIs and a manifest.jsonl to ``out_dir``; returns the manifest.

    Per-ROI streams are derived from (seed, ordinal), so the output does not
    depend on generation order. ROIs that come out below the minimum nucleus
    count are regenerated, never emitted.
    """
    cfg.validate()
    if n < 0:
        raise ValueError("n must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        roi_id = f"roi{i:05d}"
        patch = None
        for attempt in range(10):
            stream = rng.child(("roi", i, attempt))
            try:
                patch = generate_roi(cfg, stream, roi_id=roi_id)
            except GenerationError:
                continue
            if len(patch.nuclei) >= cfg.count_range[0]:
                break
        if patch is None:
            raise GenerationError(f"roi '{roi_id}': generation failed repeatedly")
        ann = None
        if cfg.ann_side is not None:
            ann_rng = rng.child(("ann", i))
            ax = int(ann_rng.integers(0, cfg.roi_side - cfg.ann_side + 1))
            ay = int(ann_rng.integers(0, cfg.roi_side - cfg.ann_side + 1))
            ann = (ax, ay, cfg.ann_side)
        filename = f"{roi_id}.png"
        try:
            (out / filename).write_bytes(_to_png_bytes(patch.image))
        except OSError as e:
            raise OSError(f"failed writing {out / filename}: {e}") from e
        entries.append(_manifest_entry(patch, filename, ann))

    manifest_path = out / "manifest.jsonl"
    try:
        with open(manifest_path, "w") as f:
            for entry in entries:
                f.write(json.dumps(entry) + "\n")
    except OSError as e:
        raise OSError(f"failed writing {manifest_path}: {e}") from e
    return entries


@dataclass
class CorpusEntry:
    """One manifest row plus its decoded pixels (uint8, [H, W, 3])."""
    roi_id: str
    mpp: float
    width: int
    height: int
    indices: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    classes: np.ndarray
    pixels: np.ndarray
    ann: tuple[int, int, int] | None = None

    def patch(self) -> RoiPatch:
        img = tensor(np.moveaxis(self.pixels, -1, 0).astype(np.float64) / 255.0)
        nuclei = [NucleusRecord(int(i), float(x), float(y), int(c))
                  for i, x, y, c in zip(self.indices, self.xs, self.ys, self.classes)]
        return RoiPatch(roi_id=self.roi_id, image=img, base_mpp=self.mpp, nuclei=nuclei)


def load_corpus(data_dir) -> list[CorpusEntry]:
    """Load a corpus directory written by generate_corpus."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        raise OSError(f"no manifest.jsonl under {data_dir}")
    entries = []
    with open(manifest) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            pixels = np.asarray(Image.open(data_dir / rec["file"]).convert("RGB"))
            nuc = rec["nuclei"]
            ann = None
            if "ann_x" in rec:
                ann = (rec["ann_x"], rec["ann_y"], rec["ann_side"])
            entries.append(CorpusEntry(
                roi_id=rec["roi_id"], mpp=rec["mpp"],
                width=rec["width"], height=rec["height"],
                indices=np.array([n["index"] for n in nuc], dtype=np.int64),
                xs=np.array([n["x"] for n in nuc], dtype=np.float64),
                ys=np.array([n["y"] for n in nuc], dtype=np.float64),
                classes=np.array([n["class"] for n in nuc], dtype=np.int64),
                pixels=pixels, ann=ann,
            ))
    return entries
