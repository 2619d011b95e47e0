"""Encoder-decoder backbone: ViT trunk with multi-level taps, reassembly
layers, a top-down residual fusion decoder, projection heads and point
heads.

Dense maps are kept channels-last internally ([B, H, W, C]) because token
grids reshape into that layout for free and the matmul-based conv is much
faster that way in double precision; the public feature map is [C, H, W].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import (DTYPE, SeededRng, conv3x3_nhwc, linear,
                       matmul_resize_nhwc, resize_bilinear_nhwc, tensor)


@dataclass
class ModelConfig:
    patch: int = 8
    dim: int = 64
    depth: int = 8
    heads: int = 4
    mlp_ratio: float = 2.0
    n_levels: int = 4
    c_d: int = 32                 # reassembly channels
    c_f: int = 16                 # fused channels per level
    strides: tuple[int, ...] = ()  # defaults to (p/4, p/2, p, 2p)
    pos_grid: int = 8             # base positional-embedding grid side
    head_hidden: int = 128
    head_bottleneck: int = 64
    k_proto_cls: int = 128
    k_proto_nu: int = 128
    k_cls: int = 3                # downstream foreground classes

    def __post_init__(self):
        if not self.strides:
            p = self.patch
            self.strides = (max(p // 4, 1), max(p // 2, 1), p, 2 * p)
        self.strides = tuple(int(s) for s in self.strides)
        if self.depth % self.n_levels != 0:
            raise ValueError("depth must be divisible by the number of tap levels")
        if len(self.strides) != self.n_levels:
            raise ValueError("one stride per level required")
        if any(s <= 0 for s in self.strides):
            raise ValueError("strides must be positive")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")

    @property
    def s_min(self) -> int:
        return min(self.strides)

    @property
    def tap_blocks(self) -> tuple[int, ...]:
        step = self.depth // self.n_levels
        return tuple(step * (i + 1) for i in range(self.n_levels))

    @property
    def fmap_channels(self) -> int:
        return self.n_levels * self.c_f


@dataclass
class FeatureBundle:
    f_cls: torch.Tensor           # [B, dim] or [dim]
    f_map: torch.Tensor           # [B, C, H, W] or [C, H, W]


def _t(arr) -> torch.Tensor:
    return tensor(np.asarray(arr))


def init_params(cfg: ModelConfig, rng: SeededRng) -> dict[str, torch.Tensor]:
    """Deterministic parameter initialization from a seeded stream."""
    p: dict[str, torch.Tensor] = {}

    def tn(name, shape, std=0.02):
        p[name] = _t(rng.trunc_normal(std, shape))

    def zeros(name, shape):
        p[name] = torch.zeros(shape, dtype=DTYPE)

    def ones(name, shape):
        p[name] = torch.ones(shape, dtype=DTYPE)

    def fan_in(name, shape, fan):
        tn(name, shape, std=float(np.sqrt(2.0 / fan)))

    c, d = cfg.dim, cfg.depth
    tn("embed.w", (3 * cfg.patch * cfg.patch, c))
    zeros("embed.b", (c,))
    tn("cls", (1, 1, c))
    tn("pos.cls", (1, 1, c))
    tn("pos.grid", (1, cfg.pos_grid, cfg.pos_grid, c))
    for i in range(d):
        ones(f"blk{i}.ln1.w", (c,)); zeros(f"blk{i}.ln1.b", (c,))
        tn(f"blk{i}.qkv.w", (c, 3 * c)); zeros(f"blk{i}.qkv.b", (3 * c,))
        tn(f"blk{i}.proj.w", (c, c)); zeros(f"blk{i}.proj.b", (c,))
        ones(f"blk{i}.ln2.w", (c,)); zeros(f"blk{i}.ln2.b", (c,))
        hid = int(c * cfg.mlp_ratio)
        tn(f"blk{i}.mlp1.w", (c, hid)); zeros(f"blk{i}.mlp1.b", (hid,))
        tn(f"blk{i}.mlp2.w", (hid, c)); zeros(f"blk{i}.mlp2.b", (c,))
    ones("ln_f.w", (c,)); zeros("ln_f.b", (c,))

    mid = max(cfg.c_d // 4, 4)
    for k in range(cfg.n_levels):
        fan_in(f"reasm{k}.w", (c, cfg.c_d), c); zeros(f"reasm{k}.b", (cfg.c_d,))
        fan_in(f"dec{k}.in.w", (cfg.c_d, mid), cfg.c_d); zeros(f"dec{k}.in.b", (mid,))
        fan_in(f"dec{k}.conv.w", (3, 3, mid, mid), 9 * mid); zeros(f"dec{k}.conv.b", (mid,))
        fan_in(f"dec{k}.out.w", (mid, cfg.c_d), mid); zeros(f"dec{k}.out.b", (cfg.c_d,))
        fan_in(f"fuse{k}.w", (cfg.c_d, cfg.c_f), cfg.c_d); zeros(f"fuse{k}.b", (cfg.c_f,))

    for head, k_out in (("headcls", cfg.k_proto_cls), ("headnu", cfg.k_proto_nu)):
        d_in = c if head == "headcls" else cfg.fmap_channels
        tn(f"{head}.fc1.w", (d_in, cfg.head_hidden)); zeros(f"{head}.fc1.b", (cfg.head_hidden,))
        tn(f"{head}.fc2.w", (cfg.head_hidden, cfg.head_hidden)); zeros(f"{head}.fc2.b", (cfg.head_hidden,))
        tn(f"{head}.fc3.w", (cfg.head_hidden, cfg.head_bottleneck)); zeros(f"{head}.fc3.b", (cfg.head_bottleneck,))
        tn(f"{head}.proto.w", (k_out, cfg.head_bottleneck))

    cf = cfg.fmap_channels
    fan_in("point.stem.w", (3, 3, cf, 32), 9 * cf); zeros("point.stem.b", (32,))
    fan_in("point.off.w", (32, 2), 32); zeros("point.off.b", (2,))
    fan_in("point.typ.w", (32, cfg.k_cls + 1), 32); zeros("point.typ.b", (cfg.k_cls + 1,))
    return p


class Model:
    """Functional wrapper around a named parameter dict."""

    def __init__(self, cfg: ModelConfig, params: dict[str, torch.Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, rng: SeededRng) -> "Model":
        return cls(cfg, init_params(cfg, rng))

    def clone(self, requires_grad: bool = False) -> "Model":
        params = {k: v.detach().clone().requires_grad_(requires_grad)
                  for k, v in self.params.items()}
        return Model(self.cfg, params)

    def set_trainable(self, trainable: bool = True, names=None):
        for k, v in self.params.items():
            if names is None or k in names:
                v.requires_grad_(trainable)

    def param_count(self) -> int:
        return sum(v.numel() for v in self.params.values())

    # ---- encoder -------------------------------------------------------

    def _pos_embedding(self, h: int, w: int) -> torch.Tensor:
        grid = self.params["pos.grid"]
        if grid.shape[1] != h or grid.shape[2] != w:
            grid = matmul_resize_nhwc(grid, h, w)
        return torch.cat([self.params["pos.cls"], grid.reshape(1, h * w, -1)], dim=1)

    def encode(self, image: torch.Tensor):
        """Tokens through the trunk; returns (f_cls, per-level token tensors).

        Levels are the raw block outputs at equally spaced depths, each of
        shape [B, 1 + h*w, dim] with the CLS token at position 0.
        """
        p, cfg = self.params, self.cfg
        single = image.dim() == 3
        if single:
            image = image.unsqueeze(0)
        b, _, hh, ww = image.shape
        if hh != ww or hh % cfg.patch != 0:
            raise ValueError(f"input side must be square and divisible by patch size "
                             f"{cfg.patch}, got {hh}x{ww}")
        h = hh // cfg.patch
        x = image.reshape(b, 3, h, cfg.patch, h, cfg.patch)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, h * h, -1)
        x = linear(x, p["embed.w"], p["embed.b"])
        x = torch.cat([p["cls"].expand(b, -1, -1), x], dim=1)
        x = x + self._pos_embedding(h, h)

        nh, dh = cfg.heads, cfg.dim // cfg.heads
        taps = set(cfg.tap_blocks)
        levels = []
        for i in range(cfg.depth):
            t = x.shape[1]
            y = F.layer_norm(x, (cfg.dim,), p[f"blk{i}.ln1.w"], p[f"blk{i}.ln1.b"])
            qkv = linear(y, p[f"blk{i}.qkv.w"], p[f"blk{i}.qkv.b"])
            q, k, v = qkv.reshape(b, t, 3, nh, dh).permute(2, 0, 3, 1, 4)
            y = F.scaled_dot_product_attention(q, k, v)
            y = y.transpose(1, 2).reshape(b, t, cfg.dim)
            x = x + linear(y, p[f"blk{i}.proj.w"], p[f"blk{i}.proj.b"])
            y = F.layer_norm(x, (cfg.dim,), p[f"blk{i}.ln2.w"], p[f"blk{i}.ln2.b"])
            x = x + linear(F.gelu(linear(y, p[f"blk{i}.mlp1.w"], p[f"blk{i}.mlp1.b"])),
                           p[f"blk{i}.mlp2.w"], p[f"blk{i}.mlp2.b"])
            if i + 1 in taps:
                levels.append(x)
        f_cls = F.layer_norm(x, (cfg.dim,), p["ln_f.w"], p["ln_f.b"])[:, 0]
        if single:
            f_cls = f_cls[0]
        return f_cls, levels

    # ---- decoder -------------------------------------------------------

    def reassemble(self, tokens: torch.Tensor, level: int, input_side: int) -> torch.Tensor:
        """Drop CLS, reshape row-major to the patch grid, project, resample.

        Returns a channels-last map [B, side/stride, side/stride, c_d].
        """
        p, cfg = self.params, self.cfg
        g = input_side // cfg.patch
        if tokens.shape[-2] != g * g + 1:
            raise ValueError(f"expected {g * g + 1} tokens for side {input_side}, "
                             f"got {tokens.shape[-2]}")
        x = linear(tokens[..., 1:, :], p[f"reasm{level}.w"], p[f"reasm{level}.b"])
        x = x.reshape(-1, g, g, cfg.c_d)
        target = input_side // cfg.strides[level]
        return matmul_resize_nhwc(x, target, target)

    def _res_block(self, x: torch.Tensor, k: int) -> torch.Tensor:
        p = self.params
        y = F.gelu(linear(x, p[f"dec{k}.in.w"], p[f"dec{k}.in.b"]))
        y = F.gelu(conv3x3_nhwc(y, p[f"dec{k}.conv.w"], p[f"dec{k}.conv.b"]))
        return x + linear(y, p[f"dec{k}.out.w"], p[f"dec{k}.out.b"])

    def decode(self, maps: list[torch.Tensor]) -> torch.Tensor:
        """Top-down fusion of reassembled maps into the unified dense map.

        ``maps[k]`` is the level-k channels-last map (level 0 finest). The
        coarsest passes through its residual block, is upsampled and added
        into the next level, and so on; per-level outputs are projected to
        c_f channels, resized to the finest stride and concatenated.
        """
        p, cfg = self.params, self.cfg
        if len(maps) != cfg.n_levels:
            raise ValueError(f"expected {cfg.n_levels} maps, got {len(maps)}")
        sizes = [m.shape[-3] for m in maps]
        if sizes != sorted(sizes, reverse=True):
            raise ValueError("stride chain must be monotone (fine to coarse)")
        decoded = [None] * cfg.n_levels
        carry = None
        for k in reversed(range(cfg.n_levels)):
            x = maps[k]
            if carry is not None:
                x = x + matmul_resize_nhwc(carry, x.shape[-3], x.shape[-2])
            carry = self._res_block(x, k)
            decoded[k] = carry
        target = maps[0].shape[-3], maps[0].shape[-2]
        fused = [matmul_resize_nhwc(linear(decoded[k], p[f"fuse{k}.w"], p[f"fuse{k}.b"]),
                                    *target)
                 for k in range(cfg.n_levels)]
        return torch.cat(fused, dim=-1)

    def forward_bundle(self, image: torch.Tensor) -> FeatureBundle:
        single = image.dim() == 3
        f_cls, levels = self.encode(image)
        side = image.shape[-1]
        maps = [self.reassemble(levels[k], k, side) for k in range(self.cfg.n_levels)]
        f_map = self.decode(maps).permute(0, 3, 1, 2)
        if single:
            f_map = f_map[0]
        return FeatureBundle(f_cls=f_cls, f_map=f_map)

    # ---- heads ---------------------------------------------------------

    def _proto_head(self, x: torch.Tensor, name: str) -> torch.Tensor:
        p = self.params
        y = F.gelu(linear(x, p[f"{name}.fc1.w"], p[f"{name}.fc1.b"]))
        y = F.gelu(linear(y, p[f"{name}.fc2.w"], p[f"{name}.fc2.b"]))
        y = linear(y, p[f"{name}.fc3.w"], p[f"{name}.fc3.b"])
        y = y / y.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        w = p[f"{name}.proto.w"]
        w = w / w.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return y @ w.transpose(0, 1)

    def head_cls(self, f_cls: torch.Tensor) -> torch.Tensor:
        return self._proto_head(f_cls, "headcls")

    def head_nu(self, f_c: torch.Tensor) -> torch.Tensor:
        return self._proto_head(f_c, "headnu")

    def heads_point(self, f_map: torch.Tensor):
        """Offsets and type logits, one proposal per dense-map cell.

        Proposals anchor at cell pixel centers; offsets are in view pixels;
        type class 0 is background.
        """
        p = self.params
        single = f_map.dim() == 3
        if single:
            f_map = f_map.unsqueeze(0)
        x = f_map.permute(0, 2, 3, 1)
        x = F.gelu(conv3x3_nhwc(x, p["point.stem.w"], p["point.stem.b"]))
        off = linear(x, p["point.off.w"], p["point.off.b"]).permute(0, 3, 1, 2)
        typ = linear(x, p["point.typ.w"], p["point.typ.b"]).permute(0, 3, 1, 2)
        if single:
            off, typ = off[0], typ[0]
        return off, typ


# ---- checkpoint archive --------------------------------------------------

_MAGIC = struct.Struct("<Q")


def save_archive(path, tensors: dict[str, torch.Tensor], config: dict, step: int = 0):
    """Single-file archive: little-endian u64 header length, JSON header
    listing tensors with payload offsets, then raw little-endian f64 data."""
    names = list(tensors.keys())
    header_tensors = []
    offset = 0
    payloads = []
    for name in names:
        t = tensors[name].detach().to(DTYPE).contiguous()
        raw = t.numpy().astype("<f8", copy=False).tobytes()
        header_tensors.append({"name": name, "shape": list(t.shape),
                               "dtype": "f64", "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": header_tensors, "config": config,
                         "step": int(step)}).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(_MAGIC.pack(len(header)))
            f.write(header)
            for raw in payloads:
                f.write(raw)
    except OSError as e:
        raise OSError(f"failed writing checkpoint {path}: {e}") from e


def load_archive(path):
    """Returns (tensors, config, step); exact inverse of save_archive."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"failed reading checkpoint {path}: {e}") from e
    (hlen,) = _MAGIC.unpack_from(data, 0)
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    base = 8 + hlen
    tensors = {}
    for rec in header["tensors"]:
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=n,
                            offset=base + rec["offset"]).reshape(rec["shape"])
        tensors[rec["name"]] = torch.from_numpy(arr.copy())
    return tensors, header["config"], header["step"]


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
