"""Dense-array math with a verified gradient contract.

All tensors in this package are torch CPU tensors in double precision
(``DTYPE``). Reverse-mode gradients come from torch autograd; every
primitive used by the model and the losses is verified against central
finite differences by :func:`grad_check`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

DTYPE = torch.float64

# Clamp applied to probabilities before taking logs; avoids -inf on sharp
# teacher distributions.
EPS_LOG = 1e-12


class TrainingError(RuntimeError):
    """Raised when a training step encounters non-finite values."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class GradCheckError(RuntimeError):
    """Raised when grad_check cannot produce a meaningful comparison."""


def tensor(data, dtype=DTYPE) -> torch.Tensor:
    """Convert array-like data to the package dtype."""
    return torch.as_tensor(data, dtype=dtype)


class SeededRng:
    """Deterministic random stream with derivable child streams.

    Identical seed gives an identical sequence. ``child(label)`` derives an
    independent stream from ``(seed, label)``; the label hash is stable
    across runs and platforms.
    """

    def __init__(self, seed: int, _keys: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._keys = _keys
        self.gen = np.random.default_rng(np.random.SeedSequence([self.seed, *_keys]))

    def child(self, label) -> "SeededRng":
        digest = hashlib.sha256(repr(label).encode("utf-8")).digest()
        key = int.from_bytes(digest[:8], "little")
        return SeededRng(self.seed, self._keys + (key,))

    # thin passthroughs to the numpy generator
    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size=size)

    def random(self, size=None):
        return self.gen.random(size)

    def shuffle(self, x):
        self.gen.shuffle(x)

    def log_uniform(self, low: float, high: float) -> float:
        if low <= 0 or high < low:
            raise ValueError(f"invalid log-uniform range [{low}, {high}]")
        return float(math.exp(self.gen.uniform(math.log(low), math.log(high))))

    def trunc_normal(self, std: float, size) -> np.ndarray:
        x = self.gen.normal(0.0, std, size=size)
        return np.clip(x, -2.0 * std, 2.0 * std)


def softmax_t(logits, tau: float) -> torch.Tensor:
    """Tempered softmax over the last dimension.

    Invariant to adding a constant to all logits; output rows sum to 1.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = tensor(logits) / tau
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def cross_entropy(p, q) -> torch.Tensor:
    """-sum(p * log q) with q clamped to EPS_LOG before the log."""
    p = tensor(p)
    q = tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    return -(p * torch.log(q.clamp_min(EPS_LOG))).sum()


def cross_entropy_rows(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Row-wise cross entropy for [N, K] probability matrices."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    return -(p * torch.log(q.clamp_min(EPS_LOG))).sum(dim=-1)


def entropy(p) -> torch.Tensor:
    p = tensor(p)
    return -(p * torch.log(p.clamp_min(EPS_LOG))).sum()


def _grid_fractions(coords: torch.Tensor, stride: float, extent: int):
    """Map view-pixel coordinates to clamped cell-grid index pairs.

    Cell k is centered at ``stride * (k + 0.5)``; queries outside the span
    of cell centers clamp to the border cell.
    """
    g = coords / stride - 0.5
    g = g.clamp(0.0, extent - 1)
    lo = g.floor().long().clamp(0, extent - 1)
    hi = (lo + 1).clamp(max=extent - 1)
    return lo, hi, g - lo


def bilinear_sample_many(fmap: torch.Tensor, xy, stride: float) -> torch.Tensor:
    """Sample a [C, H, W] map at N (x, y) view-pixel points; returns [N, C].

    Differentiable with respect to the map values.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if fmap.dim() != 3:
        raise ValueError(f"expected [C, H, W] map, got shape {tuple(fmap.shape)}")
    xy = tensor(xy).reshape(-1, 2)
    _, h, w = fmap.shape
    j0, j1, fx = _grid_fractions(xy[:, 0], stride, w)
    i0, i1, fy = _grid_fractions(xy[:, 1], stride, h)
    v00 = fmap[:, i0, j0]
    v01 = fmap[:, i0, j1]
    v10 = fmap[:, i1, j0]
    v11 = fmap[:, i1, j1]
    a = v00 + fx * (v01 - v00)
    b = v10 + fx * (v11 - v10)
    return (a + fy * (b - a)).transpose(0, 1)


def bilinear_sample(fmap: torch.Tensor, x: float, y: float, stride: float) -> torch.Tensor:
    """Sample a [C, H, W] map at one (x, y) view-pixel point; returns [C]."""
    return bilinear_sample_many(fmap, [[x, y]], stride)[0]


def bilinear_sample_batch(fmaps: torch.Tensor, map_idx, xy, stride: float) -> torch.Tensor:
    """Sample stacked [N, C, H, W] maps at per-query map indices; [Q, C].

    Same convention as bilinear_sample_many, one gather for all queries.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    xy = tensor(xy).reshape(-1, 2)
    idx = torch.as_tensor(map_idx, dtype=torch.long)
    _, _, h, w = fmaps.shape
    j0, j1, fx = _grid_fractions(xy[:, 0], stride, w)
    i0, i1, fy = _grid_fractions(xy[:, 1], stride, h)
    v00 = fmaps[idx, :, i0, j0]
    v01 = fmaps[idx, :, i0, j1]
    v10 = fmaps[idx, :, i1, j0]
    v11 = fmaps[idx, :, i1, j1]
    fx = fx.unsqueeze(1)
    fy = fy.unsqueeze(1)
    a = v00 + fx * (v01 - v00)
    b = v10 + fx * (v11 - v10)
    return a + fy * (b - a)


def _lerp_axis(x: torch.Tensor, dim: int, n_out: int) -> torch.Tensor:
    n_in = x.shape[dim]
    centers = (torch.arange(n_out, dtype=DTYPE) + 0.5) * (n_in / n_out)
    lo, hi, f = _grid_fractions(centers, 1.0, n_in)
    a = x.index_select(dim, lo)
    b = x.index_select(dim, hi)
    shape = [1] * x.dim()
    shape[dim] = n_out
    return a + f.reshape(shape) * (b - a)


def resize_bilinear(image: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize over the last two dims with the cell-center convention.

    Equals per-pixel :func:`bilinear_sample` on the output grid; identity
    resizes are bit-exact.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    if image.shape[-2] == out_h and image.shape[-1] == out_w:
        return image.clone()
    x = _lerp_axis(image, image.dim() - 1, out_w)
    return _lerp_axis(x, image.dim() - 2, out_h)


def resize_bilinear_nhwc(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Same resize for [..., H, W, C] channels-last layout."""
    if x.shape[-3] == out_h and x.shape[-2] == out_w:
        return x.clone()
    y = _lerp_axis(x, x.dim() - 2, out_w)
    return _lerp_axis(y, x.dim() - 3, out_h)


_RESIZE_MATRICES: dict[tuple[int, int], torch.Tensor] = {}


def _resize_matrix(n_in: int, n_out: int) -> torch.Tensor:
    """[n_out, n_in] interpolation weights for one resize axis."""
    key = (n_in, n_out)
    mat = _RESIZE_MATRICES.get(key)
    if mat is None:
        centers = (torch.arange(n_out, dtype=DTYPE) + 0.5) * (n_in / n_out)
        lo, hi, f = _grid_fractions(centers, 1.0, n_in)
        mat = torch.zeros(n_out, n_in, dtype=DTYPE)
        rows = torch.arange(n_out)
        mat.index_put_((rows, lo), 1.0 - f, accumulate=True)
        mat.index_put_((rows, hi), f, accumulate=True)
        _RESIZE_MATRICES[key] = mat
    return mat


def matmul_resize_chw(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """GEMM-path resize for [..., H, W]; same convention as resize_bilinear."""
    h, w = x.shape[-2], x.shape[-1]
    if h == out_h and w == out_w:
        return x.clone()
    if w != out_w:
        x = x @ _resize_matrix(w, out_w).transpose(0, 1)
    if h != out_h:
        lead = x.shape[:-2]
        x = torch.matmul(_resize_matrix(h, out_h), x.reshape(-1, h, out_w)) \
            .reshape(*lead, out_h, out_w)
    return x


def matmul_resize_nhwc(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize of [B, H, W, C] as two batched matmuls.

    Same cell-center convention as resize_bilinear (values agree up to
    floating-point reassociation); used on model-internal maps where the
    GEMM path is much faster than gather-based interpolation.
    """
    b, h, w, c = x.shape
    if h == out_h and w == out_w:
        return x
    if h != out_h:
        x = torch.matmul(_resize_matrix(h, out_h), x.reshape(b, h, w * c))
        x = x.reshape(b, out_h, w, c)
    if w != out_w:
        x = torch.matmul(_resize_matrix(w, out_w), x.reshape(b * out_h, w, c))
        x = x.reshape(b, out_h, out_w, c)
    return x


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """x @ w + b with the bias fused into the matmul."""
    if b is None:
        return x @ w
    shape = x.shape[:-1] + (w.shape[1],)
    return torch.addmm(b, x.reshape(-1, x.shape[-1]), w).reshape(shape)


def conv3x3_nhwc(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 same-padding convolution as one matmul, channels-last.

    ``x`` is [..., H, W, Cin], ``w`` is [3, 3, Cin, Cout]. Zero padding.
    Noticeably faster than the library conv path in double precision.
    """
    h, wd = x.shape[-3], x.shape[-2]
    cin = x.shape[-1]
    xp = torch.nn.functional.pad(x, (0, 0, 1, 1, 1, 1))
    cols = torch.cat([xp[..., dy:dy + h, dx:dx + wd, :]
                      for dy in range(3) for dx in range(3)], dim=-1)
    return linear(cols, w.reshape(9 * cin, -1), b)


def ema_update(target: torch.Tensor, source: torch.Tensor, m: float) -> torch.Tensor:
    """m * target + (1 - m) * source, elementwise."""
    if target.shape != source.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(source.shape)}")
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    if m == 0.0:                 # bitwise copy / no-op at the boundaries
        return source.clone()
    if m == 1.0:
        return target.clone()
    return m * target + (1.0 - m) * source


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamWState, cfg: AdamWConfig,
                   lr: float | None = None):
    """One AdamW step (decoupled weight decay), applied in place.

    With zero gradients and zero weight decay the parameters are unchanged.
    Returns ``(params, state)``.
    """
    lr = cfg.lr if lr is None else lr
    t = state.step + 1
    names = [n for n in params if grads.get(n) is not None]
    gs = [grads[n] for n in names]
    for n, g in zip(names, gs):
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for '{n}'", step=state.step)
    for n in names:
        if n not in state.m:
            state.m[n] = torch.zeros_like(params[n])
            state.v[n] = torch.zeros_like(params[n])
    ps = [params[n] for n in names]
    ms = [state.m[n] for n in names]
    vs = [state.v[n] for n in names]
    with torch.no_grad():
        torch._foreach_mul_(ms, cfg.beta1)
        torch._foreach_add_(ms, gs, alpha=1.0 - cfg.beta1)
        torch._foreach_mul_(vs, cfg.beta2)
        torch._foreach_addcmul_(vs, gs, gs, value=1.0 - cfg.beta2)
        denom = torch._foreach_div(vs, 1.0 - cfg.beta2 ** t)
        torch._foreach_sqrt_(denom)
        torch._foreach_add_(denom, cfg.eps)
        if cfg.weight_decay:
            torch._foreach_add_(ps, ps, alpha=-lr * cfg.weight_decay)
        torch._foreach_addcdiv_(ps, ms, denom, value=-lr / (1.0 - cfg.beta1 ** t))
    state.step = t
    return params, state


@dataclass
class GradCheckReport:
    per_param: dict
    worst_param: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(loss_fn, params: dict, tolerance: float = 1e-4, step: float = 1e-5,
               max_entries_per_param: int = 8, rng: SeededRng | None = None) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn(params)`` to central finite
    differences.

    ``loss_fn`` must be pure and deterministic. Per parameter, at most
    ``max_entries_per_param`` entries are checked (deterministically
    sampled); the report keeps the worst relative error per parameter with
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    rng = rng or SeededRng(0)
    work = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(work)
    if not torch.isfinite(loss):
        raise GradCheckError(f"loss is non-finite: {loss.item()}")
    grads = torch.autograd.grad(loss, list(work.values()), allow_unused=True)
    analytic = {k: g for k, g in zip(work.keys(), grads)}

    per_param: dict[str, float] = {}
    for name, p in work.items():
        n = p.numel()
        if n <= max_entries_per_param:
            idxs = np.arange(n)
        else:
            idxs = rng.child(("gradcheck", name)).gen.choice(n, size=max_entries_per_param,
                                                             replace=False)
        flat = p.detach().reshape(-1)
        ga = analytic[name]
        ga_flat = ga.reshape(-1) if ga is not None else None
        worst = 0.0
        for i in idxs:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                lp = float(loss_fn(work))
                flat[i] = orig - step
                lm = float(loss_fn(work))
                flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            a = float(ga_flat[i]) if ga_flat is not None else 0.0
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        per_param[name] = worst

    worst_param = max(per_param, key=per_param.get) if per_param else ""
    max_rel = per_param.get(worst_param, 0.0)
    return GradCheckReport(per_param=per_param, worst_param=worst_param,
                           max_rel_error=max_rel, tolerance=tolerance)
