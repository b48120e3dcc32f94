"""Differentiable volume rendering over a plane-factorized field.

Rays are integrated by stratified bin sampling: each of N bins contributes
its midpoint (or a seeded uniform draw inside the bin when jitter is on),
per-sample opacity is alpha = 1 - exp(-sigma * delta), and color is the
transmittance-weighted sum with the leftover transmittance going to a flat
background. Opacity plus leftover transmittance is exactly a partition of
unity, which the tests pin down numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InputError


@dataclass
class Rays:
    origins: torch.Tensor    # [B, 3]
    dirs: torch.Tensor       # [B, 3], unit length
    near: float
    far: float

    def __post_init__(self):
        if self.origins.shape != self.dirs.shape or self.origins.shape[-1] != 3:
            raise InputError("rays must be [B, 3] origins and dirs",
                             origins=tuple(self.origins.shape),
                             dirs=tuple(self.dirs.shape))
        if not (self.far > self.near):
            raise InputError("far must exceed near",
                             near=self.near, far=self.far)

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class RenderSettings:
    n_samples: int = 192
    jitter: bool = False
    background: tuple = (1.0, 1.0, 1.0)
    chunk: int = 16384  # points per field query chunk, in rays


@dataclass
class RenderOutput:
    rgb: torch.Tensor      # [B, 3]
    opacity: torch.Tensor  # [B]
    depth: torch.Tensor    # [B]


def sample_along_rays(batch: int, near: float, far: float, n_samples: int,
                      jitter: bool = False,
                      generator: torch.Generator | None = None
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample distances and segment lengths for a batch of rays.

    Returns (t, delta), both [batch, n_samples]. Without jitter every ray
    uses bin midpoints; with jitter each bin draws uniformly from the
    seeded generator. t is strictly increasing, deltas are positive, and
    the deltas sum to at most far - near (the last segment runs to far).
    """

    if n_samples < 1:
        raise InputError("need at least one sample per ray", n=n_samples)
    if not far > near:
        raise InputError("far must exceed near", near=near, far=far)
    h = (far - near) / n_samples
    if jitter:
        u = torch.rand(batch, n_samples, generator=generator)
    else:
        u = torch.full((batch, n_samples), 0.5)
    t = near + (torch.arange(n_samples, dtype=torch.float32) + u) * h
    delta = torch.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far - t[:, -1]
    return t, delta


def composite(sigma: torch.Tensor, rgb: torch.Tensor, delta: torch.Tensor,
              t: torch.Tensor, background: torch.Tensor,
              eps: float = 1e-8) -> RenderOutput:
    """Alpha-composite per-sample density and color along each ray.

    sigma, delta, t: [B, N]; rgb: [B, N, 3]; background: [3].
    Negative densities or non-positive segment lengths are input errors.
    Depth is the opacity-normalized expected sample distance.
    """

    if (sigma < 0).any():
        raise InputError("negative density")
    if (delta <= 0).any():
        raise InputError("non-positive segment length")
    alpha = 1.0 - torch.exp(-sigma * delta)                    # [B, N]
    keep = torch.cumprod(1.0 - alpha, dim=-1)                  # [B, N]
    trans = torch.cat([torch.ones_like(keep[:, :1]), keep[:, :-1]], dim=-1)
    weights = trans * alpha                                    # [B, N]
    opacity = weights.sum(dim=-1)
    residual = keep[:, -1]
    color = (weights.unsqueeze(-1) * rgb).sum(dim=-2)
    color = color + residual.unsqueeze(-1) * background
    depth = (weights * t).sum(dim=-1) / opacity.clamp_min(eps)
    return RenderOutput(rgb=color, opacity=opacity, depth=depth)


def render_rays(field, rays: Rays, settings: RenderSettings,
                planes: list[torch.Tensor] | None = None,
                vectors: list[torch.Tensor] | None = None,
                comp=None,
                generator: torch.Generator | None = None) -> RenderOutput:
    """Render a batch of rays against the field.

    ``planes``/``vectors`` override the field's stored parameters with
    reconstructed tensors (canonical 6-plane order); when ``comp`` is given
    its rank-1 residuals are applied to the effective planes before any
    query. Rays are processed in chunks; chunking cannot change results
    because per-ray math is independent.
    """

    if comp is not None:
        planes = comp.apply_all(planes if planes is not None
                                else field.all_planes())
    background = torch.tensor(settings.background, dtype=torch.float32)
    outs = []
    chunk = max(1, settings.chunk)
    for start in range(0, len(rays), chunk):
        o = rays.origins[start:start + chunk]
        d = rays.dirs[start:start + chunk]
        t, delta = sample_along_rays(o.shape[0], rays.near, rays.far,
                                     settings.n_samples, settings.jitter,
                                     generator)
        pts = (o.unsqueeze(1) + t.unsqueeze(-1) * d.unsqueeze(1)).reshape(-1, 3)
        dirs_flat = d.unsqueeze(1).expand(-1, settings.n_samples, -1).reshape(-1, 3)
        sigma, rgb = field.field_point_eval(pts, dirs_flat, planes, vectors)
        sigma = sigma.reshape(o.shape[0], settings.n_samples)
        rgb = rgb.reshape(o.shape[0], settings.n_samples, 3)
        outs.append(composite(sigma, rgb, delta, t, background))
    return RenderOutput(
        rgb=torch.cat([o.rgb for o in outs]),
        opacity=torch.cat([o.opacity for o in outs]),
        depth=torch.cat([o.depth for o in outs]),
    )


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the squared L2 color error."""

    if pred.shape != target.shape:
        raise InputError("prediction and target shapes differ",
                         pred=tuple(pred.shape), target=tuple(target.shape))
    return ((pred - target) ** 2).sum(dim=-1).mean()


def psnr(a, b, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; capped at
    ``cap`` once the MSE drops below 1e-10."""

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError("image shapes differ", a=a.shape, b=b.shape)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return cap
    return min(cap, -10.0 * np.log10(mse))


_GAUSS_SIZE = 11
_GAUSS_SIGMA = 1.5


def _gaussian_window() -> np.ndarray:
    half = (_GAUSS_SIZE - 1) / 2
    x = np.arange(_GAUSS_SIZE) - half
    g = np.exp(-(x ** 2) / (2 * _GAUSS_SIGMA ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5)
    over all fully-interior windows, averaged across channels. Inputs are
    [H, W] or [H, W, C] images in [0, 1]."""

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError("image shapes differ", a=a.shape, b=b.shape)
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < _GAUSS_SIZE or a.shape[1] < _GAUSS_SIZE:
        raise InputError("image smaller than the SSIM window",
                         shape=a.shape[:2])
    w = _gaussian_window()
    c1 = k1 ** 2
    c2 = k2 ** 2

    def filt(img):
        # Valid-mode windowed weighted mean per channel.
        from numpy.lib.stride_tricks import sliding_window_view

        win = sliding_window_view(img, (_GAUSS_SIZE, _GAUSS_SIZE), axis=(0, 1))
        return np.einsum("hwcij,ij->hwc", win, w)

    mu_a = filt(a)
    mu_b = filt(b)
    a2 = filt(a * a) - mu_a ** 2
    b2 = filt(b * b) - mu_b ** 2
    ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (a2 + b2 + c2)
    return float(np.mean(num / den))
