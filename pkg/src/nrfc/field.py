"""Plane-factorized radiance field.

Geometry and appearance live in three orthogonal feature planes plus three
paired axis vectors per attribute group. A density query multiplies each
plane sample with its paired vector sample channel-wise and sums everything;
an appearance query concatenates the three per-pair products and projects
them through a bias-free linear basis, after which a tiny view-conditioned
MLP regresses color. Sampling conventions: normalized coordinates in
[0, 1]^2 with grid nodes at the corners (uv = (0, 0) hits the stored corner
cell exactly) and clamp-to-border outside.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import FieldConfig
from .errors import ConfigError, InputError

# Plane k spans world axes PLANE_AXES[k]; its paired vector runs along
# VECTOR_AXES[k]. Canonical plane order is density xy, xz, yz then
# appearance xy, xz, yz wherever all six planes travel together.
PLANE_AXES = ((0, 1), (0, 2), (1, 2))
VECTOR_AXES = (2, 1, 0)
PLANE_NAMES = ("xy", "xz", "yz")


def bilinear_sample(values: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample a [C, H, W] plane at uv in [0, 1]^2 -> [B, C].

    uv[:, 0] runs along W, uv[:, 1] along H. Coordinates are clamped to the
    border; non-finite coordinates are an input error. Differentiable in
    both ``values`` and ``uv``.
    """

    if values.ndim != 3:
        raise InputError("plane must be [C, H, W]", shape=tuple(values.shape))
    if uv.ndim != 2 or uv.shape[-1] != 2:
        raise InputError("uv must be [B, 2]", shape=tuple(uv.shape))
    if not torch.isfinite(uv).all():
        raise InputError("non-finite sample coordinates")
    _, h, w = values.shape
    x = uv[:, 0].clamp(0.0, 1.0) * (w - 1)
    y = uv[:, 1].clamp(0.0, 1.0) * (h - 1)
    x0 = x.floor().long().clamp_(0, w - 2)
    y0 = y.floor().long().clamp_(0, h - 2)
    fx = (x - x0).unsqueeze(0)  # [1, B]
    fy = (y - y0).unsqueeze(0)
    v00 = values[:, y0, x0]
    v01 = values[:, y0, x0 + 1]
    v10 = values[:, y0 + 1, x0]
    v11 = values[:, y0 + 1, x0 + 1]
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    return (top + (bot - top) * fy).transpose(0, 1)


def linear_sample(values: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Sample a [C, L] axis vector at t in [0, 1] -> [B, C]; same node and
    clamping conventions as :func:`bilinear_sample`."""

    if values.ndim != 2:
        raise InputError("vector must be [C, L]", shape=tuple(values.shape))
    if not torch.isfinite(t).all():
        raise InputError("non-finite sample coordinates")
    length = values.shape[1]
    x = t.clamp(0.0, 1.0) * (length - 1)
    x0 = x.floor().long().clamp_(0, length - 2)
    fx = (x - x0).unsqueeze(0)
    v0 = values[:, x0]
    v1 = values[:, x0 + 1]
    return (v0 + (v1 - v0) * fx).transpose(0, 1)


def encode_direction(dirs: torch.Tensor, octaves: int) -> torch.Tensor:
    """Frequency-encode unit directions: raw components plus sin/cos at
    ``octaves`` doubling frequencies -> [B, 3 + 6 * octaves]."""

    parts = [dirs]
    for k in range(octaves):
        scaled = dirs * (2.0 ** k)
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


def direction_dim(octaves: int) -> int:
    return 3 + 6 * octaves


def apply_compensation(plane: torch.Tensor, row: torch.Tensor,
                       col: torch.Tensor) -> torch.Tensor:
    """Add the per-channel rank-1 residual row x col to a [C, H, W] plane."""

    c, h, w = plane.shape
    if row.shape != (c, h) or col.shape != (c, w):
        raise ConfigError(
            "compensation factors do not match plane",
            plane=tuple(plane.shape), row=tuple(row.shape), col=tuple(col.shape),
        )
    return plane + row.unsqueeze(2) * col.unsqueeze(1)


class ResidualCompensation(nn.Module):
    """Rank-1 per-channel residuals for each of the six planes.

    The residual matrix is exactly zero at creation: column factors start at
    zero while row factors carry small seeded noise, which keeps the initial
    output untouched but leaves a usable gradient path (a strict double-zero
    start is a saddle where neither factor can move).
    """

    def __init__(self, plane_shapes: list[tuple[int, int, int]], seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.rows = nn.ParameterList()
        self.cols = nn.ParameterList()
        for c, h, w in plane_shapes:
            self.rows.append(nn.Parameter(
                0.01 * torch.randn(c, h, generator=gen)))
            self.cols.append(nn.Parameter(torch.zeros(c, w)))

    def __len__(self) -> int:
        return len(self.rows)

    def apply_all(self, planes: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(planes) != len(self.rows):
            raise ConfigError("compensation count does not match plane count",
                              planes=len(planes), factors=len(self.rows))
        return [apply_compensation(p, r, c)
                for p, r, c in zip(planes, self.rows, self.cols)]


class PlaneField(nn.Module):
    """Trainable triplane field with density and appearance groups."""

    def __init__(self, cfg: FieldConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        s, L = cfg.plane_size, cfg.vector_len

        def planes(ch):
            return nn.ParameterList(
                nn.Parameter(0.1 * torch.randn(ch, s, s, generator=gen))
                for _ in range(3)
            )

        def vectors(ch):
            return nn.ParameterList(
                nn.Parameter(0.1 * torch.randn(ch, L, generator=gen))
                for _ in range(3)
            )

        self.density_planes = planes(cfg.density_channels)
        self.density_vectors = vectors(cfg.density_channels)
        self.app_planes = planes(cfg.appearance_channels)
        self.app_vectors = vectors(cfg.appearance_channels)

        self.basis = nn.Linear(3 * cfg.appearance_channels,
                               cfg.appearance_dim, bias=False)
        in_dim = cfg.appearance_dim + direction_dim(cfg.dir_octaves)
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, cfg.mlp_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.mlp_hidden, cfg.mlp_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.mlp_hidden, 3),
        )
        self._reseed_linear_layers(gen)

        n_linear = sum(1 for m in self.mlp if isinstance(m, nn.Linear))
        if n_linear > 4:
            raise ConfigError("color MLP is limited to 4 linear layers",
                              layers=n_linear)

        self.register_buffer("bbox_min", torch.tensor(cfg.bbox_min))
        self.register_buffer("bbox_max", torch.tensor(cfg.bbox_max))

    def _reseed_linear_layers(self, gen: torch.Generator) -> None:
        # Default Linear init is not generator-aware; redraw every weight
        # from the field's own generator so construction is deterministic.
        for mod in [self.basis, *self.mlp]:
            if isinstance(mod, nn.Linear):
                bound = 1.0 / (mod.in_features ** 0.5)
                with torch.no_grad():
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    if mod.bias is not None:
                        mod.bias.uniform_(-bound, bound, generator=gen)

    # -- parameter access in canonical order ------------------------------

    def all_planes(self) -> list[torch.Tensor]:
        return [*self.density_planes, *self.app_planes]

    def all_vectors(self) -> list[torch.Tensor]:
        return [*self.density_vectors, *self.app_vectors]

    def plane_shapes(self) -> list[tuple[int, int, int]]:
        return [tuple(p.shape) for p in self.all_planes()]

    # -- queries -----------------------------------------------------------

    def normalize_points(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Map world points into [0, 1]^3; also return the inside-bbox mask."""

        if points.ndim != 2 or points.shape[-1] != 3:
            raise InputError("points must be [B, 3]", shape=tuple(points.shape))
        if not torch.isfinite(points).all():
            raise InputError("non-finite query points")
        span = self.bbox_max - self.bbox_min
        unit = (points - self.bbox_min) / span
        inside = ((unit >= 0.0) & (unit <= 1.0)).all(dim=-1)
        return unit, inside

    def raw_density(self, points: torch.Tensor,
                    planes: list[torch.Tensor] | None = None,
                    vectors: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Pre-activation density: sum over pairs and channels of
        plane-sample times vector-sample. Points are already in [0, 1]^3."""

        planes = planes if planes is not None else list(self.density_planes)
        vectors = vectors if vectors is not None else list(self.density_vectors)
        raw = None
        for k, (a, b) in enumerate(PLANE_AXES):
            pf = bilinear_sample(planes[k], points[:, (a, b)])
            vf = linear_sample(vectors[k], points[:, VECTOR_AXES[k]])
            term = (pf * vf).sum(dim=-1)
            raw = term if raw is None else raw + term
        return raw

    def query_density(self, points: torch.Tensor,
                      planes: list[torch.Tensor] | None = None,
                      vectors: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Volume density at world points: shifted softplus of the raw
        factorized sum; exactly zero outside the bbox."""

        unit, inside = self.normalize_points(points)
        raw = self.raw_density(unit, planes, vectors)
        sigma = torch.nn.functional.softplus(raw + self.cfg.density_bias)
        return sigma * inside.to(sigma.dtype)

    def query_app_features(self, points: torch.Tensor,
                           planes: list[torch.Tensor] | None = None,
                           vectors: list[torch.Tensor] | None = None,
                           basis_weight: torch.Tensor | None = None) -> torch.Tensor:
        """Projected appearance features [B, appearance_dim] for points
        already normalized to [0, 1]^3."""

        planes = planes if planes is not None else list(self.app_planes)
        vectors = vectors if vectors is not None else list(self.app_vectors)
        feats = []
        for k, (a, b) in enumerate(PLANE_AXES):
            pf = bilinear_sample(planes[k], points[:, (a, b)])
            vf = linear_sample(vectors[k], points[:, VECTOR_AXES[k]])
            feats.append(pf * vf)
        cat = torch.cat(feats, dim=-1)
        w = basis_weight if basis_weight is not None else self.basis.weight
        return cat @ w.transpose(0, 1)

    def regress_color(self, features: torch.Tensor,
                      view_dirs: torch.Tensor) -> torch.Tensor:
        """RGB in [0, 1] from appearance features and unit view directions."""

        norms = view_dirs.norm(dim=-1)
        if not torch.isfinite(view_dirs).all():
            raise InputError("non-finite view directions")
        if ((norms - 1.0).abs() > 1e-4).any():
            raise InputError("view directions must be unit length",
                             max_deviation=float((norms - 1.0).abs().max()))
        enc = encode_direction(view_dirs, self.cfg.dir_octaves)
        return torch.sigmoid(self.mlp(torch.cat([features, enc], dim=-1)))

    def field_point_eval(self, points: torch.Tensor, view_dirs: torch.Tensor,
                         planes: list[torch.Tensor] | None = None,
                         vectors: list[torch.Tensor] | None = None):
        """Density and color for world points along given unit directions.

        ``planes``/``vectors``, when given, override the stored parameters
        with externally reconstructed tensors (canonical 6-plane order:
        density xy/xz/yz then appearance xy/xz/yz).
        """

        den_planes = app_planes = den_vecs = app_vecs = None
        if planes is not None:
            den_planes, app_planes = planes[:3], planes[3:]
        if vectors is not None:
            den_vecs, app_vecs = vectors[:3], vectors[3:]
        unit, inside = self.normalize_points(points)
        raw = self.raw_density(unit, den_planes, den_vecs)
        sigma = torch.nn.functional.softplus(raw + self.cfg.density_bias)
        sigma = sigma * inside.to(sigma.dtype)
        feats = self.query_app_features(unit, app_planes, app_vecs)
        rgb = self.regress_color(feats, view_dirs)
        return sigma, rgb
