"""Learned feature-plane codec: transforms, priors, quantization, rate.

One codec instance serves one attribute group (density or appearance); its
head layers adapt the group's channel count to a channel-agnostic backbone,
so the same backbone checkpoint re-heads onto any plane width. The analysis
stack downsamples 16x to the latent; a hyper pair adds a further 4x and
predicts per-element Gaussian parameters; a per-channel monotone-CDF prior
models the hyper latent itself.

Sender-only parts (analysis, hyper encoder) are trainable and never
transmitted; the synthesis backbone and hyper decoder stay frozen at their
checkpoint values (the receiver already has them); the synthesis head and
the factorized prior are trainable and travel in the container.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import NamedTensorArchive
from .config import PAD_MULTIPLE, CodecProfile, config_fingerprint
from .errors import ConfigError, InputError, LoadError

SCALE_MIN = 0.11
LIKELIHOOD_FLOOR = 1e-9


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest with halves away from zero: 2.4 -> 2, -1.5 -> -2."""

    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def quantize(y: torch.Tensor, mode: str, mean: torch.Tensor | None = None,
             generator: torch.Generator | None = None) -> torch.Tensor:
    """Quantize latents.

    ``noise``: add U[-0.5, 0.5) from the seeded generator (training proxy).
    ``round``: integer rounding, halves away from zero.
    ``mean_round``: round the mean-removed value and add the mean back, so
    y - mean lands exactly on the integer grid.
    """

    if mode == "noise":
        u = torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5
        return y + u
    if mode == "round":
        return round_half_away(y)
    if mode == "mean_round":
        if mean is None:
            raise InputError("mean_round requires the predicted mean")
        return round_half_away(y - mean) + mean
    raise InputError(f"unknown quantization mode {mode!r}")


class _LowerBoundFn(torch.autograd.Function):
    """Clamp with a one-way gradient: values below the bound still receive
    gradient pushing them up, never further down."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp(min=bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        keep = (x >= ctx.bound) | (grad < 0)
        return grad * keep, None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBoundFn.apply(x, bound)


def gaussian_likelihood(y_hat: torch.Tensor, mean: torch.Tensor,
                        sigma: torch.Tensor) -> torch.Tensor:
    """Probability mass of the unit bin around y_hat under N(mean, sigma).

    sigma is lower-bounded at SCALE_MIN (clamped, not an error); the result
    is floored at LIKELIHOOD_FLOOR so rates stay finite.
    """

    sigma = lower_bound(sigma, SCALE_MIN)
    inv = 1.0 / (sigma * math.sqrt(2.0))
    centered = y_hat - mean
    upper = torch.erf((centered + 0.5) * inv)
    lower = torch.erf((centered - 0.5) * inv)
    return (0.5 * (upper - lower)).clamp_min(LIKELIHOOD_FLOOR)


def rate_bits(likelihoods: torch.Tensor) -> torch.Tensor:
    """Total information content in bits: sum of -log2 likelihood."""

    return -torch.log2(likelihoods).sum()


def total_loss(recon: torch.Tensor, bits_y: torch.Tensor,
               bits_z: torch.Tensor, lambda_entropy: float) -> torch.Tensor:
    """Rate-distortion objective: reconstruction plus weighted summed bits."""

    return recon + lambda_entropy * (bits_y + bits_z)


class FactorizedPrior(nn.Module):
    """Per-channel learned CDF for the hyper latent.

    Each channel's CDF is a composition of small monotone layers
    (softplus-positive matrices, tanh-gated perturbations) ending in a
    sigmoid. Initialization is symmetric (zero biases), which makes the
    integer bin at zero the most probable one at init. Monotonicity holds
    by construction for any parameter values.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for k in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / (scale * dims[k + 1])))
            self.matrices.append(nn.Parameter(
                torch.full((channels, dims[k + 1], dims[k]), init)))
            self.biases.append(nn.Parameter(
                torch.zeros(channels, dims[k + 1], 1)))
            if k < len(dims) - 2:
                self.factors.append(nn.Parameter(
                    torch.zeros(channels, dims[k + 1], 1)))

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: [C, 1, N]
        n_layers = len(self.matrices)
        for k in range(n_layers):
            x = torch.matmul(F.softplus(self.matrices[k]), x) + self.biases[k]
            if k < n_layers - 1:
                x = x + torch.tanh(self.factors[k]) * torch.tanh(x)
        return x

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """Elementwise CDF; x is [C, N] (per-channel positions)."""

        if x.ndim != 2 or x.shape[0] != self.channels:
            raise InputError("prior input must be [channels, N]",
                             shape=tuple(x.shape))
        return torch.sigmoid(self._logits(x.unsqueeze(1))).squeeze(1)

    def likelihood(self, z_hat: torch.Tensor) -> torch.Tensor:
        """Mass of the unit bin around z_hat, floored at LIKELIHOOD_FLOOR."""

        upper = self.cdf(z_hat + 0.5)
        lower = self.cdf(z_hat - 0.5)
        return (upper - lower).clamp_min(LIKELIHOOD_FLOOR)


def _conv(cin, cout, stride=2, kernel=5):
    return nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2)


def _deconv(cin, cout, kernel=5):
    return nn.ConvTranspose2d(cin, cout, kernel, stride=2,
                              padding=kernel // 2, output_padding=1)


class AnalysisTransform(nn.Module):
    """Plane -> latent, 16x spatial reduction. ``head`` is the re-fitted
    first stage (group channels -> internal width); ``backbone`` holds the
    remaining three stages. Everything here is sender-side trainable."""

    def __init__(self, channels: int, profile: CodecProfile):
        super().__init__()
        n, m = profile.internal, profile.latent
        self.head = _conv(channels, n)
        self.backbone = nn.ModuleList([_conv(n, n), _conv(n, n), _conv(n, m)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.head(x))
        x = F.relu(self.backbone[0](x))
        x = F.relu(self.backbone[1](x))
        return self.backbone[2](x)


class SynthesisTransform(nn.Module):
    """Latent -> plane, 16x spatial expansion. ``backbone`` (first three
    stages) is frozen at checkpoint values; ``head`` (final stage, internal
    width -> group channels) is trainable and transmitted."""

    def __init__(self, channels: int, profile: CodecProfile):
        super().__init__()
        n, m = profile.internal, profile.latent
        self.backbone = nn.ModuleList([_deconv(m, n), _deconv(n, n),
                                       _deconv(n, n)])
        self.head = _deconv(n, channels)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.backbone[0](y))
        y = F.relu(self.backbone[1](y))
        y = F.relu(self.backbone[2](y))
        return self.head(y)


class HyperEncoder(nn.Module):
    """Latent -> hyper latent, 4x spatial reduction. Sender-side."""

    def __init__(self, profile: CodecProfile):
        super().__init__()
        m, mz = profile.latent, profile.hyper
        self.layers = nn.ModuleList([
            _conv(m, mz, stride=1, kernel=3), _conv(mz, mz), _conv(mz, mz),
        ])

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.layers[0](y))
        y = F.relu(self.layers[1](y))
        return self.layers[2](y)


class HyperDecoder(nn.Module):
    """Hyper latent -> per-element (mean, sigma). Frozen, receiver-side;
    sigma is lower-bounded at SCALE_MIN so it is always a valid scale."""

    def __init__(self, profile: CodecProfile):
        super().__init__()
        m, mz = profile.latent, profile.hyper
        self.layers = nn.ModuleList([
            _deconv(mz, mz), _deconv(mz, mz),
            _conv(mz, 2 * m, stride=1, kernel=3),
        ])

    def forward(self, z_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.relu(self.layers[0](z_hat))
        h = F.relu(self.layers[1](h))
        params = self.layers[2](h)
        mean, sigma_raw = params.chunk(2, dim=1)
        return mean, lower_bound(sigma_raw, SCALE_MIN)


def pad_plane(x: torch.Tensor, multiple: int = PAD_MULTIPLE
              ) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad a [C, H, W] plane up to the next multiple; returns the
    padded plane and the original (H, W). Padding is applied in reflect
    steps capped at size - 1 so planes smaller than the multiple work."""

    c, h, w = x.shape
    target_h = -(-h // multiple) * multiple
    target_w = -(-w // multiple) * multiple
    out = x.unsqueeze(0)
    while out.shape[-2] < target_h or out.shape[-1] < target_w:
        ph = min(target_h - out.shape[-2], out.shape[-2] - 1)
        pw = min(target_w - out.shape[-1], out.shape[-1] - 1)
        out = F.pad(out, (0, pw, 0, ph), mode="reflect")
    return out.squeeze(0), (h, w)


def crop_plane(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return x[..., : size[0], : size[1]]


class FeatureCodec(nn.Module):
    """Complete codec for one attribute group."""

    def __init__(self, channels: int, profile: CodecProfile, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.profile = profile
        self.analysis = AnalysisTransform(channels, profile)
        self.synthesis = SynthesisTransform(channels, profile)
        self.hyper_enc = HyperEncoder(profile)
        self.hyper_dec = HyperDecoder(profile)
        self.prior = FactorizedPrior(profile.hyper)
        self._reseed(torch.Generator().manual_seed(seed))
        self.freeze_receiver_backbone()

    def _reseed(self, gen: torch.Generator) -> None:
        for mod in self.modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    if mod.bias is not None:
                        mod.bias.uniform_(-bound, bound, generator=gen)

    def freeze_receiver_backbone(self) -> None:
        for p in self.synthesis.backbone.parameters():
            p.requires_grad_(False)
        for p in self.hyper_dec.parameters():
            p.requires_grad_(False)

    # -- parameter groups --------------------------------------------------

    def sender_only_parameters(self):
        """Trainable but never transmitted: analysis stack + hyper encoder."""

        yield from self.analysis.parameters()
        yield from self.hyper_enc.parameters()

    def transmitted_modules(self) -> dict[str, nn.Module]:
        """Trainable and transmitted: synthesis head + factorized prior."""

        return {"synthesis.head": self.synthesis.head, "prior": self.prior}

    def frozen_state_bytes(self) -> bytes:
        """Canonical serialization of the frozen receiver-side weights."""

        blob = bytearray()
        for name, mod in (("synthesis.backbone", self.synthesis.backbone),
                          ("hyper_dec", self.hyper_dec)):
            for pname, p in sorted(mod.state_dict().items()):
                blob += f"{name}.{pname}".encode()
                blob += np.ascontiguousarray(
                    p.detach().numpy().astype(np.float32)).tobytes()
        return bytes(blob)

    # -- coding path ---------------------------------------------------------

    def encode_plane(self, plane: torch.Tensor) -> torch.Tensor:
        """Deterministic plane -> latent [M, h/16, w/16] (after padding)."""

        if plane.ndim != 3 or plane.shape[0] != self.channels:
            raise ConfigError("plane does not match codec channels",
                              plane=tuple(plane.shape), channels=self.channels)
        padded, _ = pad_plane(plane)
        return self.analysis(padded.unsqueeze(0)).squeeze(0)

    def decode_latent(self, y_hat: torch.Tensor,
                      original_size: tuple[int, int]) -> torch.Tensor:
        """Latent -> plane, cropped back to the pre-padding size."""

        x = self.synthesis(y_hat.unsqueeze(0)).squeeze(0)
        return crop_plane(x, original_size)

    def hyper_forward(self, y: torch.Tensor, mode: str,
                      generator: torch.Generator | None = None):
        """Run the hyper path on a [M, h, w] latent.

        Returns (z_hat, mean, sigma) with z quantized per ``mode``
        ("noise" during training, "round" at coding time).
        """

        z = self.hyper_enc(y.unsqueeze(0))
        z_hat = quantize(z, "noise" if mode == "noise" else "round",
                         generator=generator)
        mean, sigma = self.hyper_dec(z_hat)
        return z_hat.squeeze(0), mean.squeeze(0), sigma.squeeze(0)

    def prior_likelihood(self, z_hat: torch.Tensor) -> torch.Tensor:
        """Flatten spatial dims to per-channel rows for the prior."""

        c = z_hat.shape[0]
        return self.prior.likelihood(z_hat.reshape(c, -1)).reshape(z_hat.shape)

    # -- checkpoint interop --------------------------------------------------

    _BACKBONE_PARTS = ("analysis.backbone", "synthesis.backbone",
                       "hyper_enc", "hyper_dec", "prior")
    _FROZEN_PARTS = ("synthesis.backbone", "hyper_dec")

    def backbone_state(self) -> dict[str, torch.Tensor]:
        out = {}
        for part in self._BACKBONE_PARTS:
            mod = self.get_submodule(part)
            for name, value in mod.state_dict().items():
                out[f"{part}.{name}"] = value
        return out

    def load_backbone(self, archive: NamedTensorArchive) -> None:
        """Strict backbone load; reports every missing or mismatched tensor."""

        offenders = []
        for key, current in self.backbone_state().items():
            if key not in archive:
                offenders.append(f"missing:{key}")
                continue
            arr = archive[key]
            if tuple(arr.shape) != tuple(current.shape):
                offenders.append(
                    f"shape:{key}:{tuple(arr.shape)}!={tuple(current.shape)}")
        if offenders:
            raise LoadError("backbone checkpoint does not match",
                            offenders=offenders)
        with torch.no_grad():
            for key in self.backbone_state():
                self.get_parameter(key).copy_(
                    torch.from_numpy(archive[key].copy()))
        self.freeze_receiver_backbone()


def make_backbone(profile: CodecProfile, seed: int) -> NamedTensorArchive:
    """Deterministic random-init backbone checkpoint (the fallback when no
    pretrained checkpoint is supplied). Channel-agnostic: heads are not
    stored, so the archive re-heads onto any plane channel count."""

    codec = FeatureCodec(channels=1, profile=profile, seed=seed)
    archive = NamedTensorArchive()
    for key, value in codec.backbone_state().items():
        frozen = any(key.startswith(p + ".") for p in FeatureCodec._FROZEN_PARTS)
        archive.add(key, value.detach().numpy().astype(np.float32),
                    frozen=frozen)
    meta = np.frombuffer(
        f'{{"profile":"{profile.name}","seed":{seed}}}'.encode(), dtype=np.uint8)
    archive.add("__meta__", meta.copy())
    return archive


def swap_heads(checkpoint: NamedTensorArchive | None, channels: int,
               profile: CodecProfile, seed: int = 0
               ) -> tuple[AnalysisTransform, SynthesisTransform]:
    """Build re-headed transforms for a channel count: backbone weights come
    verbatim from the checkpoint (when given), head layers are freshly
    seeded. Returns (analysis, synthesis) of the shared codec instance's
    transforms; use :func:`build_codec` for the full codec."""

    codec = build_codec(checkpoint, channels, profile, seed)
    return codec.analysis, codec.synthesis


def build_codec(checkpoint: NamedTensorArchive | None, channels: int,
                profile: CodecProfile, seed: int = 0) -> FeatureCodec:
    codec = FeatureCodec(channels, profile, seed=seed)
    if checkpoint is not None:
        codec.load_backbone(checkpoint)
    return codec


def backbone_digest(checkpoint: NamedTensorArchive, field_fingerprint: str
                    ) -> str:
    """Hex digest binding a container to its frozen decoder-side weights
    and configuration fingerprint."""

    h = hashlib.sha256()
    for name, arr, frozen in checkpoint.items():
        if not frozen:
            continue
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(tuple(arr.shape)).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(field_fingerprint.encode())
    return h.hexdigest()


__all__ = [
    "SCALE_MIN", "LIKELIHOOD_FLOOR", "round_half_away", "quantize",
    "lower_bound", "gaussian_likelihood", "rate_bits", "total_loss",
    "FactorizedPrior", "AnalysisTransform", "SynthesisTransform",
    "HyperEncoder", "HyperDecoder", "FeatureCodec", "pad_plane", "crop_plane",
    "make_backbone", "swap_heads", "build_codec", "backbone_digest",
    "config_fingerprint",
]
