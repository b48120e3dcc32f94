"""Scene container (.nrfc): weight records, latent coding, mux/demux.

Wire layout, little-endian: magic ``NRFC``, version u16, header length u32,
canonical-JSON header, then the substream table as (id u8, length u32,
payload) entries in normative order: six plane latents, six hyper latents,
decoder head, color MLP (with its basis projection), residual vectors, axis
vectors, priors, side info. The header carries the field geometry, codec
profile, original plane sizes, and a digest binding the container to the
frozen receiver-side weights; a digest mismatch refuses to decode.

Latents need no transmitted tables: hyper-latent tables derive from the
transmitted factorized prior, and plane-latent tables derive from the
per-element Gaussian scales predicted off the decoded hyper latent, with
sigma snapped to a fixed log-spaced scale table shared by construction
between sender and receiver.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .archive import NamedTensorArchive
from .codec import (
    FactorizedPrior,
    FeatureCodec,
    backbone_digest,
    build_codec,
    round_half_away,
)
from .config import (
    MAIN_REDUCTION,
    PAD_MULTIPLE,
    CodecProfile,
    FieldConfig,
    config_fingerprint,
)
from .errors import (
    BadMagicError,
    ContainerError,
    DigestMismatchError,
    LengthOverrunError,
    TruncatedError,
    UnknownStreamError,
    VersionError,
)
from .field import PlaneField, ResidualCompensation
from .rangecoder import (
    CdfTable,
    decode_symbols,
    deserialize_table,
    encode_symbols,
    serialize_table,
)

MAGIC = b"NRFC"
VERSION = 1

SID_DECODER_HEAD = 0x01
SID_MLP = 0x02
SID_RESIDUAL = 0x03
SID_AXIS_VECTORS = 0x04
SID_PRIORS = 0x05
SID_SIDE_INFO = 0x06
SID_LATENT_Y = 0x10  # + plane index 0..5
SID_LATENT_Z = 0x20  # + plane index 0..5

N_PLANES = 6
_PARAM_SIDS = (SID_DECODER_HEAD, SID_MLP, SID_RESIDUAL, SID_AXIS_VECTORS,
               SID_PRIORS, SID_SIDE_INFO)
STREAM_ORDER = tuple(
    [SID_LATENT_Y + k for k in range(N_PLANES)]
    + [SID_LATENT_Z + k for k in range(N_PLANES)]
    + list(_PARAM_SIDS)
)
_KNOWN_SIDS = frozenset(STREAM_ORDER)

GROUPS = ("density", "appearance")


def group_of_plane(k: int) -> str:
    return GROUPS[0] if k < 3 else GROUPS[1]


# ---------------------------------------------------------------------------
# Gaussian scale table
# ---------------------------------------------------------------------------

SCALE_TABLE_SIZE = 512
SCALE_TABLE_MIN = 0.11
SCALE_TABLE_MAX = 256.0
SCALE_TABLE = np.exp(np.linspace(math.log(SCALE_TABLE_MIN),
                                 math.log(SCALE_TABLE_MAX),
                                 SCALE_TABLE_SIZE))
_MAX_TABLE_RADIUS = 4096

_gauss_table_cache: dict[int, CdfTable] = {}


def scale_to_index(sigma: np.ndarray) -> np.ndarray:
    """Snap scales to the smallest table entry >= sigma (nearest above)."""

    idx = np.searchsorted(SCALE_TABLE, sigma, side="left")
    return np.clip(idx, 0, SCALE_TABLE_SIZE - 1).astype(np.int64)


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def gaussian_table(index: int) -> CdfTable:
    """Coding table for mean-removed integer residuals at a tabulated scale.

    Symbols cover [-r, r] with r = ceil(16 * sigma) (clipped); the two tail
    masses fold into the escape slot.
    """

    cached = _gauss_table_cache.get(index)
    if cached is not None:
        return cached
    sigma = float(SCALE_TABLE[index])
    r = max(1, min(int(math.ceil(16.0 * sigma)), _MAX_TABLE_RADIUS))
    probs = [
        _phi((k + 0.5) / sigma) - _phi((k - 0.5) / sigma)
        for k in range(-r, r + 1)
    ]
    escape = max(0.0, 1.0 - sum(probs))
    table = CdfTable.from_pmf(-r, probs, escape_prob=escape)
    _gauss_table_cache[index] = table
    return table


def prior_tables(prior, tail: float = 1e-6, radius: int = 512
                 ) -> list[CdfTable]:
    """Per-channel coding tables for the hyper latent, derived from the
    (receiver-side) factorized prior by evaluating bin masses on an integer
    grid and trimming tails below ``tail`` into the escape slot."""

    grid = torch.arange(-radius, radius + 1, dtype=torch.float32)
    with torch.no_grad():
        points = grid.expand(prior.channels, -1)
        pmf = (prior.cdf(points + 0.5) - prior.cdf(points - 0.5)).numpy()
    tables = []
    for c in range(prior.channels):
        p = pmf[c].astype(np.float64)
        keep = np.nonzero(p > tail)[0]
        lo, hi = (int(keep[0]), int(keep[-1])) if keep.size else (radius, radius)
        probs = p[lo:hi + 1]
        escape = max(0.0, 1.0 - float(probs.sum()))
        tables.append(CdfTable.from_pmf(lo - radius, list(probs),
                                        escape_prob=escape))
    return tables


# ---------------------------------------------------------------------------
# Quantized weight records
# ---------------------------------------------------------------------------

WEIGHT_BITS = 8
_MAX_RECORD_ELEMENTS = 1 << 26


def affine_qparams(values: np.ndarray, bits: int = WEIGHT_BITS
                   ) -> tuple[float, int]:
    """Affine grid for a tensor: scale = (max - min) / (2^bits - 1) and an
    integer zero point with -scale * zero_point within scale/2 of the
    minimum, so every value is within scale/2 of a representable level.
    Constant tensors collapse to a single level reproducing the constant
    exactly (scale = value, zero point = -1)."""

    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return (lo, -1) if lo != 0.0 else (0.0, 0)
    scale = (hi - lo) / (2 ** bits - 1)
    zero_point = int(math.floor(abs(lo / scale) + 0.5))
    zero_point *= 1 if lo <= 0 else -1  # round(-lo/scale), half away from zero
    return scale, zero_point


@dataclass
class QuantizedTensorRecord:
    """8-bit affine quantization of one named tensor plus the empirical
    histogram table its payload is coded with."""

    name: str
    shape: tuple
    bits: int
    scale: float
    zero_point: int
    symbols: np.ndarray  # int64 levels in [0, 2^bits - 1]
    table: CdfTable

    @classmethod
    def quantize(cls, name: str, values) -> "QuantizedTensorRecord":
        arr = np.asarray(
            values.detach().numpy() if isinstance(values, torch.Tensor)
            else values, dtype=np.float32)
        scale, zp = affine_qparams(arr)
        q = _requantize(arr, scale, zp)
        lo = int(q.min())
        hi = int(q.max())
        counts = np.bincount((q - lo).astype(np.int64), minlength=hi - lo + 1)
        table = CdfTable.from_counts(lo, counts.tolist())
        return cls(name=name, shape=tuple(arr.shape), bits=WEIGHT_BITS,
                   scale=scale, zero_point=zp, symbols=q, table=table)

    def dequantize(self) -> np.ndarray:
        vals = self.scale * (self.symbols.astype(np.float64) - self.zero_point)
        return vals.astype(np.float32).reshape(self.shape)

    def requantize_check(self) -> bool:
        """True when re-quantizing the dequantized values with the stored
        grid reproduces the stored symbols (used by the re-encode path)."""

        return np.array_equal(_requantize(self.dequantize(), self.scale,
                                           self.zero_point), self.symbols)

    def serialize(self) -> bytes:
        raw_name = self.name.encode("utf-8")
        head = struct.pack("<H", len(raw_name)) + raw_name
        head += struct.pack("<BB", self.bits, len(self.shape))
        head += struct.pack(f"<{len(self.shape)}I", *self.shape)
        head += struct.pack("<dq", self.scale, self.zero_point)
        head += serialize_table(self.table)
        payload = encode_symbols(self.symbols.tolist(),
                                 [0] * self.symbols.size, [self.table])
        return head + struct.pack("<I", len(payload)) + payload

    @classmethod
    def deserialize(cls, buf: bytes, pos: int) -> tuple["QuantizedTensorRecord", int]:
        def need(n):
            if pos + n > len(buf):
                raise TruncatedError("record ended early", position=pos)

        need(2)
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(name_len)
        try:
            name = buf[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerError("record name is not valid utf-8",
                                 position=pos) from None
        pos += name_len
        need(2)
        bits, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        need(4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        need(16)
        scale, zero_point = struct.unpack_from("<dq", buf, pos)
        pos += 16
        table, pos = deserialize_table(buf, pos)
        need(4)
        (plen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(plen)
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        if not 0 < count <= _MAX_RECORD_ELEMENTS:
            raise ContainerError("record element count out of range",
                                 name=name, count=count)
        syms = decode_symbols(buf[pos:pos + plen], [0] * count, [table])
        pos += plen
        return cls(name=name, shape=tuple(shape), bits=bits, scale=scale,
                   zero_point=zero_point,
                   symbols=np.asarray(syms, dtype=np.int64), table=table), pos


def _requantize(values: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    if scale == 0.0:
        return np.zeros(values.size, dtype=np.int64)
    x = values.astype(np.float64).ravel() / scale
    q = (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64) + zero_point
    return np.clip(q, 0, 2 ** WEIGHT_BITS - 1)


# ---------------------------------------------------------------------------
# Latent coding
# ---------------------------------------------------------------------------


def gaussian_coding_plan(sigma: np.ndarray
                         ) -> tuple[np.ndarray, list[CdfTable]]:
    """Dense per-element contexts plus their tables for a sigma field. The
    plan is a pure function of sigma, so sender and receiver derive it
    independently from the same hyper-decoder output."""

    idx = scale_to_index(sigma)
    uniq, dense = np.unique(idx, return_inverse=True)
    return dense, [gaussian_table(int(i)) for i in uniq]


def code_gaussian_latent(y: torch.Tensor, mu: torch.Tensor,
                         sigma: torch.Tensor) -> tuple[bytes, torch.Tensor]:
    """Entropy-code a plane latent against its predicted Gaussian.

    Symbols are the mean-removed integer residuals round(y - mu); contexts
    come from the scale table, so the receiver rebuilds identical tables
    from its own (mu, sigma). Returns the payload and the dequantized
    latent round(y - mu) + mu the receiver will reconstruct.
    """

    resid = round_half_away(y - mu)
    symbols = resid.detach().numpy().astype(np.int64).ravel()
    ctx, tables = gaussian_coding_plan(sigma.detach().numpy().ravel())
    payload = encode_symbols(symbols.tolist(), ctx.tolist(), tables)
    return payload, resid + mu


def decode_gaussian_latent(payload: bytes, mu: torch.Tensor,
                           sigma: torch.Tensor) -> torch.Tensor:
    ctx, tables = gaussian_coding_plan(sigma.detach().numpy().ravel())
    symbols = decode_symbols(payload, ctx.tolist(), tables)
    resid = torch.from_numpy(
        np.asarray(symbols, dtype=np.float32).reshape(mu.shape))
    return resid + mu


def code_hyper_latent(z_hat: torch.Tensor, tables: list[CdfTable]) -> bytes:
    c, h, w = z_hat.shape[-3:]
    symbols = z_hat.detach().numpy().astype(np.int64).ravel()
    ctx = np.repeat(np.arange(c, dtype=np.int64), h * w)
    return encode_symbols(symbols.tolist(), ctx.tolist(), tables)


def decode_hyper_latent(payload: bytes, shape: tuple,
                        tables: list[CdfTable]) -> torch.Tensor:
    c, h, w = shape
    ctx = np.repeat(np.arange(c, dtype=np.int64), h * w)
    symbols = decode_symbols(payload, ctx.tolist(), tables)
    return torch.from_numpy(
        np.asarray(symbols, dtype=np.float32).reshape(c, h, w))


def _records_blob(records: list[QuantizedTensorRecord]) -> bytes:
    out = bytearray(struct.pack("<H", len(records)))
    for rec in records:
        out += rec.serialize()
    return bytes(out)


def _parse_records(blob: bytes) -> list[QuantizedTensorRecord]:
    if len(blob) < 2:
        raise TruncatedError("record stream ended early", position=0)
    (count,) = struct.unpack_from("<H", blob, 0)
    pos = 2
    records = []
    for _ in range(count):
        rec, pos = QuantizedTensorRecord.deserialize(blob, pos)
        records.append(rec)
    if pos != len(blob):
        raise LengthOverrunError("record stream has trailing bytes",
                                 position=pos)
    return records


# ---------------------------------------------------------------------------
# Scene bundle (sender-side training product)
# ---------------------------------------------------------------------------

DEFAULT_RENDER_HINTS = {"near": 2.0, "far": 6.0, "background": 1.0,
                        "n_samples": 192}


@dataclass
class SceneBundle:
    """Everything the sender holds after per-scene training: the field, the
    residual compensation factors, one codec per attribute group, and the
    shared backbone checkpoint the receiver is assumed to own."""

    field: PlaneField
    comp: ResidualCompensation
    codecs: dict[str, FeatureCodec]
    backbone: NamedTensorArchive
    field_cfg: FieldConfig
    profile: CodecProfile
    render_hints: dict = dataclasses.field(
        default_factory=lambda: dict(DEFAULT_RENDER_HINTS))

    def digest(self) -> str:
        return backbone_digest(
            self.backbone, config_fingerprint(self.field_cfg, self.profile))


def save_bundle(bundle: SceneBundle, path) -> None:
    archive = NamedTensorArchive()
    for name, p in bundle.field.named_parameters():
        archive.add(f"field.{name}", p.detach().numpy().astype(np.float32))
    for name, p in bundle.comp.named_parameters():
        archive.add(f"comp.{name}", p.detach().numpy().astype(np.float32))
    for group in GROUPS:
        for name, t in bundle.codecs[group].state_dict().items():
            archive.add(f"codec.{group}.{name}",
                        t.detach().numpy().astype(np.float32))
    for name, arr, frozen in bundle.backbone.items():
        archive.add(f"backbone.{name}", arr, frozen=frozen)
    meta = {
        "field": dataclasses.asdict(bundle.field_cfg),
        "profile": dataclasses.asdict(bundle.profile),
        "render_hints": bundle.render_hints,
    }
    archive.add("__meta__",
                np.frombuffer(_canonical_json(meta), dtype=np.uint8).copy())
    archive.save(path)


def load_bundle(path) -> SceneBundle:
    archive = NamedTensorArchive.load(path)
    meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
    field_cfg = _field_cfg_from_dict(meta["field"])
    profile = CodecProfile(**meta["profile"])

    field = PlaneField(field_cfg, seed=0)
    comp = ResidualCompensation(field.plane_shapes(), seed=0)
    with torch.no_grad():
        for name, p in field.named_parameters():
            p.copy_(torch.from_numpy(archive[f"field.{name}"].copy()))
        for name, p in comp.named_parameters():
            p.copy_(torch.from_numpy(archive[f"comp.{name}"].copy()))

    backbone = NamedTensorArchive()
    for name, arr, frozen in archive.items():
        if name.startswith("backbone."):
            backbone.add(name[len("backbone."):], arr, frozen=frozen)

    codecs = {}
    channels = {"density": field_cfg.density_channels,
                "appearance": field_cfg.appearance_channels}
    for group in GROUPS:
        codec = FeatureCodec(channels[group], profile, seed=0)
        prefix = f"codec.{group}."
        state = {name[len(prefix):]: torch.from_numpy(arr.copy())
                 for name, arr, _ in archive.items()
                 if name.startswith(prefix)}
        codec.load_state_dict(state)
        codecs[group] = codec

    return SceneBundle(field=field, comp=comp, codecs=codecs,
                       backbone=backbone, field_cfg=field_cfg,
                       profile=profile, render_hints=meta["render_hints"])


def _field_cfg_from_dict(d: dict) -> FieldConfig:
    d = dict(d)
    d["bbox_min"] = tuple(d["bbox_min"])
    d["bbox_max"] = tuple(d["bbox_max"])
    return FieldConfig(**d)


# ---------------------------------------------------------------------------
# Record collection and application
# ---------------------------------------------------------------------------


def collect_records(bundle: SceneBundle, qparams: dict | None = None
                    ) -> dict[int, list[QuantizedTensorRecord]]:
    """Quantize every transmitted parameter tensor into its substream.

    ``qparams`` optionally pins (scale, zero_point) per record name so the
    grid used here matches a grid chosen elsewhere (quantization-aware
    training); unpinned tensors get a fresh min/max grid.
    """

    def rec(name, tensor):
        r = QuantizedTensorRecord.quantize(name, tensor)
        if qparams and name in qparams:
            scale, zp = qparams[name]
            arr = np.asarray(tensor.detach().numpy(), dtype=np.float32)
            q = _requantize(arr, scale, zp)
            lo, hi = int(q.min()), int(q.max())
            counts = np.bincount(q - lo, minlength=hi - lo + 1)
            r = QuantizedTensorRecord(
                name=name, shape=tuple(arr.shape), bits=WEIGHT_BITS,
                scale=scale, zero_point=zp, symbols=q,
                table=CdfTable.from_counts(lo, counts.tolist()))
        return r

    field, comp = bundle.field, bundle.comp
    out: dict[int, list[QuantizedTensorRecord]] = {}
    out[SID_DECODER_HEAD] = [
        rec(f"{g}.synthesis.head.{pname}", p)
        for g in GROUPS
        for pname, p in bundle.codecs[g].synthesis.head.named_parameters()
    ]
    out[SID_MLP] = [rec("field.basis.weight", field.basis.weight)] + [
        rec(f"field.mlp.{pname}", p)
        for pname, p in field.mlp.named_parameters()
    ]
    out[SID_RESIDUAL] = (
        [rec(f"comp.rows.{k}", comp.rows[k]) for k in range(len(comp))]
        + [rec(f"comp.cols.{k}", comp.cols[k]) for k in range(len(comp))]
    )
    out[SID_AXIS_VECTORS] = [
        rec(f"field.vectors.{k}", v)
        for k, v in enumerate(field.all_vectors())
    ]
    out[SID_PRIORS] = [
        rec(f"{g}.prior.{pname}", p)
        for g in GROUPS
        for pname, p in bundle.codecs[g].prior.named_parameters()
    ]
    return out


def _records_by_name(records: list[QuantizedTensorRecord]) -> dict[str, QuantizedTensorRecord]:
    return {r.name: r for r in records}


def _load_param(module: torch.nn.Module, dotted: str,
                record: QuantizedTensorRecord) -> None:
    param = module.get_parameter(dotted)
    values = torch.from_numpy(record.dequantize())
    if tuple(values.shape) != tuple(param.shape):
        raise ContainerError("record shape does not match parameter",
                             name=record.name, got=tuple(values.shape),
                             expected=tuple(param.shape))
    with torch.no_grad():
        param.copy_(values)


def _receiver_prior(profile: CodecProfile,
                    prior_records: dict[str, QuantizedTensorRecord],
                    group: str) -> FactorizedPrior:
    prior = FactorizedPrior(profile.hyper)
    prefix = f"{group}.prior."
    for name, _ in prior.named_parameters():
        key = prefix + name
        if key not in prior_records:
            raise ContainerError("prior record missing", name=key)
        _load_param(prior, name, prior_records[key])
    return prior


# ---------------------------------------------------------------------------
# Mux / demux
# ---------------------------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def mux(header: dict, streams: dict[int, bytes]) -> bytes:
    """Assemble a container from a header dict and per-id payloads. Streams
    are written in the normative order regardless of dict order."""

    missing = [sid for sid in STREAM_ORDER if sid not in streams]
    if missing:
        raise ContainerError("substreams missing", missing=missing)
    extra = [sid for sid in streams if sid not in _KNOWN_SIDS]
    if extra:
        raise UnknownStreamError("unknown substream ids", ids=extra)
    blob = bytearray()
    header_json = _canonical_json(header)
    blob += MAGIC
    blob += struct.pack("<HI", VERSION, len(header_json))
    blob += header_json
    for sid in STREAM_ORDER:
        payload = streams[sid]
        blob += struct.pack("<BI", sid, len(payload))
        blob += payload
    return bytes(blob)


def demux(data: bytes) -> tuple[dict, dict[int, bytes]]:
    """Parse a container into (header, {id: payload}). Every malformed input
    maps to a :class:`ContainerError` subtype."""

    if len(data) < 4:
        raise TruncatedError("container shorter than magic", position=len(data))
    if data[:4] != MAGIC:
        raise BadMagicError("not a scene container",
                            magic=data[:4].hex())
    if len(data) < 10:
        raise TruncatedError("container header missing", position=len(data))
    version, header_len = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise VersionError("unsupported container version",
                           got=version, supported=VERSION)
    pos = 10
    if pos + header_len > len(data):
        raise LengthOverrunError("header length exceeds container",
                                 declared=header_len,
                                 available=len(data) - pos)
    try:
        header = json.loads(data[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise ContainerError("header is not an object")
    pos += header_len

    streams: dict[int, bytes] = {}
    order: list[int] = []
    while pos < len(data):
        if pos + 5 > len(data):
            raise TruncatedError("substream entry cut short", position=pos)
        sid, length = struct.unpack_from("<BI", data, pos)
        pos += 5
        if sid not in _KNOWN_SIDS:
            raise UnknownStreamError("unknown substream id", id=sid)
        if sid in streams:
            raise ContainerError("duplicate substream", id=sid)
        if pos + length > len(data):
            raise LengthOverrunError("substream length exceeds container",
                                     id=sid, declared=length,
                                     available=len(data) - pos)
        streams[sid] = data[pos:pos + length]
        order.append(sid)
        pos += length
    if tuple(order) != STREAM_ORDER:
        raise ContainerError("substreams missing or out of order",
                             got=[hex(s) for s in order])
    return header, streams


# ---------------------------------------------------------------------------
# Scene encode / decode
# ---------------------------------------------------------------------------


@dataclass
class DecodedScene:
    """Receiver-side reconstruction plus the exact coded state needed to
    re-encode the container byte for byte (stored quantization grids and
    integer latent symbols; dequantized floats alone would not round-trip)."""

    field: PlaneField
    comp: ResidualCompensation
    codecs: dict[str, FeatureCodec]
    header: dict
    records: dict[int, list[QuantizedTensorRecord]]
    y_symbols: list[np.ndarray]
    z_symbols: list[np.ndarray]
    render_hints: dict

    def plane_group_codec(self, k: int) -> FeatureCodec:
        return self.codecs[group_of_plane(k)]


def _scene_header(bundle: SceneBundle, y_shapes, z_shapes) -> dict:
    return {
        "version": VERSION,
        "digest": bundle.digest(),
        "field": dataclasses.asdict(bundle.field_cfg),
        "profile": dataclasses.asdict(bundle.profile),
        "planes": [list(s) for s in bundle.field.plane_shapes()],
        "latent_y": [list(s) for s in y_shapes],
        "latent_z": [list(s) for s in z_shapes],
    }


def encode_scene(bundle: SceneBundle, qparams: dict | None = None) -> bytes:
    """Produce the complete coded scene.

    Latent tables on the y side come from the hyper decoder run on the
    rounded hyper latent; on the z side from the *dequantized* prior, since
    that is the prior the receiver will reconstruct from its records.
    """

    records = collect_records(bundle, qparams=qparams)
    prior_recs = _records_by_name(records[SID_PRIORS])

    streams: dict[int, bytes] = {
        sid: _records_blob(records[sid])
        for sid in (SID_DECODER_HEAD, SID_MLP, SID_RESIDUAL,
                    SID_AXIS_VECTORS, SID_PRIORS)
    }
    streams[SID_SIDE_INFO] = _canonical_json(
        {"render_hints": bundle.render_hints})

    recv_tables = {
        g: prior_tables(_receiver_prior(bundle.profile, prior_recs, g))
        for g in GROUPS
    }
    y_shapes, z_shapes = [], []
    planes = bundle.field.all_planes()
    for k, plane in enumerate(planes):
        group = group_of_plane(k)
        codec = bundle.codecs[group]
        with torch.no_grad():
            y = codec.encode_plane(plane.detach())
            z_hat, mean, sigma = codec.hyper_forward(y, mode="round")
        streams[SID_LATENT_Z + k] = code_hyper_latent(z_hat, recv_tables[group])
        payload_y, _ = code_gaussian_latent(y, mean, sigma)
        streams[SID_LATENT_Y + k] = payload_y
        y_shapes.append(tuple(y.shape))
        z_shapes.append(tuple(z_hat.shape))

    return mux(_scene_header(bundle, y_shapes, z_shapes), streams)


def decode_scene(data: bytes, backbone: NamedTensorArchive) -> DecodedScene:
    """Reconstruct a renderable scene from container bytes plus the shared
    backbone checkpoint. Raises :class:`DigestMismatchError` when the
    checkpoint is not the one the container was coded against."""

    header, streams = demux(data)
    try:
        field_cfg = _field_cfg_from_dict(header["field"])
        profile = CodecProfile(**header["profile"])
        plane_shapes = [tuple(s) for s in header["planes"]]
        y_shapes = [tuple(s) for s in header["latent_y"]]
        z_shapes = [tuple(s) for s in header["latent_z"]]
        declared_digest = header["digest"]
    except (KeyError, TypeError) as exc:
        raise ContainerError(f"header field missing or malformed: {exc}") from None

    fingerprint = config_fingerprint(field_cfg, profile)
    actual = backbone_digest(backbone, fingerprint)
    if actual != declared_digest:
        raise DigestMismatchError("backbone does not match container",
                                  declared=declared_digest, actual=actual)

    records = {
        sid: _parse_records(streams[sid])
        for sid in (SID_DECODER_HEAD, SID_MLP, SID_RESIDUAL,
                    SID_AXIS_VECTORS, SID_PRIORS)
    }
    try:
        side_info = json.loads(streams[SID_SIDE_INFO].decode("utf-8"))
        render_hints = side_info["render_hints"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise ContainerError(f"malformed side info: {exc}") from None

    channels = {"density": field_cfg.density_channels,
                "appearance": field_cfg.appearance_channels}
    codecs = {g: build_codec(backbone, channels[g], profile, seed=0)
              for g in GROUPS}

    head_recs = _records_by_name(records[SID_DECODER_HEAD])
    prior_recs = _records_by_name(records[SID_PRIORS])
    for g in GROUPS:
        codec = codecs[g]
        for pname, _ in codec.synthesis.head.named_parameters():
            key = f"{g}.synthesis.head.{pname}"
            if key not in head_recs:
                raise ContainerError("decoder head record missing", name=key)
            _load_param(codec.synthesis.head, pname, head_recs[key])
        for pname, _ in codec.prior.named_parameters():
            key = f"{g}.prior.{pname}"
            if key not in prior_recs:
                raise ContainerError("prior record missing", name=key)
            _load_param(codec.prior, pname, prior_recs[key])

    field = PlaneField(field_cfg, seed=0)
    if field.plane_shapes() != plane_shapes:
        raise ContainerError("declared plane shapes do not match field config",
                             declared=plane_shapes,
                             expected=field.plane_shapes())
    # Latent shapes must agree with what the digest-verified config implies;
    # this bounds every allocation below by trusted sizes.
    for k, (_, h, w) in enumerate(plane_shapes):
        ph = -(-h // PAD_MULTIPLE) * PAD_MULTIPLE
        pw = -(-w // PAD_MULTIPLE) * PAD_MULTIPLE
        expect_y = (profile.latent, ph // MAIN_REDUCTION, pw // MAIN_REDUCTION)
        expect_z = (profile.hyper, ph // PAD_MULTIPLE, pw // PAD_MULTIPLE)
        if y_shapes[k] != expect_y or z_shapes[k] != expect_z:
            raise ContainerError("declared latent shapes are inconsistent",
                                 plane=k, latent_y=list(y_shapes[k]),
                                 latent_z=list(z_shapes[k]),
                                 expected_y=list(expect_y),
                                 expected_z=list(expect_z))
    comp = ResidualCompensation(plane_shapes, seed=0)

    mlp_recs = _records_by_name(records[SID_MLP])
    if "field.basis.weight" not in mlp_recs:
        raise ContainerError("basis record missing")
    _load_param(field, "basis.weight", mlp_recs["field.basis.weight"])
    for pname, _ in field.mlp.named_parameters():
        key = f"field.mlp.{pname}"
        if key not in mlp_recs:
            raise ContainerError("color network record missing", name=key)
        _load_param(field.mlp, pname, mlp_recs[key])

    vec_recs = _records_by_name(records[SID_AXIS_VECTORS])
    vectors = field.all_vectors()
    for k in range(len(vectors)):
        key = f"field.vectors.{k}"
        if key not in vec_recs:
            raise ContainerError("axis vector record missing", name=key)
        values = torch.from_numpy(vec_recs[key].dequantize())
        if tuple(values.shape) != tuple(vectors[k].shape):
            raise ContainerError("record shape does not match parameter",
                                 name=key, got=tuple(values.shape),
                                 expected=tuple(vectors[k].shape))
        with torch.no_grad():
            vectors[k].copy_(values)

    res_recs = _records_by_name(records[SID_RESIDUAL])
    for k in range(len(comp)):
        for part, plist in (("rows", comp.rows), ("cols", comp.cols)):
            key = f"comp.{part}.{k}"
            if key not in res_recs:
                raise ContainerError("residual record missing", name=key)
            values = torch.from_numpy(res_recs[key].dequantize())
            if tuple(values.shape) != tuple(plist[k].shape):
                raise ContainerError("record shape does not match parameter",
                                     name=key, got=tuple(values.shape),
                                     expected=tuple(plist[k].shape))
            with torch.no_grad():
                plist[k].copy_(values)

    y_symbols: list[np.ndarray] = []
    z_symbols: list[np.ndarray] = []
    recv_tables = {g: prior_tables(codecs[g].prior) for g in GROUPS}
    all_planes = field.all_planes()
    for k in range(N_PLANES):
        group = group_of_plane(k)
        codec = codecs[group]
        tables = recv_tables[group]
        with torch.no_grad():
            z_hat = decode_hyper_latent(streams[SID_LATENT_Z + k],
                                        z_shapes[k], tables)
            mean, sigma = codec.hyper_dec(z_hat.unsqueeze(0))
            mean, sigma = mean.squeeze(0), sigma.squeeze(0)
            if tuple(mean.shape) != y_shapes[k]:
                raise ContainerError(
                    "declared latent shape does not match hyper output",
                    plane=k, declared=list(y_shapes[k]),
                    derived=list(mean.shape))
            ctx, gtables = gaussian_coding_plan(sigma.numpy().ravel())
            syms = decode_symbols(streams[SID_LATENT_Y + k],
                                  ctx.tolist(), gtables)
            syms = np.asarray(syms, dtype=np.int64)
            y_hat = torch.from_numpy(
                syms.astype(np.float32).reshape(mean.shape)) + mean
            plane = codec.decode_latent(y_hat, plane_shapes[k][1:])
            all_planes[k].copy_(plane)
        y_symbols.append(syms)
        z_symbols.append(z_hat.numpy().astype(np.int64).ravel())

    return DecodedScene(field=field, comp=comp, codecs=codecs, header=header,
                        records=records, y_symbols=y_symbols,
                        z_symbols=z_symbols, render_hints=render_hints)


def reencode_scene(scene: DecodedScene) -> bytes:
    """Re-emit the container from a decoded scene. Byte-identical to the
    original: records reuse their stored grids and tables, latent payloads
    re-code the stored integer symbols against re-derived contexts."""

    streams: dict[int, bytes] = {
        sid: _records_blob(scene.records[sid])
        for sid in (SID_DECODER_HEAD, SID_MLP, SID_RESIDUAL,
                    SID_AXIS_VECTORS, SID_PRIORS)
    }
    streams[SID_SIDE_INFO] = _canonical_json(
        {"render_hints": scene.render_hints})

    recv_tables = {g: prior_tables(scene.codecs[g].prior) for g in GROUPS}
    z_shapes = [tuple(s) for s in scene.header["latent_z"]]
    for k in range(N_PLANES):
        codec = scene.plane_group_codec(k)
        tables = recv_tables[group_of_plane(k)]
        z_hat = torch.from_numpy(
            scene.z_symbols[k].astype(np.float32).reshape(z_shapes[k]))
        streams[SID_LATENT_Z + k] = code_hyper_latent(z_hat, tables)
        with torch.no_grad():
            _, sigma = codec.hyper_dec(z_hat.unsqueeze(0))
        ctx, gtables = gaussian_coding_plan(sigma.squeeze(0).numpy().ravel())
        streams[SID_LATENT_Y + k] = encode_symbols(
            scene.y_symbols[k].tolist(), ctx.tolist(), gtables)

    return mux(scene.header, streams)


def simulate_decode(bundle: SceneBundle, qparams: dict | None = None
                    ) -> DecodedScene:
    """Sender-side receiver simulation: run the genuine serialize/parse path
    so the sender sees exactly what the receiver will render."""

    return decode_scene(encode_scene(bundle, qparams=qparams), bundle.backbone)


# ---------------------------------------------------------------------------
# Size accounting
# ---------------------------------------------------------------------------

_COMPONENT_NAMES = {
    SID_DECODER_HEAD: "decoder_head",
    SID_MLP: "color_network",
    SID_RESIDUAL: "residual_vectors",
    SID_AXIS_VECTORS: "axis_vectors",
    SID_PRIORS: "priors",
    SID_SIDE_INFO: "side_info",
}


def memory_breakdown(data: bytes) -> dict:
    """Per-component byte accounting for a container.

    ``header_bytes`` covers the fixed preamble, the JSON header, and the
    5-byte substream entries, so the component sizes plus ``header_bytes``
    add up to ``total_bytes`` exactly. Raw sizes assume float32 storage.
    """

    header, streams = demux(data)
    components = {"latent_y": 0, "latent_z": 0}
    for k in range(N_PLANES):
        components["latent_y"] += len(streams[SID_LATENT_Y + k])
        components["latent_z"] += len(streams[SID_LATENT_Z + k])
    for sid, name in _COMPONENT_NAMES.items():
        components[name] = len(streams[sid])

    raw = {"planes": sum(4 * c * h * w for c, h, w in header["planes"])}
    param_raw = 0
    for sid in (SID_DECODER_HEAD, SID_MLP, SID_RESIDUAL,
                SID_AXIS_VECTORS, SID_PRIORS):
        for rec in _parse_records(streams[sid]):
            param_raw += 4 * int(np.prod(rec.shape, dtype=np.int64))
    raw["parameters"] = param_raw

    header_bytes = 10 + len(_canonical_json(header)) + 5 * len(STREAM_ORDER)
    total = len(data)
    plane_bytes = components["latent_y"] + components["latent_z"]
    return {
        "total_bytes": total,
        "header_bytes": header_bytes,
        "components": components,
        "raw_bytes": raw,
        "plane_ratio": raw["planes"] / plane_bytes if plane_bytes else None,
        "overall_ratio": (raw["planes"] + raw["parameters"]) / total,
    }


__all__ = [
    "MAGIC", "VERSION", "STREAM_ORDER", "GROUPS", "group_of_plane",
    "SCALE_TABLE", "scale_to_index", "gaussian_table", "prior_tables",
    "gaussian_coding_plan", "affine_qparams", "QuantizedTensorRecord",
    "code_gaussian_latent", "decode_gaussian_latent",
    "code_hyper_latent", "decode_hyper_latent",
    "SceneBundle", "save_bundle", "load_bundle", "collect_records",
    "mux", "demux", "DecodedScene", "encode_scene", "decode_scene",
    "reencode_scene", "simulate_decode", "memory_breakdown",
    "SID_DECODER_HEAD", "SID_MLP", "SID_RESIDUAL", "SID_AXIS_VECTORS",
    "SID_PRIORS", "SID_SIDE_INFO", "SID_LATENT_Y", "SID_LATENT_Z",
]
