"""Container format: weight records, latent coding, mux/demux, scene
round-trips, and malformed-input behavior."""

import json
import struct

import numpy as np
import pytest
import torch

from nrfc.archive import NamedTensorArchive
from nrfc.codec import FactorizedPrior, build_codec, make_backbone
from nrfc.config import CodecProfile, FieldConfig
from nrfc.container import (
    GROUPS,
    MAGIC,
    SCALE_TABLE,
    SID_AXIS_VECTORS,
    SID_DECODER_HEAD,
    SID_LATENT_Y,
    SID_LATENT_Z,
    SID_MLP,
    SID_PRIORS,
    SID_RESIDUAL,
    SID_SIDE_INFO,
    STREAM_ORDER,
    QuantizedTensorRecord,
    SceneBundle,
    affine_qparams,
    code_gaussian_latent,
    code_hyper_latent,
    collect_records,
    decode_gaussian_latent,
    decode_hyper_latent,
    decode_scene,
    demux,
    encode_scene,
    gaussian_table,
    load_bundle,
    memory_breakdown,
    mux,
    prior_tables,
    reencode_scene,
    save_bundle,
    scale_to_index,
    simulate_decode,
)
from nrfc.errors import (
    BadMagicError,
    ContainerError,
    DigestMismatchError,
    LengthOverrunError,
    NrfcError,
    TruncatedError,
    UnknownStreamError,
    VersionError,
)
from nrfc.field import PlaneField, ResidualCompensation
from nrfc.rangecoder import TOTAL, quantize_pmf

# =============================================================================
# weight records
# =============================================================================


def test_record_explicit_grid():
    values = np.array([0.0, 1.0, 2.55], dtype=np.float32)
    rec = QuantizedTensorRecord.quantize("t", values)
    assert rec.zero_point == 0
    assert rec.scale == pytest.approx(float(values[2]) / 255, rel=1e-12)
    assert rec.symbols.tolist() == [0, 100, 255]
    back = rec.dequantize()
    assert np.abs(back - values).max() <= rec.scale / 2


def test_record_roundtrip_error_bound():
    rng = np.random.default_rng(11)
    for _ in range(50):
        shape = tuple(rng.integers(1, 9, size=rng.integers(1, 4)))
        values = (rng.standard_normal(shape) * 10 ** rng.uniform(-3, 2)
                  + rng.uniform(-5, 5)).astype(np.float32)
        rec = QuantizedTensorRecord.quantize("t", values)
        # The grid guarantee is exact in double precision; the float32 cast
        # of the dequantized values adds at most half an ulp of the value
        # magnitude on top.
        grid = rec.scale * (rec.symbols.astype(np.float64) - rec.zero_point)
        err64 = np.abs(grid.reshape(rec.shape)
                       - values.astype(np.float64)).max()
        assert err64 <= abs(rec.scale) / 2 * (1 + 1e-9)
        ulp = np.abs(values).max() * 2.0 ** -23
        err32 = np.abs(rec.dequantize() - values).max()
        assert err32 <= abs(rec.scale) / 2 * (1 + 1e-9) + ulp


@pytest.mark.parametrize("const", [3.25, -0.75, 0.0, 1e-20])
def test_record_constant_tensor_exact(const):
    values = np.full((4, 5), const, dtype=np.float32)
    rec = QuantizedTensorRecord.quantize("t", values)
    assert np.array_equal(rec.dequantize(), values)
    assert rec.requantize_check()


def test_record_zero_point_minus_one_is_not_a_constant_marker():
    # lo / scale in (0.5, 1.5) makes round(-lo/scale) == -1 for a
    # non-constant tensor; decoding must still use the affine formula.
    values = np.array([0.012, 1.0, 2.562], dtype=np.float32)
    rec = QuantizedTensorRecord.quantize("t", values)
    assert rec.zero_point == -1
    assert len(np.unique(rec.symbols)) > 1
    err = np.abs(rec.dequantize() - values).max()
    assert err <= rec.scale / 2 * (1 + 1e-6)


def test_record_requantize_fixed_point():
    rng = np.random.default_rng(3)
    for _ in range(20):
        values = rng.standard_normal((6, 7)).astype(np.float32)
        rec = QuantizedTensorRecord.quantize("t", values)
        assert rec.requantize_check()


def test_affine_qparams_zero_point_sign():
    scale, zp = affine_qparams(np.array([-1.0, 1.0], dtype=np.float32))
    assert zp == round(1.0 / scale)
    scale, zp = affine_qparams(np.array([2.0, 4.0], dtype=np.float32))
    assert zp == -round(2.0 / scale)


def test_record_serialization_roundtrip():
    rng = np.random.default_rng(5)
    values = rng.standard_normal((3, 4, 2)).astype(np.float32)
    rec = QuantizedTensorRecord.quantize("layer.weight", values)
    blob = rec.serialize()
    back, pos = QuantizedTensorRecord.deserialize(blob, 0)
    assert pos == len(blob)
    assert back.name == rec.name
    assert back.shape == rec.shape
    assert back.scale == rec.scale
    assert back.zero_point == rec.zero_point
    assert back.table == rec.table
    assert np.array_equal(back.symbols, rec.symbols)
    assert np.array_equal(back.dequantize(), rec.dequantize())


def test_record_truncated_raises_typed_error():
    values = np.arange(12, dtype=np.float32).reshape(3, 4)
    blob = QuantizedTensorRecord.quantize("t", values).serialize()
    for cut in (1, 5, len(blob) // 2, len(blob) - 1):
        with pytest.raises(ContainerError):
            QuantizedTensorRecord.deserialize(blob[:cut], 0)


# =============================================================================
# scale table and latent coding
# =============================================================================


def test_scale_table_shape_and_bounds():
    assert SCALE_TABLE.shape == (512,)
    assert SCALE_TABLE[0] == pytest.approx(0.11, rel=1e-12)
    assert SCALE_TABLE[-1] == pytest.approx(256.0, rel=1e-12)
    assert (np.diff(SCALE_TABLE) > 0).all()


def test_scale_index_nearest_above():
    rng = np.random.default_rng(0)
    sigma = rng.uniform(0.05, 300.0, size=500)
    idx = scale_to_index(sigma)
    capped = np.minimum(sigma, SCALE_TABLE[-1])
    assert (SCALE_TABLE[idx] >= capped - 1e-9).all()
    inner = idx > 0
    assert (SCALE_TABLE[idx[inner] - 1] < sigma[inner]).all()


def test_scale_floor_maps_to_first_entry():
    sigma32 = np.float32(0.11)
    assert scale_to_index(np.array([sigma32], dtype=np.float64))[0] == 0


def test_gaussian_table_structure():
    t = gaussian_table(0)
    sigma = float(SCALE_TABLE[0])
    r = int(np.ceil(16 * sigma))
    assert t.offset == -r
    assert t.n_regular == 2 * r + 1
    freqs = t.frequencies()
    assert sum(freqs) == TOTAL
    assert min(freqs) >= 1
    assert int(np.argmax(freqs[:-1])) == r  # mode at symbol 0


@pytest.mark.parametrize("index", [0, 64, 200])
def test_gaussian_table_matches_normal_oracle(index):
    scipy_stats = pytest.importorskip("scipy.stats")
    sigma = float(SCALE_TABLE[index])
    r = max(1, int(np.ceil(16 * sigma)))
    ks = np.arange(-r, r + 1)
    probs = (scipy_stats.norm.cdf((ks + 0.5) / sigma)
             - scipy_stats.norm.cdf((ks - 0.5) / sigma))
    escape = max(0.0, 1.0 - probs.sum())
    expected = quantize_pmf(list(probs) + [escape])
    assert gaussian_table(index).frequencies() == expected


def test_gaussian_latent_roundtrip_exact():
    gen = torch.Generator().manual_seed(9)
    y = torch.randn(5, 4, 6, generator=gen) * 3
    mu = torch.randn(5, 4, 6, generator=gen)
    sigma = torch.rand(5, 4, 6, generator=gen) * 4 + 0.11
    payload, y_hat = code_gaussian_latent(y, mu, sigma)
    back = decode_gaussian_latent(payload, mu, sigma)
    assert torch.equal(back, y_hat)
    assert torch.equal(y_hat, torch.sign(y - mu) * torch.floor((y - mu).abs() + 0.5) + mu)


def test_gaussian_latent_escape_roundtrip():
    mu = torch.zeros(1, 2, 2)
    sigma = torch.full((1, 2, 2), 0.11)
    y = torch.tensor([[[500.0, -500.0], [0.0, 1.0]]])
    payload, y_hat = code_gaussian_latent(y, mu, sigma)
    back = decode_gaussian_latent(payload, mu, sigma)
    assert torch.equal(back, y_hat)
    assert back[0, 0, 0] == 500.0 and back[0, 0, 1] == -500.0


def test_hyper_latent_roundtrip_with_escape():
    torch.manual_seed(4)
    prior = FactorizedPrior(3)
    tables = prior_tables(prior)
    z = torch.tensor([[[0.0, 2.0], [-1.0, 700.0]],
                      [[0.0, 0.0], [5.0, -3.0]],
                      [[-700.0, 1.0], [0.0, 0.0]]])
    payload = code_hyper_latent(z, tables)
    back = decode_hyper_latent(payload, (3, 2, 2), tables)
    assert torch.equal(back, z)


def test_prior_tables_cover_zero_and_match_float_mode():
    torch.manual_seed(2)
    prior = FactorizedPrior(4)
    grid = torch.arange(-300, 301, dtype=torch.float32)
    with torch.no_grad():
        pmf = prior.likelihood(grid.expand(4, -1)).numpy()
    # Float-level mode sits at 0; the quantized tables keep 0 well inside
    # the coded range with near-maximal mass (integer rounding of a nearly
    # flat pmf may shift the exact argmax by a slot).
    assert (np.argmax(pmf, axis=1) == 300).all()
    for t in prior_tables(prior):
        assert t.offset <= 0 < t.offset + t.n_regular
        freqs = t.frequencies()
        assert sum(freqs) == TOTAL
        regular = freqs[:-1]
        assert regular[-t.offset] >= max(regular) // 2


# =============================================================================
# mux / demux
# =============================================================================


def _dummy_streams():
    rng = np.random.default_rng(1)
    return {sid: rng.bytes(int(rng.integers(0, 40))) for sid in STREAM_ORDER}


def test_mux_demux_roundtrip_and_size_arithmetic():
    header = {"digest": "00", "planes": [[1, 2, 3]]}
    streams = _dummy_streams()
    blob = mux(header, streams)
    header_json = json.dumps(header, sort_keys=True,
                             separators=(",", ":")).encode()
    expected = 4 + 2 + 4 + len(header_json) + sum(
        5 + len(streams[sid]) for sid in STREAM_ORDER)
    assert len(blob) == expected
    back_header, back_streams = demux(blob)
    assert back_header == header
    assert back_streams == streams


def test_mux_rejects_missing_and_unknown_streams():
    streams = _dummy_streams()
    incomplete = dict(streams)
    del incomplete[SID_MLP]
    with pytest.raises(ContainerError):
        mux({}, incomplete)
    with pytest.raises(UnknownStreamError):
        mux({}, {**streams, 0x7F: b""})


def test_demux_bad_magic():
    with pytest.raises(BadMagicError):
        demux(b"JUNK" + b"\x00" * 20)


def test_demux_unknown_version():
    blob = bytearray(mux({}, _dummy_streams()))
    blob[4:6] = struct.pack("<H", 99)
    with pytest.raises(VersionError):
        demux(bytes(blob))


def test_demux_unknown_stream_id():
    header_json = b"{}"
    blob = MAGIC + struct.pack("<HI", 1, len(header_json)) + header_json
    blob += struct.pack("<BI", 0x7F, 0)
    with pytest.raises(UnknownStreamError):
        demux(blob)


def test_demux_duplicate_stream():
    header_json = b"{}"
    blob = MAGIC + struct.pack("<HI", 1, len(header_json)) + header_json
    blob += struct.pack("<BI", SID_LATENT_Y, 0) * 2
    with pytest.raises(ContainerError, match="duplicate"):
        demux(blob)


def test_demux_length_overrun():
    header_json = b"{}"
    blob = MAGIC + struct.pack("<HI", 1, len(header_json)) + header_json
    blob += struct.pack("<BI", SID_LATENT_Y, 1000)
    with pytest.raises(LengthOverrunError):
        demux(blob)


def test_demux_missing_or_out_of_order_streams():
    header_json = b"{}"
    base = MAGIC + struct.pack("<HI", 1, len(header_json)) + header_json
    with pytest.raises(ContainerError):
        demux(base)  # no streams at all
    blob = base + struct.pack("<BI", SID_SIDE_INFO, 0)
    with pytest.raises(ContainerError):
        demux(blob)


def test_demux_truncation_sweep():
    blob = mux({"k": [1, 2]}, _dummy_streams())
    for cut in range(0, len(blob), 7):
        with pytest.raises(ContainerError):
            demux(blob[:cut])


# =============================================================================
# scene round-trip
# =============================================================================

FIELD_CFG = FieldConfig(plane_size=24, vector_len=16, density_channels=3,
                        appearance_channels=6, appearance_dim=9,
                        mlp_hidden=16)
PROFILE = CodecProfile("tiny", internal=8, latent=12, hyper=6)


def _make_bundle(seed=0, backbone_seed=7):
    field = PlaneField(FIELD_CFG, seed=seed)
    comp = ResidualCompensation(field.plane_shapes(), seed=seed + 1)
    # Give the compensation columns nonzero values so their records carry
    # real content.
    with torch.no_grad():
        gen = torch.Generator().manual_seed(seed + 2)
        for c in comp.cols:
            c.add_(torch.randn(c.shape, generator=gen) * 0.01)
    backbone = make_backbone(PROFILE, seed=backbone_seed)
    codecs = {
        "density": build_codec(backbone, FIELD_CFG.density_channels,
                               PROFILE, seed=1),
        "appearance": build_codec(backbone, FIELD_CFG.appearance_channels,
                                  PROFILE, seed=2),
    }
    return SceneBundle(field=field, comp=comp, codecs=codecs,
                       backbone=backbone, field_cfg=FIELD_CFG,
                       profile=PROFILE)


@pytest.fixture(scope="module")
def bundle():
    return _make_bundle()


@pytest.fixture(scope="module")
def container_bytes(bundle):
    return encode_scene(bundle)


def test_encode_scene_deterministic(bundle, container_bytes):
    assert encode_scene(bundle) == container_bytes


def test_decode_scene_deterministic(bundle, container_bytes):
    a = decode_scene(container_bytes, bundle.backbone)
    b = decode_scene(container_bytes, bundle.backbone)
    for pa, pb in zip(a.field.all_planes(), b.field.all_planes()):
        assert torch.equal(pa, pb)
    for na, nb in zip(a.field.mlp.parameters(), b.field.mlp.parameters()):
        assert torch.equal(na, nb)


def test_decoded_parameters_within_grid_error(bundle, container_bytes):
    scene = decode_scene(container_bytes, bundle.backbone)
    sender = dict(bundle.field.mlp.named_parameters())
    records = {r.name: r for r in scene.records[SID_MLP]}
    for pname, p in scene.field.mlp.named_parameters():
        rec = records[f"field.mlp.{pname}"]
        err = (p.detach() - sender[pname].detach()).abs().max().item()
        assert err <= abs(rec.scale) / 2 * (1 + 1e-6) + 1e-12


def test_decoded_vectors_match_records(bundle, container_bytes):
    scene = decode_scene(container_bytes, bundle.backbone)
    records = {r.name: r for r in scene.records[SID_AXIS_VECTORS]}
    for k, v in enumerate(scene.field.all_vectors()):
        expected = records[f"field.vectors.{k}"].dequantize()
        assert np.array_equal(v.detach().numpy(), expected)


def test_reencode_byte_identity(bundle, container_bytes):
    scene = decode_scene(container_bytes, bundle.backbone)
    assert reencode_scene(scene) == container_bytes


def test_simulate_decode_matches_real_decode(bundle, container_bytes):
    sim = simulate_decode(bundle)
    real = decode_scene(container_bytes, bundle.backbone)
    for pa, pb in zip(sim.field.all_planes(), real.field.all_planes()):
        assert torch.equal(pa, pb)


def test_decode_wrong_backbone_rejected(container_bytes):
    other = make_backbone(PROFILE, seed=8)
    with pytest.raises(DigestMismatchError):
        decode_scene(container_bytes, other)


def test_header_tamper_rejected(bundle, container_bytes):
    header, streams = demux(container_bytes)
    tampered = json.loads(json.dumps(header))
    tampered["latent_y"][0][1] += 1
    blob = mux(tampered, streams)
    with pytest.raises(ContainerError):
        decode_scene(blob, bundle.backbone)
    tampered = json.loads(json.dumps(header))
    tampered["field"]["plane_size"] = 48
    blob = mux(tampered, streams)
    with pytest.raises(DigestMismatchError):
        decode_scene(blob, bundle.backbone)


def test_memory_breakdown_accounts_for_every_byte(container_bytes):
    info = memory_breakdown(container_bytes)
    assert info["total_bytes"] == len(container_bytes)
    assert (sum(info["components"].values()) + info["header_bytes"]
            == info["total_bytes"])
    raw_planes = sum(
        4 * c * FIELD_CFG.plane_size ** 2
        for c in (FIELD_CFG.density_channels,) * 3
        + (FIELD_CFG.appearance_channels,) * 3)
    assert info["raw_bytes"]["planes"] == raw_planes
    assert info["plane_ratio"] > 0
    assert info["overall_ratio"] > 0


def test_bundle_save_load_preserves_coded_output(bundle, container_bytes,
                                                 tmp_path):
    path = tmp_path / "scene.ntar"
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    assert encode_scene(loaded) == container_bytes


def test_collect_records_honors_pinned_grids(bundle):
    pin = {"field.basis.weight": (0.05, 128)}
    records = collect_records(bundle, qparams=pin)
    rec = {r.name: r for r in records[SID_MLP]}["field.basis.weight"]
    assert rec.scale == 0.05
    assert rec.zero_point == 128
    values = bundle.field.basis.weight.detach().numpy()
    assert np.abs(rec.dequantize() - values).max() <= 0.05 / 2 + 1e-9


def test_decode_truncation_fuzz_raises_only_typed_errors(bundle,
                                                         container_bytes):
    rng = np.random.default_rng(17)
    cuts = sorted(set(rng.integers(0, len(container_bytes),
                                   size=20).tolist()))
    for cut in cuts:
        with pytest.raises(NrfcError):
            decode_scene(container_bytes[:cut], bundle.backbone)


def test_decode_corruption_fuzz_never_crashes(bundle, container_bytes):
    rng = np.random.default_rng(23)
    for _ in range(25):
        blob = bytearray(container_bytes)
        for _ in range(int(rng.integers(1, 4))):
            pos = int(rng.integers(0, len(blob)))
            blob[pos] ^= int(rng.integers(1, 256))
        try:
            decode_scene(bytes(blob), bundle.backbone)
        except NrfcError:
            pass  # typed rejection is fine; silent garbage is also legal


def test_side_info_round_trips_render_hints(bundle, container_bytes):
    scene = decode_scene(container_bytes, bundle.backbone)
    assert scene.render_hints == bundle.render_hints
