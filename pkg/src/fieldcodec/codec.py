"""End-to-end compression and the on-disk artifact container.

A compressed artifact is self-describing given the checkpoint it names: a
JSON header (manifest, normalization, padding, block grid, budgets, model
hash), three length-prefixed payload sections (hyper latents, main
latents, corrections) and a CRC over the payload bytes. Decompression
re-runs the deterministic decoder transforms and applies the corrections,
so the per-block error bound certified at compression time holds exactly
on the decoded float32 values.
"""

import dataclasses
import json
import math
import struct
import zlib

import numpy as np
import torch

from .data import (
    DataError,
    FieldManifest,
    FieldSeries,
    NormalizationParams,
    PadInfo,
    denormalize,
    normalize,
    partition_blocks,
    reassemble_blocks,
    reflect_pad,
    unpad,
)
from .entropy import (
    factorized_cum_tables,
    gaussian_cum_tables,
    pack_tensor_stream,
    quantize_round,
    unpack_tensor_stream,
)
from .errorbound import (
    BLOCK_DIMS,
    apply_correction,
    decode_corrections,
    delta_from_tau,
    encode_corrections,
    fit_pca_basis,
    select_and_quantize,
    tau_from_nrmse,
)
from .transforms import fold_slices, unfold_slices

MAGIC = b"FMSC"
VERSION = 1


class CodecError(ValueError):
    pass


def _require_basis(store):
    if store.pca_basis is None:
        raise CodecError("checkpoint carries no correction basis")
    return store.pca_basis


def _z_rows_builder(prior, spatial):
    """Per-element table rows for a z slice laid out [C, h, w]."""

    def build(sym_min, sym_max):
        tables = factorized_cum_tables(prior, sym_min, sym_max)
        return tables[np.repeat(np.arange(prior.channels), spatial)]

    return build


def _y_rows_builder(mu, sigma):
    def build(sym_min, sym_max):
        return gaussian_cum_tables(mu, sigma, sym_min, sym_max)

    return build


def _update_range(current, values):
    if values.size == 0:
        return current
    lo, hi = int(values.min()), int(values.max())
    if current is None:
        return [lo, hi]
    return [min(current[0], lo), max(current[1], hi)]


def compress(store, fs, eps, block_hw=(64, 64), pca_block_dims=BLOCK_DIMS):
    """Compress a FieldSeries to artifact bytes with NRMSE guaranteed <= eps.

    store: WeightStore with a correction basis. block_hw: spatial block size
    for the neural transform; both entries must be multiples of 64. The
    per-block correction budget is shrunk by the padding ratio so the bound
    certified on padded blocks implies the global bound on the original
    region.
    """
    basis = _require_basis(store)
    if tuple(pca_block_dims) != tuple(basis.block_dims):
        raise CodecError(
            f"basis fitted for blocks {basis.block_dims}, requested {tuple(pca_block_dims)}"
        )
    hs, ws = block_hw
    if hs % 64 or ws % 64 or hs < 64 or ws < 64:
        raise CodecError(f"block size ({hs}, {ws}) must be positive multiples of 64")
    if eps <= 0:
        raise CodecError("eps must be positive")

    model = store.build_model()
    model.eval()
    norm_vals, nparams = normalize(fs.values)
    padded, pad_info = reflect_pad(norm_vals, multiples=(8, hs, ws))
    blocks, origins = partition_blocks(padded, hs, ws, bt=8)

    hyper = bytearray()
    latent = bytearray()
    recon_blocks = np.empty_like(blocks)
    y_range = None
    z_range = None
    with torch.no_grad():
        for bi, blk in enumerate(blocks):
            x = torch.from_numpy(blk[None])
            y = model.analysis_encode(x)
            y_fold, info = fold_slices(y)
            z = model.hyper_encode(y_fold)
            z_hat = quantize_round(z)
            mu, sigma = model.hyper_decode(z_hat)
            y_hat = quantize_round(y_fold)
            z_ints = z_hat.numpy().astype(np.int64)
            y_ints = y_hat.numpy().astype(np.int64)
            spatial = z_ints.shape[-2] * z_ints.shape[-1]
            for s in range(z_ints.shape[0]):
                hyper += pack_tensor_stream(
                    z_ints[s].ravel(), _z_rows_builder(model.prior, spatial)
                )
                mu_s = mu[s].numpy().astype(np.float64).ravel()
                sigma_s = sigma[s].numpy().astype(np.float64).ravel()
                latent += pack_tensor_stream(y_ints[s].ravel(), _y_rows_builder(mu_s, sigma_s))
                z_range = _update_range(z_range, z_ints[s])
                y_range = _update_range(y_range, y_ints[s])
            recon_blocks[bi] = model.reconstruct(unfold_slices(y_hat, info))[0].numpy()

    recon_norm = reassemble_blocks(recon_blocks, origins, padded.shape)
    xr_padded = denormalize(recon_norm, nparams)  # float64, physical units
    raw_padded, _ = reflect_pad(fs.values, multiples=(8, hs, ws))
    raw64 = raw_padded.astype(np.float64)

    d = basis.d
    n_orig = int(np.prod(fs.manifest.dims))
    n_padded = int(np.prod(padded.shape))
    tau = tau_from_nrmse(eps, nparams.range, d) * math.sqrt(n_orig / n_padded)
    delta = delta_from_tau(tau, d)

    x_blocks, pca_origins = partition_blocks(
        raw64, hs=basis.block_dims[1], ws=basis.block_dims[2], bt=basis.block_dims[0]
    )
    xr_blocks, _ = partition_blocks(
        xr_padded, hs=basis.block_dims[1], ws=basis.block_dims[2], bt=basis.block_dims[0]
    )
    records = []
    for xb, rb in zip(x_blocks, xr_blocks):
        records.append(select_and_quantize(xb.ravel(), rb.ravel(), basis, tau, delta))
    correction = encode_corrections(records, delta, basis.content_hash(), d)

    header = {
        "model_hash": store.content_hash(),
        "manifest": fs.manifest.to_dict(),
        "normalization": nparams.to_dict(),
        "pad": pad_info.to_dict(),
        "block": {"bt": 8, "hs": hs, "ws": ws},
        "num_blocks": len(blocks),
        "pca_block": list(basis.block_dims),
        "eps": eps,
        "tau": tau,
        "delta": delta,
        "symbol_ranges": {"y": y_range, "z": z_range},
        "sections": {
            "hyper": len(hyper),
            "latent": len(latent),
            "correction": len(correction),
        },
    }
    return build_container(header, hyper, latent, correction)


def build_container(header, hyper, latent, correction):
    """Serialize header dict and payload sections into artifact bytes.

    The header's section lengths are filled in (or overwritten) here so the
    parse-side accounting check always holds.
    """
    header = dict(header)
    header["sections"] = {
        "hyper": len(hyper),
        "latent": len(latent),
        "correction": len(correction),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytes(hyper) + bytes(latent) + bytes(correction)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("<I", len(header_bytes))
    out += header_bytes
    for section in (hyper, latent, correction):
        out += struct.pack("<I", len(section))
        out += section
    out += struct.pack("<I", crc)
    return bytes(out)


def parse_artifact(blob):
    """Split an artifact into (header dict, hyper, latent, correction bytes).

    Verifies magic, version and the payload checksum.
    """
    if blob[:4] != MAGIC[: len(blob)] or len(blob) < 4:
        raise CodecError("not a compressed artifact (bad magic)")
    if len(blob) < 14:
        raise CodecError("artifact truncated in fixed header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CodecError(f"unsupported artifact version {version}")
    (hlen,) = struct.unpack_from("<I", blob, 6)
    off = 10
    if off + hlen > len(blob):
        raise CodecError("artifact truncated in header")
    try:
        header = json.loads(blob[off : off + hlen])
    except json.JSONDecodeError as e:
        raise CodecError(f"artifact header is not valid JSON: {e}") from e
    off += hlen
    sections = []
    for name in ("hyper", "latent", "correction"):
        if off + 4 > len(blob):
            raise CodecError(f"artifact truncated before {name} section")
        (slen,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + slen > len(blob):
            raise CodecError(f"artifact truncated inside {name} section")
        sections.append(blob[off : off + slen])
        off += slen
    if off + 4 > len(blob):
        raise CodecError("artifact truncated before checksum")
    (crc_stored,) = struct.unpack_from("<I", blob, off)
    payload = bytes(sections[0]) + bytes(sections[1]) + bytes(sections[2])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CodecError("payload checksum mismatch, artifact is corrupt")
    declared = header.get("sections", {})
    for name, got in zip(("hyper", "latent", "correction"), sections):
        if declared.get(name) != len(got):
            raise CodecError(f"{name} section length does not match header")
    return header, sections[0], sections[1], sections[2]


def decompress(store, blob):
    """Decode an artifact back to a FieldSeries.

    The checkpoint must be the one named in the header (parameter hash and
    correction basis hash are both checked).
    """
    header, hyper, latent, correction = parse_artifact(blob)
    if header["model_hash"] != store.content_hash():
        raise CodecError("artifact was produced with a different checkpoint")
    basis = _require_basis(store)

    manifest = FieldManifest.from_dict(header["manifest"])
    nparams = NormalizationParams.from_dict(header["normalization"])
    pad_info = PadInfo.from_dict(header["pad"])
    hs, ws = header["block"]["hs"], header["block"]["ws"]
    t, h, w = manifest.dims
    padded_dims = (t + pad_info.pad_t, h + pad_info.pad_h, w + pad_info.pad_w)

    model = store.build_model()
    model.eval()
    c = model.config.channels
    grid = [
        (t0, h0, w0)
        for t0 in range(0, padded_dims[0], 8)
        for h0 in range(0, padded_dims[1], hs)
        for w0 in range(0, padded_dims[2], ws)
    ]
    if header["num_blocks"] != len(grid):
        raise CodecError("block grid does not match header")

    y_spatial = (hs // 16, ws // 16)
    z_spatial = (hs // 64, ws // 64)
    n_slices = 8 // 4
    recon_blocks = np.empty((len(grid), 8, hs, ws), dtype=np.float32)
    h_off = 0
    l_off = 0
    with torch.no_grad():
        for bi in range(len(grid)):
            y_slices = []
            for _ in range(n_slices):
                z_flat, h_off = unpack_tensor_stream(
                    hyper, h_off, _z_rows_builder(model.prior, z_spatial[0] * z_spatial[1])
                )
                z_hat = torch.from_numpy(
                    z_flat.reshape(1, 4 * c, *z_spatial).astype(np.float32)
                )
                mu, sigma = model.hyper_decode(z_hat)
                mu_s = mu[0].numpy().astype(np.float64).ravel()
                sigma_s = sigma[0].numpy().astype(np.float64).ravel()
                y_flat, l_off = unpack_tensor_stream(latent, l_off, _y_rows_builder(mu_s, sigma_s))
                y_slices.append(
                    torch.from_numpy(y_flat.reshape(1, 2 * c, *y_spatial).astype(np.float32))
                )
            y_hat = torch.stack(y_slices, dim=2)  # [1, 2C, T/4, h, w]
            recon_blocks[bi] = model.reconstruct(y_hat)[0].numpy()

    origins = np.array(grid, dtype=np.int64)
    recon_norm = reassemble_blocks(recon_blocks, origins, padded_dims)
    xr_padded = denormalize(recon_norm, nparams)

    records, delta, basis_hash = decode_corrections(correction, basis.d)
    if basis_hash != basis.content_hash():
        raise CodecError("artifact corrections were built against a different basis")
    bt, bh, bw = basis.block_dims
    xr_blocks, pca_origins = partition_blocks(xr_padded, hs=bh, ws=bw, bt=bt)
    if len(records) != len(xr_blocks):
        raise CodecError("correction record count does not match block grid")
    out_blocks = np.empty(xr_blocks.shape, dtype=np.float32)
    for i, ((idx, q), rb) in enumerate(zip(records, xr_blocks)):
        out_blocks[i] = apply_correction(rb.ravel(), basis, idx, q, delta).reshape(bt, bh, bw)
    out_padded = reassemble_blocks(out_blocks, pca_origins, padded_dims)
    values = unpad(out_padded, pad_info)
    return FieldSeries(manifest, values)


def evaluate_nrmse(original, reconstruction):
    """Root mean squared error over the value range of the original."""
    a = np.asarray(
        original.values if isinstance(original, FieldSeries) else original, dtype=np.float64
    )
    b = np.asarray(
        reconstruction.values if isinstance(reconstruction, FieldSeries) else reconstruction,
        dtype=np.float64,
    )
    if a.shape != b.shape:
        raise CodecError(f"shape mismatch {a.shape} vs {b.shape}")
    rng = a.max() - a.min()
    if rng == 0:
        raise CodecError("degenerate original field, range is zero")
    return float(np.sqrt(np.mean((a - b) ** 2)) / rng)


def compression_ratio(fs, blob):
    """Original float32 bytes over artifact bytes."""
    return 4.0 * int(np.prod(fs.manifest.dims)) / len(blob)


def estimate_rate(store, fs, block_hw=(64, 64)):
    """Analytic round-mode rate for a field, in bits (latents plus hyper).

    The realized coded size differs only by 16-bit table quantization and
    per-stream flush overhead.
    """
    model = store.build_model()
    model.eval()
    norm_vals, _ = normalize(fs.values)
    hs, ws = block_hw
    padded, _ = reflect_pad(norm_vals, multiples=(8, hs, ws))
    blocks, _ = partition_blocks(padded, hs, ws, bt=8)
    total = 0.0
    with torch.no_grad():
        for blk in blocks:
            _, y_bits, z_bits = model.forward_train(
                torch.from_numpy(blk[None]), mode="round"
            )
            total += float(y_bits) + float(z_bits)
    return total


def rd_curve(store, fs, eps_list, block_hw=(64, 64)):
    """Compress at each eps and report achieved (ratio, nrmse) rows."""
    rows = []
    for eps in eps_list:
        blob = compress(store, fs, eps, block_hw=block_hw)
        back = decompress(store, blob)
        rows.append(
            {
                "eps": float(eps),
                "nrmse": evaluate_nrmse(fs, back),
                "compression_ratio": compression_ratio(fs, blob),
                "artifact_bytes": len(blob),
            }
        )
    return rows


def inspect(blob):
    """Header plus section accounting for an artifact, without decoding it."""
    header, hyper, latent, correction = parse_artifact(blob)
    return {
        "header": header,
        "total_bytes": len(blob),
        "section_bytes": {
            "hyper": len(hyper),
            "latent": len(latent),
            "correction": len(correction),
        },
        "checksum_ok": True,
    }
