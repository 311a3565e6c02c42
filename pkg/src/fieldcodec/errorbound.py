"""Hard reconstruction error bound via quantized PCA residual corrections.

The neural reconstruction is treated as a predictor. Per [4, 8, 8] block the
residual is projected onto a fixed orthonormal basis, the largest
coefficients are quantized and kept until the corrected block error drops
under tau, and the kept (index, value) pairs are entropy coded. The decoder
adds the same correction, so the per-block L2 bound holds by construction
on the emitted float32 values, with zero tolerance.
"""

import dataclasses
import hashlib
import math
import struct

import numpy as np

from .rangecoder import (
    BitReader,
    BitWriter,
    RangeCoderError,
    RangeDecoder,
    RangeEncoder,
    uniform_cum,
)

BLOCK_DIMS = (4, 8, 8)


class ErrorBoundError(ValueError):
    pass


@dataclasses.dataclass
class PcaBasis:
    block_dims: tuple
    matrix: np.ndarray  # [d, d] float64, orthonormal columns
    eigenvalues: np.ndarray  # [d] float64, descending

    @property
    def d(self):
        return self.matrix.shape[0]

    def content_hash(self):
        h = hashlib.sha256()
        h.update(struct.pack("<3I", *self.block_dims))
        h.update(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())
        return h.digest()


def fit_pca_basis(residual_blocks, block_dims=BLOCK_DIMS):
    """Eigenbasis of the residual second-moment matrix (no mean subtraction).

    residual_blocks: [M, bt, bh, bw] or [M, d]. eigh of a symmetric matrix
    returns a complete orthonormal set, so rank-deficient inputs (fewer
    blocks than d) still give a full basis with the null space filled in.
    """
    d = int(np.prod(block_dims))
    x = np.asarray(residual_blocks, dtype=np.float64).reshape(-1, d)
    if x.shape[0] == 0:
        cov = np.zeros((d, d))
    else:
        cov = x.T @ x / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    return PcaBasis(
        block_dims=tuple(block_dims),
        matrix=np.ascontiguousarray(evecs[:, order]),
        eigenvalues=np.ascontiguousarray(evals[order]),
    )


def tau_from_nrmse(eps, value_range, n_block):
    """Per-block L2 budget so equal-size blocks meeting it imply NRMSE <= eps."""
    if eps <= 0 or value_range <= 0 or n_block <= 0:
        raise ErrorBoundError("eps, range and block size must be positive")
    return float(eps) * float(value_range) * math.sqrt(n_block)


def delta_from_tau(tau, d):
    """Coefficient quantization step. Fine enough that the reachable error
    floor sqrt(d) * delta / 2 sits at tau / 8."""
    return float(tau) / (4.0 * math.sqrt(d))


def apply_correction(xr_block, basis, indices, qvals, delta):
    """Decoder-side correction: float32(xr + U_s (delta q)).

    xr_block: float64 [d] neural reconstruction in physical units. This
    exact arithmetic path is also what the encoder verifies against, so the
    two sides agree bit for bit.
    """
    corr = basis.matrix[:, indices] @ (delta * np.asarray(qvals, dtype=np.float64))
    return (xr_block + corr).astype(np.float32)


def select_and_quantize(x_block, xr_block, basis, tau, delta):
    """Greedy correction for one block: largest |coefficient| first.

    x_block: float64 view of the original float32 values, xr_block: float64
    neural reconstruction, both flat [d]. Returns (indices, qvals) such that
    the float32 corrected block is within tau of x_block in L2. The stop
    test runs on the exact emitted values, not a float64 shortcut.
    """
    if delta > tau / (2.0 * math.sqrt(basis.d)) + 1e-12:
        raise ErrorBoundError("delta too coarse for tau, bound may be unreachable")
    r = x_block - xr_block
    c = basis.matrix.T @ r
    order = np.argsort(-np.abs(c), kind="stable")
    q_all = np.sign(c) * np.floor(np.abs(c) / delta + 0.5)

    indices = []
    qvals = []
    err2 = float(r @ r)
    pos = 0

    def verified():
        xg = apply_correction(xr_block, basis, np.array(indices, dtype=np.int64), qvals, delta)
        diff = x_block - xg.astype(np.float64)
        return math.sqrt(float(diff @ diff)) <= tau

    while True:
        if err2 <= tau * tau and verified():
            break
        if pos >= basis.d:
            raise ErrorBoundError("bound unreachable, exhausted basis")
        i = int(order[pos])
        pos += 1
        q = int(q_all[i])
        if q == 0:
            # sorted order: every remaining coefficient also rounds to zero,
            # and the floor tau/8 must already have been reached
            raise ErrorBoundError("bound unreachable with zero quantized tail")
        indices.append(i)
        qvals.append(q)
        ci = float(c[i])
        err2 += (ci - delta * q) ** 2 - ci * ci
    return np.array(indices, dtype=np.int64), np.array(qvals, dtype=np.int64)


_RICE_RESET = 64
_RICE_ESCAPE = 24


class _AdaptiveRice:
    """Golomb-Rice parameter adaptation shared by encoder and decoder.

    Rice codes are the optimal prefix codes for geometric laws; running the
    signed values through a zigzag map makes the model two-sided. The
    parameter tracks the running mean magnitude, JPEG-LS style.
    """

    def __init__(self):
        self.acc = 4
        self.count = 1

    def k(self):
        k = 0
        while (self.count << k) < self.acc and k < 62:
            k += 1
        return k

    def update(self, zig):
        self.acc += zig
        self.count += 1
        if self.count >= _RICE_RESET:
            self.acc >>= 1
            self.count >>= 1


def _zigzag(q):
    return -2 * q - 1 if q < 0 else 2 * q


def _unzigzag(z):
    return -(z + 1) // 2 if z & 1 else z // 2


def encode_corrections(records, delta, basis_hash, d):
    """Serialize per-block corrections.

    records: one (indices, qvals) pair per block, in block order. Layout:
    [basis_hash 32B][delta f64][num_blocks u32][counts u16 each]
    [idx_len u32][idx bytes][val_len u32][val bytes]. Indices are
    range-coded against a uniform-over-d model, values Rice-coded.
    """
    if len(basis_hash) != 32:
        raise ErrorBoundError("basis hash must be 32 bytes")
    head = bytearray()
    head += basis_hash
    head += struct.pack("<d", delta)
    head += struct.pack("<I", len(records))
    counts = np.array([len(idx) for idx, _ in records], dtype=np.uint16)
    for idx, _ in records:
        if len(idx) > 0xFFFF:
            raise ErrorBoundError("more than 65535 corrections in one block")
    head += counts.astype("<u2").tobytes()

    cum = uniform_cum(d)
    enc = RangeEncoder()
    lo = cum[:-1]
    hi = cum[1:]
    for idx, _ in records:
        for i in idx:
            enc.encode(int(lo[i]), int(hi[i]))
    idx_bytes = enc.finish()

    rice = _AdaptiveRice()
    w = BitWriter()
    for _, qvals in records:
        for q in qvals:
            zig = _zigzag(int(q))
            k = rice.k()
            high = zig >> k
            if high >= _RICE_ESCAPE:
                w.write_unary(_RICE_ESCAPE)
                nbits = max(1, zig.bit_length())
                w.write(nbits, 6)
                w.write(zig, nbits)
            else:
                w.write_unary(high)
                w.write(zig, k)
            rice.update(zig)
    val_bytes = w.finish()

    return (
        bytes(head)
        + struct.pack("<I", len(idx_bytes))
        + idx_bytes
        + struct.pack("<I", len(val_bytes))
        + val_bytes
    )


def decode_corrections(buf, d):
    """Inverse of encode_corrections. Returns (records, delta, basis_hash)."""
    if len(buf) < 44:
        raise ErrorBoundError("correction payload truncated")
    basis_hash = bytes(buf[:32])
    (delta,) = struct.unpack_from("<d", buf, 32)
    (num_blocks,) = struct.unpack_from("<I", buf, 40)
    off = 44
    if off + 2 * num_blocks > len(buf):
        raise ErrorBoundError("correction payload truncated")
    counts = np.frombuffer(buf, dtype="<u2", count=num_blocks, offset=off).astype(np.int64)
    off += 2 * num_blocks

    if off + 4 > len(buf):
        raise ErrorBoundError("correction payload truncated")
    (idx_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + idx_len + 4 > len(buf):
        raise ErrorBoundError("correction payload truncated")
    idx_bytes = buf[off : off + idx_len]
    off += idx_len
    (val_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + val_len > len(buf):
        raise ErrorBoundError("correction payload truncated")
    val_bytes = buf[off : off + val_len]

    total = int(counts.sum())
    cum = uniform_cum(d)
    dec = RangeDecoder(idx_bytes)
    flat_idx = np.empty(total, dtype=np.int64)
    for j in range(total):
        flat_idx[j] = dec.decode(cum)

    rice = _AdaptiveRice()
    r = BitReader(val_bytes)
    flat_q = np.empty(total, dtype=np.int64)
    for j in range(total):
        k = rice.k()
        high = r.read_unary()
        if high >= _RICE_ESCAPE:
            nbits = r.read(6)
            zig = r.read(nbits)
        else:
            zig = (high << k) | (r.read(k) if k else 0)
        flat_q[j] = _unzigzag(zig)
        rice.update(zig)

    records = []
    at = 0
    for n in counts:
        records.append((flat_idx[at : at + n], flat_q[at : at + n]))
        at += n
    return records, float(delta), basis_hash
