"""Quantization, likelihood models and coding tables for the latents.

Two probability models feed the range coder: a conditional Gaussian whose
(mu, sigma) come from the hyper path, applied to the main latent, and a
learned per-channel factorized prior applied to the hyper latent. Both are
evaluated as the mass a unit-noise-convolved density puts on each integer.
"""

import copy
import struct

import numpy as np
import scipy.special
import torch
import torch.nn as nn

from .rangecoder import RangeCoderError, decode_symbols, encode_symbols

LIKELIHOOD_FLOOR = 2.0 ** -24
MAX_TABLE_SYMBOLS = 1 << 15
_LOG2 = float(np.log(2.0))


def quantize_round(v):
    """Round half away from zero. Works on numpy arrays and torch tensors."""
    if isinstance(v, torch.Tensor):
        return torch.sign(v) * torch.floor(torch.abs(v) + 0.5)
    v = np.asarray(v)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def add_uniform_noise(v, rng):
    """Training surrogate for rounding: add iid U(-0.5, 0.5)."""
    return v + rng.uniform(-0.5, 0.5, size=np.shape(v))


def noise_like(t, rng):
    """U(-0.5, 0.5) torch tensor shaped like t, drawn from a numpy generator."""
    u = rng.uniform(-0.5, 0.5, size=tuple(t.shape))
    return torch.from_numpy(u).to(dtype=t.dtype)


def gaussian_likelihood_bits(v, mu, sigma):
    """Per-element code length in bits for v under round(N(mu, sigma^2)).

    The mass on integer k is ndtr((k - mu + 0.5) / sigma) minus the same at
    k - 0.5, floored at 2^-24. Differentiable in v, mu and sigma.
    """
    upper = torch.special.ndtr((v - mu + 0.5) / sigma)
    lower = torch.special.ndtr((v - mu - 0.5) / sigma)
    p = torch.clamp(upper - lower, min=LIKELIHOOD_FLOOR)
    return -torch.log(p) / _LOG2


class FactorizedPrior(nn.Module):
    """Learned per-channel density for the hyper latent.

    Each channel owns a small monotone map built from stages of
    positivity-constrained matrices with tanh gating; its sigmoid is a CDF
    and integer masses are CDF differences at half-integer points.
    """

    def __init__(self, channels, filters=(3, 3, 3), init_scale=10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        self.init_scale = float(init_scale)
        widths = (1,) + self.filters + (1,)
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._gates = nn.ParameterList()
        for k in range(len(widths) - 1):
            self._matrices.append(nn.Parameter(torch.empty(channels, widths[k + 1], widths[k])))
            self._biases.append(nn.Parameter(torch.empty(channels, widths[k + 1], 1)))
            if k < len(widths) - 2:
                self._gates.append(nn.Parameter(torch.empty(channels, widths[k + 1], 1)))
        self.reset_parameters()

    def reset_parameters(self, gen=None):
        widths = (1,) + self.filters + (1,)
        scale = self.init_scale ** (1.0 / (len(self.filters) + 1))
        for k, m in enumerate(self._matrices):
            init = float(np.log(np.expm1(1.0 / scale / widths[k + 1])))
            nn.init.constant_(m, init)
        for b in self._biases:
            with torch.no_grad():
                b.uniform_(-0.5, 0.5, generator=gen)
        for a in self._gates:
            nn.init.zeros_(a)

    def _logits(self, x):
        """Monotone map before the sigmoid. x: [C, 1, n] -> [C, 1, n]."""
        out = x
        n_stages = len(self._matrices)
        for k in range(n_stages):
            out = torch.bmm(torch.nn.functional.softplus(self._matrices[k]), out)
            out = out + self._biases[k]
            if k < n_stages - 1:
                out = out + torch.tanh(self._gates[k]) * torch.tanh(out)
        return out

    def cdf(self, x):
        """Cumulative function per channel. x: [C, n] -> [C, n]."""
        return torch.sigmoid(self._logits(x.unsqueeze(1))).squeeze(1)

    def likelihood_bits(self, v):
        """Per-element bits for v shaped [..., C, H, W] (channel axis -3)."""
        shape = v.shape
        c = shape[-3]
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        flat = v.movedim(-3, 0).reshape(c, -1)
        upper = self.cdf(flat + 0.5)
        lower = self.cdf(flat - 0.5)
        p = torch.clamp(upper - lower, min=LIKELIHOOD_FLOOR)
        bits = -torch.log(p) / _LOG2
        return bits.reshape((c,) + shape[:-3] + shape[-2:]).movedim(0, -3)


def quantize_pmf_rows(pmf):
    """Quantize pmf rows to cumulative 16-bit tables.

    pmf: [R, n] nonnegative, each row summing to roughly 1. Every symbol
    receives at least one unit so it stays codable; leftover mass goes to
    the most probable symbol. Returns uint32 [R, n + 1] with cum[-1] = 65536.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    n = pmf.shape[1]
    if n > MAX_TABLE_SYMBOLS:
        raise RangeCoderError(f"symbol range {n} exceeds {MAX_TABLE_SYMBOLS}")
    if n == 0:
        raise RangeCoderError("empty symbol range")
    norm = pmf.sum(axis=1, keepdims=True)
    norm[norm <= 0] = 1.0
    freqs = np.floor(pmf / norm * (65536 - n)).astype(np.int64) + 1
    deficit = 65536 - freqs.sum(axis=1)
    rows = np.arange(len(freqs))
    freqs[rows, np.argmax(freqs, axis=1)] += deficit
    cum = np.zeros((len(freqs), n + 1), dtype=np.uint32)
    np.cumsum(freqs, axis=1, out=cum[:, 1:])
    return cum


def _gaussian_pmf(mu, sigma, sym_min, sym_max):
    """Integer masses on [sym_min, sym_max] with the tails folded into the ends.

    mu, sigma: flat float64 arrays, one row of masses per element.
    """
    ks = np.arange(sym_min, sym_max + 1, dtype=np.float64)
    mu = mu.reshape(-1, 1)
    sigma = sigma.reshape(-1, 1)
    upper = scipy.special.ndtr((ks + 0.5 - mu) / sigma)
    lower = scipy.special.ndtr((ks - 0.5 - mu) / sigma)
    pmf = upper - lower
    pmf[:, 0] += lower[:, 0]
    pmf[:, -1] += 1.0 - upper[:, -1]
    return pmf


def gaussian_cum_tables(mu, sigma, sym_min, sym_max):
    """Per-element coding tables for a Gaussian-conditioned tensor."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if sym_max < sym_min:
        raise RangeCoderError("empty symbol range")
    return quantize_pmf_rows(_gaussian_pmf(mu, sigma, sym_min, sym_max))


def factorized_cum_tables(prior, sym_min, sym_max):
    """Per-channel coding tables from the factorized prior."""
    if sym_max < sym_min:
        raise RangeCoderError("empty symbol range")
    n = sym_max - sym_min + 1
    if n > MAX_TABLE_SYMBOLS:
        raise RangeCoderError(f"symbol range {n} exceeds {MAX_TABLE_SYMBOLS}")
    with torch.no_grad():
        edges = torch.arange(sym_min, sym_max + 2, dtype=torch.float64) - 0.5
        grid = edges.expand(prior.channels, -1)
        cdf = copy.deepcopy(prior).double().cdf(grid).numpy()
    pmf = np.diff(cdf, axis=1)
    pmf[:, 0] += cdf[:, 0]
    pmf[:, -1] += 1.0 - cdf[:, -1]
    return quantize_pmf_rows(pmf)


_STREAM_HEADER = struct.Struct("<IiiI")


def pack_tensor_stream(values, table_builder):
    """Serialize one integer tensor: [n][sym_min][sym_max][byte_len][bytes].

    table_builder(sym_min, sym_max) must return cumulative table rows, one
    per element (2D array) or a shared 1D table. The decoder calls the same
    builder with the header range, so both sides code against identical
    tables.
    """
    values = np.asarray(values, dtype=np.int64).reshape(-1)
    n = values.size
    if n == 0:
        return _STREAM_HEADER.pack(0, 0, 0, 0)
    sym_min = int(values.min())
    sym_max = int(values.max())
    cums = table_builder(sym_min, sym_max)
    body = encode_symbols(values - sym_min, cums)
    return _STREAM_HEADER.pack(n, sym_min, sym_max, len(body)) + body


def unpack_tensor_stream(buf, offset, table_builder):
    """Inverse of pack_tensor_stream. Returns (values, next_offset)."""
    if offset + _STREAM_HEADER.size > len(buf):
        raise RangeCoderError("tensor stream header truncated")
    n, sym_min, sym_max, byte_len = _STREAM_HEADER.unpack_from(buf, offset)
    offset += _STREAM_HEADER.size
    if offset + byte_len > len(buf):
        raise RangeCoderError("tensor stream body truncated")
    body = buf[offset : offset + byte_len]
    offset += byte_len
    if n == 0:
        return np.zeros(0, dtype=np.int64), offset
    cums = table_builder(sym_min, sym_max)
    return decode_symbols(body, cums, n) + sym_min, offset
