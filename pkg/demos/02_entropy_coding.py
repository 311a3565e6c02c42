"""Exercise the entropy coding stack: the range coder against quantized
Gaussian tables, coding efficiency versus table entropy, and the learned
factorized prior used for hyper-latents.

Run from the repository root:
    python3 demos/02_entropy_coding.py
"""

import numpy as np
import torch

from fieldcodec.entropy import (
    FactorizedPrior,
    factorized_cum_tables,
    gaussian_cum_tables,
    pack_tensor_stream,
    unpack_tensor_stream,
)
from fieldcodec.rangecoder import decode_symbols, encode_symbols


def main():
    rng = np.random.default_rng(0)

    # A single Gaussian table: 16-bit cumulative frequencies per symbol.
    table = gaussian_cum_tables(np.zeros(1), np.full(1, 2.0), -16, 16)[0]
    freq = np.diff(table)
    print(f"sigma=2 table over [-16, 16]: {len(freq)} symbols, "
          f"p(0)={freq[16] / 65536:.4f}")

    # Draw symbols from the table's own distribution and code them.
    n = 50_000
    syms = np.searchsorted(table, rng.integers(0, 1 << 16, size=n), side="right") - 1
    data = encode_symbols(syms, table)
    back = decode_symbols(data, table, n)
    p = freq / 65536.0
    entropy = -(p * np.log2(p)).sum()
    print(f"{n} symbols -> {len(data)} bytes "
          f"({8 * len(data) / n:.4f} bits/sym, table entropy {entropy:.4f}), "
          f"lossless={np.array_equal(syms, back)}")

    # The factorized prior is a small learned monotone CDF per channel.
    prior = FactorizedPrior(channels=4)
    with torch.no_grad():
        v = torch.linspace(-8, 8, 5).repeat(4, 1)
        print("prior cdf at [-8..8]:", np.round(prior.cdf(v)[0].numpy(), 4))
    tables = factorized_cum_tables(prior, -8, 8)
    print(f"prior tables: {tables.shape[0]} channels x {tables.shape[1] - 1} symbols")

    # pack_tensor_stream writes a self-describing stream: the decoder
    # rebuilds the same tables from the header's symbol range.
    values = rng.integers(-5, 6, size=4 * 30).astype(np.int64)
    builder = lambda lo, hi: np.repeat(factorized_cum_tables(prior, lo, hi), 30, axis=0)
    stream = pack_tensor_stream(values, builder)
    decoded, _ = unpack_tensor_stream(stream, 0, builder)
    print(f"tensor stream: {len(values)} ints -> {len(stream)} bytes, "
          f"lossless={np.array_equal(values, decoded)}")


if __name__ == "__main__":
    main()
