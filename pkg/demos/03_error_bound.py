"""Show the hard error bound machinery on its own: fit a residual PCA
basis, pick and quantize coefficients per block until the bound holds, and
verify the decoder-side reconstruction never exceeds it.

Run from the repository root:
    python3 demos/03_error_bound.py
"""

import math

import numpy as np

from fieldcodec.errorbound import (
    BLOCK_DIMS,
    apply_correction,
    decode_corrections,
    delta_from_tau,
    encode_corrections,
    fit_pca_basis,
    select_and_quantize,
    tau_from_nrmse,
)


def main():
    rng = np.random.default_rng(1)
    d = int(np.prod(BLOCK_DIMS))

    # Stand-in for neural reconstruction error: smooth blocks plus noise.
    n_blocks = 200
    originals = rng.normal(size=(n_blocks, d)).cumsum(axis=1) * 0.05
    recon = originals + rng.normal(scale=0.02, size=(n_blocks, d))

    basis = fit_pca_basis((originals - recon).reshape(-1, *BLOCK_DIMS))
    print(f"basis: d={basis.d}, top eigenvalues {np.round(basis.eigenvalues[:4], 6)}")

    # tau is the per-block L2 budget implied by a target NRMSE.
    eps, value_range = 1e-3, float(originals.max() - originals.min())
    tau = tau_from_nrmse(eps, value_range, d)
    delta = delta_from_tau(tau, d)
    print(f"eps={eps:g}, range={value_range:.3f} -> tau={tau:.5f}, delta={delta:.2e}")

    records = []
    kept = 0
    for x, xr in zip(originals, recon):
        idx, q = select_and_quantize(x, xr, basis, tau, delta)
        records.append((idx, q))
        kept += len(idx)
    print(f"corrections: {kept / n_blocks:.1f} coefficients/block on average")

    blob = encode_corrections(records, delta, basis.content_hash(), d)
    print(f"coded to {len(blob)} bytes ({8 * len(blob) / max(kept, 1):.2f} bits/coefficient)")

    decoded, dec_delta, _ = decode_corrections(blob, d)
    worst = 0.0
    for (x, xr), (idx, q) in zip(zip(originals, recon), decoded):
        x_g = apply_correction(xr, basis, idx, q, dec_delta).astype(np.float64)
        worst = max(worst, math.sqrt(float(((x - x_g) ** 2).sum())))
    print(f"worst corrected block error {worst:.6f} vs tau {tau:.6f} "
          f"(bound holds: {worst <= tau})")


if __name__ == "__main__":
    main()
