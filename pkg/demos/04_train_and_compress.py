"""End to end at desk scale: train a small model on synthetic fields for a
few hundred iterations, then compress, decompress and evaluate.

Takes a minute or two on one CPU core. Run from the repository root:
    python3 demos/04_train_and_compress.py
"""

import time

import torch

from fieldcodec import codec
from fieldcodec.data import SyntheticSpec, synthesize_dataset
from fieldcodec.training import TrainConfig, train_foundation
from fieldcodec.transforms import ModelConfig

torch.set_num_threads(1)


def main():
    datasets = [
        synthesize_dataset(SyntheticSpec("traveling_wave", (8, 96, 96), seed=0)),
        synthesize_dataset(SyntheticSpec("advected_blobs", (8, 96, 96), seed=1)),
    ]
    cfg = TrainConfig(
        iterations=300,
        batch_size=4,
        crop_hw=64,
        lambda_start=1e-4,
        lambda_end=1e-4,
        lambda_switch=0,
        seed=0,
    )
    print("training a desk-scale model (300 iterations)...")
    t0 = time.time()
    store, summary = train_foundation(datasets, cfg, model_config=ModelConfig.desk())
    print(f"  done in {time.time() - t0:.0f} s, "
          f"final mse={summary['final_mse']:.4e}, bpv={summary['final_bits_per_voxel']:.3f}")

    field = synthesize_dataset(SyntheticSpec("mixed", dims=(8, 96, 112), seed=9))
    for eps in (1e-2, 1e-3):
        blob = codec.compress(store, field, eps)
        back = codec.decompress(store, blob)
        nrmse = codec.evaluate_nrmse(field, back)
        info = codec.inspect(blob)
        print(f"eps={eps:g}: {len(blob)} bytes, "
              f"CR={codec.compression_ratio(field, blob):.2f}, NRMSE={nrmse:.2e} "
              f"(bound met: {nrmse <= eps}), sections={info['section_bytes']}")


if __name__ == "__main__":
    main()
