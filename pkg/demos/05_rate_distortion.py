"""Rate-distortion behavior: sweep the error bound on one trained model and
compare spatial block sizes, reproducing the shape of the evaluation
protocol at desk scale.

Takes a few minutes on one CPU core. Run from the repository root:
    python3 demos/05_rate_distortion.py
"""

import torch

from fieldcodec import codec
from fieldcodec.data import SyntheticSpec, synthesize_dataset
from fieldcodec.training import TrainConfig, train_foundation
from fieldcodec.transforms import ModelConfig

torch.set_num_threads(1)


def main():
    datasets = [
        synthesize_dataset(SyntheticSpec("mixed", (8, 128, 128), seed=s)) for s in range(3)
    ]
    cfg = TrainConfig(
        iterations=500,
        batch_size=4,
        crop_hw=64,
        lambda_start=1e-4,
        lambda_end=1e-4,
        lambda_switch=0,
        seed=0,
    )
    print("training (500 iterations)...")
    store, _ = train_foundation(datasets, cfg, model_config=ModelConfig.desk())

    field = synthesize_dataset(SyntheticSpec("mixed", dims=(8, 256, 256), seed=77))

    print("\nerror-bound sweep at block 64:")
    print("  eps        CR       NRMSE      bytes")
    for row in codec.rd_curve(store, field, [1e-2, 1e-3, 1e-4]):
        print(f"  {row['eps']:.0e}  {row['compression_ratio']:7.2f}  "
              f"{row['nrmse']:.3e}  {row['artifact_bytes']}")

    print("\nblock-size sweep at eps=1e-3:")
    for hs in (64, 128, 256):
        blob = codec.compress(store, field, 1e-3, block_hw=(hs, hs))
        back = codec.decompress(store, blob)
        print(f"  block {hs:3d}: CR={codec.compression_ratio(field, blob):7.2f}, "
              f"NRMSE={codec.evaluate_nrmse(field, back):.3e}")


if __name__ == "__main__":
    main()
