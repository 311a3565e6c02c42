"""Rate-distortion training: schedules, loss, foundation and fine-tune loops.

The loop is deterministic for a fixed seed: every iteration derives its own
numpy generator from (seed, iteration), which drives dataset choice, crop
origins and quantization noise. Resuming from a checkpoint therefore lands
on the same trajectory bit for bit.
"""

import dataclasses
import json
import os
from collections import OrderedDict

import numpy as np
import torch

from .data import balance_schedule, normalize, partition_blocks
from .errorbound import BLOCK_DIMS, fit_pca_basis
from .transforms import CodecModel, ModelConfig, WeightStore


class TrainError(ValueError):
    pass


@dataclasses.dataclass
class TrainConfig:
    iterations: int = 500_000
    batch_size: int = 8
    crop_t: int = 8
    crop_hw: int = 256
    base_lr: float = 1e-3
    lr_halving_period: int = 100_000
    lambda_start: float = 1e-5
    lambda_end: float = 1e-4
    lambda_switch: int = 250_000
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 100
    val_every: int = 500

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.iterations < 1 or self.batch_size < 1:
            raise TrainError("iterations and batch_size must be positive")

    @classmethod
    def fine_tune_defaults(cls, **kw):
        args = dict(
            iterations=100_000,
            base_lr=1e-4,
            lr_halving_period=20_000,
            lambda_start=1e-4,
            lambda_end=1e-4,
            lambda_switch=0,
        )
        args.update(kw)
        return cls(**args)


def lambda_schedule(iteration, cfg):
    """Rate weight: lambda_start before the switch iteration, lambda_end after."""
    return cfg.lambda_start if iteration < cfg.lambda_switch else cfg.lambda_end


def lr_schedule(iteration, cfg):
    """Learning rate halves every lr_halving_period iterations."""
    return cfg.base_lr * 0.5 ** (iteration // cfg.lr_halving_period)


def rd_loss(x, x_hat, y_bits, z_bits, lam):
    """loss = MSE + lambda * rate, rate in bits per voxel.

    Returns (loss, mse, bits_per_voxel) as 0-dim tensors.
    """
    mse = torch.mean((x - x_hat) ** 2)
    bpv = (y_bits + z_bits) / x.numel()
    return mse + lam * bpv, mse, bpv


def _iteration_rng(seed, iteration):
    return np.random.default_rng([int(seed), int(iteration)])


def _prepare_arrays(datasets):
    """Normalize each dataset and report crop-grid sizes for balancing."""
    arrays = []
    sizes = []
    for fs in datasets:
        arr, _ = normalize(fs.values)
        arrays.append(arr)
        t, h, w = arr.shape
        sizes.append(max(1, (t // 8) * max(1, h // 64) * max(1, w // 64)))
    return arrays, sizes


def _sample_batch(arrays, rng, cfg):
    """Batch of random crops, datasets drawn uniformly.

    With repeat factors from balance_schedule every dataset contributes the
    same effective instance count, so under random cropping the balanced
    pool collapses to a uniform draw over datasets.
    """
    out = np.empty((cfg.batch_size, cfg.crop_t, cfg.crop_hw, cfg.crop_hw), dtype=np.float32)
    for b in range(cfg.batch_size):
        arr = arrays[int(rng.integers(len(arrays)))]
        t, h, w = arr.shape
        if t < cfg.crop_t or h < cfg.crop_hw or w < cfg.crop_hw:
            raise TrainError(
                f"dataset {arr.shape} smaller than crop "
                f"({cfg.crop_t}, {cfg.crop_hw}, {cfg.crop_hw})"
            )
        t0 = int(rng.integers(0, t - cfg.crop_t + 1))
        h0 = int(rng.integers(0, h - cfg.crop_hw + 1))
        w0 = int(rng.integers(0, w - cfg.crop_hw + 1))
        out[b] = arr[t0 : t0 + cfg.crop_t, h0 : h0 + cfg.crop_hw, w0 : w0 + cfg.crop_hw]
    return torch.from_numpy(out)


def train_step(model, opt, batch, lam, rng):
    """One noise-mode gradient step. Returns (loss, mse, bpv) floats."""
    x_hat, y_bits, z_bits = model.forward_train(batch, mode="noise", rng=rng)
    loss, mse, bpv = rd_loss(batch, x_hat, y_bits, z_bits, lam)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach()), float(mse.detach()), float(bpv.detach())


def evaluate_rd(model, blocks):
    """Round-mode rate-distortion on a stack of blocks [M, T, H, W].

    Returns (mse, bits_per_voxel) averaged over the stack.
    """
    x = torch.as_tensor(np.asarray(blocks, dtype=np.float32))
    with torch.no_grad():
        x_hat, y_bits, z_bits = model.forward_train(x, mode="round")
        _, mse, bpv = rd_loss(x, x_hat, y_bits, z_bits, 0.0)
    return float(mse), float(bpv)


def fit_residual_basis(model, blocks, block_dims=BLOCK_DIMS):
    """Correction basis from round-mode residuals on normalized blocks."""
    x = torch.as_tensor(np.asarray(blocks, dtype=np.float32))
    with torch.no_grad():
        x_hat, _, _ = model.forward_train(x, mode="round")
    residual = (x - x_hat).numpy().astype(np.float64)
    pieces = []
    for res in residual:
        sub, _ = partition_blocks(res, hs=block_dims[1], ws=block_dims[2], bt=block_dims[0])
        pieces.append(sub)
    return fit_pca_basis(np.concatenate(pieces), block_dims)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _harvest_train_state(model, opt, iteration):
    arrays = OrderedDict()
    steps = {}
    for name, p in model.named_parameters():
        state = opt.state.get(p)
        if state is None:
            continue
        arrays["m." + name] = state["exp_avg"].detach().numpy().astype(np.float32)
        arrays["v." + name] = state["exp_avg_sq"].detach().numpy().astype(np.float32)
        steps[name] = float(state["step"])
    return {"meta": {"iteration": iteration, "adam_steps": steps}, "arrays": arrays}


def _restore_train_state(model, opt, train_state):
    arrays = train_state["arrays"]
    steps = train_state["meta"].get("adam_steps", {})
    for name, p in model.named_parameters():
        key = "m." + name
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(steps.get(name, 0.0))),
            "exp_avg": torch.from_numpy(np.array(arrays[key])).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(np.array(arrays["v." + name])).to(p.dtype),
        }


def _run(model, datasets, cfg, workdir, val_blocks, start, restore_state, log_name, extra_meta):
    arrays, sizes = _prepare_arrays(datasets)
    balance_schedule(sizes)  # validates sizes; see _sample_batch for the draw
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.base_lr, betas=cfg.adam_betas, eps=cfg.adam_eps
    )
    if restore_state is not None:
        _restore_train_state(model, opt, restore_state)
    log_rows = []
    val_rows = []
    last = (float("nan"),) * 3
    for it in range(start, cfg.iterations):
        rng = _iteration_rng(cfg.seed, it)
        lam = lambda_schedule(it, cfg)
        lr = lr_schedule(it, cfg)
        _set_lr(opt, lr)
        batch = _sample_batch(arrays, rng, cfg)
        loss, mse, bpv = train_step(model, opt, batch, lam, rng)
        last = (loss, mse, bpv)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            log_rows.append(f"{it},{lam:.3e},{lr:.3e},{mse:.6e},{bpv:.6e},{loss:.6e}")
        if val_blocks is not None and (it % cfg.val_every == 0 or it == cfg.iterations - 1):
            vm, vb = evaluate_rd(model, val_blocks)
            val_rows.append(f"{it},{lam:.3e},{lr:.3e},{vm:.6e},{vb:.6e},nan")

    if val_blocks is not None:
        basis_blocks = np.asarray(val_blocks, dtype=np.float32)
    else:
        basis_rng = _iteration_rng(cfg.seed, cfg.iterations + 1)
        basis_blocks = _sample_batch(arrays, basis_rng, dataclasses.replace(cfg, batch_size=8)).numpy()
    basis = fit_residual_basis(model, basis_blocks)
    train_state = _harvest_train_state(model, opt, cfg.iterations)
    train_state["meta"].update(extra_meta)
    store = WeightStore.from_model(model, pca_basis=basis, train_state=train_state)

    summary = {
        "iterations": cfg.iterations,
        "final_loss": last[0],
        "final_mse": last[1],
        "final_bits_per_voxel": last[2],
        "batch_size": cfg.batch_size,
        "crop": [cfg.crop_t, cfg.crop_hw, cfg.crop_hw],
        "seed": cfg.seed,
        "content_hash": store.content_hash(),
    }
    summary.update(extra_meta)
    if workdir is not None:
        os.makedirs(workdir, exist_ok=True)
        header = "iteration,lambda,lr,mse,bits_per_voxel,loss\n"
        with open(os.path.join(workdir, log_name + ".csv"), "w") as fh:
            fh.write(header + "\n".join(log_rows) + "\n")
        if val_rows:
            with open(os.path.join(workdir, log_name + "_val.csv"), "w") as fh:
                fh.write(header + "\n".join(val_rows) + "\n")
        with open(os.path.join(workdir, log_name + ".json"), "w") as fh:
            json.dump(summary, fh, indent=1)
    return store, summary


def train_foundation(datasets, cfg, model_config=None, workdir=None, val_blocks=None, resume_store=None):
    """Train from scratch (or resume a run) on a mix of datasets.

    Returns (WeightStore, summary). The store carries a correction basis
    fitted on round-mode residuals of val_blocks (or held-out crops when no
    validation set is given) plus optimizer state for exact resumption.
    """
    if not datasets:
        raise TrainError("need at least one dataset")
    if resume_store is not None:
        model = resume_store.build_model()
        start = 0
        restore = resume_store.train_state
        if restore is not None:
            start = int(restore["meta"].get("iteration", 0))
    else:
        model = CodecModel(model_config or ModelConfig())
        start = 0
        restore = None
    return _run(model, datasets, cfg, workdir, val_blocks, start, restore, "train_log", {})


def fine_tune(base_store, datasets, cfg, workdir=None, val_blocks=None):
    """Continue from a foundation checkpoint on target-domain data.

    The returned store records the base checkpoint hash so the provenance
    chain survives further tuning rounds.
    """
    model = base_store.build_model()
    meta = {"base_hash": base_store.content_hash()}
    return _run(model, datasets, cfg, workdir, val_blocks, 0, None, "finetune_log", meta)
