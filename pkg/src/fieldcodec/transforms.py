"""Neural analysis and synthesis transforms plus the checkpoint container.

The encoder alternates per-frame 2D downsampling with 3D spatiotemporal
downsampling into a main latent y. A per-slice 2D hyper path summarizes y
into a side latent z and predicts the (mu, sigma) entropy model for y. The
decoder mirrors the 3D stage and hands quarter-resolution slices to the
spatial upsampler (attention-based by default, plain transposed convs for
the ablation variant).
"""

import dataclasses
import hashlib
import json
import struct
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .entropy import FactorizedPrior, gaussian_likelihood_bits, noise_like, quantize_round
from .errorbound import PcaBasis
from .sr import ChannelLayerNorm, ConvNeXtBlock, PlainUpsampler, SRDecoder


class ModelError(ValueError):
    pass


@dataclasses.dataclass
class ModelConfig:
    channels: int = 32  # encoder width C; y has 2C channels, z has 4C
    sr_features: int = 48
    sr_blocks: int = 4
    use_sr: bool = True
    leaky_slope: float = 0.2
    sigma_floor: float = 1e-6
    prior_filters: tuple = (3, 3, 3)
    prior_init_scale: float = 10.0
    init_seed: int = 0

    def __post_init__(self):
        self.prior_filters = tuple(self.prior_filters)
        if self.channels < 1:
            raise ModelError("channels must be positive")
        if self.sr_features < 4:
            raise ModelError("sr_features must be at least 4")
        if self.sr_blocks < 1:
            raise ModelError("sr_blocks must be at least 1")
        if not 0 < self.sigma_floor < 1:
            raise ModelError("sigma_floor must be in (0, 1)")

    @classmethod
    def desk(cls, **kw):
        """Small configuration that trains in minutes on a laptop core."""
        args = dict(channels=4, sr_features=16, sr_blocks=2)
        args.update(kw)
        return cls(**args)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["prior_filters"] = list(self.prior_filters)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def merge_temporal(frames):
    """Stack per-frame features [N, T, C, h, w] into a volume [N, C, T, h, w]."""
    return frames.movedim(1, 2)


def split_temporal(y):
    """Volume [N, C, T', h, w] into a list of T' slices [N, C, h, w]."""
    return [y[:, :, i] for i in range(y.shape[2])]


def fold_slices(y):
    """[N, C, T', h, w] -> ([N*T', C, h, w], (N, T')). Slice order is
    t-major per sample, so per-slice ops stay independent."""
    n, c, t, h, w = y.shape
    return y.movedim(2, 1).reshape(n * t, c, h, w), (n, t)

def unfold_slices(flat, fold_info):
    n, t = fold_info
    return flat.reshape(n, t, *flat.shape[1:]).movedim(1, 2)


class CodecModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config.channels
        slope = config.leaky_slope
        self.enc2d = nn.Sequential(
            nn.Conv2d(1, c, 5, stride=2, padding=2),
            nn.LeakyReLU(slope),
            nn.Conv2d(c, c, 5, stride=2, padding=2),
            nn.LeakyReLU(slope),
        )
        self.enc3d = nn.Sequential(
            nn.Conv3d(c, 2 * c, 3, stride=2, padding=1),
            nn.LeakyReLU(slope),
            nn.Conv3d(2 * c, 2 * c, 3, stride=2, padding=1),
        )
        self.hyper_enc = nn.Sequential(
            nn.Conv2d(2 * c, 4 * c, 5, stride=2, padding=2),
            nn.LeakyReLU(slope),
            nn.Conv2d(4 * c, 4 * c, 5, stride=2, padding=2),
        )
        self.hyper_dec = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 4 * c, 5, stride=2, padding=2, output_padding=1),
            nn.LeakyReLU(slope),
            nn.ConvTranspose2d(4 * c, 4 * c, 5, stride=2, padding=2, output_padding=1),
        )
        self.syn3d = nn.Sequential(
            nn.ConvTranspose3d(2 * c, 2 * c, 3, stride=2, padding=1, output_padding=1),
            nn.LeakyReLU(slope),
            nn.ConvTranspose3d(2 * c, 2 * c, 3, stride=2, padding=1, output_padding=1),
            nn.LeakyReLU(slope),
        )
        if config.use_sr:
            self.upsampler = SRDecoder(2 * c, config.sr_features, config.sr_blocks, slope)
        else:
            self.upsampler = PlainUpsampler(2 * c, slope)
        self.prior = FactorizedPrior(4 * c, config.prior_filters, config.prior_init_scale)
        init_weights(self, config.init_seed)

    def _check_input(self, x):
        if x.ndim != 4:
            raise ModelError(f"expected [N, T, H, W], got shape {tuple(x.shape)}")
        _, t, h, w = x.shape
        if t % 4 or t < 4:
            raise ModelError(f"T={t} must be a positive multiple of 4")
        if h % 64 or w % 64 or h < 64 or w < 64:
            raise ModelError(f"H={h}, W={w} must be positive multiples of 64")

    def analysis_encode(self, x):
        """[N, T, H, W] -> main latent [N, 2C, T/4, H/16, W/16]."""
        self._check_input(x)
        n, t, h, w = x.shape
        frames = x.reshape(n * t, 1, h, w)
        feat = self.enc2d(frames)
        feat = feat.reshape(n, t, *feat.shape[1:])
        return self.enc3d(merge_temporal(feat))

    def hyper_encode(self, y_slice):
        """One y slice [N', 2C, h, w] -> z slice [N', 4C, h/4, w/4]."""
        return self.hyper_enc(y_slice)

    def hyper_decode(self, z_slice):
        """z slice -> (mu, sigma), each shaped like the y slice."""
        out = self.hyper_dec(z_slice)
        c2 = 2 * self.config.channels
        mu = out[:, :c2]
        sigma = F.softplus(out[:, c2:]) + self.config.sigma_floor
        return mu, sigma

    def synthesis_front(self, y_hat):
        """[N, 2C, T/4, h, w] -> quarter-resolution features [N, 2C, T, 4h, 4w]."""
        return self.syn3d(y_hat)

    def spatial_decode(self, feats):
        """[N, 2C, T, h, w] -> [N, T, 4h, 4w] via the per-slice upsampler."""
        flat, info = fold_slices(feats)
        out = self.upsampler(flat)
        n, t = info
        return out.reshape(n, t, *out.shape[-2:])

    def reconstruct(self, y_hat):
        return self.spatial_decode(self.synthesis_front(y_hat))

    def forward_train(self, x, mode="noise", rng=None):
        """Full rate-distortion forward pass.

        mode "noise" replaces rounding with additive U(-0.5, 0.5) (training,
        differentiable), mode "round" uses real quantization (inference).
        Returns (x_hat, y_bits, z_bits) with bits summed over the batch.
        """
        if mode == "noise":
            if rng is None:
                raise ModelError("noise mode needs an rng")
        elif mode != "round":
            raise ModelError(f"unknown mode {mode!r}")
        y = self.analysis_encode(x)
        y_fold, info = fold_slices(y)
        z = self.hyper_encode(y_fold)
        if mode == "noise":
            y_hat_fold = y_fold + noise_like(y_fold, rng)
            z_hat = z + noise_like(z, rng)
        else:
            y_hat_fold = quantize_round(y_fold)
            z_hat = quantize_round(z)
        mu, sigma = self.hyper_decode(z_hat)
        y_bits = gaussian_likelihood_bits(y_hat_fold, mu, sigma).sum()
        z_bits = self.prior.likelihood_bits(z_hat).sum()
        x_hat = self.reconstruct(unfold_slices(y_hat_fold, info))
        return x_hat, y_bits, z_bits


def param_count(model):
    return sum(p.numel() for p in model.parameters())


def init_weights(model, seed):
    """Deterministic re-initialization of every parameter from one seed.

    Convolutions get kaiming-style uniform fills sized for the leaky slope,
    ConvNeXt projections are re-zeroed for identity passthrough, the prior
    applies its own scheme. Module iteration order is definition order, so
    the draw sequence is stable for a fixed config.
    """
    gen = torch.Generator().manual_seed(int(seed))
    slope = getattr(getattr(model, "config", None), "leaky_slope", 0.2)
    gain = float(np.sqrt(2.0 / (1.0 + slope**2)))
    conv_types = (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, conv_types):
                fan_in = m.weight.shape[1] * int(np.prod(m.kernel_size))
                bound = gain * float(np.sqrt(3.0 / fan_in))
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    b = 1.0 / float(np.sqrt(fan_in))
                    m.bias.uniform_(-b, b, generator=gen)
            elif isinstance(m, ChannelLayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
        for m in model.modules():
            if isinstance(m, ConvNeXtBlock):
                m.project.weight.zero_()
                m.project.bias.zero_()
            elif isinstance(m, FactorizedPrior):
                m.reset_parameters(gen)


CHECKPOINT_MAGIC = b"FMCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_f32_array(out, name, arr):
    name_b = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    out += struct.pack("<H", len(name_b))
    out += name_b
    out += struct.pack("<B", arr.ndim)
    for dim in arr.shape:
        out += struct.pack("<I", dim)
    out += arr.astype("<f4").tobytes()


def _read_f32_array(buf, off):
    (name_len,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = buf[off : off + name_len].decode("utf-8")
    off += name_len
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    shape = []
    for _ in range(ndim):
        (dim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape.append(dim)
    n = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).copy()
    off += 4 * n
    return name, arr, off


@dataclasses.dataclass
class WeightStore:
    """Serializable snapshot of a model: config, named float32 parameter
    arrays, and optional assets (correction basis, training state)."""

    config: ModelConfig
    params: OrderedDict
    pca_basis: PcaBasis = None
    train_state: dict = None  # {"meta": {...}, "arrays": {name: float32 array}}

    @classmethod
    def from_model(cls, model, pca_basis=None, train_state=None):
        params = OrderedDict(
            (k, v.detach().cpu().numpy().astype(np.float32))
            for k, v in model.state_dict().items()
        )
        return cls(model.config, params, pca_basis, train_state)

    def build_model(self, dtype=torch.float32):
        model = CodecModel(self.config)
        state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in self.params.items()}
        model.load_state_dict(state)
        return model.to(dtype)

    def content_hash(self):
        """Hex sha256 over all parameter names, shapes and float32 payloads."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = self.params[name]
            h.update(name.encode("utf-8"))
            h.update(struct.pack("<B", arr.ndim))
            h.update(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def save(self, path):
        out = bytearray()
        out += CHECKPOINT_MAGIC
        out += struct.pack("<H", CHECKPOINT_VERSION)
        cfg = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        out += struct.pack("<I", len(cfg))
        out += cfg
        out += struct.pack("<I", len(self.params))
        for name, arr in self.params.items():
            _write_f32_array(out, name, arr)
        if self.pca_basis is not None:
            out += b"\x01"
            out += struct.pack("<3I", *self.pca_basis.block_dims)
            d = self.pca_basis.d
            out += struct.pack("<I", d)
            out += np.ascontiguousarray(self.pca_basis.matrix, dtype="<f8").tobytes()
            out += np.ascontiguousarray(self.pca_basis.eigenvalues, dtype="<f8").tobytes()
        else:
            out += b"\x00"
        if self.train_state is not None:
            out += b"\x01"
            meta = json.dumps(self.train_state.get("meta", {}), sort_keys=True).encode("utf-8")
            out += struct.pack("<I", len(meta))
            out += meta
            arrays = self.train_state.get("arrays", {})
            out += struct.pack("<I", len(arrays))
            for name, arr in arrays.items():
                _write_f32_array(out, name, arr)
        else:
            out += b"\x00"
        with open(path, "wb") as fh:
            fh.write(out)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 6
        (cfg_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        config = ModelConfig.from_dict(json.loads(buf[off : off + cfg_len]))
        off += cfg_len
        (n_params,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = OrderedDict()
        for _ in range(n_params):
            name, arr, off = _read_f32_array(buf, off)
            params[name] = arr
        basis = None
        has_basis = buf[off]
        off += 1
        if has_basis:
            block_dims = struct.unpack_from("<3I", buf, off)
            off += 12
            (d,) = struct.unpack_from("<I", buf, off)
            off += 4
            matrix = np.frombuffer(buf, dtype="<f8", count=d * d, offset=off).reshape(d, d).copy()
            off += 8 * d * d
            evals = np.frombuffer(buf, dtype="<f8", count=d, offset=off).copy()
            off += 8 * d
            basis = PcaBasis(tuple(block_dims), matrix, evals)
        train_state = None
        has_train = buf[off]
        off += 1
        if has_train:
            (meta_len,) = struct.unpack_from("<I", buf, off)
            off += 4
            meta = json.loads(buf[off : off + meta_len])
            off += meta_len
            (n_arrays,) = struct.unpack_from("<I", buf, off)
            off += 4
            arrays = OrderedDict()
            for _ in range(n_arrays):
                name, arr, off = _read_f32_array(buf, off)
                arrays[name] = arr
            train_state = {"meta": meta, "arrays": arrays}
        return cls(config, params, basis, train_state)
