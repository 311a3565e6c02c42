"""Field I/O, normalization, padding, block partitioning and synthetic data.

A field series is a dense [T, H, W] float32 array plus a small manifest.
On disk it is a raw little-endian .f32 file next to a .json manifest.
"""

import dataclasses
import json
import math
import os

import numpy as np


class DataError(ValueError):
    """Raised for malformed inputs: bad manifests, degenerate ranges, size mismatches."""


@dataclasses.dataclass
class FieldManifest:
    field_name: str
    dims: tuple  # (T, H, W)
    dtype: str = "f32"
    units: str = ""
    domain_tag: str = ""

    def to_dict(self):
        return {
            "field_name": self.field_name,
            "dims": list(self.dims),
            "dtype": self.dtype,
            "units": self.units,
            "domain_tag": self.domain_tag,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            dims = tuple(int(v) for v in d["dims"])
            name = d["field_name"]
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad manifest: {e}") from e
        if len(dims) != 3 or any(v <= 0 for v in dims):
            raise DataError(f"manifest dims must be three positive ints, got {d['dims']}")
        return cls(
            field_name=name,
            dims=dims,
            dtype=d.get("dtype", "f32"),
            units=d.get("units", ""),
            domain_tag=d.get("domain_tag", ""),
        )


@dataclasses.dataclass
class FieldSeries:
    manifest: FieldManifest
    values: np.ndarray  # float32 [T, H, W]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.shape != tuple(self.manifest.dims):
            raise DataError(
                f"values shape {self.values.shape} does not match manifest dims {self.manifest.dims}"
            )


@dataclasses.dataclass
class NormalizationParams:
    mean: float
    range: float

    def to_dict(self):
        return {"mean": self.mean, "range": self.range}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=float(d["mean"]), range=float(d["range"]))


@dataclasses.dataclass
class PadInfo:
    """Amounts appended to the end of each axis, and the pad mode used per axis."""

    orig_dims: tuple
    pad_t: int
    pad_h: int
    pad_w: int
    modes: tuple = ("reflect", "reflect", "reflect")

    def to_dict(self):
        return {
            "orig_dims": list(self.orig_dims),
            "pad": [self.pad_t, self.pad_h, self.pad_w],
            "modes": list(self.modes),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            orig_dims=tuple(d["orig_dims"]),
            pad_t=int(d["pad"][0]),
            pad_h=int(d["pad"][1]),
            pad_w=int(d["pad"][2]),
            modes=tuple(d["modes"]),
        )


def _paths(path):
    """Resolve a .f32, .json or bare basename to the (f32, json) file pair."""
    base, ext = os.path.splitext(path)
    if ext in (".f32", ".json"):
        return base + ".f32", base + ".json"
    return path + ".f32", path + ".json"


def save_field(fs, path):
    """Write <name>.f32 (raw little-endian float32) and <name>.json beside it."""
    f32_path, json_path = _paths(path)
    fs.values.astype("<f4").tofile(f32_path)
    with open(json_path, "w") as fh:
        json.dump(fs.manifest.to_dict(), fh, indent=1)
    return f32_path, json_path


def load_field(path, manifest_path=None):
    f32_path, json_path = _paths(path)
    if manifest_path is not None:
        json_path = manifest_path
    if not os.path.exists(json_path):
        raise DataError(f"manifest not found: {json_path}")
    with open(json_path) as fh:
        try:
            manifest = FieldManifest.from_dict(json.load(fh))
        except json.JSONDecodeError as e:
            raise DataError(f"manifest is not valid JSON: {e}") from e
    if manifest.dtype != "f32":
        raise DataError(f"unsupported dtype {manifest.dtype!r}, only f32 is handled")
    if not os.path.exists(f32_path):
        raise DataError(f"data file not found: {f32_path}")
    n_expect = int(np.prod(manifest.dims))
    raw = np.fromfile(f32_path, dtype="<f4")
    if raw.size != n_expect:
        raise DataError(
            f"data file holds {raw.size} values, manifest dims {manifest.dims} need {n_expect}"
        )
    return FieldSeries(manifest, raw.reshape(manifest.dims))


def normalize(values):
    """Shift by the mean and scale by the value range.

    Returns (normalized float32 array, NormalizationParams). Statistics are
    accumulated in float64. A constant field has no usable range and raises.
    """
    v64 = np.asarray(values, dtype=np.float64)
    lo = float(v64.min())
    hi = float(v64.max())
    rng = hi - lo
    if rng == 0.0:
        raise DataError("degenerate field: max equals min, cannot normalize")
    mean = float(v64.mean())
    out = ((v64 - mean) / rng).astype(np.float32)
    return out, NormalizationParams(mean=mean, range=rng)


def denormalize(values, params):
    """Inverse of normalize. Returns float64 so downstream error math stays exact."""
    return np.asarray(values, dtype=np.float64) * params.range + params.mean


def _pad_axis(values, axis, amount):
    """Append `amount` mirrored samples along axis, replicating edges when the
    axis is too short to mirror without repeating the edge sample."""
    if amount == 0:
        return values, "reflect"
    n = values.shape[axis]
    if amount <= n - 1:
        width = [(0, 0)] * values.ndim
        width[axis] = (0, amount)
        return np.pad(values, width, mode="reflect"), "reflect"
    # short axis fallback: mirror as far as possible, then repeat the edge
    width = [(0, 0)] * values.ndim
    width[axis] = (0, amount)
    return np.pad(values, width, mode="edge"), "replicate"


def reflect_pad(values, multiples=(8, 64, 64)):
    """Pad [T, H, W] at the high end of each axis up to the given multiples.

    Mirror padding without edge repetition; axes shorter than the pad amount
    fall back to edge replication and the fallback is flagged in PadInfo.
    """
    values = np.asarray(values)
    t, h, w = values.shape
    amounts = [(-d) % m for d, m in zip((t, h, w), multiples)]
    out = values
    modes = []
    for axis, amount in enumerate(amounts):
        out, mode = _pad_axis(out, axis, amount)
        modes.append(mode)
    return out, PadInfo(
        orig_dims=(t, h, w),
        pad_t=amounts[0],
        pad_h=amounts[1],
        pad_w=amounts[2],
        modes=tuple(modes),
    )


def unpad(values, pad_info):
    t, h, w = pad_info.orig_dims
    return values[:t, :h, :w]


def partition_blocks(values, hs, ws, bt=8):
    """Split a padded [T, H, W] array into [bt, hs, ws] blocks.

    Returns (blocks [N, bt, hs, ws], origins [N, 3]) in row-major origin order
    (t fastest varying last: ordering is by (t0, h0, w0)).
    """
    t, h, w = values.shape
    if t % bt or h % hs or w % ws:
        raise DataError(f"dims {values.shape} not divisible by block ({bt}, {hs}, {ws})")
    blocks = []
    origins = []
    for t0 in range(0, t, bt):
        for h0 in range(0, h, hs):
            for w0 in range(0, w, ws):
                blocks.append(values[t0 : t0 + bt, h0 : h0 + hs, w0 : w0 + ws])
                origins.append((t0, h0, w0))
    return np.stack(blocks), np.array(origins, dtype=np.int64)


def reassemble_blocks(blocks, origins, dims):
    """Inverse of partition_blocks for the same origin list."""
    out = np.empty(dims, dtype=blocks.dtype)
    bt, hs, ws = blocks.shape[1:]
    for blk, (t0, h0, w0) in zip(blocks, origins):
        out[t0 : t0 + bt, h0 : h0 + hs, w0 : w0 + ws] = blk
    return out


def random_crop_sampler(values, seed, crop_t=8, crop_hw=64):
    """Yield an endless deterministic stream of [crop_t, crop_hw, crop_hw] crops.

    Spatial axes shorter than the crop are mirror-extended first. The stream
    is a pure function of the seed.
    """
    values = np.asarray(values)
    need = (crop_t, crop_hw, crop_hw)
    grow = [max(0, n - d) for d, n in zip(values.shape, need)]
    if any(grow):
        for axis, amount in enumerate(grow):
            values, _ = _pad_axis(values, axis, amount)
    t, h, w = values.shape
    rng = np.random.default_rng(seed)
    while True:
        t0 = int(rng.integers(0, t - crop_t + 1))
        h0 = int(rng.integers(0, h - crop_hw + 1))
        w0 = int(rng.integers(0, w - crop_hw + 1))
        yield values[t0 : t0 + crop_t, h0 : h0 + crop_hw, w0 : w0 + crop_hw]


def balance_schedule(dataset_sizes):
    """Repeat factor per dataset so each contributes the same effective size.

    r_i = ceil(max_size / size_i); effective sizes are then truncated to
    max_size by the consumer.
    """
    if not dataset_sizes:
        return []
    if any(s <= 0 for s in dataset_sizes):
        raise DataError("dataset sizes must be positive")
    biggest = max(dataset_sizes)
    return [math.ceil(biggest / s) for s in dataset_sizes]


@dataclasses.dataclass
class SyntheticSpec:
    kind: str  # traveling_wave | advected_blobs | mixed
    dims: tuple = (8, 64, 64)
    seed: int = 0
    amplitude: float = 1.0
    velocity: float = 2.0  # cells per frame along w, rounded to an integer shift


def _traveling_wave(spec, rng):
    t_n, h_n, w_n = spec.dims
    tt = np.arange(t_n).reshape(-1, 1, 1)
    hh = np.arange(h_n).reshape(1, -1, 1)
    ww = np.arange(w_n).reshape(1, 1, -1)
    v = int(round(spec.velocity))
    out = np.zeros(spec.dims, dtype=np.float64)
    n_comp = int(rng.integers(2, 4))
    for _ in range(n_comp):
        # integer cycle counts keep each component periodic over the grid, so a
        # per-frame shift of v cells is an exact circular shift
        cyc_h = int(rng.integers(1, max(2, h_n // 8)))
        cyc_w = int(rng.integers(1, max(2, w_n // 8)))
        amp = spec.amplitude * float(rng.uniform(0.3, 1.0))
        phase = float(rng.uniform(0, 2 * np.pi))
        arg = 2 * np.pi * (cyc_h * hh / h_n + cyc_w * (ww - v * tt) / w_n) + phase
        out += amp * np.sin(arg)
    return out


def _advected_blobs(spec, rng):
    t_n, h_n, w_n = spec.dims
    hh = np.arange(h_n).reshape(-1, 1)
    ww = np.arange(w_n).reshape(1, -1)
    n_blobs = int(rng.integers(3, 7))
    centers = rng.uniform(0, [h_n, w_n], size=(n_blobs, 2))
    vels = rng.uniform(-spec.velocity, spec.velocity, size=(n_blobs, 2))
    widths = rng.uniform(min(h_n, w_n) / 16, min(h_n, w_n) / 6, size=n_blobs)
    amps = spec.amplitude * rng.uniform(0.4, 1.0, size=n_blobs)
    out = np.zeros(spec.dims, dtype=np.float64)
    for t in range(t_n):
        frame = np.zeros((h_n, w_n))
        for j in range(n_blobs):
            ch = (centers[j, 0] + vels[j, 0] * t) % h_n
            cw = (centers[j, 1] + vels[j, 1] * t) % w_n
            # toroidal distance keeps blobs smooth across the wrap
            dh = np.minimum(np.abs(hh - ch), h_n - np.abs(hh - ch))
            dw = np.minimum(np.abs(ww - cw), w_n - np.abs(ww - cw))
            frame += amps[j] * np.exp(-(dh**2 + dw**2) / (2 * widths[j] ** 2))
        out[t] = frame
    return out


def synthesize_dataset(spec):
    """Deterministic synthetic field series for the given spec and seed."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "traveling_wave":
        vals = _traveling_wave(spec, rng)
    elif spec.kind == "advected_blobs":
        vals = _advected_blobs(spec, rng)
    elif spec.kind == "mixed":
        vals = 0.5 * _traveling_wave(spec, rng) + 0.5 * _advected_blobs(spec, rng)
    else:
        raise DataError(f"unknown synthetic kind {spec.kind!r}")
    manifest = FieldManifest(
        field_name=f"synthetic_{spec.kind}_{spec.seed}",
        dims=spec.dims,
        units="arbitrary",
        domain_tag="synthetic",
    )
    return FieldSeries(manifest, vals.astype(np.float32))
