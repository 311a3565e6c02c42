"""Command-line surface: train, finetune, compress, decompress, eval, synth,
rd-curve, inspect.

Usage errors exit 2 (argparse default). Data, model and codec errors exit 1
after printing a single machine-readable JSON line to stderr.
"""

import argparse
import json
import sys
import time

import numpy as np

from . import codec
from .data import (
    DataError,
    FieldSeries,
    SyntheticSpec,
    load_field,
    save_field,
    synthesize_dataset,
)
from .errorbound import ErrorBoundError
from .rangecoder import RangeCoderError
from .training import (
    TrainConfig,
    TrainError,
    fine_tune,
    train_foundation,
)
from .transforms import CheckpointError, ModelConfig, ModelError, WeightStore

_HANDLED_ERRORS = (
    DataError,
    ModelError,
    CheckpointError,
    TrainError,
    ErrorBoundError,
    RangeCoderError,
    codec.CodecError,
    OSError,
)


def _parse_dims(text):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise DataError(f"dims must look like 8x64x64, got {text!r}")
    if len(dims) != 3:
        raise DataError(f"dims must have three axes, got {text!r}")
    return dims


def _parse_block(text):
    parts = text.lower().split("x")
    try:
        vals = [int(v) for v in parts]
    except ValueError:
        raise DataError(f"block must look like 64 or 64x128, got {text!r}")
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) == 2:
        return vals[0], vals[1]
    raise DataError(f"block must have one or two sizes, got {text!r}")


def _parse_eps_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise DataError(f"--nrmse must be a number or comma list, got {text!r}")


def _load_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path} is not valid JSON: {e}") from e


def _load_datasets(entries):
    """Dataset list entries: a path string, or a synthetic-spec object."""
    if not entries:
        raise DataError("config lists no datasets")
    out = []
    for entry in entries:
        if isinstance(entry, str):
            out.append(load_field(entry))
        elif isinstance(entry, dict):
            spec = SyntheticSpec(
                kind=entry.get("kind", "mixed"),
                dims=tuple(entry.get("dims", (8, 64, 64))),
                seed=int(entry.get("seed", 0)),
                amplitude=float(entry.get("amplitude", 1.0)),
                velocity=float(entry.get("velocity", 2.0)),
            )
            out.append(synthesize_dataset(spec))
        else:
            raise DataError(f"bad dataset entry {entry!r}")
    return out


def _train_pieces(args, need_model=True):
    cfg_json = _load_json(args.config)
    datasets = _load_datasets(cfg_json.get("datasets", []))
    train_kw = dict(cfg_json.get("train", {}))
    if args.seed is not None:
        train_kw["seed"] = args.seed
    model_config = None
    if need_model and "model" in cfg_json:
        model_config = ModelConfig.from_dict(cfg_json["model"])
    return datasets, train_kw, model_config


def _make_train_config(train_kw, fine=False):
    try:
        if fine:
            return TrainConfig.fine_tune_defaults(**train_kw)
        return TrainConfig(**train_kw)
    except TypeError as e:
        raise DataError(f"bad train config: {e}") from e


def _cmd_train(args):
    datasets, train_kw, model_config = _train_pieces(args)
    cfg = _make_train_config(train_kw)
    resume = WeightStore.load(args.ckpt) if args.ckpt else None
    store, summary = train_foundation(
        datasets, cfg, model_config=model_config, workdir=args.workdir, resume_store=resume
    )
    store.save(args.out)
    print(json.dumps(summary))
    return 0


def _cmd_finetune(args):
    datasets, train_kw, _ = _train_pieces(args, need_model=False)
    cfg = _make_train_config(train_kw, fine=True)
    base = WeightStore.load(args.ckpt)
    store, summary = fine_tune(base, datasets, cfg, workdir=args.workdir)
    store.save(args.out)
    print(json.dumps(summary))
    return 0


def _cmd_compress(args):
    store = WeightStore.load(args.ckpt)
    fs = load_field(args.input, manifest_path=args.manifest)
    t0 = time.time()
    blob = codec.compress(store, fs, args.nrmse, block_hw=_parse_block(args.block))
    dt = time.time() - t0
    with open(args.out, "wb") as fh:
        fh.write(blob)
    print(
        json.dumps(
            {
                "artifact": args.out,
                "bytes": len(blob),
                "compression_ratio": codec.compression_ratio(fs, blob),
                "seconds": round(dt, 3),
            }
        )
    )
    return 0


def _cmd_decompress(args):
    store = WeightStore.load(args.ckpt)
    with open(args.input, "rb") as fh:
        blob = fh.read()
    t0 = time.time()
    fs = codec.decompress(store, blob)
    dt = time.time() - t0
    f32_path, json_path = save_field(fs, args.out)
    print(json.dumps({"data": f32_path, "manifest": json_path, "seconds": round(dt, 3)}))
    return 0


def _cmd_eval(args):
    store = WeightStore.load(args.ckpt)
    fs = load_field(args.input, manifest_path=args.manifest)
    with open(args.artifact, "rb") as fh:
        blob = fh.read()
    t0 = time.time()
    back = codec.decompress(store, blob)
    dt = time.time() - t0
    info = codec.inspect(blob)
    n = int(np.prod(fs.manifest.dims))
    report = {
        "nrmse": codec.evaluate_nrmse(fs, back),
        "compression_ratio": codec.compression_ratio(fs, blob),
        "bits_per_voxel": 8.0 * len(blob) / n,
        "sections": info["section_bytes"],
        "decode_seconds": round(dt, 3),
    }
    text = json.dumps(report, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_synth(args):
    spec = SyntheticSpec(kind=args.kind, dims=_parse_dims(args.dims), seed=args.seed or 0)
    fs = synthesize_dataset(spec)
    f32_path, json_path = save_field(fs, args.out)
    print(json.dumps({"data": f32_path, "manifest": json_path, "dims": list(fs.manifest.dims)}))
    return 0


def _cmd_rd_curve(args):
    store = WeightStore.load(args.ckpt)
    fs = load_field(args.input, manifest_path=args.manifest)
    eps_list = _parse_eps_list(args.nrmse)
    if not eps_list:
        raise DataError("--nrmse lists no operating points")
    rows = codec.rd_curve(store, fs, eps_list, block_hw=_parse_block(args.block))
    lines = ["eps,compression_ratio,nrmse,artifact_bytes"]
    for r in rows:
        lines.append(
            f"{r['eps']:.6e},{r['compression_ratio']:.6f},{r['nrmse']:.6e},{r['artifact_bytes']}"
        )
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_inspect(args):
    with open(args.input, "rb") as fh:
        blob = fh.read()
    info = codec.inspect(blob)
    text = json.dumps(info, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fieldcodec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True, help="JSON: datasets, train, model sections")
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--ckpt", default=None, help="resume from this checkpoint")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--workdir", default=None, help="where to write logs")
    t.set_defaults(func=_cmd_train)

    f = sub.add_parser("finetune", help="continue training from a checkpoint")
    f.add_argument("--config", required=True)
    f.add_argument("--ckpt", required=True, help="base checkpoint")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--workdir", default=None)
    f.set_defaults(func=_cmd_finetune)

    c = sub.add_parser("compress", help="compress a field to an artifact")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--input", required=True, help="field data (.f32 path or basename)")
    c.add_argument("--manifest", default=None, help="manifest path if not <input>.json")
    c.add_argument("--nrmse", type=float, required=True, help="error bound epsilon")
    c.add_argument("--block", default="64", help="spatial block size, e.g. 64 or 128x64")
    c.add_argument("--out", required=True, help="artifact path to write")
    c.set_defaults(func=_cmd_compress)

    d = sub.add_parser("decompress", help="decode an artifact back to a field")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--input", required=True, help="artifact path")
    d.add_argument("--out", required=True, help="output field basename")
    d.set_defaults(func=_cmd_decompress)

    e = sub.add_parser("eval", help="report nrmse and ratio for an artifact")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--input", required=True, help="original field")
    e.add_argument("--manifest", default=None)
    e.add_argument("--artifact", required=True)
    e.add_argument("--out", default=None, help="optional report JSON path")
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic field")
    s.add_argument("--kind", default="mixed", choices=["traveling_wave", "advected_blobs", "mixed"])
    s.add_argument("--dims", default="8x64x64", help="TxHxW")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output field basename")
    s.set_defaults(func=_cmd_synth)

    r = sub.add_parser("rd-curve", help="sweep error bounds, emit CSV")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--manifest", default=None)
    r.add_argument("--nrmse", required=True, help="comma list, e.g. 1e-2,1e-3,1e-4")
    r.add_argument("--block", default="64")
    r.add_argument("--out", default=None, help="optional CSV path")
    r.set_defaults(func=_cmd_rd_curve)

    i = sub.add_parser("inspect", help="dump artifact header and section sizes")
    i.add_argument("--input", required=True, help="artifact path")
    i.add_argument("--out", default=None)
    i.set_defaults(func=_cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _HANDLED_ERRORS as e:
        print(json.dumps({"error": str(e), "kind": type(e).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
