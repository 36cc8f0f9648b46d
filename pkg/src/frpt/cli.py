"""Command-line surface: reproducible experiments and file artifacts.

Subcommands cover the whole pipeline: ``synth`` materializes a synthetic
dataset, ``pretrain`` fits a baseline, ``recon`` precomputes feature
targets, ``posttrain``/``compare`` run the sweeps, ``eval`` scores a
checkpoint, ``heatmap`` exports deviation images.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 solver
failure, 5 artifact/config inconsistency.
"""

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .container import config_digest, file_digest
from .data import (
    instance_normalize,
    load_idx,
    load_labeled_dataset,
    save_labeled_dataset,
    synth_dataset,
)
from .exceptions import (
    BadMagic,
    ConfigMismatch,
    CountMismatch,
    FrptError,
    LabelOutOfRange,
    MissingReconTargets,
    NotPositiveDefinite,
    RankDeficient,
    RankDeficientFrequency,
    ReconstructionError,
    ShapeMismatch,
    TruncatedFile,
)
from .network import build_network, evaluate, forward_trace, load_checkpoint, save_checkpoint
from .posttrain import (
    PostTrainConfig,
    SweepReport,
    build_recon_dataset,
    deviation_heatmap,
    pretrain,
    run_posttrain,
)
from .reconstruct import load_recon_dataset, reconstruct_chain, save_recon_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SOLVER = 4
EXIT_CONSISTENCY = 5


class _ConfigError(Exception):
    pass


def _load_json_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise _ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise _ConfigError(f"invalid JSON in {path}: {exc}") from exc


def _load_split(data_dir, split, limit=None):
    """Resolve a dataset directory to a normalized split.

    Accepts either the IDX layout (train-*/t10k-* file pairs) or the
    container layout (train.frsy / test.frsy).
    """
    root = Path(data_dir)
    idx_names = {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }[split]
    idx_images = root / idx_names[0]
    frsy = root / f"{split}.frsy"
    if idx_images.exists():
        dataset = load_idx(idx_images, root / idx_names[1])
    elif frsy.exists():
        dataset = load_labeled_dataset(frsy)
    else:
        raise FileNotFoundError(f"no {split} split under {root} "
                                f"(looked for {idx_names[0]} and {frsy.name})")
    if limit is not None and limit < len(dataset):
        dataset = dataset.subset(np.arange(limit))
    return instance_normalize(dataset)


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _atomic_write_text(path, text):
    _ensure_parent(path)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _atomic_write_bytes(path, payload):
    _ensure_parent(path)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _write_manifest(out_path, command, config, inputs, outputs, seeds, started):
    manifest = {
        "tool": f"frpt {__version__}",
        "command": command,
        "config": config,
        "config_digest": config_digest(config),
        "inputs": {str(k): file_digest(k) for k in inputs if Path(k).exists()},
        "outputs": {str(k): file_digest(k) for k in outputs if Path(k).exists()},
        "seeds": list(seeds),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = Path(str(out_path) + ".manifest.json")
    _atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_seeds(text):
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip() != "")
    except ValueError as exc:
        raise _ConfigError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise _ConfigError("seed list is empty")
    return seeds


def _parse_epoch_list(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip() != "")
    except ValueError as exc:
        raise _ConfigError(f"bad epoch list {text!r}") from exc


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    train = synth_dataset(args.classes, args.per_class, args.height, args.width,
                          seed=args.seed, channels=args.channels,
                          blob_sigma=args.blob_sigma, noise=args.noise)
    test = synth_dataset(args.classes, args.test_per_class, args.height, args.width,
                         seed=args.seed + 1, channels=args.channels,
                         blob_sigma=args.blob_sigma, noise=args.noise)
    train_path = out / "train.frsy"
    test_path = out / "test.frsy"
    save_labeled_dataset(train, train_path)
    save_labeled_dataset(test, test_path)
    config = {k: getattr(args, k) for k in
              ("classes", "per_class", "test_per_class", "height", "width",
               "channels", "seed", "blob_sigma", "noise")}
    _write_manifest(out / "synth", "synth", config, [], [train_path, test_path],
                    [args.seed], started)
    print(f"wrote {train_path} ({len(train)} instances) and {test_path} ({len(test)})")
    return EXIT_OK


def cmd_pretrain(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    config = _load_json_config(args.config)
    try:
        architecture = config["architecture"]
        epochs = int(config.get("epochs", 10))
        seed = int(config.get("seed", 0))
        batch_size = int(config.get("batch_size", 256))
        lr = float(config.get("lr", 0.001))
    except (KeyError, TypeError, ValueError) as exc:
        raise _ConfigError(f"bad pretrain config: {exc}") from exc
    train = _load_split(args.data, "train", config.get("limit_train"))
    test = _load_split(args.data, "test", config.get("limit_test"))
    net = build_network(architecture, seed=seed)

    out = Path(args.out)
    _ensure_parent(out)
    snapshots = []

    def on_epoch(epoch, model, accuracy):
        print(f"epoch {epoch} accuracy {accuracy:.3f}")
        if args.snapshot_every and epoch % args.snapshot_every == 0:
            snap = out.with_name(f"{out.stem}.epoch{epoch:03d}{out.suffix}")
            save_checkpoint(model, snap)
            snapshots.append(snap)

    pretrain(net, train, test, epochs=epochs, batch_size=batch_size, lr=lr,
             seed=seed, epoch_callback=on_epoch)
    save_checkpoint(net, out)
    _write_manifest(out, "pretrain", config, [args.config], [out] + snapshots,
                    [seed], started)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_recon(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    net = load_checkpoint(args.model)
    data = _load_split(args.data, args.split, args.limit)
    recon, diagnostics = build_recon_dataset(
        net, data, args.lr, method=args.embed,
        source_digest=file_digest(args.model))
    for unit, value in diagnostics.items():
        print(f"unit {unit} mean forward-consistency error {value:.3e}")
    _ensure_parent(args.out)
    save_recon_dataset(recon, args.out)
    config = {"model": str(args.model), "l_r": args.lr, "embed": args.embed,
              "split": args.split, "limit": args.limit}
    _write_manifest(args.out, "recon", config, [args.model], [args.out], [], started)
    print(f"wrote {args.out} ({len(recon)} targets, unit {recon.l_r}, {recon.method})")
    return EXIT_OK


def cmd_posttrain(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    net = load_checkpoint(args.model)
    train = _load_split(args.data, "train", args.limit_train)
    test = _load_split(args.data, "test", args.limit_test)
    seeds = _parse_seeds(args.seeds)
    config = PostTrainConfig(
        mode=args.mode, l_s=args.l_s, l_r=args.l_r, alpha=args.alpha,
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr_rate,
        seeds=seeds, embed_method=args.embed,
        record_epochs=_parse_epoch_list(args.record))
    recon = None
    if args.mode == "fr":
        if not args.recon:
            raise _ConfigError("--recon is required in fr mode")
        recon = load_recon_dataset(args.recon)
        if args.limit_train is not None and len(recon) > len(train):
            recon.targets = recon.targets[: len(train)]
    outputs = []
    snapshot = None
    if args.save_models:
        model_dir = Path(args.save_models)
        model_dir.mkdir(parents=True, exist_ok=True)

        def snapshot(seed, epoch, model, accuracy):
            path = model_dir / (f"{args.mode}_{args.l_s}_{args.l_r}"
                                f"_seed{seed}_epoch{epoch:03d}.frpt")
            save_checkpoint(model, path)
            outputs.append(path)

    report = SweepReport()
    entry, _ = run_posttrain(net, config, train, test, recon=recon,
                             epoch_callback=snapshot)
    report.add(entry)
    for epoch in entry.epochs_recorded():
        mean, std = entry.mean_std(epoch)
        print(f"{args.mode}({args.l_s},{args.l_r}) epoch {epoch} "
              f"accuracy {mean:.3f} +/- {std:.3f}")
    if args.out_csv:
        _atomic_write_text(args.out_csv, report.render_raw())
        outputs.append(args.out_csv)
        agg = args.out_aggregate or str(Path(args.out_csv).with_suffix(".agg.csv"))
        _atomic_write_text(agg, report.render_aggregate())
        outputs.append(agg)
    cli_config = {"mode": args.mode, "l_s": args.l_s, "l_r": args.l_r,
                  "alpha": args.alpha, "epochs": args.epochs,
                  "batch_size": args.batch_size, "lr": args.lr_rate,
                  "embed": args.embed, "seeds": list(seeds)}
    anchor = args.out_csv or str(Path(args.model).with_suffix(".posttrain"))
    _write_manifest(anchor, "posttrain", cli_config,
                    [args.model] + ([args.recon] if args.recon else []),
                    outputs, seeds, started)
    return EXIT_OK


def cmd_eval(args):
    net = load_checkpoint(args.model)
    data = _load_split(args.data, args.split, args.limit)
    print(f"accuracy {evaluate(net, data):.3f}")
    return EXIT_OK


def _scale_to_bytes(matrix):
    low = matrix.min()
    high = matrix.max()
    # A spread at solver-noise level is indistinguishable from zero.
    if high - low <= 1e-9 * max(1.0, abs(high)):
        return np.zeros(matrix.shape, dtype=np.uint8)
    return np.round((matrix - low) / (high - low) * 255.0).astype(np.uint8)


def _write_pgm(path, matrix):
    payload = _scale_to_bytes(matrix)
    h, w = payload.shape
    _atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + payload.tobytes())


def cmd_heatmap(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    net = load_checkpoint(args.model)
    data = _load_split(args.data, args.split)
    if not 0 <= args.instance < len(data):
        raise _ConfigError(f"instance {args.instance} outside dataset of {len(data)}")
    batch = data.images[args.instance : args.instance + 1]
    label = data.labels[args.instance : args.instance + 1]
    trace = forward_trace(net, batch)
    recon = reconstruct_chain(net, trace, label, args.lr, method=args.embed)
    forward_feature = trace.a_of(args.lr)[0]
    target_feature = recon.target[0]
    diff, mean = deviation_heatmap(forward_feature, target_feature)
    if diff.ndim == 1:
        diff = diff[None, None, :]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    rows = ["channel,row,col,value"]
    for channel in range(diff.shape[0]):
        pgm = out / f"deviation_ch{channel}.pgm"
        _write_pgm(pgm, diff[channel])
        outputs.append(pgm)
        for r in range(diff.shape[1]):
            for c in range(diff.shape[2]):
                rows.append(f"{channel},{r},{c},{diff[channel, r, c]:.12g}")
    csv_path = out / "deviations.csv"
    _atomic_write_text(csv_path, "\n".join(rows) + "\n")
    outputs.append(csv_path)
    print(f"instance {args.instance} unit {args.lr} mean deviation {mean:.6f}")
    config = {"model": str(args.model), "l_r": args.lr, "embed": args.embed,
              "instance": args.instance, "split": args.split}
    _write_manifest(out / "heatmap", "heatmap", config, [args.model], outputs,
                    [], started)
    return EXIT_OK


def cmd_compare(args):
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    net = load_checkpoint(args.model)
    train = _load_split(args.data, "train", args.limit_train)
    test = _load_split(args.data, "test", args.limit_test)
    seeds = _parse_seeds(args.seeds)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    embeds = [e.strip() for e in args.embed.split(",") if e.strip()]
    depth = net.depth
    if args.pairs == "last":
        pairs = [(depth - 1, depth)]
    else:
        pairs = [(l_s, l_r) for l_r in range(1, depth + 1) for l_s in range(l_r)]
    record = _parse_epoch_list(args.record)

    model_digest = file_digest(args.model)
    recon_cache = {}
    for mode in modes:
        if mode not in ("bp", "fr"):
            raise _ConfigError(f"unknown mode {mode!r}")
    if "fr" in modes:
        for embed_method in embeds:
            for l_r in sorted({p[1] for p in pairs}):
                recon_cache[(l_r, embed_method)], _ = build_recon_dataset(
                    net, train, l_r, method=embed_method,
                    batch_size=args.batch_size, source_digest=model_digest)

    tasks = []
    for l_s, l_r in pairs:
        for mode in modes:
            if mode == "bp":
                tasks.append((mode, "", l_s, l_r))
            else:
                for embed_method in embeds:
                    tasks.append((mode, embed_method, l_s, l_r))

    def run_task(task):
        mode, embed_method, l_s, l_r = task
        config = PostTrainConfig(
            mode=mode, l_s=l_s, l_r=l_r, alpha=args.alpha, epochs=args.epochs,
            batch_size=args.batch_size, lr=args.lr_rate, seeds=seeds,
            embed_method=embed_method or "ne", record_epochs=record)
        recon = recon_cache.get((l_r, embed_method)) if mode == "fr" else None
        entry, _ = run_posttrain(net, config, train, test, recon=recon)
        if mode == "bp":
            entry.embed = ""
        return entry

    workers = int(os.environ.get("FRPT_THREADS", "1"))
    report = SweepReport()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for entry in pool.map(run_task, tasks):
                report.add(entry)
    else:
        for task in tasks:
            report.add(run_task(task))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs_path = out / "runs.csv"
    agg_path = out / "aggregate.csv"
    _atomic_write_text(runs_path, report.render_raw())
    _atomic_write_text(agg_path, report.render_aggregate())
    config = {"modes": modes, "embeds": embeds, "pairs": pairs,
              "alpha": args.alpha, "epochs": args.epochs,
              "batch_size": args.batch_size, "lr": args.lr_rate,
              "seeds": list(seeds), "record": list(record)}
    _write_manifest(out / "compare", "compare", config, [args.model],
                    [runs_path, agg_path], seeds, started)
    print(f"wrote {runs_path} and {agg_path} ({len(tasks)} configurations)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="frpt",
        description="Post-train small CNNs against reconstructed feature maps.")
    parser.add_argument("--version", action="version", version=f"frpt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--height", type=int, default=28)
    p.add_argument("--width", type=int, default=28)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blob-sigma", type=float, default=0.15)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="train a baseline network")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snapshot-every", type=int, default=0)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("recon", help="precompute reconstruction targets")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lr", type=int, required=True,
                   help="index of the unit whose output is reconstructed")
    p.add_argument("--embed", choices=("ma", "ne", "onehot"), default="ne")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(fn=cmd_recon)

    p = sub.add_parser("posttrain", help="run one post-training configuration")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("bp", "fr"), required=True)
    p.add_argument("--l-s", type=int, required=True, dest="l_s")
    p.add_argument("--l-r", type=int, required=True, dest="l_r")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr-rate", type=float, default=0.001,
                   help="Adam learning rate (--lr names the unit index elsewhere)")
    p.add_argument("--seeds", default="0")
    p.add_argument("--embed", choices=("ma", "ne", "onehot"), default="ne")
    p.add_argument("--recon", default=None)
    p.add_argument("--record", default="1,5,10")
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-aggregate", default=None)
    p.add_argument("--save-models", default=None)
    p.add_argument("--limit-train", type=int, default=None)
    p.add_argument("--limit-test", type=int, default=None)
    p.set_defaults(fn=cmd_posttrain)

    p = sub.add_parser("eval", help="print a checkpoint's test accuracy")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("heatmap", help="export per-channel deviation images")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lr", type=int, required=True,
                   help="index of the unit whose output is compared")
    p.add_argument("--embed", choices=("ma", "ne", "onehot"), default="ne")
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("compare", help="sweep trainable ranges for both modes")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--modes", default="bp,fr")
    p.add_argument("--embed", default="ne",
                   help="comma-separated embedding methods for fr runs")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr-rate", type=float, default=0.001)
    p.add_argument("--seeds", default="0")
    p.add_argument("--pairs", choices=("all", "last"), default="all")
    p.add_argument("--record", default="1,5,10")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--limit-train", type=int, default=None)
    p.add_argument("--limit-test", type=int, default=None)
    p.set_defaults(fn=cmd_compare)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except (NotPositiveDefinite, RankDeficient, RankDeficientFrequency,
            ReconstructionError, MissingReconTargets) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, BadMagic, TruncatedFile, CountMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (_ConfigError, ValueError, KeyError, LabelOutOfRange, ShapeMismatch,
            FrptError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
