"""Command-line entry point for the whole workflow.

Subcommands: synth, pretrain, reconstruct, finetune, eval, cluster, ablate,
gradcam, plot. Exit codes: 0 success, 1 usage error, 2 data/config error.
All randomness derives from --seed; flag values override --config file
values, which override built-in defaults. Every run writes a run.json
manifest into --out-dir.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .data import (
    DataFormatError,
    SpectraDataset,
    Spectrum,
    SynthConfig,
    generate_synthetic,
    load_csv,
    load_grouping,
    normalize_dataset,
    save_csv,
    split_dataset,
)
from .gradcam import average_maps, grad_cam
from .metrics import (
    ami,
    clustering_accuracy,
    evaluate_classifier,
    extract_embeddings,
    kmeans,
    mse,
    nmi,
    pca,
    snr,
)
from .model import (
    CheckpointError,
    ConfigError,
    SmaeConfig,
    load_checkpoint,
    save_checkpoint,
)
from .patching import sample_mask
from .seeding import substream
from .train import (
    ABLATION_AXES,
    TrainConfig,
    TrainLog,
    ablation_sweep,
    finetune,
    pretrain,
    reconstruct_matrix,
)
from . import svg


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-manifest-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out_dir: str, command: str, config: dict, seed: int,
                   metrics: dict, artifacts: dict, started: float) -> str:
    """Atomic run.json with everything needed to reproduce the run."""
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": f"smae-{__version__}",
        "started_at": started,
        "finished_at": time.time(),
        "artifacts": artifacts,
        "metrics": metrics,
    }
    path = os.path.join(out_dir, "run.json")
    _write_atomic(path, json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _print_metrics(metrics: dict) -> None:
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, float):
            print(f"{key}: {value:.4f}")
        else:
            print(f"{key}: {value}")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise DataFormatError(f"{path}: config file must be a JSON object")
    return cfg


def _resolve(args, file_cfg: dict, defaults: dict) -> dict:
    """Flags beat config-file values beat defaults."""
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    return resolved


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("SMAE_THREADS")
    return int(env) if env else 1


def _model_config(cfg: dict, length: int, n_classes: int | None = None) -> SmaeConfig:
    return SmaeConfig(
        length=length,
        patch_size=cfg["patch_size"],
        embed_dim=cfg["embed_dim"],
        num_heads=cfg["heads"],
        encoder_depth=cfg["enc_depth"],
        decoder_depth=cfg["dec_depth"],
        decoder_dim=cfg["dec_dim"],
        mlp_ratio=cfg["mlp_ratio"],
        n_classes=n_classes,
    )


MODEL_DEFAULTS = {
    "patch_size": 100,
    "embed_dim": 64,
    "heads": 4,
    "enc_depth": 8,
    "dec_depth": 1,
    "dec_dim": 32,
    "mlp_ratio": 4,
}

TRAIN_DEFAULTS = {
    "epochs": 50,
    "batch_size": 32,
    "lr": 1e-3,
    "warmup_epochs": None,
    "weight_decay": 0.0,
    "mask_ratio": 0.5,
    "val_fraction": 0.1,
}


def _add_model_flags(parser):
    parser.add_argument("--patch-size", type=int, dest="patch_size")
    parser.add_argument("--embed-dim", type=int, dest="embed_dim")
    parser.add_argument("--heads", type=int, dest="heads")
    parser.add_argument("--enc-depth", type=int, dest="enc_depth")
    parser.add_argument("--dec-depth", type=int, dest="dec_depth")
    parser.add_argument("--dec-dim", type=int, dest="dec_dim")
    parser.add_argument("--mlp-ratio", type=int, dest="mlp_ratio")


def _add_train_flags(parser):
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--warmup-epochs", type=int, dest="warmup_epochs")
    parser.add_argument("--weight-decay", type=float, dest="weight_decay")
    parser.add_argument("--mask-ratio", type=float, dest="mask_ratio")
    parser.add_argument("--val-fraction", type=float, dest="val_fraction")
    parser.add_argument("--no-normalize", action="store_true",
                        help="skip per-spectrum min-max normalization")


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    parser.add_argument("--out-dir", default=None, help="directory for outputs (default .)")
    parser.add_argument("--config", default=None, help="JSON config file; flags override it")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for embedding extraction (env SMAE_THREADS)")


def build_parser() -> _Parser:
    parser = _Parser(prog="smae", description=__doc__)
    parser.add_argument("--version", action="version", version=f"smae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset CSV")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", type=int, dest="per_class", default=None)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--peaks", type=int, default=None)
    p.add_argument("--width-lo", type=float, dest="width_lo", default=None)
    p.add_argument("--width-hi", type=float, dest="width_hi", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("finetune", help="classification fine-tuning (scratch without --ckpt)")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None, help="pretraining checkpoint; omit to train from scratch")
    p.add_argument("--out", required=True)
    p.add_argument("--labeled-per-class", type=int, dest="labeled_per_class", default=None,
                   help="subsample this many labeled spectra per class before training")
    p.add_argument("--head-only", action="store_true", dest="head_only")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("reconstruct", help="denoise/reconstruct spectra through the autoencoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-ratio", type=float, dest="mask_ratio", default=None)
    p.add_argument("--coverage", choices=["complement", "single"], default=None,
                   help="complement: every patch predicted while hidden (default)")
    p.add_argument("--no-normalize", action="store_true")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate denoising or classification")
    p.add_argument("--task", choices=["denoise", "classify"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--recon", default=None, help="reconstructed CSV (denoise task)")
    p.add_argument("--ckpt", default=None, help="fine-tuned checkpoint (classify task)")
    p.add_argument("--grouping", default=None, help="JSON class-name -> group-name map")
    p.add_argument("--out", default=None, help="report JSON path (default out-dir/eval.json)")
    _add_common(p)

    p = sub.add_parser("cluster", help="embed, k-means, and score against labels when present")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=None, help="cluster count (default: class count)")
    p.add_argument("--pooling", choices=["mean_tokens", "class_token"], default=None)
    p.add_argument("--pca-dims", type=int, dest="pca_dims", default=None,
                   help="optional PCA reduction before k-means (0 = off)")
    p.add_argument("--baseline", action="store_true", help="also cluster raw spectra")
    p.add_argument("--out", default=None, help="report JSON path (default out-dir/cluster.json)")
    _add_common(p)

    p = sub.add_parser("ablate", help="sweep one axis, pretrain+finetune per value")
    p.add_argument("--axis", choices=list(ABLATION_AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--data", required=True, help="labeled dataset CSV")
    p.add_argument("--labeled-per-class", type=int, dest="labeled_per_class", default=None)
    p.add_argument("--test-per-class", type=int, dest="test_per_class", default=None)
    p.add_argument("--finetune-epochs", type=int, dest="finetune_epochs", default=None)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("gradcam", help="per-wavelength class relevance map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=None, help="spectrum row to explain")
    p.add_argument("--target", type=int, default=None, help="class id (default: the label)")
    p.add_argument("--average-class", type=int, dest="average_class", default=None,
                   help="average maps over every spectrum of this class instead")
    p.add_argument("--out", required=True, help="relevance CSV path")
    _add_common(p)

    p = sub.add_parser("plot", help="render SVG figures from run artifacts")
    p.add_argument("--kind", choices=["recon", "cluster", "curves", "ablation", "gradcam"],
                   required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--recon", default=None)
    p.add_argument("--coords", default=None, help="cluster coordinates CSV")
    p.add_argument("--log", default=None, help="train_log.jsonl")
    p.add_argument("--table", default=None, help="sweep.json from ablate")
    p.add_argument("--map", dest="map_path", default=None, help="gradcam CSV")
    p.add_argument("--index", type=int, default=None)
    p.add_argument("--mask-ratio", type=float, dest="mask_ratio", default=None)
    p.add_argument("--patch-size", type=int, dest="patch_size", default=None,
                   help="patch size for the masked panel of --kind recon")
    p.add_argument("--out", required=True)
    _add_common(p)

    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {
        "classes": 3, "per_class": 200, "length": 200, "noise": 0.1,
        "peaks": 5, "width_lo": 3.0, "width_hi": 10.0, "seed": 0,
    })
    synth = SynthConfig(
        n_classes=cfg["classes"],
        spectra_per_class=cfg["per_class"],
        length=cfg["length"],
        peaks_per_class=cfg["peaks"],
        peak_width_range=(cfg["width_lo"], cfg["width_hi"]),
        noise_sigma=cfg["noise"],
        seed=cfg["seed"],
    )
    dataset = generate_synthetic(synth)
    save_csv(dataset, args.out)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    metrics = {"rows": len(dataset), "length": dataset.length}
    write_manifest(out_dir, "synth", cfg, cfg["seed"], metrics, {"data": args.out}, started)
    _print_metrics(metrics)
    return 0


def _train_common(args):
    file_cfg = _load_config_file(args.config)
    defaults = dict(MODEL_DEFAULTS)
    defaults.update(TRAIN_DEFAULTS)
    defaults["seed"] = 0
    cfg = _resolve(args, file_cfg, defaults)
    cfg["normalize"] = not getattr(args, "no_normalize", False)
    return cfg


def _cmd_pretrain(args) -> int:
    started = time.time()
    cfg = _train_common(args)
    dataset = load_csv(args.data)
    model_cfg = _model_config(cfg, dataset.length)
    train_cfg = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
        warmup_epochs=cfg["warmup_epochs"], weight_decay=cfg["weight_decay"],
        mask_ratio=cfg["mask_ratio"], seed=cfg["seed"], mode="pretrain",
        val_fraction=cfg["val_fraction"], normalize=cfg["normalize"],
    )
    model, log, summary = pretrain(dataset, model_cfg, train_cfg)
    meta = {"kind": "pretrain", "seed": cfg["seed"], "epochs": cfg["epochs"],
            "mask_ratio": cfg["mask_ratio"], **summary}
    save_checkpoint(model, args.out, meta=meta)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    log.to_jsonl(log_path)
    metrics = {"best_epoch": summary["best_epoch"], "best_val_loss": summary["best_val_loss"]}
    write_manifest(out_dir, "pretrain", cfg, cfg["seed"], metrics,
                   {"checkpoint": args.out, "train_log": log_path}, started)
    _print_metrics(metrics)
    return 0


def _cmd_finetune(args) -> int:
    started = time.time()
    cfg = _train_common(args)
    cfg["labeled_per_class"] = args.labeled_per_class
    cfg["head_only"] = bool(args.head_only)
    dataset = load_csv(args.data)
    if not dataset.has_labels:
        raise ConfigError(f"{args.data}: fine-tuning needs labels on every row")
    if args.labeled_per_class:
        dataset, _ = split_dataset(dataset, args.labeled_per_class, cfg["seed"])
    pretrained = None
    if args.ckpt:
        pretrained, _ = load_checkpoint(args.ckpt)
        base = pretrained.config
        model_cfg = replace(base, n_classes=dataset.n_classes)
        mode = "finetune"
    else:
        model_cfg = _model_config(cfg, dataset.length, n_classes=dataset.n_classes)
        mode = "scratch"
    train_cfg = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
        warmup_epochs=cfg["warmup_epochs"], weight_decay=cfg["weight_decay"],
        mask_ratio=0.0, seed=cfg["seed"], mode=mode,
        val_fraction=cfg["val_fraction"], head_only=cfg["head_only"],
        normalize=cfg["normalize"],
    )
    model, log, summary = finetune(dataset, model_cfg, train_cfg, pretrained=pretrained)
    meta = {"kind": mode, "seed": cfg["seed"], "epochs": cfg["epochs"], **summary}
    save_checkpoint(model, args.out, meta=meta)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    log.to_jsonl(log_path)
    metrics = {"best_epoch": summary["best_epoch"], "best_val_accuracy": summary["best_val_accuracy"]}
    write_manifest(out_dir, "finetune", cfg, cfg["seed"], metrics,
                   {"checkpoint": args.out, "train_log": log_path}, started)
    _print_metrics(metrics)
    return 0


def _cmd_reconstruct(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {"mask_ratio": 0.5, "coverage": "complement", "seed": 0})
    model, _ = load_checkpoint(args.ckpt)
    dataset = load_csv(args.data)
    normalize = not args.no_normalize
    data = normalize_dataset(dataset) if normalize else dataset
    recon = reconstruct_matrix(model, data.intensity_matrix(), mask_ratio=cfg["mask_ratio"],
                               seed=cfg["seed"], coverage=cfg["coverage"])
    out_set = SpectraDataset(
        [Spectrum(row, label=s.label) for row, s in zip(recon, dataset)],
        class_names=dataset.class_names,
    )
    save_csv(out_set, args.out)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    metrics = {"rows": len(out_set)}
    write_manifest(out_dir, "reconstruct", cfg, cfg["seed"], metrics, {"recon": args.out}, started)
    _print_metrics(metrics)
    return 0


def _eval_denoise(args, cfg: dict):
    if not args.recon:
        raise ConfigError("eval --task denoise needs --recon")
    noisy = load_csv(args.data)
    recon = load_csv(args.recon)
    if not noisy.has_references:
        raise ConfigError(f"{args.data}: denoise evaluation needs reference columns r1..rL")
    if len(noisy) != len(recon):
        raise ConfigError(f"{args.data} has {len(noisy)} rows but {args.recon} has {len(recon)}")
    snr_before, snr_after, mse_before, mse_after = [], [], [], []
    normalized = normalize_dataset(noisy)
    for spec, rec in zip(normalized, recon):
        snr_before.append(snr(spec.intensities, spec.reference))
        snr_after.append(snr(rec.intensities, spec.reference))
        mse_before.append(mse(spec.intensities, spec.reference))
        mse_after.append(mse(rec.intensities, spec.reference))
    metrics = {
        "snr_before": float(np.mean(snr_before)),
        "snr_after": float(np.mean(snr_after)),
        "mse_before": float(np.mean(mse_before)),
        "mse_after": float(np.mean(mse_after)),
    }
    metrics["snr_ratio"] = metrics["snr_after"] / metrics["snr_before"]
    return metrics, {}


def _eval_classify(args, cfg: dict):
    if not args.ckpt:
        raise ConfigError("eval --task classify needs --ckpt")
    model, _ = load_checkpoint(args.ckpt)
    dataset = load_csv(args.data)
    grouping = None
    if args.grouping:
        names = dataset.class_names or [str(i) for i in range(model.config.n_classes)]
        grouping, _ = load_grouping(args.grouping, names)
    report = evaluate_classifier(model, dataset, grouping=grouping)
    artifacts = {}
    out_dir = args.out_dir or "."
    confusion_path = os.path.join(out_dir, "confusion.csv")
    report.confusion_csv(confusion_path)
    artifacts["confusion"] = confusion_path
    if report.group_confusion is not None:
        group_path = os.path.join(out_dir, "group_confusion.csv")
        np.savetxt(group_path, report.group_confusion.astype(int), fmt="%d", delimiter=",")
        artifacts["group_confusion"] = group_path
    return report.metrics, artifacts


def _cmd_eval(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {"seed": 0})
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    if args.task == "denoise":
        metrics, artifacts = _eval_denoise(args, cfg)
    else:
        metrics, artifacts = _eval_classify(args, cfg)
    report_path = args.out or os.path.join(out_dir, "eval.json")
    _write_atomic(report_path, json.dumps({"task": args.task, "metrics": metrics}, sort_keys=True, indent=2) + "\n")
    artifacts["report"] = report_path
    write_manifest(out_dir, f"eval:{args.task}", cfg, cfg["seed"], metrics, artifacts, started)
    _print_metrics(metrics)
    return 0


def _cmd_cluster(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {"k": None, "pooling": "mean_tokens", "pca_dims": 0, "seed": 0})
    model, _ = load_checkpoint(args.ckpt)
    dataset = load_csv(args.data)
    k = cfg["k"] or dataset.n_classes
    if not k:
        raise ConfigError("--k is required when the dataset has no labels")
    embeddings = extract_embeddings(model, dataset, pooling=cfg["pooling"], threads=_threads(args))
    features = embeddings
    if cfg["pca_dims"]:
        features = pca(embeddings, min(cfg["pca_dims"], *features.shape))
    assignment, _, inertia = kmeans(features, k, seed=cfg["seed"])
    metrics = {"k": k, "inertia": inertia}
    if dataset.has_labels:
        truth = dataset.labels_array()
        metrics["accuracy"] = clustering_accuracy(assignment, truth)
        metrics["nmi"] = nmi(assignment, truth)
        metrics["ami"] = ami(assignment, truth)
        if args.baseline:
            raw = normalize_dataset(dataset).intensity_matrix()
            base_assign, _, _ = kmeans(raw, k, seed=cfg["seed"])
            metrics["baseline_accuracy"] = clustering_accuracy(base_assign, truth)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    coords = pca(embeddings, min(2, *embeddings.shape))
    coords_path = os.path.join(out_dir, "cluster_coords.csv")
    with open(coords_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "cluster", "label"])
        labels = dataset.labels_array() if dataset.has_labels else [-1] * len(dataset)
        for (xy, c, lab) in zip(coords, assignment.labels, labels):
            writer.writerow([repr(float(xy[0])), repr(float(xy[1] if coords.shape[1] > 1 else 0.0)),
                             int(c), int(lab)])
    report_path = args.out or os.path.join(out_dir, "cluster.json")
    _write_atomic(report_path, json.dumps({"task": "cluster", "metrics": metrics}, sort_keys=True, indent=2) + "\n")
    write_manifest(out_dir, "cluster", cfg, cfg["seed"], metrics,
                   {"report": report_path, "coords": coords_path}, started)
    _print_metrics(metrics)
    return 0


def _parse_values(axis: str, raw: str) -> list:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError("--values is empty")
    if axis == "mask_ratio":
        return [float(p) for p in parts]
    return [int(float(p)) for p in parts]


def _cmd_ablate(args) -> int:
    started = time.time()
    cfg = _train_common(args)
    cfg["labeled_per_class"] = args.labeled_per_class or 10
    cfg["test_per_class"] = args.test_per_class or 25
    cfg["finetune_epochs"] = args.finetune_epochs or cfg["epochs"]
    dataset = load_csv(args.data)
    if not dataset.has_labels:
        raise ConfigError(f"{args.data}: ablation needs a labeled dataset")
    values = _parse_values(args.axis, args.values)

    test_set, pool = split_dataset(dataset, cfg["test_per_class"], cfg["seed"])
    labeled_set, pretrain_set = split_dataset(pool, cfg["labeled_per_class"], cfg["seed"] + 1)
    model_cfg = _model_config(cfg, dataset.length)
    pre_cfg = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
        warmup_epochs=cfg["warmup_epochs"], weight_decay=cfg["weight_decay"],
        mask_ratio=cfg["mask_ratio"], seed=cfg["seed"], mode="pretrain",
        val_fraction=cfg["val_fraction"], normalize=cfg["normalize"],
    )
    ft_cfg = replace(pre_cfg, epochs=cfg["finetune_epochs"], mode="finetune", mask_ratio=0.0)
    rows = ablation_sweep(args.axis, values, pretrain_set, labeled_set, test_set,
                          model_cfg, pre_cfg, ft_cfg)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "sweep.json")
    _write_atomic(json_path, json.dumps(rows, sort_keys=True, indent=2) + "\n")
    csv_path = os.path.join(out_dir, "sweep.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "accuracy", "skipped", "reason"])
        for row in rows:
            writer.writerow([row["axis"], row["value"], row.get("accuracy", ""),
                             row["skipped"], row.get("reason", "")])
    metrics = {f"acc[{row['value']}]": row["accuracy"] for row in rows if not row["skipped"]}
    write_manifest(out_dir, "ablate", cfg, cfg["seed"], metrics,
                   {"sweep_json": json_path, "sweep_csv": csv_path}, started)
    for row in rows:
        if row["skipped"]:
            print(f"{args.axis}={row['value']}: skipped ({row['reason']})")
        else:
            print(f"{args.axis}={row['value']}: accuracy {row['accuracy']:.4f}")
    return 0


def _cmd_gradcam(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {"seed": 0})
    model, _ = load_checkpoint(args.ckpt)
    dataset = load_csv(args.data)
    if args.average_class is not None:
        rows = [i for i, s in enumerate(dataset) if s.label == args.average_class]
        if not rows:
            raise ConfigError(f"no spectra with label {args.average_class}")
        target = args.target if args.target is not None else args.average_class
        maps = [grad_cam(model, dataset[i].intensities, target) for i in rows]
        relevance = average_maps(maps)
        described = f"class {args.average_class} average ({len(rows)} spectra)"
    else:
        if args.index is None:
            raise ConfigError("gradcam needs --index or --average-class")
        if not 0 <= args.index < len(dataset):
            raise ConfigError(f"--index {args.index} out of range for {len(dataset)} spectra")
        spectrum = dataset[args.index]
        target = args.target if args.target is not None else spectrum.label
        if target is None:
            raise ConfigError("spectrum is unlabeled; pass --target")
        relevance = grad_cam(model, spectrum.intensities, target)
        described = f"spectrum {args.index}"
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", "relevance"])
        for i, v in enumerate(relevance.values):
            writer.writerow([i, repr(float(v))])
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    metrics = {"target_class": relevance.target_class,
               "peak_position": int(np.argmax(relevance.values))}
    write_manifest(out_dir, "gradcam", cfg, cfg["seed"], metrics, {"map": args.out}, started)
    print(f"grad-cam for {described}, target class {relevance.target_class}")
    _print_metrics(metrics)
    return 0


def _cmd_plot(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg = _resolve(args, file_cfg, {"seed": 0, "mask_ratio": 0.5})
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)

    if args.kind == "recon":
        if not (args.data and args.recon):
            raise ConfigError("plot --kind recon needs --data and --recon")
        index = args.index or 0
        noisy = normalize_dataset(load_csv(args.data))
        recon = load_csv(args.recon)
        spectrum = noisy[index].intensities
        patch = args.patch_size or max(1, len(spectrum) // 10)
        if len(spectrum) % patch != 0:
            raise ConfigError(f"--patch-size {patch} does not divide length {len(spectrum)}")
        rng = substream(cfg["seed"], "plot-mask")
        plan = sample_mask(len(spectrum) // patch, cfg["mask_ratio"], rng)
        spans = [(i * patch, (i + 1) * patch) for i in plan.masked_indices]
        panels = [("original", spectrum), ("masked", spectrum), ("reconstructed", recon[index].intensities)]
        svg.spectrum_panels(panels, args.out, title=f"spectrum {index}", masked_spans={1: spans})
    elif args.kind == "cluster":
        if not args.coords:
            raise ConfigError("plot --kind cluster needs --coords")
        points, clusters = [], []
        with open(args.coords, "r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                points.append((float(row["x"]), float(row["y"])))
                clusters.append(int(row["cluster"]))
        svg.scatter_2d(np.array(points), clusters, args.out, title="k-means clusters (2D projection)")
    elif args.kind == "curves":
        if not args.log:
            raise ConfigError("plot --kind curves needs --log")
        log = TrainLog.from_jsonl(args.log)
        epochs = log.series("epoch")
        series = [("train loss", epochs, log.series("train_loss")),
                  ("val loss", epochs, log.series("val_loss"))]
        if any(v is not None for v in log.series("val_accuracy")):
            series.append(("val accuracy", epochs, log.series("val_accuracy")))
        svg.line_chart(series, args.out, title="training curves")
    elif args.kind == "ablation":
        if not args.table:
            raise ConfigError("plot --kind ablation needs --table")
        with open(args.table, "r", encoding="utf-8") as fh:
            rows = json.load(fh)
        rows = [r for r in rows if not r.get("skipped")]
        svg.bar_chart([r["value"] for r in rows], [r["accuracy"] for r in rows],
                      args.out, title=f"{rows[0]['axis']} sweep" if rows else "sweep")
    else:  # gradcam
        if not (args.map_path and args.data):
            raise ConfigError("plot --kind gradcam needs --map and --data")
        index = args.index or 0
        dataset = normalize_dataset(load_csv(args.data))
        relevance = []
        with open(args.map_path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                relevance.append(float(row["relevance"]))
        svg.heat_strip(dataset[index].intensities, np.array(relevance), args.out,
                       title=f"class relevance, spectrum {index}")

    write_manifest(out_dir, f"plot:{args.kind}", cfg, cfg["seed"], {}, {"figure": args.out}, started)
    print(f"wrote {args.out}")
    return 0


_DISPATCH = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "reconstruct": _cmd_reconstruct,
    "eval": _cmd_eval,
    "cluster": _cmd_cluster,
    "ablate": _cmd_ablate,
    "gradcam": _cmd_gradcam,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version exit 0 through argparse
        return 0 if exc.code in (0, None) else 1
    try:
        return _DISPATCH[args.command](args)
    except (DataFormatError, ConfigError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
