"""Pretraining and fine-tuning loops, losses, optimizer, ablation sweeps."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .data import SpectraDataset, normalize_dataset, split_dataset
from .model import (
    ConfigError,
    SmaeConfig,
    SmaeModel,
    classify_batch,
    decode_batch,
    encode_batch,
    init_model,
)
from .patching import MaskPlan, _mask_count, empty_plan, sample_mask
from .seeding import substream


ENCODER_PARAM_PREFIXES = ("patch_embed.", "class_token", "pos_embed", "encoder.")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by pretraining and fine-tuning."""

    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_epochs: int | None = None  # None -> 5% of epochs, rounded up
    weight_decay: float = 0.0
    mask_ratio: float = 0.5
    seed: int = 0
    mode: str = "pretrain"
    val_fraction: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    head_only: bool = False
    normalize: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.mode not in ("pretrain", "finetune", "scratch"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")

    @property
    def effective_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return int(np.ceil(0.05 * self.epochs))

    def lr_at(self, epoch: int) -> float:
        """Linear warmup over the first warmup epochs, constant afterwards."""
        warmup = self.effective_warmup
        if warmup > 0 and epoch < warmup:
            return self.learning_rate * (epoch + 1) / warmup
        return self.learning_rate


class TrainLog:
    """Per-epoch records, serialized as JSON lines."""

    def __init__(self, records: list[dict] | None = None):
        self.records: list[dict] = records or []

    def append(self, **fields) -> None:
        self.records.append(fields)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def from_jsonl(path) -> "TrainLog":
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        return TrainLog(records)

    def series(self, key: str) -> list:
        return [rec.get(key) for rec in self.records]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def masked_mse_loss(reconstruction, target, plan: MaskPlan) -> Tensor:
    """Mean squared error over masked positions only.

    Visible positions contribute exactly zero (they are multiplied out, not
    just down-weighted). An empty mask yields 0 by convention.
    """
    recon = reconstruction if isinstance(reconstruction, Tensor) else Tensor(reconstruction)
    tgt = target if isinstance(target, Tensor) else Tensor(target)
    if recon.shape != tgt.shape or recon.ndim != 1:
        raise ShapeError(f"reconstruction {recon.shape} and target {tgt.shape} must be equal 1D vectors")
    length = recon.shape[0]
    if length % plan.n_patches != 0:
        raise ValueError(f"plan with {plan.n_patches} patches does not fit length {length}")
    patch_size = length // plan.n_patches
    if plan.n_masked == 0:
        return Tensor(0.0)
    mask = Tensor(plan.point_mask(patch_size))
    diff = ad.sub(recon, tgt)
    weighted = ad.mul(ad.mul(diff, diff), mask)
    return ad.mul(ad.sum(weighted), 1.0 / (plan.n_masked * patch_size))


def masked_mse_loss_batch(reconstruction: Tensor, target: np.ndarray, plans: list[MaskPlan]) -> Tensor:
    """Batched masked MSE, mean over all masked points in the batch."""
    batch, length = reconstruction.shape
    patch_size = length // plans[0].n_patches
    masks = np.stack([plan.point_mask(patch_size) for plan in plans])
    total = masks.sum()
    if total == 0:
        return Tensor(0.0)
    diff = ad.sub(reconstruction, Tensor(np.asarray(target, dtype=np.float64)))
    weighted = ad.mul(ad.mul(diff, diff), Tensor(masks))
    return ad.mul(ad.sum(weighted), 1.0 / total)


def cross_entropy_loss(scores, label: int) -> Tensor:
    """Stable negative log softmax probability of the true class."""
    s = scores if isinstance(scores, Tensor) else Tensor(scores)
    if s.ndim != 1:
        raise ShapeError(f"scores must be a 1D vector, got {s.shape}")
    n_classes = s.shape[0]
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} out of range for {n_classes} classes")
    onehot = np.zeros(n_classes)
    onehot[label] = 1.0
    return ad.mul(ad.sum(ad.mul(ad.log_softmax(s, axis=-1), Tensor(onehot))), -1.0)


def cross_entropy_loss_batch(scores: Tensor, labels: np.ndarray) -> Tensor:
    batch, n_classes = scores.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels out of range for {n_classes} classes")
    onehot = np.zeros((batch, n_classes))
    onehot[np.arange(batch), labels] = 1.0
    return ad.mul(ad.sum(ad.mul(ad.log_softmax(scores, axis=-1), Tensor(onehot))), -1.0 / batch)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive-moment update with bias correction and decoupled weight decay."""

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        """One update; returns fresh parameter tensors (inputs stay untouched)."""
        self._t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self._t
        c2 = 1.0 - b2**self._t
        out: dict[str, Tensor] = {}
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
            m = self._m.get(name)
            v = self._v.get(name)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self._m[name] = m
            self._v[name] = v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data - self.lr * update - self.lr * self.weight_decay * p.data
            out[name] = Tensor(new, requires_grad=True)
        return out


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _split_train_val(matrix: np.ndarray, labels: np.ndarray | None, val_fraction: float, seed: int):
    n = matrix.shape[0]
    n_val = int(round(val_fraction * n)) if val_fraction > 0 else 0
    if n_val == 0:
        return matrix, labels, matrix, labels
    if n_val >= n:
        raise ConfigError(f"validation fraction {val_fraction} leaves no training data for n={n}")
    order = substream(seed, "train-val-split").permutation(n)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    return (
        matrix[train_idx],
        None if labels is None else labels[train_idx],
        matrix[val_idx],
        None if labels is None else labels[val_idx],
    )


def _pretrain_epoch_loss(model: SmaeModel, matrix: np.ndarray, plans: list[MaskPlan], batch_size: int) -> float:
    """Masked loss over a dataset with the given plans, no gradient recording."""
    total, count = 0.0, 0
    for start in range(0, matrix.shape[0], batch_size):
        xb = matrix[start : start + batch_size]
        pb = plans[start : start + batch_size]
        latents = encode_batch(model, xb, pb)
        recon = decode_batch(model, latents, pb)
        loss = masked_mse_loss_batch(recon, xb, pb)
        total += loss.item() * xb.shape[0]
        count += xb.shape[0]
    return total / count


def pretrain(dataset: SpectraDataset, model_config: SmaeConfig, train_config: TrainConfig):
    """Masked-reconstruction pretraining.

    Returns the best-by-validation-loss model (ties keep the earlier epoch)
    and the per-epoch log. Labels, if present, are ignored.
    """
    if model_config.decoder_depth < 1:
        raise ConfigError("pretraining requires decoder_depth >= 1")
    if dataset.length != model_config.length:
        raise ConfigError(f"dataset length {dataset.length} does not match model length {model_config.length}")
    data = normalize_dataset(dataset) if train_config.normalize else dataset
    matrix = data.intensity_matrix()
    train_x, _, val_x, _ = _split_train_val(matrix, None, train_config.val_fraction, train_config.seed)

    n_patches = model_config.n_patches
    ratio = train_config.mask_ratio
    degenerate = _mask_count(ratio, n_patches) == 0

    model = init_model(model_config, train_config.seed)
    optimizer = AdamW(
        lr=train_config.learning_rate,
        betas=train_config.betas,
        eps=train_config.eps,
        weight_decay=train_config.weight_decay,
    )
    shuffle_rng = substream(train_config.seed, "pretrain-shuffle")
    mask_rng = substream(train_config.seed, "pretrain-mask")
    param_names = [name for name, _ in model.param_items()]

    log = TrainLog()
    best_params = model.params
    best_val = float("inf")
    best_epoch = 0
    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        lr = train_config.lr_at(epoch)
        optimizer.lr = lr
        order = shuffle_rng.permutation(train_x.shape[0])
        epoch_loss, seen = 0.0, 0
        for batch_idx in _batches(train_x.shape[0], train_config.batch_size, order):
            xb = train_x[batch_idx]
            plans = [
                sample_mask(n_patches, ratio, mask_rng, draw_id=epoch * train_x.shape[0] + int(i))
                for i in batch_idx
            ]
            if degenerate:
                seen += xb.shape[0]
                continue
            with Tape() as tape:
                latents = encode_batch(model, xb, plans)
                recon = decode_batch(model, latents, plans)
                loss = masked_mse_loss_batch(recon, xb, plans)
                grads = tape.gradients(loss, [model.params[n] for n in param_names])
            model = model.with_params(
                optimizer.step(dict(model.param_items()), dict(zip(param_names, grads)))
            )
            epoch_loss += loss.item() * xb.shape[0]
            seen += xb.shape[0]
        train_loss = epoch_loss / seen if seen else 0.0

        # Validation masks come from a stream recreated every epoch, so each
        # epoch scores against the identical set of hidden patches.
        if degenerate:
            val_loss = 0.0
        else:
            val_mask_rng = substream(train_config.seed, "pretrain-val-mask")
            val_plans = [sample_mask(n_patches, ratio, val_mask_rng, draw_id=i) for i in range(val_x.shape[0])]
            val_loss = _pretrain_epoch_loss(model, val_x, val_plans, train_config.batch_size)
        if val_loss < best_val:
            best_val = val_loss
            best_params = model.params
            best_epoch = epoch
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "lr": lr,
            "wall_time": time.perf_counter() - t0,
        }
        if degenerate:
            record["degenerate_pretext"] = True
        log.append(**record)
    return model.with_params(best_params), log, {"best_epoch": best_epoch, "best_val_loss": best_val}


def _accuracy(model: SmaeModel, matrix: np.ndarray, labels: np.ndarray, batch_size: int) -> float:
    correct = 0
    for start in range(0, matrix.shape[0], batch_size):
        scores = classify_batch(model, matrix[start : start + batch_size])
        correct += int((np.argmax(scores.data, axis=1) == labels[start : start + batch_size]).sum())
    return correct / matrix.shape[0]


def _val_ce(model: SmaeModel, matrix: np.ndarray, labels: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for start in range(0, matrix.shape[0], batch_size):
        xb = matrix[start : start + batch_size]
        yb = labels[start : start + batch_size]
        loss = cross_entropy_loss_batch(classify_batch(model, xb), yb)
        total += loss.item() * xb.shape[0]
    return total / matrix.shape[0]


def finetune(
    dataset: SpectraDataset,
    model_config: SmaeConfig,
    train_config: TrainConfig,
    pretrained: SmaeModel | None = None,
):
    """Supervised classification training, optionally from a pretrained encoder.

    The decoder is dropped; encoder weights are copied from the checkpoint
    when one is given and the whole network trains end to end (or just the
    head with ``head_only``). Best epoch is picked by validation accuracy,
    ties keeping the earlier epoch.
    """
    if not dataset.has_labels:
        raise ConfigError("fine-tuning requires a fully labeled dataset")
    n_classes = model_config.n_classes or dataset.n_classes
    config = replace(model_config, decoder_depth=0, n_classes=n_classes)
    if dataset.length != config.length:
        raise ConfigError(f"dataset length {dataset.length} does not match model length {config.length}")

    model = init_model(config, train_config.seed)
    if pretrained is not None:
        src = pretrained.config
        matched = (
            src.length == config.length
            and src.patch_size == config.patch_size
            and src.embed_dim == config.embed_dim
            and src.num_heads == config.num_heads
            and src.encoder_depth == config.encoder_depth
            and src.mlp_ratio == config.mlp_ratio
        )
        if not matched:
            raise ConfigError(
                f"checkpoint config {src} is incompatible with fine-tune config {config}"
            )
        params = dict(model.params)
        for name, tensor in pretrained.params.items():
            if name.startswith(ENCODER_PARAM_PREFIXES):
                params[name] = tensor
        model = model.with_params(params)

    data = normalize_dataset(dataset) if train_config.normalize else dataset
    matrix = data.intensity_matrix()
    labels = data.labels_array()
    train_x, train_y, val_x, val_y = _split_train_val(matrix, labels, train_config.val_fraction, train_config.seed)

    trainable = [name for name, _ in model.param_items()]
    if train_config.head_only:
        trainable = [n for n in trainable if n.startswith("cls_head.")]
    optimizer = AdamW(
        lr=train_config.learning_rate,
        betas=train_config.betas,
        eps=train_config.eps,
        weight_decay=train_config.weight_decay,
    )
    shuffle_rng = substream(train_config.seed, "finetune-shuffle")

    log = TrainLog()
    best_params = model.params
    best_acc = -1.0
    best_epoch = 0
    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        lr = train_config.lr_at(epoch)
        optimizer.lr = lr
        order = shuffle_rng.permutation(train_x.shape[0])
        epoch_loss, seen = 0.0, 0
        for batch_idx in _batches(train_x.shape[0], train_config.batch_size, order):
            xb = train_x[batch_idx]
            yb = train_y[batch_idx]
            with Tape() as tape:
                loss = cross_entropy_loss_batch(classify_batch(model, xb), yb)
                grads = tape.gradients(loss, [model.params[n] for n in trainable])
            stepped = optimizer.step(
                {n: model.params[n] for n in trainable}, dict(zip(trainable, grads))
            )
            params = dict(model.params)
            params.update(stepped)
            model = model.with_params(params)
            epoch_loss += loss.item() * xb.shape[0]
            seen += xb.shape[0]
        val_acc = _accuracy(model, val_x, val_y, train_config.batch_size)
        val_loss = _val_ce(model, val_x, val_y, train_config.batch_size)
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = model.params
            best_epoch = epoch
        log.append(
            epoch=epoch,
            train_loss=epoch_loss / seen,
            val_loss=val_loss,
            val_accuracy=val_acc,
            lr=lr,
            wall_time=time.perf_counter() - t0,
        )
    return model.with_params(best_params), log, {"best_epoch": best_epoch, "best_val_accuracy": best_acc}


# ---------------------------------------------------------------------------
# reconstruction inference
# ---------------------------------------------------------------------------

def reconstruct_matrix(
    model: SmaeModel,
    matrix: np.ndarray,
    mask_ratio: float = 0.5,
    seed: int = 0,
    coverage: str = "complement",
) -> np.ndarray:
    """Reconstruct spectra (already normalized) through mask-and-decode passes.

    ``complement`` runs enough passes that every patch is predicted while
    hidden, stitching masked-position predictions together; ``single`` runs
    one masked pass and keeps the decoder output everywhere.
    """
    if coverage not in ("complement", "single"):
        raise ValueError(f"unknown coverage mode {coverage!r}")
    matrix = np.asarray(matrix, dtype=np.float64)
    n, length = matrix.shape
    n_patches = model.config.n_patches
    patch_size = model.config.patch_size
    rng = substream(seed, "reconstruct-mask")
    count = _mask_count(mask_ratio, n_patches)

    if count == 0:
        plans = [empty_plan(n_patches)] * n
        latents = encode_batch(model, matrix, plans)
        return decode_batch(model, latents, plans).data

    if coverage == "single":
        plans = [sample_mask(n_patches, mask_ratio, rng, draw_id=i) for i in range(n)]
        latents = encode_batch(model, matrix, plans)
        return decode_batch(model, latents, plans).data

    # Per spectrum: a seeded permutation carved into groups of the mask size
    # (wrapping at the end), so every patch appears in exactly one group
    # before any repeats. Pass k masks group k of every spectrum.
    n_groups = int(np.ceil(n_patches / count))
    group_indices = np.empty((n, n_groups, count), dtype=np.intp)
    for i in range(n):
        perm = rng.permutation(n_patches)
        extended = np.concatenate([perm, perm])[: n_groups * count]
        group_indices[i] = extended.reshape(n_groups, count)

    output = np.full((n, length), np.nan)
    for k in range(n_groups):
        plans = [
            MaskPlan(n_patches=n_patches, masked_indices=tuple(int(j) for j in group_indices[i, k]),
                     ratio=mask_ratio, draw_id=k)
            for i in range(n)
        ]
        latents = encode_batch(model, matrix, plans)
        recon = decode_batch(model, latents, plans).data
        for i in range(n):
            for j in group_indices[i, k]:
                sl = slice(j * patch_size, (j + 1) * patch_size)
                if np.isnan(output[i, sl]).any():
                    output[i, sl] = recon[i, sl]
    return output


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_AXES = ("mask_ratio", "patch_size", "enc_depth", "dec_depth", "epochs")


def ablation_sweep(
    axis: str,
    values,
    pretrain_set: SpectraDataset,
    finetune_set: SpectraDataset,
    test_set: SpectraDataset,
    model_config: SmaeConfig,
    pretrain_config: TrainConfig,
    finetune_config: TrainConfig,
) -> list[dict]:
    """Pretrain+finetune once per axis value (shared seed) and collect test accuracy.

    Invalid values (for example a patch size that does not divide the
    spectrum length) are recorded as skipped rows, not errors.
    """
    from .metrics import evaluate_classifier  # local import to avoid a cycle

    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    rows = []
    for value in values:
        mc, pc = model_config, pretrain_config
        try:
            if axis == "mask_ratio":
                pc = replace(pc, mask_ratio=float(value))
            elif axis == "patch_size":
                mc = replace(mc, patch_size=int(value))
            elif axis == "enc_depth":
                mc = replace(mc, encoder_depth=int(value))
            elif axis == "dec_depth":
                mc = replace(mc, decoder_depth=int(value))
            elif axis == "epochs":
                pc = replace(pc, epochs=int(value))
        except (ConfigError, ValueError) as exc:
            rows.append({"axis": axis, "value": value, "skipped": True, "reason": str(exc)})
            continue
        pre_model, _, _ = pretrain(pretrain_set, mc, pc)
        ft_model, _, _ = finetune(finetune_set, mc, finetune_config, pretrained=pre_model)
        report = evaluate_classifier(ft_model, test_set)
        rows.append({
            "axis": axis,
            "value": value,
            "accuracy": report.metrics["accuracy"],
            "skipped": False,
        })
    return rows
