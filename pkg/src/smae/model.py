"""Masked-autoencoder model: embedding, asymmetric encoder/decoder, heads.

The encoder sees only visible patch tokens plus a class token; the decoder
takes the full token sequence (mask tokens standing in at hidden positions,
everything restored to original order) and reconstructs the spectrum through
a per-patch linear head. Fine-tuned classifiers drop the decoder and read a
linear head off the class-token latent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .patching import MaskPlan, empty_plan
from .seeding import substream


LN_EPS = 1e-6
CHECKPOINT_MAGIC = b"SMAE"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Model/training configuration violates a structural constraint."""


class CheckpointError(ValueError):
    """Base class for checkpoint file problems."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointPayloadError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


@dataclass(frozen=True)
class SmaeConfig:
    """Structural hyperparameters; every shape below derives from these."""

    length: int
    patch_size: int
    embed_dim: int = 64
    num_heads: int = 4
    encoder_depth: int = 8
    decoder_depth: int = 1
    decoder_dim: int = 32
    mlp_ratio: int = 4
    n_classes: int | None = None

    def __post_init__(self):
        if self.patch_size < 1 or self.length % self.patch_size != 0:
            raise ConfigError(f"patch size {self.patch_size} does not divide length {self.length}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.decoder_depth >= 1 and self.decoder_dim % self.num_heads != 0:
            raise ConfigError(f"decoder_dim {self.decoder_dim} not divisible by {self.num_heads} heads")
        if self.encoder_depth < 1:
            raise ConfigError("encoder_depth must be >= 1")
        if self.decoder_depth < 0:
            raise ConfigError("decoder_depth must be >= 0")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        if self.n_classes is not None and self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1 when set")

    @property
    def n_patches(self) -> int:
        return self.length // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SmaeConfig":
        return SmaeConfig(**d)


def _block_spec(prefix: str, dim: int, mlp_ratio: int):
    hidden = dim * mlp_ratio
    return [
        (f"{prefix}.norm1.gain", (dim,)),
        (f"{prefix}.norm1.bias", (dim,)),
        (f"{prefix}.attn.query.weight", (dim, dim)),
        (f"{prefix}.attn.query.bias", (dim,)),
        (f"{prefix}.attn.key.weight", (dim, dim)),
        (f"{prefix}.attn.key.bias", (dim,)),
        (f"{prefix}.attn.value.weight", (dim, dim)),
        (f"{prefix}.attn.value.bias", (dim,)),
        (f"{prefix}.attn.out.weight", (dim, dim)),
        (f"{prefix}.attn.out.bias", (dim,)),
        (f"{prefix}.norm2.gain", (dim,)),
        (f"{prefix}.norm2.bias", (dim,)),
        (f"{prefix}.mlp.fc1.weight", (dim, hidden)),
        (f"{prefix}.mlp.fc1.bias", (hidden,)),
        (f"{prefix}.mlp.fc2.weight", (hidden, dim)),
        (f"{prefix}.mlp.fc2.bias", (dim,)),
    ]


def param_spec(config: SmaeConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) listing of every learnable tensor."""
    n, p, d = config.n_patches, config.patch_size, config.embed_dim
    spec = [
        ("patch_embed.weight", (p, d)),
        ("patch_embed.bias", (d,)),
        ("class_token", (d,)),
        ("pos_embed", (n + 1, d)),
    ]
    for i in range(config.encoder_depth):
        spec += _block_spec(f"encoder.{i}", d, config.mlp_ratio)
    if config.decoder_depth >= 1:
        dd = config.decoder_dim
        spec += [
            ("enc_to_dec.weight", (d, dd)),
            ("enc_to_dec.bias", (dd,)),
            ("mask_token", (dd,)),
            ("dec_pos_embed", (n + 1, dd)),
        ]
        for i in range(config.decoder_depth):
            spec += _block_spec(f"decoder.{i}", dd, config.mlp_ratio)
        spec += [
            ("recon_head.weight", (dd, p)),
            ("recon_head.bias", (p,)),
        ]
    if config.n_classes is not None:
        spec += [
            ("cls_head.weight", (d, config.n_classes)),
            ("cls_head.bias", (config.n_classes,)),
        ]
    return spec


def count_parameters(config: SmaeConfig) -> int:
    """Closed-form parameter count; must equal the summed spec shapes."""
    n, p, d, m = config.n_patches, config.patch_size, config.embed_dim, config.mlp_ratio

    def block(dim):
        # norms + qkv/out maps with biases + 2-layer MLP
        return 4 * dim + 4 * (dim * dim + dim) + (dim * m * dim + m * dim) + (m * dim * dim + dim)

    total = (p * d + d) + d + (n + 1) * d + config.encoder_depth * block(d)
    if config.decoder_depth >= 1:
        dd = config.decoder_dim
        total += (d * dd + dd) + dd + (n + 1) * dd + config.decoder_depth * block(dd)
        total += dd * p + p
    if config.n_classes is not None:
        total += d * config.n_classes + config.n_classes
    return total


class SmaeModel:
    """Config plus named parameter tensors.

    Parameters are immutable tensors; training swaps in fresh ones between
    forward passes, so a model snapshot is safe to share.
    """

    def __init__(self, config: SmaeConfig, params: dict[str, Tensor]):
        expected = param_spec(config)
        names = {name for name, _ in expected}
        if set(params) != names:
            missing = names - set(params)
            extra = set(params) - names
            raise ConfigError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = dict(params)

    def param_items(self) -> list[tuple[str, Tensor]]:
        return [(name, self.params[name]) for name, _ in param_spec(self.config)]

    def n_parameters(self) -> int:
        return int(np.sum([t.size for t in self.params.values()]))

    def with_params(self, params: dict[str, Tensor]) -> "SmaeModel":
        return SmaeModel(self.config, params)


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    """Classic sin/cos position table used to seed the trainable tables."""
    table = np.zeros((n_positions, dim))
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / max(dim, 1))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table


def init_model(config: SmaeConfig, seed: int = 0) -> SmaeModel:
    """Seeded init: trunc-normal maps/tokens, sinusoidal position tables,
    zero biases, unit norm gains."""
    rng = substream(seed, "model-init")
    n = config.n_patches
    params: dict[str, Tensor] = {}
    for name, shape in param_spec(config):
        if name == "pos_embed":
            value = sinusoidal_table(n + 1, config.embed_dim)
        elif name == "dec_pos_embed":
            value = sinusoidal_table(n + 1, config.decoder_dim)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        elif name in ("class_token", "mask_token") or name.endswith(".weight"):
            value = _truncated_normal(rng, shape)
        else:
            raise AssertionError(f"unhandled parameter {name}")
        params[name] = Tensor(value, requires_grad=True)
    return SmaeModel(config, params)


# ---------------------------------------------------------------------------
# forward passes (batched core + per-spectrum wrappers)
# ---------------------------------------------------------------------------

def _transformer_block(params: dict[str, Tensor], prefix: str, x: Tensor, num_heads: int) -> Tensor:
    """Pre-norm residual block: norm -> attention -> add, norm -> MLP -> add."""
    b, t, d = x.shape
    dh = d // num_heads

    h = ad.layer_norm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"], LN_EPS)
    q = ad.add(ad.matmul(h, params[f"{prefix}.attn.query.weight"]), params[f"{prefix}.attn.query.bias"])
    k = ad.add(ad.matmul(h, params[f"{prefix}.attn.key.weight"]), params[f"{prefix}.attn.key.bias"])
    v = ad.add(ad.matmul(h, params[f"{prefix}.attn.value.weight"]), params[f"{prefix}.attn.value.bias"])
    q = ad.transpose(ad.reshape(q, (b, t, num_heads, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(k, (b, t, num_heads, dh)), (0, 2, 1, 3))
    v = ad.transpose(ad.reshape(v, (b, t, num_heads, dh)), (0, 2, 1, 3))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    context = ad.matmul(weights, v)
    context = ad.reshape(ad.transpose(context, (0, 2, 1, 3)), (b, t, d))
    attended = ad.add(ad.matmul(context, params[f"{prefix}.attn.out.weight"]), params[f"{prefix}.attn.out.bias"])
    x = ad.add(x, attended)

    h2 = ad.layer_norm(x, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"], LN_EPS)
    hidden = ad.gelu(ad.add(ad.matmul(h2, params[f"{prefix}.mlp.fc1.weight"]), params[f"{prefix}.mlp.fc1.bias"]))
    mlp_out = ad.add(ad.matmul(hidden, params[f"{prefix}.mlp.fc2.weight"]), params[f"{prefix}.mlp.fc2.bias"])
    return ad.add(x, mlp_out)


def _check_plans(config: SmaeConfig, plans: list[MaskPlan]) -> int:
    n_visible = plans[0].n_visible
    for plan in plans:
        if plan.n_patches != config.n_patches:
            raise ConfigError(f"plan covers {plan.n_patches} patches, model expects {config.n_patches}")
        if plan.n_visible != n_visible:
            raise ConfigError("plans in one batch must hide the same number of patches")
    return n_visible


def embed_visible(model: SmaeModel, spectra: np.ndarray, plans: list[MaskPlan]) -> Tensor:
    """Patch-embed the visible patches, add position rows (original indices),
    prepend the positioned class token. Returns (batch, n_visible+1, embed_dim)."""
    cfg, prm = model.config, model.params
    spectra = np.asarray(spectra, dtype=np.float64)
    batch = spectra.shape[0]
    if spectra.ndim != 2 or spectra.shape[1] != cfg.length:
        raise ConfigError(f"spectra shape {spectra.shape} does not match model length {cfg.length}")
    if len(plans) != batch:
        raise ConfigError(f"{len(plans)} plans for batch of {batch}")
    n_visible = _check_plans(cfg, plans)

    patches = spectra.reshape(batch, cfg.n_patches, cfg.patch_size)
    visible_idx = np.stack([plan.visible_indices for plan in plans]) if n_visible else np.zeros((batch, 0), dtype=np.intp)
    visible_patches = patches[np.arange(batch)[:, None], visible_idx]

    tokens = ad.add(ad.matmul(Tensor(visible_patches), prm["patch_embed.weight"]), prm["patch_embed.bias"])
    tokens = ad.add(tokens, ad.take_rows(prm["pos_embed"], visible_idx + 1))
    cls = ad.add(
        ad.reshape(prm["class_token"], (1, 1, cfg.embed_dim)),
        ad.take_rows(prm["pos_embed"], np.array([0], dtype=np.intp)),
    )
    cls = ad.broadcast_to(cls, (batch, 1, cfg.embed_dim))
    return ad.concat([cls, tokens], axis=1)


def encoder_forward_with_tap(model: SmaeModel, spectra: np.ndarray, plans: list[MaskPlan]) -> tuple[Tensor, Tensor]:
    """Encoder latents plus the token matrix entering the final encoder block.

    The tap is the deepest point whose patch tokens still feed the class
    token's output, which is what gradient-based attribution needs.
    """
    x = embed_visible(model, spectra, plans)
    for i in range(model.config.encoder_depth - 1):
        x = _transformer_block(model.params, f"encoder.{i}", x, model.config.num_heads)
    tap = x
    x = _transformer_block(model.params, f"encoder.{model.config.encoder_depth - 1}", x, model.config.num_heads)
    return x, tap


def encode_batch(model: SmaeModel, spectra: np.ndarray, plans: list[MaskPlan]) -> Tensor:
    """Encoder latents over [class token, visible tokens]: (batch, n_visible+1, embed_dim)."""
    latents, _ = encoder_forward_with_tap(model, spectra, plans)
    return latents


def decode_batch(model: SmaeModel, latents: Tensor, plans: list[MaskPlan]) -> Tensor:
    """Full-spectrum reconstruction (batch, length) from visible-token latents."""
    cfg, prm = model.config, model.params
    if cfg.decoder_depth < 1:
        raise ConfigError("model has no decoder (decoder_depth=0)")
    batch = latents.shape[0]
    if len(plans) != batch:
        raise ConfigError(f"{len(plans)} plans for batch of {batch}")
    n_visible = _check_plans(cfg, plans)
    if latents.shape[1] != n_visible + 1 or latents.shape[2] != cfg.embed_dim:
        raise ConfigError(
            f"latents shape {latents.shape} inconsistent with plans "
            f"({n_visible} visible) and embed_dim {cfg.embed_dim}"
        )
    n, dd = cfg.n_patches, cfg.decoder_dim

    lat = ad.add(ad.matmul(latents, prm["enc_to_dec.weight"]), prm["enc_to_dec.bias"])
    cls = ad.take_rows(lat, np.array([0], dtype=np.intp))
    visible = ad.take_rows(lat, np.arange(1, n_visible + 1, dtype=np.intp))
    filler = ad.broadcast_to(ad.reshape(prm["mask_token"], (1, 1, dd)), (batch, n - n_visible, dd))
    sequence = ad.concat([visible, filler], axis=1)
    restore = np.stack([plan.restore_indices for plan in plans])
    sequence = ad.take_rows(sequence, restore)
    sequence = ad.add(sequence, ad.take_rows(prm["dec_pos_embed"], np.arange(1, n + 1, dtype=np.intp)))
    cls = ad.add(cls, ad.take_rows(prm["dec_pos_embed"], np.array([0], dtype=np.intp)))

    x = ad.concat([cls, sequence], axis=1)
    for i in range(cfg.decoder_depth):
        x = _transformer_block(prm, f"decoder.{i}", x, cfg.num_heads)
    patch_latents = ad.take_rows(x, np.arange(1, n + 1, dtype=np.intp))
    prediction = ad.add(ad.matmul(patch_latents, prm["recon_head.weight"]), prm["recon_head.bias"])
    return ad.reshape(prediction, (batch, cfg.length))


def classify_batch(model: SmaeModel, spectra: np.ndarray) -> Tensor:
    """Raw class scores (batch, n_classes); no masking is applied."""
    cfg = model.config
    if cfg.n_classes is None:
        raise ConfigError("model has no classification head")
    plans = [empty_plan(cfg.n_patches)] * np.asarray(spectra).shape[0]
    latents = encode_batch(model, spectra, plans)
    cls_latent = ad.reshape(
        ad.take_rows(latents, np.array([0], dtype=np.intp)), (latents.shape[0], cfg.embed_dim)
    )
    return ad.add(ad.matmul(cls_latent, model.params["cls_head.weight"]), model.params["cls_head.bias"])


def encode(model: SmaeModel, spectrum: np.ndarray, plan: MaskPlan) -> tuple[Tensor, MaskPlan]:
    """Single-spectrum encoder latents ((n_visible+1), embed_dim)."""
    latents = encode_batch(model, np.asarray(spectrum, dtype=np.float64)[None, :], [plan])
    return ad.reshape(latents, latents.shape[1:]), plan


def decode(model: SmaeModel, latents: Tensor, plan: MaskPlan) -> Tensor:
    """Single-spectrum reconstruction (length,)."""
    lat3 = ad.reshape(latents, (1,) + tuple(latents.shape))
    recon = decode_batch(model, lat3, [plan])
    return ad.reshape(recon, (model.config.length,))


def classify(model: SmaeModel, spectrum: np.ndarray) -> Tensor:
    """Single-spectrum raw class scores (n_classes,)."""
    scores = classify_batch(model, np.asarray(spectrum, dtype=np.float64)[None, :])
    return ad.reshape(scores, (model.config.n_classes,))


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_checkpoint(model: SmaeModel, path, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, float32 LE payload.

    The header lists parameter names and shapes in payload order; loading
    assigns by name, so header order is free to differ between writers.
    """
    names_shapes = [[name, list(t.shape)] for name, t in model.param_items()]
    header = {
        "config": model.config.to_dict(),
        "params": names_shapes,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, tensor in model.param_items():
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[SmaeModel, dict]:
    """Restore a model (float32-rounded parameters) and its metadata."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 16:
        raise CheckpointPayloadError(f"{path}: file truncated before header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if len(blob) < header_end:
        raise CheckpointPayloadError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
        config = SmaeConfig.from_dict(header["config"])
        listed = [(str(name), tuple(int(s) for s in shape)) for name, shape in header["params"]]
        meta = header.get("meta", {})
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header: {exc}") from exc

    expected = dict(param_spec(config))
    listed_names = [name for name, _ in listed]
    if sorted(listed_names) != sorted(expected):
        raise CheckpointFormatError(f"{path}: header parameter names do not match the config")
    for name, shape in listed:
        if expected[name] != shape:
            raise CheckpointFormatError(f"{path}: parameter {name} has shape {shape}, expected {expected[name]}")

    payload_len = sum(int(np.prod(shape)) * 4 for _, shape in listed)
    if len(blob) - header_end != payload_len:
        raise CheckpointPayloadError(
            f"{path}: payload is {len(blob) - header_end} bytes, header implies {payload_len}"
        )
    params: dict[str, Tensor] = {}
    offset = header_end
    for name, shape in listed:
        count = int(np.prod(shape))
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float64)
        params[name] = Tensor(values.reshape(shape), requires_grad=True)
        offset += count * 4
    return SmaeModel(config, params), meta
