"""Patch decomposition of spectra and random mask planning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DivisibilityError(ValueError):
    """Patch size does not divide the spectrum length."""


@dataclass(frozen=True)
class PatchSequence:
    """A spectrum cut into consecutive equal-width patches (rows)."""

    patches: np.ndarray  # (n_patches, patch_size)
    source_length: int

    def __post_init__(self):
        n, p = self.patches.shape
        if n * p != self.source_length:
            raise ValueError(f"{n}x{p} patches cannot come from length {self.source_length}")


@dataclass(frozen=True)
class MaskPlan:
    """Which patch indices are hidden from the encoder.

    Indices are stored sorted, so a plan depends only on the chosen set and
    never on the order the sampler drew it in.
    """

    n_patches: int
    masked_indices: tuple[int, ...]
    ratio: float
    draw_id: int = 0

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.masked_indices))
        object.__setattr__(self, "masked_indices", idx)
        if len(set(idx)) != len(idx):
            raise ValueError("masked indices must be unique")
        if idx and (idx[0] < 0 or idx[-1] >= self.n_patches):
            raise ValueError(f"masked indices out of range for {self.n_patches} patches")
        expected = _mask_count(self.ratio, self.n_patches)
        if len(idx) != expected:
            raise ValueError(
                f"plan has {len(idx)} masked indices, ratio {self.ratio} over "
                f"{self.n_patches} patches requires {expected}"
            )

    @property
    def n_masked(self) -> int:
        return len(self.masked_indices)

    @property
    def n_visible(self) -> int:
        return self.n_patches - len(self.masked_indices)

    @property
    def visible_indices(self) -> np.ndarray:
        masked = set(self.masked_indices)
        return np.array([i for i in range(self.n_patches) if i not in masked], dtype=np.intp)

    @property
    def restore_indices(self) -> np.ndarray:
        """Positions of each original patch in the (visible ++ masked) ordering."""
        order = np.concatenate([self.visible_indices, np.array(self.masked_indices, dtype=np.intp)])
        return np.argsort(order).astype(np.intp)

    def point_mask(self, patch_size: int) -> np.ndarray:
        """Length-L 0/1 vector, 1 at every masked intensity position."""
        mask = np.zeros(self.n_patches * patch_size)
        for i in self.masked_indices:
            mask[i * patch_size : (i + 1) * patch_size] = 1.0
        return mask


def empty_plan(n_patches: int) -> MaskPlan:
    """Plan that hides nothing (used for classification and embeddings)."""
    return MaskPlan(n_patches=n_patches, masked_indices=(), ratio=0.0)


def _mask_count(ratio: float, n_patches: int) -> int:
    # Half-up rounding; Python's round() is banker's and platform-stable
    # semantics matter for the ratio sweep.
    return int(np.floor(ratio * n_patches + 0.5))


def patchify(spectrum: np.ndarray, patch_size: int) -> PatchSequence:
    """Cut a length-L vector into L/patch_size consecutive patches."""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    length = spectrum.shape[-1]
    if spectrum.ndim != 1:
        raise ValueError(f"expected a 1D spectrum, got shape {spectrum.shape}")
    if patch_size < 1 or length % patch_size != 0:
        raise DivisibilityError(f"patch size {patch_size} does not divide spectrum length {length}")
    return PatchSequence(spectrum.reshape(length // patch_size, patch_size), length)


def unpatchify(patches) -> np.ndarray:
    """Exact inverse of patchify: concatenate patch rows back into a spectrum."""
    if isinstance(patches, PatchSequence):
        patches = patches.patches
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise ValueError(f"expected an (n_patches, patch_size) matrix, got {patches.shape}")
    return patches.reshape(-1)


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator, draw_id: int = 0) -> MaskPlan:
    """Draw exactly round(ratio * n_patches) indices uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    count = _mask_count(ratio, n_patches)
    chosen = rng.choice(n_patches, size=count, replace=False)
    return MaskPlan(n_patches=n_patches, masked_indices=tuple(int(i) for i in chosen), ratio=ratio, draw_id=draw_id)
