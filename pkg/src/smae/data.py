"""Loading, validation, normalization and synthesis of spectral datasets.

The interchange format is a headered CSV: an optional leading ``label``
column (empty cell = unlabeled), intensity columns ``w1..wL``, and an
optional paired-reference block ``r1..rL`` (high-SNR ground truth). Class
grouping comes from a separate JSON file mapping class name to group name.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .seeding import substream


class DataFormatError(ValueError):
    """The file on disk does not match the expected CSV layout."""


@dataclass(frozen=True)
class Spectrum:
    """One intensity vector with an optional label and paired reference."""

    intensities: np.ndarray
    label: int | None = None
    reference: np.ndarray | None = None

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float64)
        object.__setattr__(self, "intensities", arr)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError(f"intensities must be a non-empty 1D vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities contain non-finite values")
        if self.label is not None and self.label < 0:
            raise ValueError(f"label must be >= 0, got {self.label}")
        if self.reference is not None:
            ref = np.asarray(self.reference, dtype=np.float64)
            object.__setattr__(self, "reference", ref)
            if ref.shape != arr.shape:
                raise ValueError(f"reference length {ref.shape} does not match intensities {arr.shape}")

    @property
    def length(self) -> int:
        return int(self.intensities.size)


class SpectraDataset:
    """Ordered collection of equal-length spectra."""

    def __init__(self, spectra, class_names=None, grouping=None):
        self.spectra: list[Spectrum] = list(spectra)
        if not self.spectra:
            raise DataFormatError("dataset is empty")
        self.length = self.spectra[0].length
        for i, s in enumerate(self.spectra):
            if s.length != self.length:
                raise ValueError(f"spectrum {i} has length {s.length}, expected {self.length}")
        self.class_names = list(class_names) if class_names is not None else None
        labels = [s.label for s in self.spectra if s.label is not None]
        if labels:
            n_classes = self.n_classes
            if n_classes is not None and max(labels) >= n_classes:
                raise ValueError(f"label {max(labels)} out of range for {n_classes} classes")
        self.grouping: dict[int, int] | None = None
        if grouping is not None:
            self.grouping = {int(k): int(v) for k, v in grouping.items()}
            for lab in labels:
                if lab not in self.grouping:
                    raise ValueError(f"grouping does not cover class id {lab}")

    def __len__(self) -> int:
        return len(self.spectra)

    def __getitem__(self, i: int) -> Spectrum:
        return self.spectra[i]

    def __iter__(self):
        return iter(self.spectra)

    @property
    def n_classes(self) -> int | None:
        if self.class_names is not None:
            return len(self.class_names)
        labels = [s.label for s in self.spectra if s.label is not None]
        return max(labels) + 1 if labels else None

    @property
    def has_labels(self) -> bool:
        return all(s.label is not None for s in self.spectra)

    @property
    def has_references(self) -> bool:
        return all(s.reference is not None for s in self.spectra)

    def intensity_matrix(self) -> np.ndarray:
        return np.stack([s.intensities for s in self.spectra])

    def labels_array(self) -> np.ndarray:
        if not self.has_labels:
            raise ValueError("dataset has unlabeled spectra")
        return np.array([s.label for s in self.spectra], dtype=np.intp)

    def subset(self, indices) -> "SpectraDataset":
        return SpectraDataset(
            [self.spectra[int(i)] for i in indices],
            class_names=self.class_names,
            grouping=self.grouping,
        )


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the Gaussian-peak synthetic generator.

    ``shared_peaks`` adds a common peak backbone to every class so classes
    differ only by their own (``class_amplitude``-scaled) peaks, mimicking
    related substances whose spectra overlap except for subtle bands.
    """

    n_classes: int = 3
    spectra_per_class: int = 200
    length: int = 200
    peaks_per_class: int = 5
    peak_width_range: tuple[float, float] = (3.0, 10.0)
    noise_sigma: float = 0.1
    seed: int = 0
    shared_peaks: int = 0
    class_amplitude: float = 1.0

    def __post_init__(self):
        if min(self.n_classes, self.spectra_per_class, self.length, self.peaks_per_class) < 1:
            raise ValueError("all counts must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        lo, hi = self.peak_width_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad peak width range {self.peak_width_range}")
        if self.shared_peaks < 0:
            raise ValueError(f"shared_peaks must be >= 0, got {self.shared_peaks}")
        if self.class_amplitude <= 0:
            raise ValueError(f"class_amplitude must be > 0, got {self.class_amplitude}")


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def load_csv(path, has_labels: bool | None = None, has_reference: bool | None = None) -> SpectraDataset:
    """Read a dataset from CSV.

    ``has_labels`` / ``has_reference`` default to what the header says;
    passing an explicit flag that contradicts the header is a format error.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows) < 2:
        raise DataFormatError(f"{path}: empty dataset (no data rows)")
    header = [h.strip() for h in rows[0]]
    labeled = bool(header) and header[0] == "label"
    if has_labels is not None and has_labels != labeled:
        raise DataFormatError(
            f"{path}: has_labels={has_labels} but header {'has' if labeled else 'lacks'} a label column"
        )
    ref_start = next((i for i, h in enumerate(header) if h == "r1"), None)
    referenced = ref_start is not None
    if has_reference is not None and has_reference != referenced:
        raise DataFormatError(
            f"{path}: has_reference={has_reference} but header {'has' if referenced else 'lacks'} r1..rL columns"
        )
    first = 1 if labeled else 0
    if referenced:
        length = ref_start - first
        if length < 1 or (len(header) - ref_start) != length:
            raise DataFormatError(f"{path}: reference block size does not match intensity block")
    else:
        length = len(header) - first
    if length < 1:
        raise DataFormatError(f"{path}: no intensity columns found")

    spectra = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(c.strip() == "" for c in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(
                f"{path}: row {line_no} has {len(row)} cells, expected {len(header)}"
            )
        label = None
        if labeled:
            cell = row[0].strip()
            if cell:
                try:
                    label = int(cell)
                except ValueError as exc:
                    raise DataFormatError(f"{path}: row {line_no} has non-integer label {cell!r}") from exc
        try:
            values = [float(c) for c in row[first : first + length]]
            reference = [float(c) for c in row[ref_start:]] if referenced else None
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {line_no} has a non-numeric cell") from exc
        if not all(math.isfinite(v) for v in values) or (
            reference is not None and not all(math.isfinite(v) for v in reference)
        ):
            raise DataFormatError(f"{path}: row {line_no} contains a non-finite value")
        spectra.append(Spectrum(np.array(values), label=label, reference=np.array(reference) if reference else None))
    if not spectra:
        raise DataFormatError(f"{path}: empty dataset (no data rows)")
    return SpectraDataset(spectra)


def save_csv(dataset: SpectraDataset, path) -> None:
    """Write a dataset in the canonical header layout; values round-trip exactly."""
    length = dataset.length
    labeled = any(s.label is not None for s in dataset)
    referenced = dataset.has_references
    header = (["label"] if labeled else []) + [f"w{i + 1}" for i in range(length)]
    if referenced:
        header += [f"r{i + 1}" for i in range(length)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in dataset:
            row = []
            if labeled:
                row.append("" if s.label is None else str(s.label))
            row += [repr(float(v)) for v in s.intensities]
            if referenced:
                row += [repr(float(v)) for v in s.reference]
            writer.writerow(row)


def load_grouping(path, class_names: list[str]) -> tuple[dict[int, int], list[str]]:
    """Read a class-name -> group-name JSON map into id space.

    Group ids follow sorted group-name order. Every class must be covered.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise DataFormatError(f"{path}: grouping file must be a JSON object")
    missing = [name for name in class_names if name not in raw]
    if missing:
        raise DataFormatError(f"{path}: grouping missing classes {missing}")
    group_names = sorted(set(str(raw[name]) for name in class_names))
    group_id = {g: i for i, g in enumerate(group_names)}
    return {i: group_id[str(raw[name])] for i, name in enumerate(class_names)}, group_names


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize_minmax(spectrum: Spectrum) -> Spectrum:
    """Affinely map intensities to [0, 1]; a constant spectrum maps to zeros.

    The paired reference, when present, goes through the same affine map so
    that denoising metrics stay comparable.
    """
    x = spectrum.intensities
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        scale = 0.0
    else:
        scale = 1.0 / (hi - lo)
    mapped = (x - lo) * scale
    ref = None if spectrum.reference is None else (spectrum.reference - lo) * scale
    return replace(spectrum, intensities=mapped, reference=ref)


def normalize_dataset(dataset: SpectraDataset) -> SpectraDataset:
    return SpectraDataset(
        [normalize_minmax(s) for s in dataset],
        class_names=dataset.class_names,
        grouping=dataset.grouping,
    )


# ---------------------------------------------------------------------------
# synthesis and splitting
# ---------------------------------------------------------------------------

def _peak_sum(rng: np.random.Generator, config: SynthConfig, n_peaks: int) -> np.ndarray:
    grid = np.arange(config.length, dtype=np.float64)
    lo_w, hi_w = config.peak_width_range
    centers = rng.uniform(0.05 * config.length, 0.95 * config.length, size=n_peaks)
    widths = rng.uniform(lo_w, hi_w, size=n_peaks)
    amps = rng.uniform(0.5, 1.5, size=n_peaks)
    out = np.zeros(config.length)
    for mu, w, a in zip(centers, widths, amps):
        out += a * np.exp(-0.5 * ((grid - mu) / w) ** 2)
    return out


def class_templates(config: SynthConfig) -> np.ndarray:
    """Noiseless per-class templates (n_classes, length)."""
    rng = substream(config.seed, "synth-templates")
    base = _peak_sum(rng, config, config.shared_peaks) if config.shared_peaks else 0.0
    templates = np.zeros((config.n_classes, config.length))
    for c in range(config.n_classes):
        templates[c] = base + config.class_amplitude * _peak_sum(rng, config, config.peaks_per_class)
    return templates


def generate_synthetic(config: SynthConfig) -> SpectraDataset:
    """Labeled spectra as noisy copies of fixed per-class peak templates.

    The noiseless template rides along in each spectrum's reference field.
    Deterministic for a fixed seed.
    """
    templates = class_templates(config)
    noise_rng = substream(config.seed, "synth-noise")
    spectra = []
    for c in range(config.n_classes):
        for _ in range(config.spectra_per_class):
            noise = noise_rng.standard_normal(config.length) * config.noise_sigma
            spectra.append(Spectrum(templates[c] + noise, label=c, reference=templates[c].copy()))
    names = [f"class_{c}" for c in range(config.n_classes)]
    return SpectraDataset(spectra, class_names=names)


def split_dataset(dataset: SpectraDataset, first_count: int, seed: int, stratified: bool = True):
    """Deterministic split into (first, rest).

    With labels and ``stratified``, ``first_count`` is taken per class;
    otherwise it is a total count over a seeded shuffle.
    """
    rng = substream(seed, "dataset-split")
    n = len(dataset)
    if stratified and dataset.has_labels:
        by_class: dict[int, list[int]] = {}
        for i, s in enumerate(dataset):
            by_class.setdefault(s.label, []).append(i)
        first_idx: list[int] = []
        rest_idx: list[int] = []
        for c in sorted(by_class):
            order = np.array(by_class[c])[rng.permutation(len(by_class[c]))]
            first_idx += [int(i) for i in order[:first_count]]
            rest_idx += [int(i) for i in order[first_count:]]
        first_idx.sort()
        rest_idx.sort()
    else:
        order = rng.permutation(n)
        first_idx = sorted(int(i) for i in order[:first_count])
        rest_idx = sorted(int(i) for i in order[first_count:])
    if not first_idx or not rest_idx:
        raise ValueError(f"split of {n} spectra with first_count={first_count} leaves an empty side")
    return dataset.subset(first_idx), dataset.subset(rest_idx)
