"""Seeded synthetic two-channel brain phantoms with territory-localized lesions.

Geometry lives on the voxel grid, with ``y`` pointing anterior and ``z``
superior. The brain is an ellipsoid centred on the grid; intensity is flat
inside an inner core (``core_fraction`` of the ellipsoid radius) and rolls off
smoothly to zero at the ellipsoid surface. Territory masks are axis-aligned
regions of the core, so every lesion sits on a flat background.
"""
from __future__ import annotations

import dataclasses
import functools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from scipy import ndimage

from .data import (
    LABEL_TO_TERRITORY,
    LABELS,
    LESION_LABELS,
    ImageRecord,
    InfarctionType,
    RegistryEntry,
    Severity,
    StructuredFinding,
    TerritoryLabel,
    Volume,
)

DESK_DIMS = (32, 32, 16)
# Same field of view as the canonical 96x112x48 grid at (2, 2, 4) mm.
DESK_SPACING = (6.0, 7.0, 12.0)

PRESENTATIONS = ("Altered Mentality", "Right-sided weakness", "Left-sided weakness",
                 "Dysarthria", "Aphasia", "Dizziness", "")
HISTORY_PRIORS = (("HTN", 0.6), ("DM", 0.3), ("Afib", 0.25), ("Dyslipidemia", 0.3),
                  ("CAD", 0.15), ("Smoking", 0.2))

SPLIT_CODES = {"train": 0, "test": 1, "extra": 2}


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = DESK_DIMS
    spacing: tuple[float, float, float] = DESK_SPACING
    brain_ellipsoid_semi_axes: tuple[float, float, float] = (15.0, 15.0, 7.5)
    core_fraction: float = 0.9
    dwi_base: float = 1.0
    adc_base: float = 1.0
    noise_sigma: float = 0.15
    lesion_radius_range: tuple[float, float] = (2.5, 3.5)
    dwi_lesion_gain: float = 1.0
    adc_lesion_gain: float = -0.6
    strong_gain_factor: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.dwi_lesion_gain <= 0:
            raise ValueError("dwi_lesion_gain must be positive (lesions are DWI-hyperintense)")
        if self.adc_lesion_gain >= 0:
            raise ValueError("adc_lesion_gain must be negative (lesions are ADC-hypointense)")
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad lesion_radius_range {self.lesion_radius_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def lesion_radii(self, r: float) -> np.ndarray:
        return np.full(3, float(r))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhantomConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@functools.lru_cache(maxsize=8)
def _ellipsoid_radius(dims, semi_axes) -> np.ndarray:
    centre = [(d - 1) / 2 for d in dims]
    axes = [(np.arange(d) - c) / a for d, c, a in zip(dims, centre, semi_axes)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    rho = np.sqrt(gx ** 2 + gy ** 2 + gz ** 2)
    rho.setflags(write=False)
    return rho


def brain_mask(cfg: PhantomConfig) -> np.ndarray:
    return _ellipsoid_radius(cfg.dims, cfg.brain_ellipsoid_semi_axes) <= 1.0


def brain_profile(cfg: PhantomConfig) -> np.ndarray:
    """Unit intensity profile: 1 in the core, smoothstep roll-off to 0 at the surface."""
    rho = _ellipsoid_radius(cfg.dims, cfg.brain_ellipsoid_semi_axes)
    t = np.clip((1.0 - rho) / (1.0 - cfg.core_fraction), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@functools.lru_cache(maxsize=32)
def _territory_mask(label: TerritoryLabel, dims, semi_axes, core_fraction) -> np.ndarray:
    X, Y, Z = dims
    ix, iy, iz = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    core = _ellipsoid_radius(dims, semi_axes) <= core_fraction
    inferior = iz < Z / 4
    if label is TerritoryLabel.ANTERIOR:
        region = (iy >= 2 * Y / 3) & ~inferior
    elif label is TerritoryLabel.POSTERIOR:
        region = (iy < Y / 3) | inferior
    elif label is TerritoryLabel.DEEP_GRAY:
        cx, cz = (X - 1) / 2, (Z - 1) / 2
        region = ((np.abs(ix - cx) <= X / 5) & (iy >= Y / 3) & (iy < 2 * Y / 3)
                  & ~inferior & (np.abs(iz - cz) <= Z / 4))
    else:
        raise ValueError("the normal label has no territory mask")
    mask = region & core
    mask.setflags(write=False)
    return mask


def territory_mask(label: TerritoryLabel, cfg_or_dims) -> np.ndarray:
    """Boolean grid of the voxels belonging to a vascular territory.

    anterior is the front third (high y) above the inferior quarter; posterior is
    the back third plus the inferior quarter (low z); deep gray is a central box
    around the grid centroid. All three are clipped to the flat brain core and are
    pairwise disjoint. Accepts a :class:`PhantomConfig` or plain dims (default
    brain geometry scaled to those dims).
    """
    label = TerritoryLabel(label)
    if label is TerritoryLabel.NORMAL:
        raise ValueError("the normal label has no territory mask")
    if isinstance(cfg_or_dims, PhantomConfig):
        cfg = cfg_or_dims
    else:
        dims = tuple(int(d) for d in cfg_or_dims)
        cfg = PhantomConfig(dims=dims, brain_ellipsoid_semi_axes=tuple(d * 15 / 32 for d in dims))
    return _territory_mask(label, cfg.dims, tuple(cfg.brain_ellipsoid_semi_axes), cfg.core_fraction)


def _lesion_offsets(radii: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Structuring element of an axis-aligned ellipsoid and its voxel offsets."""
    half = np.floor(radii).astype(int)
    axes = [np.arange(-h, h + 1) for h in half]
    g = np.meshgrid(*axes, indexing="ij")
    inside = sum((gi / r) ** 2 for gi, r in zip(g, radii)) <= 1.0
    return inside, np.stack([gi[inside] for gi in g], axis=1)


def eligible_centres(label: TerritoryLabel, cfg: PhantomConfig, radius: float) -> np.ndarray:
    """Voxels where a lesion of ``radius`` fits entirely inside the territory mask."""
    mask = territory_mask(label, cfg)
    struct, _ = _lesion_offsets(cfg.lesion_radii(radius))
    return ndimage.binary_erosion(mask, structure=struct, border_value=0)


def validate_config(cfg: PhantomConfig) -> None:
    """Raise if the largest lesion does not fit in some territory."""
    for label in LESION_LABELS:
        if not eligible_centres(label, cfg, cfg.lesion_radius_range[1]).any():
            raise ValueError(
                f"lesion radius {cfg.lesion_radius_range[1]} does not fit inside the "
                f"{label.value} territory on grid {cfg.dims}")


def lesion_radius_bucket(cfg: PhantomConfig, infarction_type: InfarctionType) -> tuple[float, float]:
    lo, hi = cfg.lesion_radius_range
    mid = (lo + hi) / 2
    return (mid, hi) if InfarctionType(infarction_type).is_large else (lo, mid)


def lesion_gains(cfg: PhantomConfig, severity: Severity) -> tuple[float, float]:
    f = cfg.strong_gain_factor if Severity(severity) is Severity.STRONG else 1.0
    return cfg.dwi_lesion_gain * f, cfg.adc_lesion_gain * f


def phantom_base(cfg: PhantomConfig) -> np.ndarray:
    """Noise-free, lesion-free two-channel intensity, shape (2, X, Y, Z)."""
    prof = brain_profile(cfg)
    return np.stack([cfg.dwi_base * prof, cfg.adc_base * prof])


def sample_registry(rng: np.random.Generator, label: TerritoryLabel) -> RegistryEntry:
    age = int(np.clip(round(rng.normal(68.0, 13.0)), 18, 95))
    sex = "Male" if rng.random() < 0.55 else "Female"
    presentation = PRESENTATIONS[rng.integers(len(PRESENTATIONS))]
    nihss = None
    if label is TerritoryLabel.NORMAL:
        if rng.random() < 0.5:
            nihss = float(rng.integers(0, 5))
    elif rng.random() < 0.85:
        nihss = float(rng.integers(0, 43))
    history = tuple(name for name, p in HISTORY_PRIORS if rng.random() < p)
    return RegistryEntry(age, sex, presentation, nihss, history)


def generate_phantom(label: TerritoryLabel, finding: StructuredFinding, cfg: PhantomConfig,
                     record_id: str = "phantom", split: str = "train",
                     lesion: bool = True) -> ImageRecord:
    """Build one phantom record; bit-identical for identical arguments.

    Noise, lesion placement and registry draws use independent child streams of
    ``cfg.seed``, so ``lesion=False`` reproduces the exact lesion-free image.
    """
    label = TerritoryLabel(label)
    noise_ss, lesion_ss, registry_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    inside = brain_mask(cfg)
    data = phantom_base(cfg)
    noise = np.random.default_rng(noise_ss).normal(0.0, cfg.noise_sigma, size=data.shape)
    data = data + noise * inside

    if label is not TerritoryLabel.NORMAL and lesion:
        rng = np.random.default_rng(lesion_ss)
        r = rng.uniform(*lesion_radius_bucket(cfg, finding.infarction_type))
        centres = np.argwhere(eligible_centres(label, cfg, r))
        if len(centres) == 0:
            raise ValueError(f"no room for a radius-{r:.2f} lesion in {label.value}")
        centre = centres[rng.integers(len(centres))]
        _, offsets = _lesion_offsets(cfg.lesion_radii(r))
        vox = tuple((centre + offsets).T)
        dwi_gain, adc_gain = lesion_gains(cfg, finding.severity_class)
        data[0][vox] += dwi_gain
        data[1][vox] += adc_gain

    registry = sample_registry(np.random.default_rng(registry_ss), label)
    volume = Volume(data.astype(np.float32), cfg.spacing)
    return ImageRecord(record_id, volume, label, finding, registry, split)


def sample_finding(rng: np.random.Generator, label: TerritoryLabel) -> StructuredFinding:
    if label is TerritoryLabel.NORMAL:
        return StructuredFinding.normal()
    sev = list(Severity)[rng.integers(2)]
    itype = list(InfarctionType)[rng.integers(len(InfarctionType))]
    return StructuredFinding(sev, itype, LABEL_TO_TERRITORY[label])


def _record_seeds(cfg: PhantomConfig, split: str, label: TerritoryLabel, i: int) -> tuple[int, int]:
    ss = np.random.SeedSequence([cfg.seed, SPLIT_CODES[split], label.index, i])
    phantom_seed, finding_seed = ss.generate_state(2)
    return int(phantom_seed), int(finding_seed)


def _one(cfg: PhantomConfig, split: str, label: TerritoryLabel, i: int, prefix: str) -> ImageRecord:
    phantom_seed, finding_seed = _record_seeds(cfg, split, label, i)
    finding = sample_finding(np.random.default_rng(finding_seed), label)
    rec_split = "train" if split == "extra" else split
    return generate_phantom(label, finding, dataclasses.replace(cfg, seed=phantom_seed),
                            record_id=f"{prefix}-{label.value}-{i:04d}", split=rec_split)


DEFAULT_COUNTS = {
    "train": {label: 50 for label in LABELS},
    "test": {label: 15 for label in LABELS},
}


def generate_dataset(counts: Optional[Mapping] = None, cfg: Optional[PhantomConfig] = None) -> list[ImageRecord]:
    """Generate exact per-class counts for each split.

    ``counts`` maps split name to a ``{TerritoryLabel: n}`` mapping; the seed of
    every record is derived from ``(cfg.seed, split, label, index)`` so splits
    never share a seed stream.
    """
    counts = DEFAULT_COUNTS if counts is None else counts
    cfg = cfg or PhantomConfig()
    validate_config(cfg)
    records = []
    for split in ("train", "test"):
        per_class = counts.get(split, {})
        for label in LABELS:
            n = int(per_class.get(label, per_class.get(label.value, 0)))
            if n < 0:
                raise ValueError(f"negative count for {split}/{label.value}")
            records.extend(_one(cfg, split, label, i, split) for i in range(n))
    return records


def generate_unlabeled_pool(n: int, cfg: Optional[PhantomConfig] = None) -> list[ImageRecord]:
    """Extra phantoms for self-supervised pretraining; labels cycle over all classes."""
    cfg = cfg or PhantomConfig()
    validate_config(cfg)
    return [_one(cfg, "extra", LABELS[i % len(LABELS)], i, "extra") for i in range(n)]


def write_config(cfg: PhantomConfig, path: str | Path) -> None:
    """Write ``phantom.json`` with every parameter and the distributions it feeds."""
    doc = {
        "config": cfg.to_dict(),
        "distributions": {
            "noise": "iid Normal(0, noise_sigma) in both channels, inside the brain ellipsoid",
            "lesion_radius": "Uniform over the upper half of lesion_radius_range for large/wedge types, "
                             "lower half for lacune/striatocapsular/small",
            "lesion_centre": "uniform over voxels where the whole lesion fits in the territory mask",
            "lesion_contrast": "DWI += dwi_lesion_gain, ADC += adc_lesion_gain; x strong_gain_factor "
                               "for strong severity",
            "severity": "uniform over {strong, mild}",
            "infarction_type": "uniform over the five types",
            "age": "round(Normal(68, 13)) clipped to [18, 95]",
            "sex": "Male with p=0.55",
            "presentation": list(PRESENTATIONS),
            "nihss": "lesion: present w.p. 0.85, uniform integer 0..42; normal: present w.p. 0.5, "
                     "uniform integer 0..4",
            "past_medical_history": dict(HISTORY_PRIORS),
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2))
