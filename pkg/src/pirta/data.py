"""Core data model: volumes, findings, registry entries and dataset manifests.

Volumes are held as ``(C, X, Y, Z)`` float32 arrays. On disk a volume is a raw
little-endian float32 blob in channel-major, x-fastest order with a JSON
sidecar describing dims and spacing.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

CANONICAL_DIMS = (96, 112, 48)
CANONICAL_SPACING = (2.0, 2.0, 4.0)
N_CHANNELS = 2  # 0 = DWI, 1 = ADC


class TerritoryLabel(str, enum.Enum):
    ANTERIOR = "anterior"
    DEEP_GRAY = "deep_gray"
    POSTERIOR = "posterior"
    NORMAL = "normal"

    @property
    def index(self) -> int:
        return LABELS.index(self)

    @classmethod
    def from_index(cls, i: int) -> "TerritoryLabel":
        return LABELS[i]


LABELS: tuple[TerritoryLabel, ...] = tuple(TerritoryLabel)
LESION_LABELS = LABELS[:3]


class Severity(str, enum.Enum):
    STRONG = "strong"
    MILD = "mild"


class InfarctionType(str, enum.Enum):
    LARGE_VASCULAR_TERRITORIAL = "large_vascular_territorial"
    WEDGE_SHAPED_VASCULAR_TERRITORIAL = "wedge_shaped_vascular_territorial"
    SMALL_LACUNE = "small_lacune"
    SMALL_STRIATO_CAPSULAR = "small_striato_capsular"
    SMALL_DIFFUSION_RESTRICTION = "small_diffusion_restriction"

    @property
    def is_large(self) -> bool:
        return self in (InfarctionType.LARGE_VASCULAR_TERRITORIAL,
                        InfarctionType.WEDGE_SHAPED_VASCULAR_TERRITORIAL)


class Territory(str, enum.Enum):
    ANTERIOR_CIRCULATION = "anterior_circulation"
    POSTERIOR_CIRCULATION = "posterior_circulation"
    DEEP_GRAY_MATTER = "deep_gray_matter"


TERRITORY_TO_LABEL = {
    Territory.ANTERIOR_CIRCULATION: TerritoryLabel.ANTERIOR,
    Territory.DEEP_GRAY_MATTER: TerritoryLabel.DEEP_GRAY,
    Territory.POSTERIOR_CIRCULATION: TerritoryLabel.POSTERIOR,
}
LABEL_TO_TERRITORY = {v: k for k, v in TERRITORY_TO_LABEL.items()}


class DataError(ValueError):
    """Invalid volume, record or manifest content."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[0] != N_CHANNELS:
            raise DataError(f"volume data must have shape (2, X, Y, Z), got {data.shape}")
        if not np.all(np.isfinite(data)):
            bad = int(np.count_nonzero(~np.isfinite(data)))
            raise DataError(f"volume contains {bad} non-finite voxels")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise DataError(f"spacing must be three positive reals, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape[1:])

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class StructuredFinding:
    severity_class: Optional[Severity] = None
    infarction_type: Optional[InfarctionType] = None
    territory: Optional[Territory] = None
    is_normal: bool = False

    def __post_init__(self):
        fields_set = [self.severity_class, self.infarction_type, self.territory]
        if self.is_normal and any(f is not None for f in fields_set):
            raise DataError("a normal finding cannot carry severity, type or territory")
        if not self.is_normal and any(f is None for f in fields_set):
            raise DataError("a lesion finding needs severity, infarction type and territory")
        if not self.is_normal:
            object.__setattr__(self, "severity_class", Severity(self.severity_class))
            object.__setattr__(self, "infarction_type", InfarctionType(self.infarction_type))
            object.__setattr__(self, "territory", Territory(self.territory))

    @classmethod
    def normal(cls) -> "StructuredFinding":
        return cls(is_normal=True)

    @property
    def label(self) -> TerritoryLabel:
        if self.is_normal:
            return TerritoryLabel.NORMAL
        return TERRITORY_TO_LABEL[self.territory]

    def to_dict(self) -> dict:
        if self.is_normal:
            return {"is_normal": True}
        return {
            "is_normal": False,
            "severity_class": self.severity_class.value,
            "infarction_type": self.infarction_type.value,
            "territory": self.territory.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredFinding":
        if d.get("is_normal"):
            return cls.normal()
        return cls(Severity(d["severity_class"]), InfarctionType(d["infarction_type"]),
                   Territory(d["territory"]))


def all_findings() -> list[StructuredFinding]:
    """Every valid finding: 2 severities x 5 types x 3 territories, plus normal."""
    out = [StructuredFinding(s, t, terr) for s in Severity for t in InfarctionType for terr in Territory]
    out.append(StructuredFinding.normal())
    return out


@dataclass(frozen=True)
class RegistryEntry:
    age: int
    sex: str
    presentation: str = ""
    nihss: Optional[float] = None
    past_medical_history: tuple[str, ...] = ()

    def __post_init__(self):
        if int(self.age) != self.age or self.age < 18:
            raise DataError(f"age must be an integer >= 18, got {self.age}")
        if self.sex not in ("Male", "Female"):
            raise DataError(f"sex must be 'Male' or 'Female', got {self.sex!r}")
        if self.nihss is not None and not 0 <= self.nihss <= 42:
            raise DataError(f"NIHSS must lie in [0, 42], got {self.nihss}")
        object.__setattr__(self, "past_medical_history", tuple(self.past_medical_history))

    def to_dict(self) -> dict:
        return {
            "age": int(self.age),
            "sex": self.sex,
            "presentation": self.presentation,
            "nihss": self.nihss,
            "past_medical_history": list(self.past_medical_history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegistryEntry":
        return cls(int(d["age"]), d["sex"], d.get("presentation", ""), d.get("nihss"),
                   tuple(d.get("past_medical_history", ())))


@dataclass(frozen=True)
class ImageRecord:
    id: str
    volume: Optional[Volume]
    label: TerritoryLabel
    finding: StructuredFinding
    registry: RegistryEntry
    split: str = "train"
    volume_path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "label", TerritoryLabel(self.label))
        if self.finding.label is not self.label:
            raise DataError(
                f"record {self.id}: label {self.label.value} disagrees with finding "
                f"territory {self.finding.label.value}")
        if self.split not in ("train", "test"):
            raise DataError(f"record {self.id}: split must be 'train' or 'test'")
        if self.volume is None and self.volume_path is None:
            raise DataError(f"record {self.id}: needs a volume or a volume path")


# ---------------------------------------------------------------------------
# preprocessing


def resample_pad(v: Volume, target_dims: Sequence[int] = CANONICAL_DIMS,
                 target_spacing: Sequence[float] = CANONICAL_SPACING) -> Volume:
    """Resample ``v`` to ``target_spacing`` and centre it on a grid of ``target_dims``.

    Trilinear interpolation at voxel centres (edge values extended), followed by
    symmetric zero padding or cropping on each axis.
    """
    target_dims = tuple(int(d) for d in target_dims)
    target_spacing = tuple(float(s) for s in target_spacing)
    if len(target_dims) != 3 or min(target_dims) <= 0:
        raise DataError(f"target dims must be three positive integers, got {target_dims}")
    if len(target_spacing) != 3 or min(target_spacing) <= 0:
        raise DataError(f"target spacing must be three positive reals, got {target_spacing}")
    if v.dims == target_dims and v.spacing == target_spacing:
        return v

    if v.spacing == target_spacing:
        resampled = np.asarray(v.data)
    else:
        # number of target voxels covering the source field of view
        n_out = [max(1, int(round(d * s / t))) for d, s, t in zip(v.dims, v.spacing, target_spacing)]
        axes = [(np.arange(n) + 0.5) * t / s - 0.5 for n, s, t in zip(n_out, v.spacing, target_spacing)]
        coords = np.stack(np.meshgrid(*axes, indexing="ij"))
        resampled = np.stack([
            ndimage.map_coordinates(ch.astype(np.float64), coords, order=1, mode="nearest")
            for ch in v.data
        ])

    out = np.zeros((v.data.shape[0],) + target_dims, dtype=np.float32)
    src, dst = [], []
    for n, t in zip(resampled.shape[1:], target_dims):
        if n <= t:
            off = (t - n) // 2
            src.append(slice(0, n))
            dst.append(slice(off, off + n))
        else:
            off = (n - t) // 2
            src.append(slice(off, off + t))
            dst.append(slice(0, t))
    out[(slice(None), *dst)] = resampled[(slice(None), *src)]
    return Volume(out, target_spacing)


def normalize_intensity(v: Volume) -> Volume:
    """Standardize each channel to zero mean and unit variance over the brain support.

    The support is the set of voxels that are nonzero in any channel; voxels
    outside it stay zero. A channel that is constant on the support maps to zero.
    """
    data = np.asarray(v.data, dtype=np.float64)
    support = np.any(data != 0, axis=0)
    out = np.zeros_like(data)
    if support.any():
        for c in range(data.shape[0]):
            vals = data[c][support]
            std = vals.std()
            if std > 0:
                out[c][support] = (vals - vals.mean()) / std
    return Volume(out.astype(np.float32), v.spacing)


def preprocess(v: Volume, dims: Sequence[int], spacing: Sequence[float]) -> Volume:
    return normalize_intensity(resample_pad(v, dims, spacing))


# ---------------------------------------------------------------------------
# file formats


def save_volume(v: Volume, path: str | Path) -> None:
    """Write ``path`` (raw f32le, channel-major, x fastest) and ``path.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(v.data.transpose(0, 3, 2, 1)).astype("<f4")
    path.write_bytes(raw.tobytes())
    sidecar = {"dims": list(v.dims), "spacing": list(v.spacing), "channels": int(v.data.shape[0]),
               "dtype": "f32le"}
    Path(str(path) + ".json").write_text(json.dumps(sidecar))


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    meta = json.loads(sidecar_path.read_text())
    if meta.get("dtype") != "f32le":
        raise DataError(f"{sidecar_path}: unsupported dtype {meta.get('dtype')!r}")
    x, y, z = meta["dims"]
    c = meta["channels"]
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != c * x * y * z:
        raise DataError(f"{path}: expected {c * x * y * z} floats, found {raw.size}")
    data = raw.reshape(c, z, y, x).transpose(0, 3, 2, 1).astype(np.float32)
    return Volume(data, tuple(meta["spacing"]))


def record_to_dict(rec: ImageRecord, volume_path: Optional[str] = None) -> dict:
    return {
        "id": rec.id,
        "volume": volume_path or rec.volume_path,
        "label": rec.label.value,
        "finding": rec.finding.to_dict(),
        "registry": rec.registry.to_dict(),
        "split": rec.split,
    }


def write_manifest(records: Iterable[ImageRecord], data_dir: str | Path,
                   name: str = "manifest.jsonl") -> Path:
    """Write every volume under ``data_dir/volumes`` and one JSON line per record."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest = data_dir / name
    with manifest.open("w") as fh:
        for rec in records:
            rel = f"volumes/{rec.id}.f32"
            if rec.volume is not None:
                save_volume(rec.volume, data_dir / rel)
            fh.write(json.dumps(record_to_dict(rec, rel), sort_keys=True) + "\n")
    return manifest


def read_manifest(manifest: str | Path, load_volumes: bool = True) -> list[ImageRecord]:
    manifest = Path(manifest)
    records, seen = [], set()
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        d = json.loads(line)
        if d["id"] in seen:
            raise DataError(f"{manifest}:{lineno}: duplicate record id {d['id']!r}")
        seen.add(d["id"])
        vol = load_volume(manifest.parent / d["volume"]) if load_volumes else None
        records.append(ImageRecord(
            id=d["id"], volume=vol, label=TerritoryLabel(d["label"]),
            finding=StructuredFinding.from_dict(d["finding"]),
            registry=RegistryEntry.from_dict(d["registry"]), split=d["split"],
            volume_path=d["volume"]))
    return records
