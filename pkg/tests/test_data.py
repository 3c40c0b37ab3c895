import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pirta.data import (
    CANONICAL_DIMS,
    CANONICAL_SPACING,
    LABELS,
    DataError,
    ImageRecord,
    InfarctionType,
    RegistryEntry,
    Severity,
    StructuredFinding,
    Territory,
    TerritoryLabel,
    Volume,
    all_findings,
    load_volume,
    normalize_intensity,
    read_manifest,
    resample_pad,
    save_volume,
    write_manifest,
)


def test_territory_label_has_four_values_and_round_trips():
    assert [l.value for l in LABELS] == ["anterior", "deep_gray", "posterior", "normal"]
    for l in LABELS:
        assert TerritoryLabel(l.value) is l
        assert TerritoryLabel.from_index(l.index) is l


def test_volume_rejects_bad_input():
    with pytest.raises(DataError, match="non-finite"):
        Volume(np.full((2, 2, 2, 2), np.nan), (1, 1, 1))
    with pytest.raises(DataError, match="shape"):
        Volume(np.zeros((3, 2, 2, 2)), (1, 1, 1))
    with pytest.raises(DataError, match="spacing"):
        Volume(np.zeros((2, 2, 2, 2)), (1, 0, 1))


def test_volume_is_immutable():
    v = Volume(np.zeros((2, 2, 3, 4)), (1, 1, 1))
    assert v.dims == (2, 3, 4)
    with pytest.raises(ValueError):
        v.data[0, 0, 0, 0] = 1.0


def test_finding_normal_iff_fields_unset():
    StructuredFinding.normal()
    with pytest.raises(DataError):
        StructuredFinding(Severity.MILD, None, None)
    with pytest.raises(DataError):
        StructuredFinding(Severity.MILD, InfarctionType.SMALL_LACUNE, Territory.DEEP_GRAY_MATTER, is_normal=True)


def test_finding_space_and_territory_bijection():
    space = all_findings()
    assert len(space) == 2 * 5 * 3 + 1
    assert len(set(space)) == len(space)
    assert {f.label for f in space} == set(LABELS)
    pairs = {(f.territory, f.label) for f in space if not f.is_normal}
    assert pairs == {(Territory.ANTERIOR_CIRCULATION, TerritoryLabel.ANTERIOR),
                     (Territory.DEEP_GRAY_MATTER, TerritoryLabel.DEEP_GRAY),
                     (Territory.POSTERIOR_CIRCULATION, TerritoryLabel.POSTERIOR)}
    for f in space:
        assert StructuredFinding.from_dict(json.loads(json.dumps(f.to_dict()))) == f


@pytest.mark.parametrize("kw", [dict(age=17), dict(sex="male"), dict(nihss=43.0), dict(nihss=-1.0)])
def test_registry_invariants(kw):
    base = dict(age=75, sex="Female", presentation="Altered Mentality", nihss=32.0)
    base.update(kw)
    with pytest.raises(DataError):
        RegistryEntry(**base)


def test_record_label_must_match_finding():
    v = Volume(np.zeros((2, 2, 2, 2)), (1, 1, 1))
    reg = RegistryEntry(70, "Male")
    with pytest.raises(DataError, match="disagrees"):
        ImageRecord("a", v, TerritoryLabel.ANTERIOR, StructuredFinding.normal(), reg)
    with pytest.raises(DataError, match="split"):
        ImageRecord("a", v, TerritoryLabel.NORMAL, StructuredFinding.normal(), reg, split="val")


# ---------------------------------------------------------------------------
# resample_pad


def test_resample_identity_on_canonical_grid(rng):
    v = Volume(rng.normal(size=(2,) + CANONICAL_DIMS), CANONICAL_SPACING)
    assert resample_pad(v) is v


def test_resample_zero_volume_upsamples_to_zero():
    v = Volume(np.zeros((2, 48, 56, 24)), (4, 4, 8))
    out = resample_pad(v)
    assert out.dims == CANONICAL_DIMS
    assert not out.data.any()


def test_resample_constant_downsample_interior_is_one():
    v = Volume(np.ones((2, 192, 224, 96)), (1, 1, 2))
    out = resample_pad(v)
    assert out.dims == CANONICAL_DIMS
    np.testing.assert_allclose(out.data[:, 1:-1, 1:-1, 1:-1], 1.0, atol=1e-6)


def _trilinear(f, p):
    """Direct trilinear evaluation of grid ``f`` at fractional index ``p`` with edge clamping."""
    p = [min(max(c, 0.0), n - 1) for c, n in zip(p, f.shape)]
    i0 = [min(int(math.floor(c)), n - 2) if n > 1 else 0 for c, n in zip(p, f.shape)]
    t = [c - i for c, i in zip(p, i0)]
    acc = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((t[0] if dx else 1 - t[0]) * (t[1] if dy else 1 - t[1]) * (t[2] if dz else 1 - t[2]))
                if w:
                    acc += w * f[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return acc


def test_resample_matches_pointwise_trilinear_oracle(rng):
    src = rng.normal(size=(2, 7, 6, 5))
    v = Volume(src, (2.0, 3.0, 1.5))
    tgt_spacing = (1.5, 2.0, 2.5)
    n_out = [round(d * s / t) for d, s, t in zip(v.dims, v.spacing, tgt_spacing)]
    out = resample_pad(v, n_out, tgt_spacing)
    assert out.dims == tuple(n_out)
    for c in range(2):
        for idx in [(0, 0, 0), (3, 4, 1), (n_out[0] - 1, n_out[1] - 1, n_out[2] - 1), (5, 2, 2)]:
            p = [(i + 0.5) * t / s - 0.5 for i, s, t in zip(idx, v.spacing, tgt_spacing)]
            assert out.data[(c,) + idx] == pytest.approx(_trilinear(src[c].astype(np.float32), p), abs=1e-5)


def test_resample_pads_symmetrically_and_crops():
    v = Volume(np.ones((2, 4, 4, 4)), (1, 1, 1))
    out = resample_pad(v, (8, 6, 4), (1, 1, 1))
    assert out.data[0].sum() == 64
    assert out.data[0, 2:6, 1:5, :].all()
    cropped = resample_pad(Volume(np.arange(2 * 6 * 1 * 1, dtype=float).reshape(2, 6, 1, 1), (1, 1, 1)),
                           (2, 1, 1), (1, 1, 1))
    np.testing.assert_array_equal(cropped.data[0, :, 0, 0], [2, 3])


def test_resample_idempotent(rng):
    v = Volume(rng.normal(size=(2, 6, 6, 4)), (2, 2, 3))
    once = resample_pad(v, (8, 8, 4), (1.5, 1.5, 3))
    assert resample_pad(once, (8, 8, 4), (1.5, 1.5, 3)) == once


# ---------------------------------------------------------------------------
# normalize_intensity


def test_normalize_two_voxel_example():
    d = np.zeros((2, 3, 1, 1))
    d[0, 0, 0, 0], d[0, 2, 0, 0] = 1.0, 3.0
    out = normalize_intensity(Volume(d, (1, 1, 1))).data
    np.testing.assert_allclose(out[0, :, 0, 0], [-1.0, 0.0, 1.0])
    assert not out[1].any()


def test_normalize_zero_and_constant_channels():
    assert not normalize_intensity(Volume(np.zeros((2, 3, 3, 3)), (1, 1, 1))).data.any()
    d = np.zeros((2, 3, 3, 3))
    d[:, 1] = 5.0
    assert not normalize_intensity(Volume(d, (1, 1, 1))).data.any()


_vols = arrays(np.float64, (2, 3, 4, 2), elements=st.floats(-50, 50, allow_nan=False, width=32))


@settings(max_examples=60, deadline=None)
@given(_vols)
def test_normalize_moments_and_idempotence(data):
    v = Volume(data, (1, 1, 1))
    out = normalize_intensity(v)
    support = np.any(v.data != 0, axis=0)
    assert not out.data[:, ~support].any()
    for c in range(2):
        vals = out.data[c][support].astype(np.float64)
        if vals.size and np.ptp(v.data[c][support]) > 1e-3:
            assert abs(vals.mean()) < 1e-4
            assert abs(vals.std() - 1) < 1e-4
    twice = normalize_intensity(out)
    # idempotent wherever the support is unchanged by normalization
    if np.array_equal(np.any(out.data != 0, axis=0), support):
        np.testing.assert_allclose(twice.data, out.data, atol=1e-5)


# ---------------------------------------------------------------------------
# file formats


def test_volume_file_byte_layout(tmp_path):
    X, Y, Z = 3, 4, 5
    data = np.arange(2 * X * Y * Z, dtype=np.float32).reshape(2, X, Y, Z)
    save_volume(Volume(data, (1, 2, 3)), tmp_path / "v.f32")
    raw = np.frombuffer((tmp_path / "v.f32").read_bytes(), dtype="<f4")
    for c, x, y, z in [(0, 0, 0, 0), (0, 1, 0, 0), (1, 2, 3, 4), (0, 0, 1, 0), (1, 0, 0, 1)]:
        assert raw[((c * Z + z) * Y + y) * X + x] == data[c, x, y, z]
    meta = json.loads((tmp_path / "v.f32.json").read_text())
    assert meta == {"dims": [3, 4, 5], "spacing": [1.0, 2.0, 3.0], "channels": 2, "dtype": "f32le"}
    assert load_volume(tmp_path / "v.f32") == Volume(data, (1, 2, 3))


def test_load_volume_size_mismatch(tmp_path):
    save_volume(Volume(np.zeros((2, 2, 2, 2)), (1, 1, 1)), tmp_path / "v.f32")
    (tmp_path / "v.f32").write_bytes(b"\0" * 12)
    with pytest.raises(DataError, match="expected 16"):
        load_volume(tmp_path / "v.f32")


def test_manifest_round_trip_and_duplicates(tmp_path, rng):
    recs = [ImageRecord(f"r{i}", Volume(rng.normal(size=(2, 2, 2, 2)), (1, 1, 1)), l,
                        StructuredFinding.normal() if l is TerritoryLabel.NORMAL else
                        next(f for f in all_findings() if f.label is l),
                        RegistryEntry(60 + i, "Male", "Dysarthria", None, ("HTN",)),
                        "train" if i % 2 else "test")
            for i, l in enumerate(LABELS)]
    path = write_manifest(recs, tmp_path)
    back = read_manifest(path)
    assert [r.id for r in back] == [r.id for r in recs]
    for a, b in zip(recs, back):
        assert (a.label, a.finding, a.registry, a.split) == (b.label, b.finding, b.registry, b.split)
        assert a.volume == b.volume
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + lines[:1]) + "\n")
    with pytest.raises(DataError, match="duplicate"):
        read_manifest(path, load_volumes=False)
