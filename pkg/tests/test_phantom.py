import dataclasses
import json

import numpy as np
import pytest

from pirta.data import LABELS, LESION_LABELS, InfarctionType, Severity, StructuredFinding, TerritoryLabel
from pirta.phantom import (
    DEFAULT_COUNTS,
    PhantomConfig,
    brain_mask,
    eligible_centres,
    generate_dataset,
    generate_phantom,
    generate_unlabeled_pool,
    lesion_gains,
    phantom_base,
    territory_mask,
    validate_config,
    write_config,
)

CFG = PhantomConfig()


def _finding(label, severity=Severity.MILD, itype=InfarctionType.LARGE_VASCULAR_TERRITORIAL):
    from pirta.data import LABEL_TO_TERRITORY
    if label is TerritoryLabel.NORMAL:
        return StructuredFinding.normal()
    return StructuredFinding(severity, itype, LABEL_TO_TERRITORY[label])


def test_masks_pairwise_disjoint_and_nonempty():
    masks = {l: territory_mask(l, CFG) for l in LESION_LABELS}
    for a in LESION_LABELS:
        assert masks[a].any()
        for b in LESION_LABELS:
            if a is not b:
                assert not (masks[a] & masks[b]).any()


def test_deep_gray_contains_centroid():
    X, Y, Z = CFG.dims
    assert territory_mask(TerritoryLabel.DEEP_GRAY, CFG)[X // 2, Y // 2, Z // 2]


def test_union_inside_brain_by_voxel_scan():
    X, Y, Z = CFG.dims
    a = CFG.brain_ellipsoid_semi_axes
    union = np.zeros(CFG.dims, bool)
    for l in LESION_LABELS:
        union |= territory_mask(l, CFG)
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                if union[x, y, z]:
                    r2 = (((x - (X - 1) / 2) / a[0]) ** 2 + ((y - (Y - 1) / 2) / a[1]) ** 2
                          + ((z - (Z - 1) / 2) / a[2]) ** 2)
                    assert r2 <= 1.0


def test_mask_geometry_regions():
    X, Y, Z = CFG.dims
    ant = territory_mask(TerritoryLabel.ANTERIOR, CFG)
    post = territory_mask(TerritoryLabel.POSTERIOR, CFG)
    ys, zs = np.nonzero(ant)[1], np.nonzero(ant)[2]
    assert ys.min() >= 2 * Y / 3 and zs.min() >= Z / 4
    py, pz = np.nonzero(post)[1], np.nonzero(post)[2]
    assert np.all((py < Y / 3) | (pz < Z / 4))


def test_mask_for_plain_dims_and_normal_rejected():
    assert territory_mask(TerritoryLabel.ANTERIOR, (32, 32, 16)).shape == (32, 32, 16)
    with pytest.raises(ValueError):
        territory_mask(TerritoryLabel.NORMAL, CFG)


def test_largest_lesion_fits_every_territory():
    validate_config(CFG)
    for l in LESION_LABELS:
        assert eligible_centres(l, CFG, CFG.lesion_radius_range[1]).any()
    with pytest.raises(ValueError, match="does not fit"):
        validate_config(PhantomConfig(lesion_radius_range=(6.0, 9.0)))


def test_config_validation_and_strict_dict():
    with pytest.raises(ValueError):
        PhantomConfig(dwi_lesion_gain=-1)
    with pytest.raises(ValueError):
        PhantomConfig(adc_lesion_gain=0.2)
    with pytest.raises(ValueError, match="unknown"):
        PhantomConfig.from_dict({"bogus": 1})
    assert PhantomConfig.from_dict(json.loads(json.dumps(CFG.to_dict()))) == CFG


def test_normal_phantom_is_base_plus_noise():
    rec = generate_phantom(TerritoryLabel.NORMAL, _finding(TerritoryLabel.NORMAL), CFG)
    dev = rec.volume.data - phantom_base(CFG)
    assert np.abs(dev).max() <= 5 * CFG.noise_sigma
    assert not dev[:, ~brain_mask(CFG)].any()


def test_lesion_disabled_oracle_and_gains():
    f = _finding(TerritoryLabel.ANTERIOR, Severity.STRONG)
    rec = generate_phantom(TerritoryLabel.ANTERIOR, f, CFG)
    clean = generate_phantom(TerritoryLabel.ANTERIOR, f, CFG, lesion=False)
    diff = rec.volume.data.astype(np.float64) - clean.volume.data
    lesion = np.abs(diff[0]) > 1e-6
    dwi, adc = lesion_gains(CFG, Severity.STRONG)
    assert dwi == pytest.approx(1.5 * CFG.dwi_lesion_gain)
    np.testing.assert_allclose(diff[0][lesion], dwi, atol=1e-5)
    np.testing.assert_allclose(diff[1][lesion], adc, atol=1e-5)
    assert not np.abs(diff[:, ~lesion]).max() > 1e-6
    assert (lesion & ~territory_mask(TerritoryLabel.ANTERIOR, CFG)).sum() == 0


@pytest.mark.parametrize("label", LESION_LABELS)
def test_lesion_centroid_inside_true_territory(label):
    for i in range(5):
        cfg = dataclasses.replace(CFG, seed=100 + i)
        rec = generate_phantom(label, _finding(label, itype=InfarctionType.SMALL_LACUNE), cfg)
        d = rec.volume.data[0] - phantom_base(cfg)[0]
        best = np.unravel_index(np.argmax(d), d.shape)
        assert territory_mask(label, cfg)[best]


def test_phantom_determinism():
    f = _finding(TerritoryLabel.POSTERIOR)
    a = generate_phantom(TerritoryLabel.POSTERIOR, f, CFG)
    b = generate_phantom(TerritoryLabel.POSTERIOR, f, CFG)
    assert a == b
    c = generate_phantom(TerritoryLabel.POSTERIOR, f, dataclasses.replace(CFG, seed=1))
    assert a.volume != c.volume


def test_dataset_counts_ids_and_splits():
    recs = generate_dataset({"train": {l: 2 for l in LABELS}})
    assert len(recs) == 8
    assert all(sum(r.label is l for r in recs) == 2 for l in LABELS)
    assert generate_dataset({"train": {}, "test": {}}) == []
    with pytest.raises(ValueError):
        generate_dataset({"train": {TerritoryLabel.ANTERIOR: -1}})


def test_default_desk_dataset():
    recs = generate_dataset()
    assert len(recs) == 260
    train = {r.id for r in recs if r.split == "train"}
    test = {r.id for r in recs if r.split == "test"}
    assert len(train) == 200 and len(test) == 60 and not train & test
    for split, per in DEFAULT_COUNTS.items():
        for l in LABELS:
            assert sum(r.label is l and r.split == split for r in recs) == per[l]
    for r in recs:
        assert r.finding.label is r.label
    # train and test never reuse a phantom
    vols = {r.volume.data.tobytes() for r in recs}
    assert len(vols) == len(recs)


def test_dataset_determinism():
    a = generate_dataset({"train": {l: 1 for l in LABELS}, "test": {l: 1 for l in LABELS}})
    b = generate_dataset({"train": {l: 1 for l in LABELS}, "test": {l: 1 for l in LABELS}})
    assert [(r.id, r.volume, r.finding, r.registry) for r in a] == [(r.id, r.volume, r.finding, r.registry) for r in b]


def test_separability_in_standard_errors():
    """Mean DWI over the true territory beats every other territory by three standard errors
    of the masked-mean difference."""
    recs = generate_dataset()
    sigma = CFG.noise_sigma
    masks = {l: territory_mask(l, CFG) for l in LESION_LABELS}
    for r in recs:
        if r.label is TerritoryLabel.NORMAL:
            continue
        dwi = r.volume.data[0].astype(np.float64)
        true = masks[r.label]
        for other in LESION_LABELS:
            if other is r.label:
                continue
            m = masks[other]
            se = sigma * np.sqrt(1 / true.sum() + 1 / m.sum())
            assert dwi[true].mean() - dwi[m].mean() >= 3 * se, (r.id, other)


def test_registry_distribution_ranges():
    recs = generate_dataset()
    for r in recs:
        assert 18 <= r.registry.age <= 95
        assert r.registry.nihss is None or 0 <= r.registry.nihss <= 42
    males = sum(r.registry.sex == "Male" for r in recs) / len(recs)
    assert 0.4 < males < 0.7


def test_unlabeled_pool_and_config_file(tmp_path):
    pool = generate_unlabeled_pool(8)
    assert len({r.id for r in pool}) == 8 and all(r.id.startswith("extra-") for r in pool)
    train_ids = {r.volume.data.tobytes() for r in generate_dataset()}
    assert not {r.volume.data.tobytes() for r in pool} & train_ids
    write_config(CFG, tmp_path / "phantom.json")
    doc = json.loads((tmp_path / "phantom.json").read_text())
    assert doc["config"]["noise_sigma"] == CFG.noise_sigma
