import warnings

import numpy as np
import pytest

from autorig.metrics import point_segment_distance
from autorig.skeleton import bone_segments, validate_rig
from autorig.synth import TEMPLATES, epoch_subset, make_splits, synth_dataset, synth_rig


def test_chain_argmax_is_nearest_driving_bone(chain_rig):
    skel = chain_rig.skeleton
    assert len(bone_segments(skel)) == 3
    segs = bone_segments(skel)
    d = point_segment_distance(chain_rig.mesh.vertices, segs[:, 0], segs[:, 1])
    # bone i runs from its parent joint, which is the joint carrying its weight
    drivers = np.array([p for p in skel.parents if p >= 0])
    nearest_driver = drivers[d.argmin(axis=1)]
    assert np.all(chain_rig.skin.matrix.argmax(axis=1) == nearest_driver)


def test_same_seed_is_byte_identical():
    a, b = synth_rig(5, 6, "quadruped"), synth_rig(5, 6, "quadruped")
    assert a.mesh.vertices.tobytes() == b.mesh.vertices.tobytes()
    assert a.mesh.faces.tobytes() == b.mesh.faces.tobytes()
    assert a.skin.matrix.tobytes() == b.skin.matrix.tobytes()
    assert a.skeleton.joints.tobytes() == b.skeleton.joints.tobytes()


@pytest.mark.parametrize("template", TEMPLATES)
def test_every_template_is_valid(template):
    for seed in range(3):
        asset = synth_rig(seed, 3 + 2 * seed, template)
        assert validate_rig(asset) == []
        assert np.abs(asset.mesh.vertices).max() <= 1 + 1e-12


def test_k_range_and_template_errors():
    with pytest.raises(ValueError):
        synth_rig(0, 1)
    with pytest.raises(ValueError):
        synth_rig(0, 101)
    with pytest.raises(ValueError):
        synth_rig(0, 4, "octopus")


def _entries(counts):
    return [{"path": f"{c}_{i}", "category": c} for c, n in counts.items() for i in range(n)]


def test_split_ratio_per_category():
    man = make_splits(_entries({"humanoid": 21}), 20, 0)
    assert sum(e["split"] == "test" for e in man) == 1
    assert sum(e["split"] == "train" for e in man) == 20
    man = make_splits(_entries({"humanoid": 21, "quadruped": 42}), 20, 0)
    for cat, n_test in (("humanoid", 1), ("quadruped", 2)):
        assert sum(e["split"] == "test" and e["category"] == cat for e in man) == n_test
    assert make_splits(_entries({"humanoid": 21}), 20, 3) == make_splits(_entries({"humanoid": 21}), 20, 3)


def test_single_asset_category_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        man = make_splits(_entries({"vehicle": 1}), 20, 0)
    assert caught and man[0]["split"] == "train"


def test_epoch_subset_fraction():
    man = make_splits(_entries({"simple_character": 50, "quadruped": 10}), 20, 0)
    sub = epoch_subset(man, 0, 0)
    chars = [e for e in sub if e["category"] == "simple_character"]
    n_chars = sum(e["split"] == "train" and e["category"] == "simple_character" for e in man)
    assert len(chars) == round(0.2 * n_chars)
    assert sum(e["category"] == "quadruped" for e in sub) == sum(
        e["split"] == "train" and e["category"] == "quadruped" for e in man)
    assert sub == epoch_subset(man, 0, 0) and sub != epoch_subset(man, 1, 0)


def test_dataset_cycles_templates():
    assets = synth_dataset(0, 10)
    cats = [a.category for a in assets]
    assert cats[:5] == cats[5:]
    assert all(validate_rig(a) == [] for a in assets)
