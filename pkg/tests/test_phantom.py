import numpy as np
import pytest
from scipy import ndimage

from liversynth.config import PhantomParams
from liversynth.core import LIVER
from liversynth.core import TUMOR
from liversynth.dataset import load_record
from liversynth.phantom import generate_phantom
from liversynth.phantom import generate_phantom_dataset


def test_phantom_is_deterministic(phantom_params):
    first = generate_phantom(11, phantom_params)
    second = generate_phantom(11, phantom_params)
    assert first.volume.data.tobytes() == second.volume.data.tobytes()
    assert first.label.data.tobytes() == second.label.data.tobytes()
    other = generate_phantom(12, phantom_params)
    assert other.label.data.tobytes() != first.label.data.tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_phantom_invariants(seed, phantom_params):
    sample = generate_phantom(seed, phantom_params)
    label, volume = sample.label.data, sample.volume.data
    assert label.shape == volume.shape == phantom_params.roi_shape
    assert volume.min() >= 0.0 and volume.max() <= 1.0
    assert set(np.unique(label)) <= set(range(5))
    _, liver_components = ndimage.label(label == LIVER)
    assert liver_components == 1
    assert sample.has_tumor == bool((label == TUMOR).any())


def test_tumor_probability_extremes():
    never = PhantomParams(tumor_probability=0.0)
    assert not any(generate_phantom(seed, never).has_tumor for seed in range(3))
    always = PhantomParams(tumor_probability=1.0)
    assert all(generate_phantom(seed, always).has_tumor for seed in range(3))


def test_dataset_splits_in_seed_order(phantom_manifest):
    assert phantom_manifest.split_counts() == {"train": 4, "val": 1, "test": 1}
    assert [r.seed for r in phantom_manifest.records] == list(range(6))
    assert phantom_manifest.records[4].split == "val"
    assert phantom_manifest.records[0].id == "phantom-00000000"
    volume, label = load_record(phantom_manifest, phantom_manifest.records[0])
    assert volume.normalized
    assert label.contains(LIVER)


def test_dataset_rejects_bad_splits(tmp_path, phantom_params):
    with pytest.raises(ValueError, match="sum to 3"):
        generate_phantom_dataset(3, 0, phantom_params, (1, 1, 0), tmp_path)


def test_oversized_liver_rejected():
    with pytest.raises(ValueError, match="does not fit"):
        PhantomParams(roi_shape=(16, 16, 16), liver_axes_max=(12.0, 12.0, 6.0))
