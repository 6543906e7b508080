import numpy as np
import pytest
from scipy import linalg

from liversynth.config import FeatureExtractorSpec
from liversynth.core import LabelMap
from liversynth.core import ShapeMismatchError
from liversynth.core import Volume
from liversynth.core import numpy_rng
from liversynth.metrics import FrechetError
from liversynth.metrics import GaussianStats
from liversynth.metrics import SliceFeatureExtractor
from liversynth.metrics import dice_coefficient
from liversynth.metrics import extract_slice_features
from liversynth.metrics import fid_report
from liversynth.metrics import frechet_distance
from liversynth.metrics import gaussian_stats
from liversynth.metrics import mean_foreground_dice
from liversynth.metrics import volume_slices

SPEC = FeatureExtractorSpec(output_dim=8, input_slice_size=(16, 16), widths=(4, 8))


def _labels(values) -> LabelMap:
    return LabelMap(np.array(values, dtype=np.uint8).reshape(1, 1, -1))


def _volumes(seed: int, count: int = 3) -> list[Volume]:
    rng = numpy_rng(seed)
    return [Volume(rng.random((16, 12, 8))) for _ in range(count)]


def _reference_frechet(s1: GaussianStats, s2: GaussianStats) -> float:
    diff = s1.mean - s2.mean
    covmean = linalg.sqrtm(s1.covariance @ s2.covariance).real
    return float(diff @ diff + np.trace(s1.covariance + s2.covariance - 2 * covmean))


def test_dice_of_known_masks():
    a = _labels([1, 1, 0, 0])
    b = _labels([1, 0, 0, 0])
    assert dice_coefficient(a, b, 1) == pytest.approx(2 / 3)
    assert dice_coefficient(a, a, 1) == 1.0
    assert dice_coefficient(a, _labels([0, 0, 1, 1]), 1) == 0.0


def test_dice_of_two_empty_masks_is_one():
    empty = _labels([0, 0, 0])
    assert dice_coefficient(empty, empty, 4) == 1.0


def test_dice_rejects_mismatched_shapes():
    with pytest.raises(ShapeMismatchError):
        dice_coefficient(_labels([0, 1]), _labels([0, 1, 1]), 1)


def test_mean_foreground_dice_skips_background():
    target = _labels([0, 1, 2, 0])
    prediction = _labels([0, 1, 0, 0])
    assert mean_foreground_dice(prediction, target, 3) == pytest.approx(0.5)


def test_gaussian_stats_are_unbiased():
    features = numpy_rng(0).normal(size=(50, 4)) + 1e6
    stats = gaussian_stats(features)
    np.testing.assert_allclose(stats.covariance, np.cov(features - 1e6, rowvar=False), atol=1e-8)
    assert stats.sample_count == 50


def test_gaussian_stats_need_two_rows():
    with pytest.raises(FrechetError, match="at least 2"):
        gaussian_stats(np.zeros((1, 3)))


def test_asymmetric_covariance_rejected():
    with pytest.raises(FrechetError, match="symmetric"):
        GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 2)


def test_identical_statistics_have_zero_distance():
    stats = gaussian_stats(numpy_rng(1).normal(size=(40, 6)))
    assert frechet_distance(stats, stats) == pytest.approx(0.0, abs=1e-8)


def test_mean_shift_with_identity_covariance():
    s1 = GaussianStats(np.zeros(3), np.eye(3), 10)
    s2 = GaussianStats(np.array([1.0, 2.0, 2.0]), np.eye(3), 10)
    assert frechet_distance(s1, s2) == pytest.approx(9.0)


def test_matches_scipy_matrix_square_root():
    rng = numpy_rng(2)
    s1 = gaussian_stats(rng.normal(size=(60, 5)))
    s2 = gaussian_stats(rng.normal(loc=0.5, scale=2.0, size=(60, 5)))
    assert frechet_distance(s1, s2) == pytest.approx(_reference_frechet(s1, s2), rel=1e-6)


def test_rank_deficient_covariance_is_handled():
    rng = numpy_rng(3)
    s1 = gaussian_stats(rng.normal(size=(3, 8)))
    s2 = gaussian_stats(rng.normal(size=(3, 8)))
    assert frechet_distance(s1, s2) >= 0.0


def test_indefinite_covariance_rejected():
    bad = GaussianStats(np.zeros(2), np.diag([1.0, -1.0]), 2)
    with pytest.raises(FrechetError, match="negative"):
        frechet_distance(bad, bad)


def test_feature_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        frechet_distance(GaussianStats(np.zeros(2), np.eye(2), 2), GaussianStats(np.zeros(3), np.eye(3), 2))


@pytest.mark.parametrize(("axis", "shape"), [("axial", (8, 1, 16, 12)), ("sagittal", (12, 1, 16, 8)), ("coronal", (16, 1, 12, 8))])
def test_volume_slices_follow_axis_convention(axis, shape):
    assert tuple(volume_slices(_volumes(0, 1)[0], axis).shape) == shape


def test_extractor_weights_depend_only_on_seed():
    first, second = SliceFeatureExtractor(SPEC), SliceFeatureExtractor(SPEC)
    for a, b in zip(first.parameters(), second.parameters()):
        assert np.array_equal(a.numpy(), b.numpy())
    other = SliceFeatureExtractor(SPEC.model_copy(update={"seed": 1}))
    assert not np.array_equal(next(other.parameters()).numpy(), next(first.parameters()).numpy())


def test_slice_features_need_two_volumes():
    with pytest.raises(FrechetError):
        extract_slice_features(_volumes(0, 1), "axial", SPEC)


def test_fid_report_averages_three_axes():
    report = fid_report(_volumes(0), _volumes(1), SPEC)
    assert report.average == pytest.approx((report.axial + report.sagittal + report.coronal) / 3)
    assert set(report.as_dict()) == {"axial", "sagittal", "coronal", "average"}


def test_fid_of_a_set_with_itself_is_near_zero():
    volumes = _volumes(4)
    report = fid_report(volumes, volumes, SPEC)
    assert report.average == pytest.approx(0.0, abs=1e-6)


def test_isotropic_scale_case():
    s1 = GaussianStats(np.zeros(2), np.eye(2), 10)
    s2 = GaussianStats(np.zeros(2), 4 * np.eye(2), 10)
    assert frechet_distance(s1, s2) == pytest.approx(2.0, abs=1e-6)


def test_symmetric_and_non_negative_on_random_pairs():
    rng = numpy_rng(9)
    for _ in range(100):
        a, b = rng.normal(size=(2, 4, 4))
        s1 = GaussianStats(rng.normal(size=4), a @ a.T, 10)
        s2 = GaussianStats(rng.normal(size=4), b @ b.T, 10)
        forward, backward = frechet_distance(s1, s2), frechet_distance(s2, s1)
        assert forward >= 0.0
        assert forward == pytest.approx(backward, rel=1e-5, abs=1e-5)
        assert forward == pytest.approx(_reference_frechet(s1, s2), rel=1e-5, abs=1e-5)


def test_constant_volumes_have_zero_feature_covariance():
    volumes = [Volume(np.full((16, 12, 8), 0.5)) for _ in range(2)]
    stats = extract_slice_features(volumes, "axial", SPEC)
    assert stats.sample_count == 16
    assert np.allclose(stats.covariance, 0.0, atol=1e-12)


def test_feature_stats_ignore_volume_order():
    volumes = _volumes(4, count=4)
    forward = extract_slice_features(volumes, "sagittal", SPEC)
    backward = extract_slice_features(volumes[::-1], "sagittal", SPEC)
    assert np.allclose(forward.mean, backward.mean, rtol=1e-10, atol=1e-12)
    assert np.allclose(forward.covariance, backward.covariance, rtol=1e-8, atol=1e-12)


def test_covariance_symmetry_tolerance():
    skew = np.array([[0.0, 5e-9], [0.0, 0.0]])
    GaussianStats(np.zeros(2), np.eye(2) + skew, 10)
    with pytest.raises(FrechetError, match="not symmetric"):
        GaussianStats(np.zeros(2), np.eye(2) + 100 * skew, 10)
