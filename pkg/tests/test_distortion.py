from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cddgan.distortion import (
    ContrastParams,
    ElasticParams,
    _bspline_weights,
    apply_contrast,
    build_distorted_datasets,
    dense_displacement,
    elastic_deform,
    sample_contrast_factor,
)
from cddgan.domains import Domain

GOLDEN = Path(__file__).parent / "data" / "elastic_seed42.npz"

unit_images = arrays(np.float32, (8, 8), elements=st.floats(0, 1, width=32))


def _fixture_pair():
    yy, xx = np.mgrid[:64, :64]
    image = (0.5 + 0.5 * np.sin(yy / 5.0) * np.cos(xx / 7.0)).astype(np.float32)
    mask = (((yy - 30) / 12.0) ** 2 + ((xx - 34) / 9.0) ** 2 <= 1).astype(np.uint8)
    return image, mask


@settings(max_examples=50, deadline=None)
@given(image=unit_images)
def test_contrast_gamma_one_is_identity(image):
    np.testing.assert_array_equal(apply_contrast(image, ContrastParams(1.0)), image)


def test_contrast_half_squared():
    assert apply_contrast(np.array([0.5]), ContrastParams(2.0))[0] == 0.25


@pytest.mark.parametrize("gamma", [1.0, 1.3, 1.77, 2.0])
def test_contrast_fixed_points(gamma):
    np.testing.assert_array_equal(apply_contrast(np.array([0.0, 1.0]), ContrastParams(gamma)), [0.0, 1.0])


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0, 1), b=st.floats(0, 1), gamma=st.floats(1, 2))
def test_contrast_monotone_and_in_range(a, b, gamma):
    lo, hi = sorted((a, b))
    out = apply_contrast(np.array([lo, hi]), ContrastParams(gamma))
    assert 0 <= out[0] <= out[1] <= 1


@pytest.mark.parametrize("gamma", [0.99, 2.01, -1.0])
def test_contrast_rejects_out_of_range_gamma(gamma):
    with pytest.raises(ValueError):
        ContrastParams(gamma)


def test_contrast_factor_range_and_determinism():
    a = [sample_contrast_factor(np.random.default_rng(3)).gamma for _ in range(2)]
    rng = np.random.default_rng(3)
    b = [sample_contrast_factor(rng).gamma for _ in range(2)]
    assert all(1 <= g <= 2 for g in b)
    assert a[0] == b[0]
    rng2 = np.random.default_rng(3)
    assert [sample_contrast_factor(rng2).gamma for _ in range(2)] == b


def test_contrast_factor_mean():
    # Uniform[1, 2] has mean 1.5; std of the mean over 1e5 draws is ~9e-4
    rng = np.random.default_rng(0)
    draws = [sample_contrast_factor(rng).gamma for _ in range(100_000)]
    assert abs(np.mean(draws) - 1.5) <= 0.01


def test_bspline_weights_are_convex():
    w = _bspline_weights(5, 64)
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_zero_field_is_identity():
    image, mask = _fixture_pair()
    params = ElasticParams(seed=0, control=np.zeros((2, 5, 5)))
    out_image, out_mask = elastic_deform(image, mask, params)
    np.testing.assert_array_equal(out_image, image)
    np.testing.assert_array_equal(out_mask, mask)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_dense_field_bounded(seed):
    field = dense_displacement(ElasticParams(seed=seed).control_displacements(), (64, 64))
    assert np.abs(field).max() <= 12.0


def test_extreme_control_grid_stays_bounded():
    control = np.where(np.indices((2, 5, 5)).sum(0) % 2, 12.0, -12.0)
    field = dense_displacement(control, (64, 64))
    assert np.abs(field).max() <= 12.0


def test_control_draws_within_max():
    c = ElasticParams(seed=1).control_displacements()
    assert c.shape == (2, 5, 5)
    assert np.abs(c).max() <= 12.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_warped_mask_binary(seed):
    image, mask = _fixture_pair()
    _, out_mask = elastic_deform(image, mask, ElasticParams(seed=seed))
    assert set(np.unique(out_mask)) <= {0, 1}


def test_elastic_rejects_nonbinary_mask():
    image, mask = _fixture_pair()
    with pytest.raises(ValueError, match="binary"):
        elastic_deform(image, mask * 2, ElasticParams(seed=0))


def test_elastic_golden_seed42():
    image, mask = _fixture_pair()
    out_image, out_mask = elastic_deform(image, mask, ElasticParams(seed=42))
    golden = np.load(GOLDEN)
    assert out_image.tobytes() == golden["image"].tobytes()
    assert out_mask.tobytes() == golden["mask"].tobytes()
    again = elastic_deform(image, mask, ElasticParams(seed=42))
    assert again[0].tobytes() == out_image.tobytes()


@pytest.fixture(scope="module")
def distorted(h_o):
    return build_distorted_datasets(h_o, seed=11)


def test_distorted_sizes_labels_and_splits(h_o, distorted):
    h_c, h_e = distorted
    assert len(h_c) == len(h_e) == len(h_o)
    assert (h_c.domains == Domain.C.index).all() and (h_e.domains == Domain.E.index).all()
    assert h_c.splits == h_e.splits == h_o.splits
    assert h_c.masks.tobytes() == h_o.masks.tobytes()
    assert set(np.unique(h_e.masks)) <= {0, 1}
    for ds in distorted:
        assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_contrast_is_per_patient(h_o, distorted):
    h_c, _ = distorted
    record = h_c.meta["distortion_record"]
    assert set(record) == set(h_o.patients())
    for pid, idx in h_o.patient_indices().items():
        expected = apply_contrast(h_o.images[idx], ContrastParams(record[pid]["gamma"]))
        np.testing.assert_array_equal(h_c.images[idx], expected)


def test_elastic_replay_from_record(h_o, distorted):
    _, h_e = distorted
    pid = h_o.patients()[0]
    rec = h_e.meta["distortion_record"][pid]
    params = ElasticParams(seed=rec["seed"], control=np.array(rec["control_displacements"]))
    for i in h_o.patient_indices()[pid]:
        img, msk = elastic_deform(h_o.images[i], h_o.masks[i], params)
        np.testing.assert_array_equal(img, h_e.images[i])
        np.testing.assert_array_equal(msk, h_e.masks[i])


def test_elastic_foreground_area_preserved(h_o, distorted):
    _, h_e = distorted
    area_o = h_o.masks.sum(axis=(1, 2)).mean()
    area_e = h_e.masks.sum(axis=(1, 2)).mean()
    assert abs(area_e - area_o) <= 0.2 * area_o


def test_generation_is_pure(h_o, distorted):
    again = build_distorted_datasets(h_o, seed=11)
    for a, b in zip(distorted, again):
        assert a.content_hash() == b.content_hash()
    # patient order must not matter
    rev = h_o.select(np.arange(len(h_o))[::-1])
    h_c_rev, _ = build_distorted_datasets(rev, seed=11)
    assert h_c_rev.meta["distortion_record"] == distorted[0].meta["distortion_record"]
