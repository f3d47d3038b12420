"""Core data structures: matrices, scaling, binarization, aggregation, seeds."""

import numpy as np
import pytest

from cropcate import (
    CANONICAL_COLUMNS,
    FeatureMatrix,
    LabeledDataset,
    Scaler,
    ValidationError,
    derive_seed,
    median_binarize,
    standardize,
    temporal_aggregate,
)


def test_canonical_covariate_columns():
    assert CANONICAL_COLUMNS == ("ws", "ppt", "q", "def", "srad", "tmin",
                                 "tmax", "soilm", "soile")


def _matrix(values, names=None, ids=None):
    values = np.asarray(values, dtype=np.float64)
    names = names or tuple(f"c{j}" for j in range(values.shape[1]))
    ids = ids or tuple(range(values.shape[0]))
    return FeatureMatrix(column_names=names, values=values, row_ids=ids)


class TestFeatureMatrix:
    def test_column_lookup_and_subset(self):
        m = _matrix([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(m.column("c1"), [2.0, 4.0, 6.0])
        assert m.column_index("c0") == 0
        sub = m.subset([0, 2])
        assert sub.row_ids == (0, 2)
        assert np.array_equal(sub.values, [[1.0, 2.0], [5.0, 6.0]])

    def test_unknown_column_rejected(self):
        with pytest.raises(ValidationError):
            _matrix([[1.0]]).column("nope")

    def test_non_finite_cell_names_row_and_column(self):
        with pytest.raises(ValidationError) as err:
            _matrix([[1.0, np.nan]])
        assert err.value.context["row"] == 0
        assert err.value.context["column"] == "c1"

    def test_duplicate_column_names_rejected(self):
        with pytest.raises(ValidationError):
            _matrix([[1.0, 2.0]], names=("a", "a"))

    def test_values_are_read_only(self):
        m = _matrix([[1.0, 2.0]])
        with pytest.raises(ValueError):
            m.values[0, 0] = 9.0


class TestStandardize:
    def test_columns_become_zero_mean_unit_std(self):
        rng = np.random.default_rng(0)
        m = _matrix(rng.normal(3.0, 2.5, size=(200, 4)))
        scaled, scaler = standardize(m)
        assert np.allclose(scaled.values.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(scaled.values.std(axis=0), 1.0, atol=1e-12)
        assert not scaler.zero_variance.any()

    def test_population_std_not_sample_std(self):
        m = _matrix([[0.0], [2.0]])
        _, scaler = standardize(m)
        assert scaler.stds[0] == pytest.approx(1.0)  # ddof=0 on {0, 2}

    def test_zero_variance_column_maps_to_zero(self):
        m = _matrix([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]])
        scaled, scaler = standardize(m)
        assert scaler.zero_variance.tolist() == [True, False]
        assert np.array_equal(scaled.column("c0"), np.zeros(3))

    def test_transform_inverse_round_trip(self):
        rng = np.random.default_rng(1)
        values = rng.normal(10.0, 3.0, size=(50, 3))
        _, scaler = standardize(_matrix(values))
        back = scaler.inverse(scaler.transform(values))
        assert np.allclose(back, values, atol=1e-10)

    def test_scaler_dict_round_trip(self):
        _, scaler = standardize(_matrix([[1.0, 7.0], [2.0, 7.0]]))
        clone = Scaler.from_dict(scaler.to_dict())
        assert np.array_equal(clone.means, scaler.means)
        assert np.array_equal(clone.stds, scaler.stds)
        assert np.array_equal(clone.zero_variance, scaler.zero_variance)


class TestMedianBinarize:
    def test_even_length_interpolated_median(self):
        labels, threshold = median_binarize([1.0, 2.0, 3.0, 4.0])
        assert threshold == 2.5
        assert labels.tolist() == [0, 0, 1, 1]

    def test_ties_at_median_go_to_control(self):
        labels, threshold = median_binarize([1.0, 2.0, 2.0, 3.0])
        assert threshold == 2.0
        assert labels.tolist() == [0, 0, 0, 1]

    def test_constant_vector_all_control(self):
        labels, threshold = median_binarize([4.0, 4.0, 4.0])
        assert threshold == 4.0
        assert labels.tolist() == [0, 0, 0]

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            median_binarize([1.0, np.inf])


class TestTemporalAggregate:
    def test_means_over_complete_years(self):
        kept, agg, report = temporal_aggregate(
            cell_ids=[1, 1, 2, 2], years=[2019, 2020, 2019, 2020],
            values=[[10.0], [20.0], [1.0], [3.0]], study_years=[2019, 2020])
        assert kept == [1, 2]
        assert np.allclose(agg, [[15.0], [2.0]])
        assert report.n_kept == 2
        assert report.dropped == ()

    def test_incomplete_cell_dropped_and_reported(self):
        kept, agg, report = temporal_aggregate(
            cell_ids=[1, 1, 2], years=[2019, 2020, 2019],
            values=[[10.0], [20.0], [1.0]], study_years=[2019, 2020])
        assert kept == [1]
        assert report.dropped == ((2, 1),)

    def test_years_outside_study_window_ignored(self):
        kept, agg, _ = temporal_aggregate(
            cell_ids=[1, 1], years=[2019, 1999],
            values=[[10.0], [999.0]], study_years=[2019])
        assert kept == [1]
        assert np.allclose(agg, [[10.0]])

    def test_duplicate_cell_year_rejected(self):
        with pytest.raises(ValidationError):
            temporal_aggregate(cell_ids=[1, 1], years=[2019, 2019],
                               values=[[1.0], [2.0]], study_years=[2019])

    def test_missing_fraction_allows_partial_cells(self):
        kept, agg, report = temporal_aggregate(
            cell_ids=[1, 1, 2], years=[2019, 2020, 2019],
            values=[[10.0], [20.0], [4.0]], study_years=[2019, 2020],
            max_missing_fraction=0.5)
        assert kept == [1, 2]
        assert np.allclose(agg, [[15.0], [4.0]])


class TestLabeledDataset:
    def test_treatment_must_be_binary(self):
        m = _matrix([[1.0], [2.0]])
        with pytest.raises(ValidationError):
            LabeledDataset(X=m, y=np.zeros(2), t=np.array([0, 2]))

    def test_propensity_bounds_enforced(self):
        m = _matrix([[1.0], [2.0]])
        with pytest.raises(ValidationError):
            LabeledDataset(X=m, y=np.zeros(2), t=np.array([0, 1]),
                           propensity=np.array([0.5, 1.5]))

    def test_subset_by_mask_and_index(self):
        m = _matrix([[1.0], [2.0], [3.0]])
        ds = LabeledDataset(X=m, y=np.array([10.0, 20.0, 30.0]),
                            t=np.array([0, 1, 0]),
                            propensity=np.array([0.3, 0.5, 0.7]))
        sub = ds.subset(np.array([True, False, True]))
        assert sub.y.tolist() == [10.0, 30.0]
        assert sub.propensity.tolist() == [0.3, 0.7]
        sub2 = ds.subset(np.array([1]))
        assert sub2.t.tolist() == [1]


class TestDeriveSeed:
    def test_deterministic_and_tag_sensitive(self):
        assert derive_seed(7, 1, 2) == derive_seed(7, 1, 2)
        assert derive_seed(7, 1, 2) != derive_seed(7, 2, 1)
        assert derive_seed(7, 1) != derive_seed(8, 1)

    def test_fits_in_signed_64_bit(self):
        for seed in range(20):
            value = derive_seed(seed, 3, 4)
            assert 0 <= value < 2**63
