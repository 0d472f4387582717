import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skno.exceptions import NumericError, SymmetryError, UsageError
from skno.tensor import (Field, Grid, Spectrum, direct_dft, dft_axis, idft_axis,
                         svd, truncate_modes)


def field_1d(values):
    values = np.asarray(values, dtype=float)
    return Field(Grid((values.shape[0],)), values.reshape(values.shape[0], -1),
                 values.reshape(values.shape[0], -1).shape[1])


def sine_field(n, k, aux=1):
    x = Grid((n,)).coordinates()[0]
    return Field(Grid((n,)), np.repeat(np.sin(2 * np.pi * k * x)[:, None], aux, 1), aux)


class TestGrid:
    def test_spacing_is_length_over_points(self):
        g = Grid((8, 4), (2.0, 1.0))
        assert g.spacing == (0.25, 0.25)
        assert g.total_points == 32
        assert g.dims == 2

    @pytest.mark.parametrize("res", [(1,), (4, 1), (2, 2, 2)])
    def test_rejects_bad_resolution(self, res):
        with pytest.raises(UsageError):
            Grid(res)

    def test_rejects_nonpositive_length(self):
        with pytest.raises(UsageError):
            Grid((4,), (0.0,))


class TestField:
    def test_layout_and_immutability(self):
        f = Field(Grid((4, 2)), np.arange(24.0), 3)
        assert f.shape == (4, 2, 3)
        with pytest.raises(ValueError):
            f.values[0, 0, 0] = 1.0

    def test_rejects_wrong_size(self):
        with pytest.raises(UsageError):
            Field(Grid((4,)), np.zeros(5), 1)

    def test_rejects_nonfinite(self):
        with pytest.raises(NumericError):
            Field(Grid((4,)), [0, np.nan, 0, 0], 1)

    def test_rejects_complex(self):
        with pytest.raises(UsageError):
            Field(Grid((2,)), np.zeros(2, complex), 1)


class TestDft:
    def test_constant_has_only_zero_mode(self):
        s = dft_axis(Field(Grid((4,)), np.ones((4, 2)), 2), 0)
        np.testing.assert_array_equal(s.values[:, 0], [4, 0, 0, 0])
        np.testing.assert_array_equal(s.values[:, 1], [4, 0, 0, 0])

    def test_delta_is_flat(self):
        s = dft_axis(field_1d([1, 0, 0, 0]), "x0")
        np.testing.assert_allclose(s.values[:, 0], np.ones(4), atol=0)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        f = Field(Grid((64,)), rng.standard_normal((64, 3)), 3)
        for axis in (0, "p"):
            fast = dft_axis(f, axis).values
            ax = 0 if axis == 0 else 1
            np.testing.assert_allclose(fast, direct_dft(f.values, axis=ax), atol=1e-11)

    def test_round_trip_64(self):
        rng = np.random.default_rng(1)
        f = Field(Grid((64,)), rng.standard_normal((64, 1)))
        back = idft_axis(dft_axis(f, 0), 0)
        assert isinstance(back, Field)
        assert np.abs(back.values - f.values).max() < 1e-12

    def test_round_trip_both_axes_16x8(self):
        rng = np.random.default_rng(2)
        f = Field(Grid((16,)), rng.standard_normal((16, 8)), 8)
        s = dft_axis(dft_axis(f, 0), "p")
        np.testing.assert_allclose(s.values, direct_dft(direct_dft(f.values, 0), 1), atol=1e-11)
        back = idft_axis(idft_axis(s, "p"), 0)
        assert np.abs(back.values - f.values).max() < 1e-12

    def test_inverse_of_constant_spectrum(self):
        s = Spectrum(Grid((4,)), np.array([4, 0, 0, 0]), 1, {0})
        np.testing.assert_allclose(idft_axis(s, 0).values[:, 0], np.ones(4), atol=1e-15)

    def test_zero_spectrum(self):
        s = Spectrum(Grid((8,)), np.zeros(8), 1, {0})
        assert not np.any(idft_axis(s, 0).values)

    def test_double_transform_rejected(self):
        s = dft_axis(field_1d(np.arange(4.0)), 0)
        with pytest.raises(UsageError):
            dft_axis(s, 0)

    def test_inverse_of_untransformed_axis_rejected(self):
        s = dft_axis(field_1d(np.arange(4.0)), 0)
        with pytest.raises(UsageError):
            idft_axis(s, "p")

    def test_short_axis_rejected(self):
        with pytest.raises(UsageError):
            dft_axis(field_1d(np.arange(4.0)), "p")

    def test_asymmetric_spectrum_flagged(self):
        s = Spectrum(Grid((4,)), np.array([0, 1, 0, 0]), 1, {0})
        with pytest.raises(SymmetryError):
            idft_axis(s, 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, log_n, seed):
        n = 2 ** log_n
        rng = np.random.default_rng(seed)
        f = Field(Grid((n,)), rng.standard_normal((n, 1)))
        back = idft_axis(dft_axis(f, 0), 0)
        assert np.abs(back.values - f.values).max() < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 10), st.integers(0, 2**32 - 1))
    def test_parseval(self, log_n, seed):
        n = 2 ** log_n
        f = Field(Grid((n,)), np.random.default_rng(seed).standard_normal((n, 1)))
        lhs = np.sum(f.values ** 2) * n
        rhs = np.sum(np.abs(dft_axis(f, 0).values) ** 2)
        assert abs(lhs - rhs) <= 1e-10 * lhs


class TestTruncate:
    def test_full_retention_is_identity(self):
        rng = np.random.default_rng(3)
        s = dft_axis(Field(Grid((16,)), rng.standard_normal((16, 2)), 2), 0)
        np.testing.assert_array_equal(truncate_modes(s, 8).values, s.values)

    def test_excluded_mode_vanishes(self):
        s = truncate_modes(dft_axis(sine_field(64, 3), 0), 2)
        assert np.abs(idft_axis(s, 0).values).max() < 1e-14

    def test_retained_mode_survives(self):
        f = sine_field(64, 1)
        back = idft_axis(truncate_modes(dft_axis(f, 0), 2), 0)
        assert np.abs(back.values - f.values).max() < 1e-12

    def test_matches_projection_oracle(self):
        rng = np.random.default_rng(4)
        n, k = 32, 5
        f = Field(Grid((n,)), rng.standard_normal((n, 1)))
        got = idft_axis(truncate_modes(dft_axis(f, 0), k), 0).values[:, 0]
        # project onto cos/sin of wavenumbers < k by least squares
        x = np.arange(n) / n
        basis = [np.ones(n)] + [fn(2 * np.pi * m * x) for m in range(1, k) for fn in (np.cos, np.sin)]
        B = np.stack(basis, 1)
        coef, *_ = np.linalg.lstsq(B, f.values[:, 0], rcond=None)
        np.testing.assert_allclose(got, B @ coef, atol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        s = dft_axis(Field(Grid((16, 8)), rng.standard_normal((16, 8, 1))), 0)
        once = truncate_modes(s, (3, 2))
        np.testing.assert_array_equal(truncate_modes(once, (3, 2)).values, once.values)

    @pytest.mark.parametrize("k", [0, 9])
    def test_out_of_range(self, k):
        s = dft_axis(sine_field(16, 1), 0)
        with pytest.raises(UsageError):
            truncate_modes(s, k)


class TestSvd:
    def test_identity(self):
        _, s, _ = svd(np.eye(3))
        np.testing.assert_allclose(s, [1, 1, 1])

    def test_rank_one(self):
        u = np.array([3.0, 4.0]) / 5
        v = np.array([1.0, 0.0])
        _, s, _ = svd(np.outer(u, v))
        np.testing.assert_allclose(s, [1, 0], atol=1e-15)

    @pytest.mark.parametrize("shape", [(8, 4), (256, 64)])
    def test_reconstruction_and_orthonormality(self, shape):
        a = np.random.default_rng(6).standard_normal(shape)
        U, s, V = svd(a)
        assert np.abs(U @ np.diag(s) @ V.T - a).max() < 1e-9
        assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
        assert np.abs(U.T @ U - np.eye(shape[1])).max() < 1e-9
        assert np.abs(V.T @ V - np.eye(shape[1])).max() < 1e-9
        eig = np.sqrt(np.sort(np.linalg.eigvalsh(a.T @ a))[::-1])
        np.testing.assert_allclose(s, eig, atol=1e-8)

    def test_rejects_wide_and_nonfinite(self):
        with pytest.raises(UsageError):
            svd(np.zeros((2, 3)))
        with pytest.raises(NumericError):
            svd(np.array([[np.inf], [0.0]]))
