import numpy as np
import pytest

from dcls_audio.dcls import (
    BILINEAR,
    GAUSS,
    SIGMA_MIN,
    DclsError,
    DclsParams,
    check_dcls_settings,
    clamp_positions,
    construct_kernel,
    construct_kernel_vjp,
    init_dcls,
)
from dcls_audio.tensor_core import ConvGeometry, depthwise_conv2d, finite_diff_check
from dcls_audio.test_tensor_core import naive_conv


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def make_params(version, rng, c=3, m=4, s=9, pos_channels=None, off_lattice=True):
    pos_channels = c if pos_channels is None else pos_channels
    extent = (s - 1) // 2
    positions = rng.integers(-extent + 1, extent - 1, size=(2, pos_channels, m)).astype(float)
    if off_lattice:
        positions += rng.uniform(0.2, 0.8, size=positions.shape)
    sigmas = rng.uniform(0.5, 2.0, size=positions.shape) if version == GAUSS else None
    return DclsParams(c, m, s, version, rng.normal(size=(c, m)), positions, sigmas)


class TestSettings:
    """Test cases for DCLS setting validation."""

    def test_even_size_rejected(self):
        """Test that an even dilated kernel size is rejected with a clear message."""
        with pytest.raises(DclsError, match="dilated kernel size must be odd"):
            check_dcls_settings(22, 26, GAUSS)

    def test_unknown_version(self):
        """Test that only gauss and bilinear are accepted."""
        with pytest.raises(DclsError):
            check_dcls_settings(23, 26, "cubic")

    def test_gauss_requires_sigma(self, rng):
        """Test that a gauss layer without SIG is invalid."""
        with pytest.raises(DclsError):
            DclsParams(2, 3, 7, GAUSS, np.zeros((2, 3)), np.zeros((2, 2, 3)))

    def test_parameter_count(self):
        """Test the per-layer count for 96 channels and 26 elements."""
        params = init_dcls(96, 26, 23, GAUSS, np.random.default_rng(0))
        assert params.num_parameters() == 96 * 26 + 2 * 96 * 26 + 2 * 96 * 26


class TestConstructKernel:
    """Test cases for dense kernel construction."""

    def test_gauss_weights_sum_to_one(self, rng):
        """Test normalization over 1000 random (P, SIG) draws."""
        c, s = 1000, 23
        params = DclsParams(
            c, 1, s, GAUSS,
            weight=np.ones((c, 1)),
            P=rng.uniform(-11, 11, size=(2, c, 1)),
            SIG=rng.normal(0.0, 3.0, size=(2, c, 1)),
        )
        sums = construct_kernel(params).sum(axis=(1, 2, 3))
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)

    def test_kernel_shape_and_weight_total(self, rng):
        """Test that the kernel sums to the weight total per channel (gauss)."""
        params = make_params(GAUSS, rng)
        kernel = construct_kernel(params)
        assert kernel.shape == (3, 1, 9, 9)
        np.testing.assert_allclose(kernel.sum(axis=(1, 2, 3)), params.weight.sum(axis=1), atol=1e-10)

    def test_bilinear_integer_position_is_a_delta(self):
        """Test that an on-lattice element lands on exactly one cell."""
        params = DclsParams(1, 1, 5, BILINEAR, np.array([[2.5]]), np.array([[[1.0]], [[-2.0]]]))
        kernel = construct_kernel(params)[0, 0]
        expected = np.zeros((5, 5))
        expected[3, 0] = 2.5
        np.testing.assert_array_equal(kernel, expected)

    def test_bilinear_splits_mass(self):
        """Test the four-neighbour split at a half-integer position."""
        params = DclsParams(1, 1, 3, BILINEAR, np.array([[1.0]]), np.array([[[0.5]], [[0.5]]]))
        kernel = construct_kernel(params)[0, 0]
        np.testing.assert_allclose(kernel[1:, 1:], 0.25)
        assert kernel[0].sum() == 0.0 and kernel[:, 0].sum() == 0.0

    def test_bilinear_mass_outside_grid_dropped(self):
        """Test that the part of an element beyond the grid edge is dropped."""
        params = DclsParams(1, 1, 3, BILINEAR, np.array([[1.0]]), np.array([[[0.0]], [[1.25]]]))
        kernel = construct_kernel(params)[0, 0]
        assert kernel[1, 2] == pytest.approx(0.75)
        assert kernel.sum() == pytest.approx(0.75)

    def test_layer_sharing_broadcasts(self, rng):
        """Test that 2x1xm positions match tiled 2xCxm positions."""
        shared = make_params(GAUSS, rng, pos_channels=1)
        tiled = DclsParams(
            3, 4, 9, GAUSS, shared.weight,
            np.repeat(shared.P, 3, axis=1), np.repeat(shared.SIG, 3, axis=1),
        )
        np.testing.assert_allclose(construct_kernel(shared), construct_kernel(tiled))

    @pytest.mark.parametrize("case", range(10))
    def test_bilinear_lattice_matches_dilated_conv(self, case):
        """Test that on-lattice bilinear DCLS reproduces a 3x3 dilation-2 depthwise conv."""
        rng = np.random.default_rng(case)
        c = 2
        offsets = np.array([-2.0, 0.0, 2.0])
        rows, cols = np.meshgrid(offsets, offsets, indexing="ij")
        positions = np.stack([np.tile(rows.ravel(), (c, 1)), np.tile(cols.ravel(), (c, 1))])
        weights = rng.normal(size=(c, 9))
        params = DclsParams(c, 9, 5, BILINEAR, weights, positions)

        x = rng.normal(size=(2, c, 8, 7))
        dcls_out = depthwise_conv2d(x, construct_kernel(params), ConvGeometry.same(5, groups=c))
        dilated = naive_conv(x, weights.reshape(c, 1, 3, 3), ConvGeometry(3, 3, 1, 1, 2, 2, groups=c), dilation=2)
        np.testing.assert_allclose(dcls_out, dilated, atol=1e-6)


class TestConstructKernelVjp:
    """Test cases for the exact kernel-construction gradients."""

    @pytest.mark.parametrize("version", [GAUSS, BILINEAR])
    @pytest.mark.parametrize("pos_channels", [3, 1])
    def test_gradients_match_finite_differences(self, rng, version, pos_channels):
        """Test grad_weight, grad_P and grad_SIG off the lattice in 64-bit."""
        params = make_params(version, rng, pos_channels=pos_channels)
        proj = rng.normal(size=(3, 1, 9, 9))
        gw, gp, gsig = construct_kernel_vjp(proj, params)

        def with_(**changes):
            values = dict(weight=params.weight, P=params.P, SIG=params.SIG)
            values.update(changes)
            return float(np.sum(proj * construct_kernel(DclsParams(3, 4, 9, version, **values))))

        assert gp.shape == params.P.shape
        assert finite_diff_check(lambda v: with_(weight=v), params.weight, gw) < 1e-6
        assert finite_diff_check(lambda v: with_(P=v), params.P, gp) < 1e-5
        if version == GAUSS:
            assert gsig.shape == params.SIG.shape
            assert finite_diff_check(lambda v: with_(SIG=v), params.SIG, gsig) < 1e-5
        else:
            assert gsig is None

    def test_negative_raw_sigma_gradient(self, rng):
        """Test the gradient through |SIG| for negative raw values."""
        params = make_params(GAUSS, rng)
        params.SIG = -params.SIG
        proj = rng.normal(size=(3, 1, 9, 9))
        _, _, gsig = construct_kernel_vjp(proj, params)

        def loss(v):
            return float(np.sum(proj * construct_kernel(DclsParams(3, 4, 9, GAUSS, params.weight, params.P, v))))

        assert finite_diff_check(loss, params.SIG, gsig) < 1e-5

    def test_bilinear_lattice_subgradient_is_zero(self):
        """Test that the position gradient is 0 exactly on the lattice."""
        params = DclsParams(1, 1, 5, BILINEAR, np.array([[1.0]]), np.array([[[1.0]], [[0.0]]]))
        _, gp, _ = construct_kernel_vjp(np.ones((1, 1, 5, 5)), params)
        np.testing.assert_array_equal(gp, 0.0)

    def test_shape_mismatch(self, rng):
        """Test that a wrong gradient shape is rejected."""
        with pytest.raises(DclsError):
            construct_kernel_vjp(np.zeros((3, 1, 7, 7)), make_params(GAUSS, rng))

    def test_bilinear_gradient_by_hand(self):
        """Test grad_w and grad_P against a hand-worked 3x3 example."""
        # rows: 0.25 -> [0, 0.75, 0.25]; cols: -0.5 -> [0.5, 0.5, 0]
        params = DclsParams(1, 1, 3, BILINEAR, np.array([[2.0]]), np.array([[[0.25]], [[-0.5]]]))
        grad_kernel = np.arange(9.0).reshape(1, 1, 3, 3)
        gw, gp, _ = construct_kernel_vjp(grad_kernel, params)
        assert gw[0, 0] == pytest.approx(4.25)
        assert gp[0, 0, 0] == pytest.approx(6.0)
        assert gp[1, 0, 0] == pytest.approx(2.0)

    def test_bilinear_gradient_on_lattice_axis(self):
        """Test that only the on-lattice axis gets the zero subgradient."""
        params = DclsParams(1, 1, 3, BILINEAR, np.array([[2.0]]), np.array([[[0.0]], [[-0.5]]]))
        grad_kernel = np.arange(9.0).reshape(1, 1, 3, 3)
        _, gp, _ = construct_kernel_vjp(grad_kernel, params)
        assert gp[0, 0, 0] == 0.0
        # row 1 only: 2 * (-1 * 3 + 1 * 4)
        assert gp[1, 0, 0] == pytest.approx(2.0)


class TestKernelProperties:
    """Test cases for structural properties of the constructed kernel."""

    @pytest.mark.parametrize("version", [GAUSS, BILINEAR])
    def test_linear_in_weights(self, rng, version):
        """Test K(a*w1 + b*w2) = a*K(w1) + b*K(w2) for fixed positions."""
        params = make_params(version, rng)
        w1, w2 = rng.normal(size=(2, 3, 4))

        def kernel(weight):
            return construct_kernel(DclsParams(3, 4, 9, version, weight, params.P, params.SIG))

        np.testing.assert_allclose(kernel(2.0 * w1 - 0.5 * w2), 2.0 * kernel(w1) - 0.5 * kernel(w2), atol=1e-12)

    @pytest.mark.parametrize("version", [GAUSS, BILINEAR])
    def test_element_order_does_not_matter(self, rng, version):
        """Test that permuting the m elements leaves the kernel unchanged."""
        params = make_params(version, rng)
        order = rng.permutation(4)
        sig = None if params.SIG is None else params.SIG[:, :, order]
        permuted = DclsParams(3, 4, 9, version, params.weight[:, order], params.P[:, :, order], sig)
        np.testing.assert_allclose(construct_kernel(permuted), construct_kernel(params), atol=1e-12)

    def test_gaussian_spread_grows_with_sigma(self):
        """Test that the second moment of one element grows with |SIG| and ignores its sign."""
        grid = np.arange(23) - 11.0

        def spread(raw_sigma):
            sig = np.full((2, 1, 1), raw_sigma)
            kernel = construct_kernel(DclsParams(1, 1, 23, GAUSS, np.ones((1, 1)), np.zeros((2, 1, 1)), sig))[0, 0]
            return float(np.sum(kernel.sum(axis=1) * grid ** 2))

        spreads = [spread(s) for s in (0.0, 0.5, 1.0, 2.0, 3.0, 5.0)]
        assert all(a < b for a, b in zip(spreads, spreads[1:]))
        assert spread(-2.0) == pytest.approx(spread(2.0))

    def test_sigma_floor_on_lattice_is_one_hot(self, rng):
        """Test that sigma_min at integer positions puts each weight on one cell."""
        c, m, s = 2, 3, 7
        positions = rng.integers(-3, 4, size=(2, c, m)).astype(float)
        weight = rng.normal(size=(c, m))
        params = DclsParams(c, m, s, GAUSS, weight, positions, np.zeros((2, c, m)))
        kernel = construct_kernel(params)[:, 0]
        for ch in range(c):
            for k in range(m):
                single = DclsParams(1, 1, s, GAUSS, np.ones((1, 1)), positions[:, ch:ch + 1, k:k + 1],
                                    np.zeros((2, 1, 1)))
                element = construct_kernel(single)[0, 0]
                expected = np.zeros((s, s))
                expected[int(positions[0, ch, k]) + 3, int(positions[1, ch, k]) + 3] = 1.0
                np.testing.assert_allclose(element, expected, atol=1e-12)
            assert kernel[ch].sum() == pytest.approx(weight[ch].sum())


class TestInitAndClamp:
    """Test cases for initialization and position clamping."""

    def test_init_shapes_and_bounds(self, rng):
        """Test shapes, position range and the effective sigma at init."""
        params = init_dcls(8, 26, 23, GAUSS, rng)
        assert params.weight.shape == (8, 26)
        assert params.P.shape == params.SIG.shape == (2, 8, 26)
        assert np.abs(params.P).max() <= 11.0
        np.testing.assert_allclose(params.effective_sigma(), 23 / 4, rtol=1e-6)

    def test_init_weight_distribution(self):
        """Test that initial weights are centred with standard deviation 0.02."""
        params = init_dcls(384, 26, 23, GAUSS, np.random.default_rng(3))
        assert abs(float(params.weight.mean())) < 2e-3
        assert float(params.weight.std()) == pytest.approx(0.02, rel=0.05)

    def test_init_is_logged(self, rng, caplog):
        """Test that initialization reports its settings at DEBUG level."""
        with caplog.at_level("DEBUG", logger="dcls_audio.dcls"):
            init_dcls(4, 26, 23, GAUSS, rng)
        assert "C=4 m=26 S=23 gauss" in caplog.text

    def test_init_layer_sharing_and_zero_positions(self, rng):
        """Test the layer-shared shape and the centred start."""
        params = init_dcls(8, 5, 7, BILINEAR, rng, position_init="zero", position_sharing="layer")
        assert params.P.shape == (2, 1, 5)
        assert params.SIG is None
        assert not params.P.any()

    def test_init_sigma_must_exceed_floor(self, rng):
        """Test that the initial sigma has to be above sigma_min."""
        with pytest.raises(DclsError):
            init_dcls(2, 2, 7, GAUSS, rng, sigma_init=SIGMA_MIN)

    def test_clamp_in_place_is_visible_through_alias(self, rng):
        """Test that clamping updates the shared array in place."""
        params = init_dcls(2, 3, 7, GAUSS, rng)
        alias = params.P
        params.P[0, 0, 0] = 100.0
        params.P[1, 1, 2] = -100.0
        clamp_positions(params)
        assert alias[0, 0, 0] == 3.0
        assert alias[1, 1, 2] == -3.0
