"""
Kernel construction for Dilated Convolution with Learnable Spacings (DCLS).

Each channel owns ``m`` kernel elements with a weight and a continuous 2-D
position (height, width) inside an odd ``S x S`` grid centred on zero. A dense
depthwise kernel is materialized by spreading every weight over the grid,
either with a normalized separable Gaussian whose per-axis standard deviation
is learnable ("gauss") or over the four integer neighbours ("bilinear").
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import softmax

from dcls_audio.tensor_core import ensure_finite

logger = logging.getLogger(__name__)

GAUSS = "gauss"
BILINEAR = "bilinear"
VERSIONS = (GAUSS, BILINEAR)

SIGMA_MIN = 0.1


class DclsError(Exception):
    """Custom exception for invalid DCLS parameters."""
    pass


def check_dcls_settings(dilated_kernel_size: int, kernel_count: int, version: str) -> None:
    """
    Reject settings the centred grid cannot represent.

    Raises:
        DclsError: If S is even or < 1, m < 1, or the version is unknown
    """
    if dilated_kernel_size < 1 or dilated_kernel_size % 2 == 0:
        raise DclsError(f"dilated kernel size must be odd, got {dilated_kernel_size}")
    if kernel_count < 1:
        raise DclsError(f"kernel count must be positive, got {kernel_count}")
    if version not in VERSIONS:
        raise DclsError(f"unknown DCLS version {version!r}, expected one of {VERSIONS}")


@dataclass
class DclsParams:
    """
    Learnable parameters of one DCLS depthwise layer.

    ``P`` and ``SIG`` have shape (2, C, m), or (2, 1, m) when positions are
    shared across the channels of the layer. Axis 0 is (height, width).
    Positions are in grid units in [-(S-1)/2, (S-1)/2]. ``SIG`` is raw and
    unconstrained; the sigma actually used is ``sigma_min + |SIG|``.
    """

    channels: int
    kernel_count: int
    dilated_kernel_size: int
    version: str
    weight: np.ndarray
    P: np.ndarray
    SIG: Optional[np.ndarray] = None
    sigma_min: float = SIGMA_MIN
    share_tag: Optional[str] = None

    def __post_init__(self):
        self.validate()

    @property
    def extent(self) -> float:
        return (self.dilated_kernel_size - 1) / 2

    def validate(self) -> None:
        check_dcls_settings(self.dilated_kernel_size, self.kernel_count, self.version)
        c, m = self.channels, self.kernel_count
        if self.weight.shape != (c, m):
            raise DclsError(f"weight shape {self.weight.shape} does not match ({c}, {m})")
        if self.P.shape not in ((2, c, m), (2, 1, m)):
            raise DclsError(f"position shape {self.P.shape} does not match (2, {c}, {m}) or (2, 1, {m})")
        if self.version == GAUSS:
            if self.SIG is None or self.SIG.shape != self.P.shape:
                raise DclsError(f"gauss version needs SIG with shape {self.P.shape}")
        if self.sigma_min <= 0:
            raise DclsError(f"sigma_min must be positive, got {self.sigma_min}")

    def effective_sigma(self) -> np.ndarray:
        return self.sigma_min + np.abs(self.SIG)

    def num_parameters(self) -> int:
        sig = 0 if self.SIG is None else self.SIG.size
        return self.weight.size + self.P.size + sig


def _grid(size: int, dtype) -> np.ndarray:
    return np.arange(size, dtype=dtype) - (size - 1) / 2


def _per_channel(array: np.ndarray, channels: int) -> np.ndarray:
    return np.broadcast_to(array, (2, channels, array.shape[2]))


def _gauss_axis(position: np.ndarray, sigma: np.ndarray, grid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized 1-D Gaussian weights (C, m, S) and offsets grid - p."""
    offset = grid - position[..., None]
    logits = -(offset * offset) / (2.0 * sigma[..., None] ** 2)
    return softmax(logits, axis=-1), offset


def _bilinear_axis(position: np.ndarray, size: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
    """1-D linear interpolation weights (C, m, S) and their derivative w.r.t. the position."""
    index_pos = position + (size - 1) / 2
    lower = np.floor(index_pos)
    frac = index_pos - lower
    lower = lower.astype(np.int64)

    weights = np.zeros(position.shape + (size,), dtype=dtype)
    slope = np.zeros_like(weights)
    for shift, mass, d_mass in ((0, 1.0 - frac, -1.0), (1, frac, 1.0)):
        index = lower + shift
        # mass outside the grid is dropped
        inside = (index >= 0) & (index < size)
        chan, elem = np.nonzero(inside)
        weights[chan, elem, index[inside]] += mass[inside]
        slope[chan, elem, index[inside]] += d_mass
    # subgradient 0 exactly on the lattice
    slope[frac == 0] = 0.0
    return weights, slope


def _axis_weights(params: DclsParams):
    c, s = params.channels, params.dilated_kernel_size
    dtype = np.result_type(params.weight, params.P, np.float32)
    positions = _per_channel(params.P, c)
    if params.version == GAUSS:
        grid = _grid(s, dtype)
        sigma = _per_channel(params.effective_sigma(), c)
        along_h, offset_h = _gauss_axis(positions[0], sigma[0], grid)
        along_w, offset_w = _gauss_axis(positions[1], sigma[1], grid)
        return along_h, along_w, (offset_h, offset_w, sigma)
    along_h, slope_h = _bilinear_axis(positions[0], s, dtype)
    along_w, slope_w = _bilinear_axis(positions[1], s, dtype)
    return along_h, along_w, (slope_h, slope_w)


def construct_kernel(params: DclsParams) -> np.ndarray:
    """
    Materialize the dense depthwise kernel.

    ``K[c, 0, i, j] = sum_k w[c, k] * A_k(i, j)`` where ``A_k`` is the outer
    product of per-axis interpolation weights. For gauss every ``A_k`` sums
    to one over the grid.

    Args:
        params (DclsParams): Layer parameters

    Returns:
        np.ndarray: Kernel of shape (C, 1, S, S)
    """
    along_h, along_w, _ = _axis_weights(params)
    weighted_h = params.weight[..., None] * along_h
    kernel = np.matmul(weighted_h.transpose(0, 2, 1), along_w)
    return ensure_finite(kernel[:, None], "construct_kernel")


def construct_kernel_vjp(
    grad_kernel: np.ndarray, params: DclsParams
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Exact gradients of ``sum(grad_kernel * K)`` with respect to w, P and SIG.

    Args:
        grad_kernel (np.ndarray): Upstream gradient of shape (C, 1, S, S)
        params (DclsParams): Layer parameters

    Returns:
        Tuple: (grad_weight, grad_P, grad_SIG); grad_SIG is None for bilinear.
        grad_P / grad_SIG have the stored shape of P / SIG.
    """
    c, m, s = params.channels, params.kernel_count, params.dilated_kernel_size
    if grad_kernel.shape != (c, 1, s, s):
        raise DclsError(f"kernel gradient shape {grad_kernel.shape} does not match ({c}, 1, {s}, {s})")

    along_h, along_w, extras = _axis_weights(params)
    g = grad_kernel[:, 0]
    # [c, k, i] = sum_j G[c, i, j] * A_w[c, k, j]
    g_dot_w = np.matmul(along_w, g.transpose(0, 2, 1))
    # [c, k, j] = sum_i A_h[c, k, i] * G[c, i, j]
    g_dot_h = np.matmul(along_h, g)

    grad_weight = (along_h * g_dot_w).sum(axis=-1)
    grad_along_h = params.weight[..., None] * g_dot_w
    grad_along_w = params.weight[..., None] * g_dot_h

    grad_sig = None
    if params.version == GAUSS:
        offset_h, offset_w, sigma = extras
        grad_pos = np.empty((2, c, m), dtype=grad_weight.dtype)
        grad_sigma = np.empty_like(grad_pos)
        for axis, along, grad_along, offset in (
            (0, along_h, grad_along_h, offset_h),
            (1, along_w, grad_along_w, offset_w),
        ):
            grad_logits = along * (grad_along - (grad_along * along).sum(axis=-1, keepdims=True))
            sig = sigma[axis]
            grad_pos[axis] = (grad_logits * offset).sum(axis=-1) / sig ** 2
            grad_sigma[axis] = (grad_logits * offset * offset).sum(axis=-1) / sig ** 3
        grad_sig = grad_sigma * np.sign(_per_channel(params.SIG, c))
    else:
        slope_h, slope_w = extras
        grad_pos = np.stack([(grad_along_h * slope_h).sum(axis=-1), (grad_along_w * slope_w).sum(axis=-1)])

    if params.P.shape[1] == 1:
        grad_pos = grad_pos.sum(axis=1, keepdims=True)
        if grad_sig is not None:
            grad_sig = grad_sig.sum(axis=1, keepdims=True)
    return grad_weight, grad_pos, grad_sig


def clamp_positions(params: DclsParams) -> DclsParams:
    """
    Project positions back into [-(S-1)/2, (S-1)/2] in place.

    The array is updated in place so layers aliasing the same positions see
    the projection. Weights and sigmas are untouched.
    """
    np.clip(params.P, -params.extent, params.extent, out=params.P)
    return params


def init_dcls(
    channels: int,
    kernel_count: int,
    dilated_kernel_size: int,
    version: str,
    rng: np.random.Generator,
    sigma_min: float = SIGMA_MIN,
    sigma_init: Optional[float] = None,
    position_init: str = "uniform",
    position_sharing: str = "channel",
    dtype=np.float32,
) -> DclsParams:
    """
    Draw fresh DCLS parameters.

    Weights ~ Normal(0, 0.02^2). Positions ~ Uniform over the full extent per
    axis/channel/element (or all zero with ``position_init="zero"``). Raw
    sigmas are set so the effective sigma equals ``sigma_init`` (default S/4).

    Args:
        channels (int): Channel count C
        kernel_count (int): Elements per channel m
        dilated_kernel_size (int): Odd grid side S
        version (str): "gauss" or "bilinear"
        rng (np.random.Generator): Random source
        sigma_min (float): Floor added to |SIG|
        sigma_init (Optional[float]): Initial effective sigma
        position_init (str): "uniform" or "zero"
        position_sharing (str): "channel" (P is 2xCxm) or "layer" (P is 2x1xm)
        dtype: Floating dtype of the arrays

    Returns:
        DclsParams: Initialized parameters with no share tag

    Raises:
        DclsError: On invalid settings
    """
    check_dcls_settings(dilated_kernel_size, kernel_count, version)
    if position_sharing not in ("channel", "layer"):
        raise DclsError(f"position_sharing must be 'channel' or 'layer', got {position_sharing!r}")
    if position_init not in ("uniform", "zero"):
        raise DclsError(f"position_init must be 'uniform' or 'zero', got {position_init!r}")

    extent = (dilated_kernel_size - 1) / 2
    pos_channels = channels if position_sharing == "channel" else 1
    weight = rng.normal(0.0, 0.02, size=(channels, kernel_count)).astype(dtype)
    if position_init == "uniform":
        positions = rng.uniform(-extent, extent, size=(2, pos_channels, kernel_count)).astype(dtype)
    else:
        positions = np.zeros((2, pos_channels, kernel_count), dtype=dtype)

    logger.debug(
        "init_dcls: C=%d m=%d S=%d %s, positions %s per %s", channels, kernel_count,
        dilated_kernel_size, version, position_init, position_sharing,
    )
    sigmas = None
    if version == GAUSS:
        target = dilated_kernel_size / 4 if sigma_init is None else sigma_init
        if target <= sigma_min:
            raise DclsError(f"initial sigma {target} must exceed sigma_min {sigma_min}")
        sigmas = np.full((2, pos_channels, kernel_count), target - sigma_min, dtype=dtype)

    return DclsParams(
        channels=channels,
        kernel_count=kernel_count,
        dilated_kernel_size=dilated_kernel_size,
        version=version,
        weight=weight,
        P=positions,
        SIG=sigmas,
        sigma_min=sigma_min,
    )
