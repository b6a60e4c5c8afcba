"""
Dense numerical primitives with explicit vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` values: float32 for training and
inference, float64 when checking gradients. Image tensors are channels-first
(N, C, H, W). Every op here is a pure function of its arguments, and every
forward op has a ``*_vjp`` companion returning exact gradients, so no autograd
engine is needed.

Convolutions are cross-correlations (no kernel flip) with zero padding.
"""
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf


class TensorError(Exception):
    """Custom exception for invalid shapes or geometry in tensor ops."""
    pass


class NonFiniteError(TensorError):
    """Raised when an op produces NaN or Inf."""
    pass


def ensure_finite(array: np.ndarray, op: str) -> np.ndarray:
    """
    Surface NaN/Inf instead of letting them propagate.

    Args:
        array (np.ndarray): Result of an op
        op (str): Name of the op, used in the error message

    Returns:
        np.ndarray: The same array

    Raises:
        NonFiniteError: If any entry is NaN or infinite
    """
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return array


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel, stride, padding and group count of a 2-D convolution."""

    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise TensorError(f"kernel extents must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride_h < 1 or self.stride_w < 1:
            raise TensorError(f"strides must be >= 1, got {self.stride_h}x{self.stride_w}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise TensorError(f"padding must be >= 0, got {self.pad_h}x{self.pad_w}")
        if self.groups < 1:
            raise TensorError(f"groups must be >= 1, got {self.groups}")

    @classmethod
    def same(cls, kernel_size: int, groups: int = 1) -> "ConvGeometry":
        """Stride-1 geometry whose padding keeps the spatial size (odd kernels)."""
        pad = kernel_size // 2
        return cls(kernel_size, kernel_size, 1, 1, pad, pad, groups)

    def output_shape(self, height: int, width: int) -> Tuple[int, int]:
        """
        Output extent per spatial axis: floor((in + 2*pad - kernel) / stride) + 1.

        Raises:
            TensorError: If either extent would be smaller than 1
        """
        out_h = (height + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        out_w = (width + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if out_h < 1 or out_w < 1:
            raise TensorError(
                f"non-positive output extent {out_h}x{out_w} for input {height}x{width} "
                f"with kernel {self.kernel_h}x{self.kernel_w}"
            )
        return out_h, out_w


def _pad(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    if geom.pad_h == 0 and geom.pad_w == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (geom.pad_h, geom.pad_h), (geom.pad_w, geom.pad_w)))


def _window(xp: np.ndarray, i: int, j: int, geom: ConvGeometry, out_h: int, out_w: int) -> np.ndarray:
    """Strided view of the padded input seen by kernel tap (i, j)."""
    return xp[
        :,
        :,
        i:i + geom.stride_h * (out_h - 1) + 1:geom.stride_h,
        j:j + geom.stride_w * (out_w - 1) + 1:geom.stride_w,
    ]


def _check_image(x: np.ndarray, op: str) -> None:
    if x.ndim != 4:
        raise TensorError(f"{op} expects an N,C,H,W input, got shape {x.shape}")


def depthwise_conv2d(x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """
    Per-channel 2-D cross-correlation with zero padding.

    Args:
        x (np.ndarray): Input of shape (N, C, H, W)
        kernel (np.ndarray): Kernel of shape (C, 1, Kh, Kw)
        geom (ConvGeometry): Geometry with groups == C

    Returns:
        np.ndarray: Output of shape (N, C, Ho, Wo)

    Raises:
        TensorError: On channel/kernel mismatch or an empty output
    """
    _check_image(x, "depthwise_conv2d")
    n, c, h, w = x.shape
    if kernel.shape != (c, 1, geom.kernel_h, geom.kernel_w):
        raise TensorError(
            f"depthwise kernel shape {kernel.shape} does not match "
            f"({c}, 1, {geom.kernel_h}, {geom.kernel_w})"
        )
    if geom.groups != c:
        raise TensorError(f"depthwise conv needs groups == channels ({c}), got {geom.groups}")

    out_h, out_w = geom.output_shape(h, w)
    xp = _pad(x, geom)
    out = np.zeros((n, c, out_h, out_w), dtype=np.result_type(x, kernel))
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            out += _window(xp, i, j, geom, out_h, out_w) * kernel[:, 0, i, j][None, :, None, None]
    return ensure_finite(out, "depthwise_conv2d")


def depthwise_conv2d_vjp(
    grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of a scalar loss through ``depthwise_conv2d``.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (grad_input, grad_kernel)
    """
    n, c, h, w = x.shape
    out_h, out_w = grad_out.shape[2:]
    xp = _pad(x, geom)
    grad_xp = np.zeros_like(xp, dtype=np.result_type(grad_out, kernel))
    grad_kernel = np.zeros_like(kernel, dtype=np.result_type(grad_out, x))
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            grad_kernel[:, 0, i, j] = np.einsum("nchw,nchw->c", grad_out, _window(xp, i, j, geom, out_h, out_w))
            _window(grad_xp, i, j, geom, out_h, out_w)[...] += grad_out * kernel[:, 0, i, j][None, :, None, None]
    grad_x = grad_xp[:, :, geom.pad_h:geom.pad_h + h, geom.pad_w:geom.pad_w + w]
    return np.ascontiguousarray(grad_x), grad_kernel


def _im2col(x: np.ndarray, geom: ConvGeometry, out_h: int, out_w: int) -> np.ndarray:
    """Columns of shape (N, Cin, Kh, Kw, Ho, Wo)."""
    xp = _pad(x, geom)
    n, c = x.shape[:2]
    cols = np.empty((n, c, geom.kernel_h, geom.kernel_w, out_h, out_w), dtype=x.dtype)
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            cols[:, :, i, j] = _window(xp, i, j, geom, out_h, out_w)
    return cols


def dense_conv2d(x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """
    Full 2-D cross-correlation (groups=1), e.g. the (2, 16)/(2, 16) stem.

    Args:
        x (np.ndarray): Input of shape (N, Cin, H, W)
        kernel (np.ndarray): Kernel of shape (Cout, Cin, Kh, Kw)
        geom (ConvGeometry): Geometry with groups == 1

    Returns:
        np.ndarray: Output of shape (N, Cout, Ho, Wo)

    Raises:
        TensorError: On shape mismatch
    """
    _check_image(x, "dense_conv2d")
    if geom.groups != 1:
        raise TensorError(f"dense_conv2d needs groups == 1, got {geom.groups}")
    if kernel.ndim != 4 or kernel.shape[1:] != (x.shape[1], geom.kernel_h, geom.kernel_w):
        raise TensorError(
            f"kernel shape {kernel.shape} does not match input channels {x.shape[1]} "
            f"and geometry {geom.kernel_h}x{geom.kernel_w}"
        )
    out_h, out_w = geom.output_shape(*x.shape[2:])
    cols = _im2col(x, geom, out_h, out_w)
    out = np.tensordot(kernel, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    return ensure_finite(np.ascontiguousarray(out), "dense_conv2d")


def dense_conv2d_vjp(
    grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of a scalar loss through ``dense_conv2d``.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (grad_input, grad_kernel)
    """
    n, c, h, w = x.shape
    out_h, out_w = grad_out.shape[2:]
    cols = _im2col(x, geom, out_h, out_w)
    grad_kernel = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 4, 5]))
    # (Cin, Kh, Kw, N, Ho, Wo)
    grad_cols = np.tensordot(kernel, grad_out, axes=([0], [1]))
    grad_xp = np.zeros((n, c, h + 2 * geom.pad_h, w + 2 * geom.pad_w), dtype=grad_cols.dtype)
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            _window(grad_xp, i, j, geom, out_h, out_w)[...] += grad_cols[:, i, j].transpose(1, 0, 2, 3)
    grad_x = grad_xp[:, :, geom.pad_h:geom.pad_h + h, geom.pad_w:geom.pad_w + w]
    return np.ascontiguousarray(grad_x), grad_kernel


def pointwise_linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    Affine map over the trailing axis: ``x @ weight.T + bias``.

    Args:
        x (np.ndarray): Input of shape (..., Cin)
        weight (np.ndarray): Weight of shape (Cout, Cin)
        bias (np.ndarray): Bias of shape (Cout,)

    Returns:
        np.ndarray: Output of shape (..., Cout)

    Raises:
        TensorError: On shape mismatch
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise TensorError(f"trailing axis {x.shape[-1]} does not match weight shape {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise TensorError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    return ensure_finite(x @ weight.T + bias, "pointwise_linear")


def pointwise_linear_vjp(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_weight, grad_bias)."""
    grad_x = grad_out @ weight
    flat_grad = grad_out.reshape(-1, weight.shape[0])
    flat_x = x.reshape(-1, weight.shape[1])
    return grad_x, flat_grad.T @ flat_x, flat_grad.sum(axis=0)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """
    Normalize over the trailing (channel) axis at every position, then scale and shift.

    Args:
        x (np.ndarray): Input of shape (..., C)
        gamma (np.ndarray): Scale of shape (C,)
        beta (np.ndarray): Shift of shape (C,)
        eps (float): Variance floor, must be positive

    Returns:
        np.ndarray: Normalized output, same shape as x
    """
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise TensorError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match C={x.shape[-1]}")
    if eps <= 0:
        raise TensorError(f"eps must be positive, got {eps}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    return ensure_finite(centered * inv_std * gamma + beta, "layer_norm")


def layer_norm_vjp(
    grad_out: np.ndarray, x: np.ndarray, gamma: np.ndarray, eps: float = 1e-6
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_gamma, grad_beta)."""
    channels = x.shape[-1]
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    reduce_axes = tuple(range(x.ndim - 1))
    grad_gamma = (grad_out * x_hat).sum(axis=reduce_axes)
    grad_beta = grad_out.sum(axis=reduce_axes)

    grad_hat = grad_out * gamma
    grad_x = (inv_std / channels) * (
        channels * grad_hat
        - grad_hat.sum(axis=-1, keepdims=True)
        - x_hat * (grad_hat * x_hat).sum(axis=-1, keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x)."""
    return ensure_finite(0.5 * x * (1.0 + erf(x / _SQRT_2)), "gelu")


def gelu_vjp(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return grad_out * (cdf + x * pdf)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    _check_image(x, "global_avg_pool")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise TensorError(f"global_avg_pool needs H, W >= 1, got {x.shape}")
    return ensure_finite(x.mean(axis=(2, 3)), "global_avg_pool")


def global_avg_pool_vjp(grad_out: np.ndarray, input_shape: Sequence[int]) -> np.ndarray:
    n, c, h, w = input_shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), (n, c, h, w)).copy()


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    step: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """
    Compare an analytic gradient against central differences in 64-bit.

    The relative error of each checked entry is
    ``|a - b| / max(|a|, |b|, 1e-8)``.

    Args:
        f (Callable[[np.ndarray], float]): Scalar function of the parameter array
        x (np.ndarray): Point at which the gradient is checked
        analytic_grad (np.ndarray): Gradient claimed at ``x``, same shape as x
        step (float): Central-difference step h
        indices (Optional[Sequence[int]]): Flat indices to check (default: all)

    Returns:
        float: Maximum relative error over the checked entries

    Raises:
        TensorError: If f is non-finite at a perturbed point or shapes disagree
    """
    point = np.array(x, dtype=np.float64).reshape(-1)
    shape = np.shape(x)
    grad = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    if grad.shape != point.shape:
        raise TensorError(f"gradient shape {np.shape(analytic_grad)} does not match x shape {shape}")

    checked = range(point.size) if indices is None else indices
    worst = 0.0
    for idx in checked:
        original = point[idx]
        point[idx] = original + step
        f_plus = float(f(point.reshape(shape)))
        point[idx] = original - step
        f_minus = float(f(point.reshape(shape)))
        point[idx] = original
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise TensorError(f"function is non-finite near flat index {idx}")

        numeric = (f_plus - f_minus) / (2.0 * step)
        analytic = grad[idx]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
