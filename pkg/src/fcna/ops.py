"""Dense float32 array primitives: convolution, activations, pooling, losses.

Activations and images use the (batch, channels, height, width) layout
throughout. Everything here is a pure function of its inputs; operations
never retain references to their arguments. The production dtype is float32,
but every op preserves float64 inputs so gradient checks can run at higher
precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array shapes disagree with an operation's contract."""


def as_f32(values, shape=None) -> np.ndarray:
    """Build a C-contiguous float32 array, optionally reshaped."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def check_tensor(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate the dense-array invariants: floating dtype, all extents >= 1."""
    if not isinstance(arr, np.ndarray):
        raise ShapeError(f"{name}: expected ndarray, got {type(arr).__name__}")
    if arr.dtype not in (np.float32, np.float64):
        raise ShapeError(f"{name}: expected float32/float64 data, got {arr.dtype}")
    if arr.ndim == 0 or any(e < 1 for e in arr.shape):
        raise ShapeError(f"{name}: every extent must be >= 1, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel/stride/zero-pad of a convolution, as (height, width) pairs."""

    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if min(self.kernel) < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if min(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if min(self.pad) < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")


def conv_out_extent(in_extent: int, kernel: int, stride: int, pad: int,
                    layer: str = "conv") -> int:
    """Number of valid filter placements along one axis.

    Counts top-left positions p = 0, stride, 2*stride, ... such that the
    kernel fits inside the zero-padded extent, which closes to
    floor((in + 2*pad - kernel) / stride) + 1.
    """
    padded = in_extent + 2 * pad
    if padded < kernel:
        raise ShapeError(
            f"{layer}: input too small ({in_extent} + 2*{pad} padding "
            f"< kernel {kernel})")
    return (padded - kernel) // stride + 1


def conv_output_shape(in_h: int, in_w: int, g: ConvGeometry,
                      layer: str = "conv") -> tuple[int, int]:
    out_h = conv_out_extent(in_h, g.kernel[0], g.stride[0], g.pad[0], layer)
    out_w = conv_out_extent(in_w, g.kernel[1], g.stride[1], g.pad[1], layer)
    return out_h, out_w


def _pad_input(x: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    ph, pw = pad
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp: np.ndarray, g: ConvGeometry, out_h: int, out_w: int) -> np.ndarray:
    """Flatten every kernel window of the padded input into a row.

    Returns (batch * out_h * out_w, channels * kh * kw); rows ordered by
    (batch, out_row, out_col) so one GEMM computes the whole convolution.
    """
    kh, kw = g.kernel
    sh, sw = g.stride
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, c = xp.shape[:2]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)
    return cols


def conv2d_forward(x: np.ndarray, filters: np.ndarray, bias: np.ndarray,
                   g: ConvGeometry, layer: str = "conv") -> np.ndarray:
    """Cross-correlate `filters` over the zero-padded input.

    Args:
        x: input activations (batch, in_channels, h, w).
        filters: (num_filters, in_channels, kh, kw).
        bias: (num_filters,), added per output channel.
        g: kernel/stride/pad geometry.

    Returns:
        (batch, num_filters, out_h, out_w) output map.

    Kernels are applied in cross-correlation orientation (no flip), the
    convention of the architectures this engine reproduces; checkpoints are
    therefore unambiguous about filter layout.
    """
    check_tensor(x, f"{layer}.input")
    check_tensor(filters, f"{layer}.filters")
    check_tensor(bias, f"{layer}.bias")
    if x.ndim != 4 or filters.ndim != 4:
        raise ShapeError(
            f"{layer}: need 4-d input and filters, got {x.shape} and {filters.shape}")
    if x.shape[1] != filters.shape[1]:
        raise ShapeError(
            f"{layer}: input channels {x.shape[1]} != filter channels "
            f"{filters.shape[1]} (input {x.shape}, filters {filters.shape})")
    if filters.shape[2:] != g.kernel:
        raise ShapeError(
            f"{layer}: filter spatial shape {filters.shape[2:]} != kernel {g.kernel}")
    if bias.shape != (filters.shape[0],):
        raise ShapeError(
            f"{layer}: bias shape {bias.shape} != ({filters.shape[0]},)")

    n, _, in_h, in_w = x.shape
    f = filters.shape[0]
    out_h, out_w = conv_output_shape(in_h, in_w, g, layer)
    xp = _pad_input(x, g.pad)
    cols = _im2col(xp, g, out_h, out_w)
    out = cols @ filters.reshape(f, -1).T
    out += bias
    return np.ascontiguousarray(
        out.reshape(n, out_h, out_w, f).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, filters: np.ndarray, grad_out: np.ndarray,
                    g: ConvGeometry, layer: str = "conv"):
    """Reverse-mode partials of conv2d_forward.

    Returns (grad_input, grad_filters, grad_bias), each shaped like its
    primal. grad_out must match the forward output shape exactly.
    """
    n, _, in_h, in_w = x.shape
    f = filters.shape[0]
    out_h, out_w = conv_output_shape(in_h, in_w, g, layer)
    if grad_out.shape != (n, f, out_h, out_w):
        raise ShapeError(
            f"{layer}: grad_out shape {grad_out.shape} != forward output "
            f"{(n, f, out_h, out_w)}")

    kh, kw = g.kernel
    sh, sw = g.stride
    ph, pw = g.pad

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    xp = _pad_input(x, g.pad)
    cols = _im2col(xp, g, out_h, out_w)
    go = grad_out.transpose(0, 2, 3, 1).reshape(n * out_h * out_w, f)
    grad_filters = (go.T @ cols).reshape(filters.shape)

    # Scatter-add column gradients back onto the padded input, one kernel
    # offset at a time; strided slice assignment keeps this vectorized and
    # the accumulation order deterministic.
    grad_cols = go @ filters.reshape(f, -1)
    gc = grad_cols.reshape(n, out_h, out_w, x.shape[1], kh, kw)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw] += (
                gc[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    if ph or pw:
        grad_input = np.ascontiguousarray(gxp[:, :, ph:ph + in_h, pw:pw + in_w])
    else:
        grad_input = gxp
    return grad_input, grad_filters, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, pre_activation: np.ndarray) -> np.ndarray:
    if grad_out.shape != pre_activation.shape:
        raise ShapeError(
            f"relu: grad shape {grad_out.shape} != activation {pre_activation.shape}")
    return grad_out * (pre_activation > 0)


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None,
                    train_mode: bool):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time.

    Returns (output, mask). In eval mode this is exactly the identity and
    the mask is None; the stored mask already carries the survivor scaling
    so the backward pass is a plain multiply.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return grad_out
    return grad_out * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the class axis of (batch, classes) logits."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects (batch, classes), got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


_LOG_FLOOR = 1e-12  # keeps -log(p) finite when a probability underflows


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true labels."""
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes), got {probs.shape}")
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} != ({probs.shape[0]},)")
    k = probs.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(picked, _LOG_FLOOR)).mean())


def softmax_cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. the pre-softmax logits."""
    n, k = probs.shape
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return grad / n


def global_average_pool(class_map: np.ndarray) -> np.ndarray:
    """Spatial mean of a (batch, classes, h, w) map -> (batch, classes)."""
    if class_map.ndim != 4:
        raise ShapeError(
            f"global_average_pool expects (batch, classes, h, w), got {class_map.shape}")
    return class_map.mean(axis=(2, 3))


def global_average_pool_backward(grad_out: np.ndarray,
                                 spatial: tuple[int, int]) -> np.ndarray:
    """Spread pooled gradients uniformly: weight 1/(h*w) per position."""
    h, w = spatial
    scale = grad_out.dtype.type(1.0) / grad_out.dtype.type(h * w)
    return np.broadcast_to(
        (grad_out * scale)[:, :, None, None],
        grad_out.shape + (h, w)).copy()
