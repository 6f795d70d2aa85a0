"""
Dense rank-4 tensor operations with hand-derived backward passes.

Every operation is a pure function of its inputs and keeps the input dtype:
training runs in float32, gradient checks run the same code in float64.
"""

from __future__ import annotations
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ArgumentError, DataError, ShapeError
from mask_util import IGNORE


@dataclass(eq=False)
class Tensor4:
    """
    (n, c, h, w) array of reals with an optional gradient buffer.

    Attributes:
        values (np.ndarray): row-major (n, c, h, w) values
        grad (np.ndarray | None): gradient of identical shape, only present in training
    """

    values: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims, got shape {self.values.shape}")
        if self.grad is not None and np.shape(self.grad) != self.values.shape:
            raise ShapeError(f"grad shape {np.shape(self.grad)} != values shape {self.values.shape}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def c(self) -> int:
        return self.values.shape[1]

    @property
    def h(self) -> int:
        return self.values.shape[2]

    @property
    def w(self) -> int:
        return self.values.shape[3]

    @property
    def dtype(self):
        return self.values.dtype

    @classmethod
    def zeros(cls, dims: tuple[int, int, int, int], dtype=np.float32) -> Tensor4:
        return cls(np.zeros(dims, dtype=dtype))

    def zeros_like(self) -> Tensor4:
        return Tensor4(np.zeros_like(self.values))

    def astype(self, dtype) -> Tensor4:
        grad = None if self.grad is None else self.grad.astype(dtype)
        return Tensor4(self.values.astype(dtype), grad)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())


@dataclass(eq=False)
class ConvParams:
    """
    Convolution weights (c_out, c_in, k, k), bias (c_out,), stride and padding.
    Output spatial dims follow floor((h + 2*padding - k) / stride) + 1.
    """

    weights: Tensor4
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if not isinstance(self.weights, Tensor4):
            self.weights = Tensor4(self.weights)
        self.bias = np.asarray(self.bias)
        _, _, kh, kw = self.weights.dims
        if kh != kw or kh < 1:
            raise ShapeError(f"kernel must be square with k >= 1, got {self.weights.dims}")
        if self.stride < 1:
            raise ArgumentError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ArgumentError(f"padding must be >= 0, got {self.padding}")
        if self.bias.shape != (self.c_out,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out {self.c_out}")

    @property
    def c_out(self) -> int:
        return self.weights.n

    @property
    def c_in(self) -> int:
        return self.weights.c

    @property
    def k(self) -> int:
        return self.weights.h

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.k) // self.stride + 1
        ow = (w + 2 * self.padding - self.k) // self.stride + 1
        return oh, ow

    def num_parameters(self) -> int:
        return self.weights.values.size + self.bias.size

    def astype(self, dtype) -> ConvParams:
        return ConvParams(self.weights.astype(dtype), self.bias.astype(dtype), self.stride, self.padding)

    def copy(self) -> ConvParams:
        return ConvParams(Tensor4(self.weights.values.copy()), self.bias.copy(), self.stride, self.padding)


@dataclass(eq=False)
class ConvGrads:
    weights: np.ndarray
    bias: np.ndarray


def _padded_windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    # (n, c, oh, ow, k, k) read-only view over the padded input
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def conv2d_forward(input: Tensor4, params: ConvParams) -> Tensor4:
    """
    Cross-correlation with bias.

    Args:
        - input: Tensor4 (n, c_in, h, w)
        - params: ConvParams with weights (c_out, c_in, k, k)

    Raises:
        - ShapeError: channel mismatch (names both shapes) or an empty output

    Returns:
        - Tensor4 (n, c_out, h', w')

    Complexity:
        Best/Worst: O(n * c_out * c_in * k^2 * h' * w')
    """
    if input.c != params.c_in:
        raise ShapeError(f"input shape {input.dims} does not match kernel shape {params.weights.dims}")
    oh, ow = params.output_size(input.h, input.w)
    if oh < 1 or ow < 1:
        raise ShapeError(f"input shape {input.dims} too small for kernel shape {params.weights.dims}")
    windows = _padded_windows(input.values, params.k, params.stride, params.padding)
    out = np.tensordot(windows, params.weights.values, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + params.bias[None, :, None, None]
    return Tensor4(np.ascontiguousarray(out, dtype=input.dtype))


def conv2d_backward(input: Tensor4, params: ConvParams, grad_out: Tensor4) -> tuple[Tensor4, ConvGrads]:
    """
    Gradients of sum(grad_out * conv2d_forward(input, params)).

    Args:
        - input: the forward input
        - params: the forward parameters
        - grad_out: gradient w.r.t. the forward output

    Raises:
        - ShapeError: grad_out dims differ from the forward output dims

    Returns:
        - (grad_input, ConvGrads(weights, bias))

    Complexity:
        Best/Worst: O(n * c_out * c_in * k^2 * h' * w')
    """
    oh, ow = params.output_size(input.h, input.w)
    expected = (input.n, params.c_out, oh, ow)
    if grad_out.dims != expected:
        raise ShapeError(f"grad_out shape {grad_out.dims} does not match output shape {expected}")
    g = grad_out.values
    k, s, p = params.k, params.stride, params.padding

    grad_bias = g.sum(axis=(0, 2, 3))
    windows = _padded_windows(input.values, k, s, p)
    grad_weights = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))

    weights = params.weights.values
    grad_padded = np.zeros((input.n, input.c, input.h + 2 * p, input.w + 2 * p), dtype=input.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(g, weights[:, :, i, j], axes=([1], [0]))
            grad_padded[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
    grad_input = grad_padded[:, :, p:p + input.h, p:p + input.w]

    return (
        Tensor4(np.ascontiguousarray(grad_input)),
        ConvGrads(grad_weights.astype(weights.dtype), grad_bias.astype(params.bias.dtype)),
    )


def relu(input: Tensor4) -> Tensor4:
    return Tensor4(np.maximum(input.values, 0))


def relu_backward(input: Tensor4, grad_out: Tensor4) -> Tensor4:
    """ Gradient passes where input > 0; the subgradient at 0 is 0. """
    return Tensor4(grad_out.values * (input.values > 0))


def _pool_bounds(size: int, out: int) -> list[tuple[int, int]]:
    # start = floor(i*size/out), end = ceil((i+1)*size/out)
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def _check_pool_dims(input: Tensor4, out_h: int, out_w: int) -> None:
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"pool output dims must be >= 1, got ({out_h}, {out_w})")
    if out_h > input.h or out_w > input.w:
        raise ArgumentError(f"pool output ({out_h}, {out_w}) larger than input {input.dims}")


def adaptive_avg_pool(input: Tensor4, out_h: int, out_w: int) -> Tensor4:
    """
    Mean over near-equal partition cells, bounds floor(i*h/out_h) .. ceil((i+1)*h/out_h).

    Raises:
        - ArgumentError: zero output dims or output larger than the input
    """
    _check_pool_dims(input, out_h, out_w)
    x = input.values
    out = np.empty((input.n, input.c, out_h, out_w), dtype=input.dtype)
    for i, (hs, he) in enumerate(_pool_bounds(input.h, out_h)):
        for j, (ws, we) in enumerate(_pool_bounds(input.w, out_w)):
            out[:, :, i, j] = x[:, :, hs:he, ws:we].mean(axis=(2, 3))
    return Tensor4(out)


def adaptive_avg_pool_backward(input: Tensor4, grad_out: Tensor4) -> Tensor4:
    """ Spreads each output gradient uniformly over its partition cell. """
    _, _, out_h, out_w = grad_out.dims
    _check_pool_dims(input, out_h, out_w)
    g = grad_out.values
    grad = np.zeros(input.dims, dtype=grad_out.dtype)
    for i, (hs, he) in enumerate(_pool_bounds(input.h, out_h)):
        for j, (ws, we) in enumerate(_pool_bounds(input.w, out_w)):
            area = (he - hs) * (we - ws)
            grad[:, :, hs:he, ws:we] += g[:, :, i, j, None, None] / area
    return Tensor4(grad)


def _interp_matrix(in_size: int, out_size: int, dtype) -> np.ndarray:
    # align_corners=False: s = (d + 0.5) * in/out - 0.5, clamped into [0, in - 1]
    d = np.arange(out_size)
    src = np.clip((d + 0.5) * (in_size / out_size) - 0.5, 0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    np.add.at(matrix, (d, lo), 1.0 - frac)
    np.add.at(matrix, (d, hi), frac)
    return matrix.astype(dtype)


def bilinear_upsample(input: Tensor4, out_h: int, out_w: int) -> Tensor4:
    """
    Bilinear resize (align-corners-false convention) to (out_h, out_w).

    Implemented as two interpolation matrices, out = A_h . x . A_w^T, so the
    backward pass is the transposed product.
    """
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"upsample dims must be >= 1, got ({out_h}, {out_w})")
    a_h = _interp_matrix(input.h, out_h, input.dtype)
    a_w = _interp_matrix(input.w, out_w, input.dtype)
    return Tensor4(np.matmul(np.matmul(a_h, input.values), a_w.T))


def bilinear_upsample_backward(input: Tensor4, grad_out: Tensor4) -> Tensor4:
    _, _, out_h, out_w = grad_out.dims
    a_h = _interp_matrix(input.h, out_h, grad_out.dtype)
    a_w = _interp_matrix(input.w, out_w, grad_out.dtype)
    return Tensor4(np.matmul(np.matmul(a_h.T, grad_out.values), a_w))


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    """
    Channel concatenation, a's channels first.

    Raises:
        - ShapeError: n, h or w disagree (callers resample first)
    """
    if (a.n, a.h, a.w) != (b.n, b.h, b.w):
        raise ShapeError(f"cannot concat {a.dims} with {b.dims}: batch/spatial dims differ")
    return Tensor4(np.concatenate([a.values, b.values], axis=1))


def split_channels(grad_out: Tensor4, a_channels: int) -> tuple[Tensor4, Tensor4]:
    """ Backward of concat_channels: split at channel a_channels. """
    g = grad_out.values
    return Tensor4(g[:, :a_channels]), Tensor4(g[:, a_channels:])


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.dims != b.dims:
        raise ShapeError(f"cannot add {a.dims} and {b.dims}")
    return Tensor4(a.values + b.values)


def add_backward(grad_out: Tensor4) -> tuple[Tensor4, Tensor4]:
    return Tensor4(grad_out.values.copy()), Tensor4(grad_out.values.copy())


def softmax_ce_ignore(logits: Tensor4, target: np.ndarray, ignore_value: int = IGNORE) -> tuple[float, Tensor4]:
    """
    Per-pixel softmax cross-entropy averaged over non-ignored pixels.

    Args:
        - logits: Tensor4 (n, C, h, w)
        - target: integer array (n, h, w) of classes in [0, C) or ignore_value
        - ignore_value: label contributing zero loss and zero gradient

    Raises:
        - ShapeError: target dims do not match logits spatially
        - DataError: a target class outside [0, C) that is not ignore_value

    Returns:
        - (loss, grad_logits); (0.0, zeros) when every pixel is ignored

    Complexity:
        Best/Worst: O(n * C * h * w)
    """
    target = np.asarray(target)
    if target.shape != (logits.n, logits.h, logits.w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.dims}")
    target = target.astype(np.int64)
    valid = target != ignore_value
    bad = valid & ((target < 0) | (target >= logits.c))
    if bad.any():
        pos = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(f"target class {int(target[pos])} at (n, y, x) = {pos} outside [0, {logits.c})")

    count = int(valid.sum())
    if count == 0:
        return 0.0, logits.zeros_like()

    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    log_prob = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    safe_target = np.where(valid, target, 0)
    picked = np.take_along_axis(log_prob, safe_target[:, None], axis=1)[:, 0]
    loss = -float(picked[valid].sum()) / count

    one_hot = np.arange(logits.c)[None, :, None, None] == safe_target[:, None]
    grad = (np.exp(log_prob) - one_hot) * (valid[:, None] / count)
    return loss, Tensor4(grad.astype(logits.dtype))


def argmax_labels(logits: Tensor4) -> np.ndarray:
    """ Per-pixel argmax (n, h, w); ties go to the lowest class index. """
    return np.argmax(logits.values, axis=1).astype(np.uint8)


def nearest_resize_indices(in_size: int, out_size: int) -> np.ndarray:
    """ Source index floor(d * in / out) for each destination index d. """
    return (np.arange(out_size) * in_size) // out_size
