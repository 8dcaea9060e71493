"""
Dense numerical kernels used by fusion and training.

Convolution is cross-correlation (no kernel flip) with zero "same" padding.
Every kernel keeps the dtype of its input, so the same code serves the
float32 engine and the float64 gradient oracles.
"""
from typing import Callable, Dict, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from apps.common.exceptions import ShapeError
from .feature_map import FeatureMap

ArrayOrMap = Union[np.ndarray, FeatureMap]


def _unwrap(x: ArrayOrMap) -> np.ndarray:
    return x.data if isinstance(x, FeatureMap) else np.asarray(x)


def _wrap_like(template: ArrayOrMap, data: np.ndarray, coverage=None):
    if isinstance(template, FeatureMap):
        return FeatureMap(data, template.coverage.copy() if coverage is None else coverage)
    return data


def _check_kernel(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> int:
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be [out, in, k, k], got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if x.ndim != 3 or x.shape[2] != kernel.shape[1]:
        raise ShapeError(f"input channels {x.shape[-1]} != kernel in_ch {kernel.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias must have {kernel.shape[0]} entries, got {bias.shape}")
    return k


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(H, W, C) -> (H*W, C*k*k) patches, channel-major to match [out, in, k, k]."""
    pad = (k - 1) // 2
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    windows = sliding_window_view(padded, (k, k), axis=(0, 1))  # (H, W, C, k, k)
    rows, cols = x.shape[:2]
    return windows.reshape(rows * cols, -1)


def conv2d(input: ArrayOrMap, kernel: np.ndarray, bias: np.ndarray) -> ArrayOrMap:
    x = _unwrap(input)
    kernel = np.asarray(kernel, dtype=x.dtype)
    bias = np.asarray(bias, dtype=x.dtype)
    k = _check_kernel(x, kernel, bias)

    out_ch = kernel.shape[0]
    cols = _im2col(x, k)
    out = cols @ kernel.reshape(out_ch, -1).T + bias
    return _wrap_like(input, out.reshape(x.shape[0], x.shape[1], out_ch).astype(x.dtype, copy=False))


def conv2d_backward(
    input: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. (input, kernel, bias) given dL/d(output)."""
    x = np.asarray(input)
    kernel = np.asarray(kernel, dtype=x.dtype)
    grad_out = np.asarray(grad_out, dtype=x.dtype)
    k = _check_kernel(x, kernel, np.zeros(kernel.shape[0], dtype=x.dtype))
    rows, cols_, in_ch = x.shape
    out_ch = kernel.shape[0]
    if grad_out.shape != (rows, cols_, out_ch):
        raise ShapeError(f"upstream gradient {grad_out.shape} != output {(rows, cols_, out_ch)}")

    g = grad_out.reshape(rows * cols_, out_ch)
    patches = _im2col(x, k)
    d_kernel = (g.T @ patches).reshape(kernel.shape)
    d_bias = g.sum(axis=0)

    d_patches = (g @ kernel.reshape(out_ch, -1)).reshape(rows, cols_, in_ch, k, k)
    pad = (k - 1) // 2
    d_padded = np.zeros((rows + 2 * pad, cols_ + 2 * pad, in_ch), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            d_padded[a:a + rows, b:b + cols_, :] += d_patches[:, :, :, a, b]
    d_input = d_padded[pad:pad + rows, pad:pad + cols_, :]
    return d_input, d_kernel, d_bias


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray, scale: float = 1.0) -> np.ndarray:
    m = np.asarray(m)
    z = scale * m
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    # exp(-softplus(-x)) never overflows
    return np.exp(-np.logaddexp(0, -x)).astype(x.dtype, copy=False)


def _same_shape(*arrays: np.ndarray) -> None:
    first = arrays[0].shape
    for other in arrays[1:]:
        if other.shape != first:
            raise ShapeError(f"shape mismatch: {first} vs {other.shape}")


def _covered(*args: ArrayOrMap):
    masks = [a.coverage for a in args if isinstance(a, FeatureMap)]
    if not masks:
        return None
    return np.logical_and.reduce(masks)


def _hadamard(*args):
    arrays = [_unwrap(a) for a in args]
    _same_shape(*arrays)
    out = arrays[0]
    for other in arrays[1:]:
        out = out * other
    return out


def _add(*args):
    arrays = [_unwrap(a) for a in args]
    _same_shape(*arrays)
    out = arrays[0]
    for other in arrays[1:]:
        out = out + other
    return out


def _concat(*args):
    arrays = [_unwrap(a) for a in args]
    for other in arrays[1:]:
        if other.shape[:2] != arrays[0].shape[:2]:
            raise ShapeError(f"concat needs equal spatial size: {arrays[0].shape[:2]} vs {other.shape[:2]}")
    return np.concatenate(arrays, axis=-1)


_ELEMENTWISE: Dict[str, Callable] = {
    "sigmoid": lambda x: sigmoid(_unwrap(x)),
    "tanh": lambda x: np.tanh(_unwrap(x)),
    "hadamard": _hadamard,
    "add": _add,
    "concat_channels": _concat,
}


def elementwise(op: str, *args: ArrayOrMap) -> ArrayOrMap:
    """
    sigmoid / tanh take one argument; hadamard / add take matching shapes;
    concat_channels stacks channels in argument order (prior first by convention).
    """
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ShapeError(f"unknown elementwise op '{op}'")
    if op in ("sigmoid", "tanh") and len(args) != 1:
        raise ShapeError(f"{op} takes exactly one argument")
    if not args:
        raise ShapeError(f"{op} needs arguments")

    out = fn(*args)
    if isinstance(args[0], FeatureMap):
        return FeatureMap(out, _covered(*args))
    return out
