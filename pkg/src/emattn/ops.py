"""
The numeric primitives: layout (reshape, permute, concat, split), broadcasting arithmetic, batched matmul,
2-D convolution, directional and global average pooling, activations, and the losses used for training.

Every public function here is a `@primitive`: it takes and returns `Tensor`s, and is recorded on the active tape.
The functions bodies themselves work on read-only numpy arrays.
"""
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from typing_extensions import Literal

from emattn.tape import primitive
from emattn.tensor import Shape, Tensor, as_shape, element_count
from emattn.utils_errors import AxisError, ShapeError


def _norm_axis(axis, ndim):
    # type: (int, int) -> int
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise AxisError("axis %r is out of range for a tensor of rank %s" % (axis, ndim))
    return int(axis) % ndim


def _check_rank(x, rank, what):
    if x.ndim != rank:
        raise ShapeError("%s expects a tensor of rank %s, found shape %r" % (what, rank, x.shape))


# ------------- layout


@primitive
def reshape(t, new_shape):
    # type: (Tensor, Shape) -> Tensor
    """
    Lays the row-major values of `t` out with `new_shape`. Element counts must match.

    >>> reshape(Tensor([1, 2, 3, 4, 5, 6], shape=(2, 3)), (3, 2)).tolist()
    [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]
    """
    new_shape = as_shape(new_shape)
    if element_count(new_shape) != t.size:
        raise ShapeError("can not reshape %s elements of shape %r into shape %r" % (t.size, t.shape, new_shape))
    return t.reshape(new_shape)


@reshape.defvjp
def _reshape_vjp(g, out, t, new_shape):
    return {"t": g.reshape(t.shape)}


@primitive
def permute(t, axes):
    # type: (Tensor, Sequence[int]) -> Tensor
    """
    Reorders the axes of `t`: axis k of the result is axis `axes[k]` of `t`. The result is materialized, so a
    following `reshape` acts on the permuted layout.
    """
    axes = tuple(axes)
    if sorted(int(a) for a in axes if isinstance(a, (int, np.integer))) != list(range(t.ndim)) \
            or len(axes) != t.ndim:
        raise AxisError("%r is not a permutation of the %s axes of a tensor of shape %r" % (axes, t.ndim, t.shape))
    return np.ascontiguousarray(np.transpose(t, axes))


@permute.defvjp
def _permute_vjp(g, out, t, axes):
    return {"t": np.transpose(g, np.argsort(axes))}


@primitive
def concat(parts, axis):
    # type: (List[Tensor], int) -> Tensor
    """Joins `parts` along `axis`. All parts agree on every other extent."""
    if len(parts) == 0:
        raise ShapeError("concat needs at least one part")
    ndim = parts[0].ndim
    axis = _norm_axis(axis, ndim)
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != ndim or any(a != b for i, (a, b) in enumerate(zip(p.shape, ref)) if i != axis):
            raise ShapeError("can not concatenate shapes %r and %r along axis %s" % (ref, p.shape, axis))
    return np.concatenate(parts, axis=axis)


@concat.defvjp
def _concat_vjp(g, out, parts, axis):
    axis = _norm_axis(axis, g.ndim)
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return {"parts": np.split(g, cuts, axis=axis)}


@primitive
def slice_axis(t, axis, start, stop):
    # type: (Tensor, int, int, int) -> Tensor
    """The sub-tensor `start:stop` of `t` along `axis`."""
    axis = _norm_axis(axis, t.ndim)
    if not 0 <= start < stop <= t.shape[axis]:
        raise ShapeError("slice %s:%s is empty or out of range for extent %s" % (start, stop, t.shape[axis]))
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, stop)
    return t[tuple(index)]


@slice_axis.defvjp
def _slice_axis_vjp(g, out, t, axis, start, stop):
    axis = _norm_axis(axis, t.ndim)
    dt = np.zeros_like(t)
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, stop)
    dt[tuple(index)] = g
    return {"t": dt}


def split(t,      # type: Tensor
          axis,   # type: int
          sizes,  # type: Sequence[int]
          ):
    # type: (...) -> List[Tensor]
    """Cuts `t` along `axis` into consecutive parts with the given extents. `sizes` must sum to the extent."""
    axis = _norm_axis(axis, t.ndim)
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or sum(sizes) != t.shape[axis]:
        raise ShapeError("split sizes %r do not sum to the extent %s of axis %s" % (sizes, t.shape[axis], axis))
    parts = []
    start = 0
    for s in sizes:
        parts.append(slice_axis(t, axis, start, start + s))
        start += s
    return parts


# ------------- arithmetic


def broadcast_shape(a_shape,  # type: Shape
                    b_shape,  # type: Shape
                    ):
    # type: (...) -> Shape
    """
    Broadcast shape of two shapes: trailing axes are aligned, and each pair of extents is equal or contains a 1.
    """
    ndim = max(len(a_shape), len(b_shape))
    a = (1,) * (ndim - len(a_shape)) + tuple(a_shape)
    b = (1,) * (ndim - len(b_shape)) + tuple(b_shape)
    out = []
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ShapeError("shapes %r and %r can not be broadcast together" % (tuple(a_shape), tuple(b_shape)))
        out.append(max(da, db))
    return tuple(out)


def _unbroadcast(g, shape):
    """Sums `g` down to `shape`, undoing a broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


@primitive
def broadcast_binary(a,     # type: Tensor
                     b,     # type: Tensor
                     kind,  # type: Literal["add", "mul"]
                     ):
    # type: (...) -> Tensor
    """Elementwise `a + b` or `a * b` at the broadcast shape of the operands."""
    broadcast_shape(a.shape, b.shape)
    if kind == "add":
        return a + b
    elif kind == "mul":
        return a * b
    else:
        raise ValueError("unknown binary operation kind %r, expected 'add' or 'mul'" % (kind,))


@broadcast_binary.defvjp
def _broadcast_binary_vjp(g, out, a, b, kind):
    if kind == "add":
        return {"a": _unbroadcast(g, a.shape), "b": _unbroadcast(g, b.shape)}
    return {"a": _unbroadcast(g * b, a.shape), "b": _unbroadcast(g * a, b.shape)}


def add(a, b):
    # type: (Tensor, Tensor) -> Tensor
    return broadcast_binary(a, b, "add")


def mul(a, b):
    # type: (Tensor, Tensor) -> Tensor
    return broadcast_binary(a, b, "mul")


@primitive
def scale(t, factor):
    # type: (Tensor, float) -> Tensor
    """`t` multiplied by the constant `factor`."""
    return t * float(factor)


@scale.defvjp
def _scale_vjp(g, out, t, factor):
    return {"t": g * float(factor)}


@primitive
def sum_all(t):
    # type: (Tensor) -> Tensor
    """Sum of all the elements of `t`, as a scalar tensor."""
    return np.asarray(t.sum())


@sum_all.defvjp
def _sum_all_vjp(g, out, t):
    return {"t": np.full(t.shape, float(g))}


@primitive
def matmul_batched(a, b):
    # type: (Tensor, Tensor) -> Tensor
    """out[n, i, j] = sum_k a[n, i, k] * b[n, k, j] for operands of shapes (n, m, k) and (n, k, p)."""
    _check_rank(a, 3, "matmul_batched")
    _check_rank(b, 3, "matmul_batched")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError("can not multiply batched matrices of shapes %r and %r" % (a.shape, b.shape))
    return np.matmul(a, b)


@matmul_batched.defvjp
def _matmul_batched_vjp(g, out, a, b):
    return {"a": np.matmul(g, np.swapaxes(b, 1, 2)), "b": np.matmul(np.swapaxes(a, 1, 2), g)}


@primitive
def linear(x, weight, bias):
    # type: (Tensor, Tensor, Optional[Tensor]) -> Tensor
    """Fully-connected layer: x (n, in) times weight (out, in) transposed, plus bias (out)."""
    _check_rank(x, 2, "linear")
    _check_rank(weight, 2, "linear")
    if x.shape[1] != weight.shape[1] or (bias is not None and bias.shape != (weight.shape[0],)):
        raise ShapeError("linear layer of weight %r can not be applied to an input of shape %r"
                         % (weight.shape, x.shape))
    out = x @ weight.T
    return out if bias is None else out + bias


@linear.defvjp
def _linear_vjp(g, out, x, weight, bias):
    return {"x": g @ weight, "weight": g.T @ x, "bias": g.sum(axis=0)}


# ------------- convolution


def conv_output_extent(size, kernel, stride, padding):
    # type: (int, int, int, int) -> int
    """(size + 2 padding - kernel) / stride + 1, which must be a positive integer."""
    padded = size + 2 * padding
    if kernel > padded:
        raise ShapeError("kernel of extent %s is larger than the padded input extent %s" % (kernel, padded))
    if (padded - kernel) % stride != 0:
        raise ShapeError("input extent %s with kernel %s, stride %s and padding %s does not give an integer "
                         "output extent" % (size, kernel, stride, padding))
    return (padded - kernel) // stride + 1


def _conv_windows(x, kh, kw, stride, padding):
    """Strided (n, c, h_out, w_out, kh, kw) view over the zero-padded input."""
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


@primitive
def conv2d(x,           # type: Tensor
           weight,      # type: Tensor
           bias,        # type: Optional[Tensor]
           stride=1,    # type: int
           padding=0,   # type: int
           ):
    # type: (...) -> Tensor
    """
    2-D cross-correlation with zero padding:
    out[n, o, i, j] = bias[o] + sum_{c,u,v} weight[o, c, u, v] * x[n, c, i*stride + u - padding, j*stride + v - padding]

    :param x: input of shape (n, c_in, h, w)
    :param weight: kernels of shape (c_out, c_in, k, k)
    :param bias: None or a tensor of shape (c_out,)
    :param stride: the step between two output positions, >= 1
    :param padding: number of zero rows/columns added on each side, >= 0
    :return: a tensor of shape (n, c_out, h_out, w_out)
    """
    _check_rank(x, 4, "conv2d")
    _check_rank(weight, 4, "conv2d")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1 and padding >= 0, found %s and %s" % (stride, padding))
    c_out, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError("conv2d kernel %r expects %s input channels, found input shape %r"
                         % (weight.shape, c_in, x.shape))
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d bias of shape %r does not match %s output channels" % (bias.shape, c_out))
    conv_output_extent(x.shape[2], kh, stride, padding)
    conv_output_extent(x.shape[3], kw, stride, padding)

    windows = _conv_windows(x, kh, kw, stride, padding)
    out = np.einsum('ncijuv,ocuv->noij', windows, weight, optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


@conv2d.defvjp
def _conv2d_vjp(g, out, x, weight, bias, stride, padding):
    _, _, kh, kw = weight.shape
    h_out, w_out = g.shape[2], g.shape[3]
    windows = _conv_windows(x, kh, kw, stride, padding)
    dweight = np.einsum('ncijuv,noij->ocuv', windows, g, optimize=True)

    # transposed correlation: scatter every tap back onto the padded input
    n, c, h, w = x.shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + stride * h_out:stride, v:v + stride * w_out:stride] += \
                np.einsum('noij,oc->ncij', g, weight[:, :, u, v], optimize=True)
    dx = dxp[:, :, padding:padding + h, padding:padding + w]

    grads = {"x": dx, "weight": dweight}
    if bias is not None:
        grads["bias"] = g.sum(axis=(0, 2, 3))
    return grads


# ------------- pooling


@primitive
def avgpool_width(x):
    # type: (Tensor) -> Tensor
    """1-D global average pooling along the width: (n, c, h, w) -> (n, c, h, 1)."""
    _check_rank(x, 4, "avgpool_width")
    return x.sum(axis=3, keepdims=True) * (1. / x.shape[3])


@avgpool_width.defvjp
def _avgpool_width_vjp(g, out, x):
    return {"x": np.broadcast_to(g * (1. / x.shape[3]), x.shape)}


@primitive
def avgpool_height(x):
    # type: (Tensor) -> Tensor
    """1-D global average pooling along the height: (n, c, h, w) -> (n, c, 1, w)."""
    _check_rank(x, 4, "avgpool_height")
    return x.sum(axis=2, keepdims=True) * (1. / x.shape[2])


@avgpool_height.defvjp
def _avgpool_height_vjp(g, out, x):
    return {"x": np.broadcast_to(g * (1. / x.shape[2]), x.shape)}


@primitive
def gap2d(x):
    # type: (Tensor) -> Tensor
    """2-D global average pooling: (n, c, h, w) -> (n, c, 1, 1)."""
    _check_rank(x, 4, "gap2d")
    return x.sum(axis=(2, 3), keepdims=True) * (1. / (x.shape[2] * x.shape[3]))


@gap2d.defvjp
def _gap2d_vjp(g, out, x):
    return {"x": np.broadcast_to(g * (1. / (x.shape[2] * x.shape[3])), x.shape)}


# ------------- activations


@primitive
def sigmoid(x):
    # type: (Tensor) -> Tensor
    """
    Logistic function 1 / (1 + exp(-x)), computed with the sign split so that no exponential overflows.

    >>> sigmoid(Tensor([0.])).tolist()
    [0.5]
    """
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1. / (1. + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1. + e)
    return out


@sigmoid.defvjp
def _sigmoid_vjp(g, out, x):
    return {"x": g * out * (1. - out)}


@primitive
def relu(x):
    # type: (Tensor) -> Tensor
    return np.maximum(x, 0.)


@relu.defvjp
def _relu_vjp(g, out, x):
    return {"x": g * (x > 0)}


@primitive
def softmax_axis(x, axis):
    # type: (Tensor, int) -> Tensor
    """exp(x - max) / sum(exp(x - max)) along `axis`; every slice sums to 1."""
    axis = _norm_axis(axis, x.ndim)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@softmax_axis.defvjp
def _softmax_axis_vjp(g, out, x, axis):
    axis = _norm_axis(axis, x.ndim)
    return {"x": out * (g - (g * out).sum(axis=axis, keepdims=True))}


# ------------- normalization


@primitive
def channel_norm(x, gamma, beta, eps=1e-5):
    # type: (Tensor, Tensor, Tensor, float) -> Tensor
    """
    Normalizes every (sample, channel) plane of `x` (n, c, h, w) to zero mean and unit variance, then applies the
    per-channel affine `gamma * x_hat + beta`. This is a group normalization with one channel per group.
    """
    _check_rank(x, 4, "channel_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("channel_norm scale/shift must have shape (%s,), found %r and %r"
                         % (c, gamma.shape, beta.shape))
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    x_hat = (x - mu) / np.sqrt(var + eps)
    return x_hat * gamma[None, :, None, None] + beta[None, :, None, None]


@channel_norm.defvjp
def _channel_norm_vjp(g, out, x, gamma, beta, eps):
    m = x.shape[2] * x.shape[3]
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    inv_std = 1. / np.sqrt(var + eps)
    x_hat = (x - mu) * inv_std
    dx_hat = g * gamma[None, :, None, None]
    dx = (inv_std / m) * (m * dx_hat - dx_hat.sum(axis=(2, 3), keepdims=True)
                          - x_hat * (dx_hat * x_hat).sum(axis=(2, 3), keepdims=True))
    return {"x": dx, "gamma": (g * x_hat).sum(axis=(0, 2, 3)), "beta": g.sum(axis=(0, 2, 3))}


# ------------- losses


@primitive
def softmax_cross_entropy(logits, labels):
    # type: (Tensor, Sequence[int]) -> Tensor
    """
    Mean softmax cross-entropy of `logits` (n, k) against integer `labels` (n,), via log-sum-exp.
    """
    _check_rank(logits, 2, "softmax_cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],) or np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ShapeError("labels must be %s integers in [0, %s)" % (logits.shape[0], logits.shape[1]))
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(logits.shape[0]), labels]
    return np.asarray((log_z - picked).mean())


@softmax_cross_entropy.defvjp
def _softmax_cross_entropy_vjp(g, out, logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(n), labels] -= 1.
    return {"logits": p * (float(g) / n)}
