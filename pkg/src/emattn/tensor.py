"""
The dense tensor type of `emattn`.

A `Tensor` is an immutable, row-major buffer of 64-bit floats with a shape. Numerics live in `emattn.ops`; this
module only knows how to build, validate and look at tensors. A tensor optionally remembers the tape node that
produced it, which is how `emattn.tape` finds its way back through a computation.
"""
from typing import Any, Iterable, Optional, Sequence, Tuple

import numpy as np

from emattn.utils_errors import ShapeError

Shape = Tuple[int, ...]
"""An ordered tuple of extents, each >= 1. The empty tuple is the shape of a scalar."""


def as_shape(dims  # type: Iterable[int]
             ):
    # type: (...) -> Shape
    """
    Validates `dims` and returns it as a `Shape` tuple.

    >>> as_shape([2, 3])
    (2, 3)

    :param dims: an iterable of positive integer extents
    :return: the validated shape
    """
    try:
        shape = tuple(int(d) for d in dims)
    except (TypeError, ValueError):
        raise ShapeError("shape must be an iterable of integers, found %r" % (dims,))

    for d, raw in zip(shape, dims if isinstance(dims, Sequence) else shape):
        if d < 1 or d != raw:
            raise ShapeError("every extent of a shape must be an integer >= 1, found %r" % (tuple(dims),))

    # product must fit in the platform index range
    if int(np.prod(shape, dtype=object)) > np.iinfo(np.intp).max:
        raise ShapeError("shape %r holds more elements than the platform can index" % (shape,))
    return shape


def element_count(shape  # type: Shape
                  ):
    # type: (...) -> int
    """Product of the extents of `shape` (1 for a scalar)."""
    return int(np.prod(shape, dtype=np.int64)) if len(shape) > 0 else 1


class Tensor(object):
    """
    An immutable dense N-dimensional array of 64-bit floats.

    Build tensors with `tensor`, `zeros`, `ones`, `full` or `randn`. The underlying buffer is exposed read-only
    through `data`; use `numpy()` to get a private writable copy.
    """
    __slots__ = '_data', '_tape', '_node'

    def __init__(self,
                 values,           # type: Any
                 shape=None,       # type: Optional[Iterable[int]]
                 ):
        arr = np.array(values, dtype=np.float64, order='C', copy=True)
        if shape is not None:
            shape = as_shape(shape)
            if arr.size != element_count(shape):
                raise ShapeError("%s values can not be laid out with shape %r" % (arr.size, shape))
            arr = arr.reshape(shape)
        else:
            as_shape(arr.shape)
        arr.flags.writeable = False
        self._data = arr
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr, tape=None, node=None):
        """Internal constructor: wraps a freshly computed array without copying it."""
        # note: not np.ascontiguousarray, it turns 0-d results into 1-d ones
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order='C')
        if arr.flags.writeable:
            arr.flags.writeable = False
        t = cls.__new__(cls)
        t._data = arr
        t._tape = tape
        t._node = node
        return t

    # --

    @property
    def shape(self):
        # type: (...) -> Shape
        return self._data.shape

    @property
    def ndim(self):
        # type: (...) -> int
        return self._data.ndim

    @property
    def size(self):
        # type: (...) -> int
        return self._data.size

    @property
    def data(self):
        # type: (...) -> np.ndarray
        """The read-only row-major buffer, viewed with this tensor's shape."""
        return self._data

    @property
    def node(self):
        # type: (...) -> Optional[int]
        """Id of the tape node that produced this tensor, or None if it is not recorded on any tape."""
        return self._node

    @property
    def tape(self):
        return self._tape

    def numpy(self):
        # type: (...) -> np.ndarray
        return self._data.copy()

    def tolist(self):
        return self._data.tolist()

    def item(self):
        # type: (...) -> float
        if self._data.size != 1:
            raise ShapeError("only single-element tensors can be converted to a float, shape is %r" % (self.shape,))
        return float(self._data.reshape(()))

    def detach(self):
        # type: (...) -> Tensor
        """A tensor with the same values that is not attached to any tape."""
        return Tensor._wrap(self._data)

    # -- arithmetic sugar, all routed through the differentiable primitives

    def __add__(self, other):
        from emattn.ops import add
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        from emattn.ops import add, scale
        return add(self, scale(_coerce(other), -1.0))

    def __mul__(self, other):
        from emattn.ops import mul, scale
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from emattn.ops import scale
        return scale(self, -1.0)

    def __matmul__(self, other):
        from emattn.ops import matmul_batched
        return matmul_batched(self, other)

    def __len__(self):
        return self.shape[0] if self.ndim > 0 else 1

    def __repr__(self):
        tracked = "" if self._node is None else ", node=%s" % self._node
        return "Tensor(shape=%r%s)\n%s" % (self.shape, tracked, np.array2string(self._data, precision=6))


def _coerce(other):
    if isinstance(other, Tensor):
        return other
    return full((), float(other))


def tensor(values,      # type: Any
           shape=None,  # type: Optional[Iterable[int]]
           ):
    # type: (...) -> Tensor
    """
    Creates a tensor from nested sequences or an array, optionally laid out with `shape` (row-major).

    >>> tensor([1, 2, 3, 4, 5, 6], shape=(2, 3)).shape
    (2, 3)
    """
    return Tensor(values, shape=shape)


def zeros(shape):
    # type: (Iterable[int]) -> Tensor
    return Tensor._wrap(np.zeros(as_shape(shape)))


def ones(shape):
    # type: (Iterable[int]) -> Tensor
    return Tensor._wrap(np.ones(as_shape(shape)))


def full(shape, value):
    # type: (Iterable[int], float) -> Tensor
    return Tensor._wrap(np.full(as_shape(shape), float(value)))


def randn(shape,     # type: Iterable[int]
          rng=None,  # type: Optional[np.random.Generator]
          seed=None  # type: Optional[int]
          ):
    # type: (...) -> Tensor
    """Standard-normal tensor drawn from `rng`, or from a fresh generator seeded with `seed`."""
    if rng is None:
        rng = np.random.default_rng(seed)
    return Tensor._wrap(rng.standard_normal(as_shape(shape)))


def uniform(shape,   # type: Iterable[int]
            low,     # type: float
            high,    # type: float
            rng,     # type: np.random.Generator
            ):
    # type: (...) -> Tensor
    return Tensor._wrap(rng.uniform(low, high, size=as_shape(shape)))
