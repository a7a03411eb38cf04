"""
Reverse-mode differentiation.

Operations declared with `@primitive` are plain functions of numpy arrays. The generated wrapper unwraps `Tensor`
arguments, runs the function, and - when a `Tape` is active in the current execution context and one of the
arguments is recorded on it - appends a node to that tape. `backward` then walks the tape in reverse and applies
the vector-Jacobian products registered with `<primitive>.defvjp`.

```python
with Tape() as tape:
    x = tape.watch(randn((2, 3), seed=0))
    y = sum_all(mul(x, x))
grads = tape.backward(y)
grads[x]  # == 2 * x
```
"""
import logging
from collections import OrderedDict
from contextvars import ContextVar
from inspect import signature
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from decopatch import function_decorator
from makefun import wraps

from emattn.tensor import Tensor, element_count
from emattn.utils_errors import NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

_ACTIVE_TAPE = ContextVar("emattn_active_tape", default=None)


def active_tape():
    # type: (...) -> Optional[Tape]
    """Returns the tape recording in the current execution context, if any."""
    return _ACTIVE_TAPE.get()


# ------------- primitives


class _PrimitiveSpec(object):
    """Everything the tape needs to know about one differentiable operation."""
    __slots__ = 'name', 'forward', 'vjp', 'differentiable', 'signature'

    def __init__(self, name, forward, differentiable):
        self.name = name
        self.forward = forward
        self.vjp = None
        self.differentiable = differentiable
        self.signature = signature(forward)

    def defvjp(self, vjp):
        """
        Registers the vector-Jacobian product of this primitive. `vjp(g, out, **arguments)` receives the gradient
        flowing into the output, the forward output, and the forward arguments (tensors as arrays), and returns a
        dict {argument name: gradient} (a list of gradients for list-of-tensor arguments).
        """
        self.vjp = vjp
        return vjp

    def __repr__(self):
        return "<primitive %s>" % self.name


@function_decorator
def primitive(name=None,            # type: str
              differentiable=True,  # type: bool
              ):
    """
    Declares a numpy-level function as a tape-recorded operation on tensors.

    Can be used with or without parenthesis:

    ```python
    @primitive
    def relu(x):
        return np.maximum(x, 0.)

    @relu.defvjp
    def _relu_vjp(g, out, x):
        return {"x": g * (x > 0)}
    ```

    :param name: the operation name shown on the tape. Defaults to the function name.
    :param differentiable: if False the operation is never recorded and its outputs are constants.
    :return:
    """
    def _apply(f):
        spec = _PrimitiveSpec(name or f.__name__, f, differentiable)

        @wraps(f)
        def _recorded(*args, **kwargs):
            bound = spec.signature.bind(*args, **kwargs)
            bound.apply_defaults()
            return _call_primitive(spec, bound.arguments)

        _recorded.defvjp = spec.defvjp
        _recorded.spec = spec
        return _recorded

    return _apply


def _unwrap(value):
    """Returns (raw value, list of (index or None, tensor)) for an argument value."""
    if isinstance(value, Tensor):
        return value.data, [(None, value)]
    if isinstance(value, (list, tuple)) and len(value) > 0 and all(isinstance(v, Tensor) for v in value):
        return [v.data for v in value], [(i, v) for i, v in enumerate(value)]
    return value, []


def _call_primitive(spec,       # type: _PrimitiveSpec
                    arguments,  # type: Mapping[str, Any]
                    ):
    tape = active_tape()
    raw_args = OrderedDict()
    slots = []
    for arg_name, value in arguments.items():
        raw, tensors = _unwrap(value)
        raw_args[arg_name] = raw
        if tape is not None:
            for idx, t in tensors:
                if t.tape is tape and t.node is not None:
                    slots.append((arg_name, idx, t.node))

    out = spec.forward(**raw_args)

    if tape is None or not slots or not spec.differentiable:
        return Tensor._wrap(out)

    if spec.vjp is None:
        raise TapeError("primitive '%s' has no registered vjp and can not be recorded" % spec.name)
    out = Tensor._wrap(out)
    return tape._record(spec, raw_args, slots, out)


# ------------- tape


class TapeNode(object):
    """
    One recorded operation: the primitive, its forward arguments (tensors kept as arrays), the node ids of its
    recorded tensor inputs, and its forward output. Leaves have `spec=None`.
    """
    __slots__ = 'index', 'spec', 'arguments', 'inputs', 'output'

    def __init__(self, index, spec, arguments, inputs, output):
        self.index = index          # type: int
        self.spec = spec            # type: Optional[_PrimitiveSpec]
        self.arguments = arguments  # type: Dict[str, Any]
        self.inputs = inputs        # type: List[Tuple[str, Optional[int], int]]
        self.output = output        # type: np.ndarray

    @property
    def is_leaf(self):
        return self.spec is None

    def __repr__(self):
        if self.is_leaf:
            return "TapeNode(%s, leaf, shape=%r)" % (self.index, self.output.shape)
        return "TapeNode(%s, %s, inputs=%r, shape=%r)" % (self.index, self.spec.name,
                                                          [i for _, _, i in self.inputs], self.output.shape)


class Tape(object):
    """
    An append-only record of the primitives applied to watched tensors.

    A tape records only while it is active (`with tape: ...`), and only in the execution context that activated
    it. Node ids are positions in `nodes`, so every node's inputs precede it.
    """
    __slots__ = 'nodes', '_tokens'

    def __init__(self):
        self.nodes = []  # type: List[TapeNode]
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self):
        return len(self.nodes)

    def watch(self, t):
        # type: (Tensor) -> Tensor
        """Records `t` as a leaf of this tape and returns the recorded tensor (same values)."""
        node = TapeNode(len(self.nodes), None, {}, [], t.data)
        self.nodes.append(node)
        return Tensor._wrap(t.data, tape=self, node=node.index)

    def node(self, node_id):
        # type: (int) -> TapeNode
        if not isinstance(node_id, (int, np.integer)) or not 0 <= node_id < len(self.nodes):
            raise TapeError("unknown node id %r, this tape holds %s nodes" % (node_id, len(self.nodes)))
        return self.nodes[node_id]

    @property
    def leaves(self):
        # type: (...) -> List[TapeNode]
        return [n for n in self.nodes if n.is_leaf]

    def _record(self, spec, raw_args, slots, out):
        node = TapeNode(len(self.nodes), spec, raw_args, slots, out.data)
        self.nodes.append(node)
        out._tape = self
        out._node = node.index
        return out

    def backward(self, output, seed=None):
        # type: (Union[Tensor, int], Optional[Tensor]) -> Gradients
        return backward(self, output, seed)

    def replay(self):
        # type: (...) -> bool
        """
        Recomputes every recorded node from the leaves, and returns True if all outputs are bit-identical to the
        recorded ones.
        """
        values = {}
        for node in self.nodes:
            if node.is_leaf:
                values[node.index] = node.output
                continue
            args = OrderedDict((k, list(v) if isinstance(v, list) else v) for k, v in node.arguments.items())
            for arg_name, idx, input_id in node.inputs:
                if idx is None:
                    args[arg_name] = values[input_id]
                else:
                    args[arg_name][idx] = values[input_id]
            out = np.asarray(node.spec.forward(**args), dtype=np.float64)
            if not np.array_equal(out, node.output):
                logger.debug("replay of node %r does not reproduce its output", node)
                return False
            values[node.index] = out
        return True


class Gradients(object):
    """The gradients of one `backward` call, for every leaf of the tape. Index it with the watched tensors."""
    __slots__ = 'tape', 'by_node'

    def __init__(self, tape, by_node):
        self.tape = tape        # type: Tape
        self.by_node = by_node  # type: Dict[int, Tensor]

    def __getitem__(self, t):
        # type: (Union[Tensor, int]) -> Tensor
        if isinstance(t, Tensor):
            if t.tape is not self.tape:
                raise TapeError("this tensor is not recorded on the differentiated tape")
            t = t.node
        try:
            return self.by_node[t]
        except KeyError:
            raise TapeError("node %r is not a leaf of the differentiated tape" % (t,))

    def __len__(self):
        return len(self.by_node)

    def __iter__(self):
        return iter(self.by_node)


def backward(tape,       # type: Tape
             output,     # type: Union[Tensor, int]
             seed=None,  # type: Optional[Tensor]
             ):
    # type: (...) -> Gradients
    """
    Accumulates d(output)/d(leaf) for every leaf of `tape` with the chain rule, visiting nodes in reverse order.

    :param tape: the tape `output` was recorded on
    :param output: the recorded output tensor, or its node id
    :param seed: the gradient flowing into `output`. Defaults to ones.
    :return: a `Gradients` mapping, with zeros for leaves that `output` does not depend on
    """
    if isinstance(output, Tensor):
        if output.tape is not tape or output.node is None:
            raise TapeError("the output tensor was not recorded on this tape")
        out_id = output.node
    else:
        out_id = output
    out_node = tape.node(out_id)

    if seed is None:
        seed_arr = np.ones_like(out_node.output)
    else:
        seed_arr = seed.data if isinstance(seed, Tensor) else np.asarray(seed, dtype=np.float64)
        if seed_arr.shape != out_node.output.shape:
            raise TapeError("seed gradient shape %r does not match output shape %r"
                             % (seed_arr.shape, out_node.output.shape))

    grads = {out_id: np.array(seed_arr, dtype=np.float64)}
    for node in reversed(tape.nodes[:out_id + 1]):
        g = grads.get(node.index)
        if g is None or node.is_leaf:
            continue
        input_grads = node.spec.vjp(g, node.output, **node.arguments)
        for arg_name, idx, input_id in node.inputs:
            gi = input_grads[arg_name] if idx is None else input_grads[arg_name][idx]
            gi = np.asarray(gi, dtype=np.float64)
            expected = tape.nodes[input_id].output.shape
            if gi.shape != expected:
                raise ShapeError("vjp of '%s' returned a gradient of shape %r for '%s', expected %r"
                                 % (node.spec.name, gi.shape, arg_name, expected))
            prev = grads.get(input_id)
            grads[input_id] = gi if prev is None else prev + gi
        # interior gradients are not needed anymore
        del grads[node.index]

    by_node = OrderedDict()
    for leaf in tape.leaves:
        g = grads.get(leaf.index)
        by_node[leaf.index] = Tensor._wrap(np.zeros_like(leaf.output) if g is None else g)
    return Gradients(tape, by_node)


# ------------- finite differences


def _scalar(value):
    if isinstance(value, Tensor):
        if value.size != 1:
            raise ShapeError("finite differences need a scalar-valued function, got shape %r" % (value.shape,))
        value = value.item()
    value = float(value)
    if not np.isfinite(value):
        raise NumericError("function evaluated to a non-finite value: %r" % value)
    return value


def finite_diff_gradient(f,       # type: Callable[[Tensor], Union[Tensor, float]]
                         x,       # type: Tensor
                         h=1e-5,  # type: float
                         ):
    # type: (...) -> Tensor
    """
    Central-difference gradient of a scalar function: (f(x + h e_i) - f(x - h e_i)) / 2h for every element i.

    :param f: a function of one tensor, returning a scalar tensor or a float
    :param x: the point of evaluation
    :param h: the step, > 0
    :return: a tensor shaped like `x`
    """
    if not h > 0:
        raise ValueError("finite difference step must be > 0, found %r" % h)
    base = x.numpy().reshape(-1)
    grad = np.empty_like(base)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + h
        f_plus = _scalar(f(Tensor._wrap(base.reshape(x.shape).copy())))
        base[i] = orig - h
        f_minus = _scalar(f(Tensor._wrap(base.reshape(x.shape).copy())))
        base[i] = orig
        grad[i] = (f_plus - f_minus) / (2. * h)
    return Tensor._wrap(grad.reshape(x.shape))


RELATIVE_ERROR_FLOOR = 1e-12


def relative_error(analytic,  # type: np.ndarray
                   numeric,   # type: np.ndarray
                   floor=RELATIVE_ERROR_FLOOR,
                   ):
    # type: (...) -> np.ndarray
    """|analytic - numeric| / max(|analytic|, |numeric|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


class GradCheckReport(object):
    """Outcome of comparing tape gradients with central finite differences, one entry per checked input."""
    __slots__ = 'errors', 'worst_index', 'compared', 'passed', 'step', 'tolerance'

    def __init__(self, errors, worst_index, compared, step, tolerance):
        self.errors = errors            # type: Dict[str, float]
        self.worst_index = worst_index  # type: Dict[str, Tuple[int, ...]]
        self.compared = compared        # type: int
        self.step = step                # type: float
        self.tolerance = tolerance      # type: float
        self.passed = all(e < tolerance for e in errors.values())

    @property
    def max_error(self):
        # type: (...) -> float
        return max(self.errors.values()) if self.errors else 0.

    def to_dict(self):
        return OrderedDict([
            ("passed", self.passed),
            ("max_relative_error", self.max_error),
            ("tolerance", self.tolerance),
            ("step", self.step),
            ("compared", self.compared),
            ("per_parameter", OrderedDict((k, OrderedDict([("max_relative_error", v),
                                                            ("worst_index", list(self.worst_index[k]))]))
                                          for k, v in self.errors.items())),
        ])

    def __repr__(self):
        return "GradCheckReport(passed=%s, max_error=%.3e, compared=%s)" % (self.passed, self.max_error,
                                                                              self.compared)


def gradcheck(f,               # type: Callable[..., Tensor]
              inputs,          # type: Mapping[str, Tensor]
              h=1e-5,          # type: float
              tolerance=1e-5,  # type: float
              ):
    # type: (...) -> GradCheckReport
    """
    Compares the tape gradients of the scalar function `f(**inputs)` with central finite differences, for every
    entry of `inputs`.
    """
    with Tape() as tape:
        watched = OrderedDict((k, tape.watch(v)) for k, v in inputs.items())
        out = f(**watched)
    if out.tape is not tape:
        raise TapeError("the checked function does not depend on any of its inputs")
    if not np.all(np.isfinite(out.data)):
        raise NumericError("the checked function evaluated to a non-finite value")
    grads = tape.backward(out)

    errors = OrderedDict()
    worst = OrderedDict()
    compared = 0
    for name, value in inputs.items():
        def _f_of(t, _name=name):
            args = dict(inputs)
            args[_name] = t
            return f(**args)

        numeric = finite_diff_gradient(_f_of, value, h=h).data
        analytic = grads[watched[name]].data
        err = relative_error(analytic, numeric)
        idx = np.unravel_index(int(np.argmax(err)), err.shape) if err.size > 0 else ()
        errors[name] = float(err.max()) if err.size > 0 else 0.
        worst[name] = tuple(int(i) for i in idx)
        compared += element_count(value.shape)
        logger.debug("gradcheck %s: max relative error %.3e at %r", name, errors[name], worst[name])

    return GradCheckReport(errors, worst, compared, h, tolerance)
