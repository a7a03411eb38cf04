"""
Attention modules on top of the differentiable primitives of `emattn.ops`:

 - EMA, the efficient multi-scale attention: channels are folded group-wise into the batch axis, a 1x1 branch
   gates each group with directional pooling descriptors, a 3x3 branch extracts local context, and a
   cross-spatial stage fuses both into a pixel-wise gate of the group input.
 - CA, the coordinate attention it derives from, and SE, the squeeze-and-excitation baseline.

Parameters are immutable records (`EmaParams`, `CaParams`, `SeParams`) whose buffers are `Tensor`s in a fixed
declaration order, the order used for parameter counting and serialization.
"""
import logging
from collections import OrderedDict
from math import sqrt
from typing import Dict, Mapping, Optional

import numpy as np
from typing_extensions import Literal

from emattn.ops import avgpool_height, avgpool_width, channel_norm, concat, conv2d, gap2d, linear, \
    matmul_batched, mul, add, permute, relu, reshape, scale, sigmoid, softmax_axis, split
from emattn.tensor import Shape, Tensor, uniform, zeros, ones
from emattn.utils_errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_GROUPS = 32
DEFAULT_CA_REDUCTION = 32
DEFAULT_SE_REDUCTION = 16

AttentionKind = Literal["ema", "ca", "se"]
ATTENTION_KINDS = ("ema", "ca", "se")


def check_divisible(channels, hyper, what):
    if not isinstance(hyper, (int, np.integer)) or hyper < 1:
        raise ConfigError("%s must be an integer >= 1, found %r" % (what, hyper))
    if not isinstance(channels, (int, np.integer)) or channels < 1:
        raise ConfigError("channel count must be an integer >= 1, found %r" % (channels,))
    if channels % hyper != 0:
        raise ConfigError("%s channels are not divisible by %s=%s" % (channels, what, hyper))


class AttentionParams(object):
    """
    Base class of the parameter records. Subclasses declare their buffers with `buffer_shapes`; the constructor
    checks that the provided buffers match exactly.
    """
    __slots__ = 'channels', 'hyper', 'buffers'

    kind = None  # type: str

    def __init__(self,
                 channels,  # type: int
                 hyper,     # type: int
                 buffers,   # type: Mapping[str, Tensor]
                 ):
        self.channels = int(channels)
        self.hyper = int(hyper)
        expected = self.buffer_shapes()
        if set(buffers) != set(expected):
            raise ConfigError("%s parameters expect buffers %r, found %r"
                              % (self.kind, list(expected), sorted(buffers)))
        self.buffers = OrderedDict()  # type: Dict[str, Tensor]
        for name, shape in expected.items():
            t = buffers[name]
            if t.shape != shape:
                raise ShapeError("%s buffer '%s' must have shape %r, found %r" % (self.kind, name, shape, t.shape))
            if not np.all(np.isfinite(t.data)):
                raise NumericError("%s buffer '%s' holds non-finite values" % (self.kind, name))
            self.buffers[name] = t

    def buffer_shapes(self):
        # type: (...) -> Dict[str, Shape]
        raise NotImplementedError()

    def replace(self, **new_buffers):
        """Returns a new record of the same kind, with some buffers replaced."""
        buffers = OrderedDict(self.buffers)
        buffers.update(new_buffers)
        return self._rebuild(buffers)

    def _rebuild(self, buffers):
        return type(self)(self.channels, self.hyper, buffers)

    def param_count(self):
        # type: (...) -> int
        """Total number of elements of the buffers."""
        return sum(t.size for t in self.buffers.values())

    def __repr__(self):
        return "%s(channels=%s, hyper=%s, params=%s)" % (type(self).__name__, self.channels, self.hyper,
                                                         self.param_count())


def _init_weight(shape, rng):
    """Uniform on [-a, a] with a = sqrt(1 / fan_in), fan_in being everything but the output extent."""
    fan_in = int(np.prod(shape[1:]))
    a = sqrt(1. / fan_in)
    return uniform(shape, -a, a, rng)


# ------------- EMA


class EmaParams(AttentionParams):
    """
    Learnable weights of an EMA module over C channels split in G groups of c = C / G channels:
    a shared 1x1 convolution (c, c, 1, 1) with bias, a 3x3 convolution (c, c, 3, 3) with bias, and optionally the
    scale and shift (c each) of the per-group normalization.
    """
    __slots__ = ('group_norm', )

    def __init__(self, channels, groups, buffers, group_norm=None):
        check_divisible(channels, groups, "groups G")
        if groups > channels:
            raise ConfigError("groups G=%s can not exceed the channel count %s" % (groups, channels))
        self.group_norm = ("gn.weight" in buffers) if group_norm is None else bool(group_norm)
        super(EmaParams, self).__init__(channels, groups, buffers)

    @property
    def kind(self):
        return "ema-gn" if self.group_norm else "ema"

    @property
    def groups(self):
        # type: (...) -> int
        return self.hyper

    @property
    def c(self):
        # type: (...) -> int
        """Channels per group."""
        return self.channels // self.hyper

    def buffer_shapes(self):
        c = self.c
        shapes = OrderedDict([("conv1x1.weight", (c, c, 1, 1)),
                              ("conv1x1.bias", (c,)),
                              ("conv3x3.weight", (c, c, 3, 3)),
                              ("conv3x3.bias", (c,))])
        if self.group_norm:
            shapes["gn.weight"] = (c,)
            shapes["gn.bias"] = (c,)
        return shapes

    def _rebuild(self, buffers):
        return EmaParams(self.channels, self.hyper, buffers, group_norm=self.group_norm)


def ema_init(C,                 # type: int
             G=DEFAULT_GROUPS,  # type: int
             seed=0,            # type: int
             group_norm=False,  # type: bool
             ):
    # type: (...) -> EmaParams
    """
    Creates EMA parameters: kernels uniform on [-a, a] with a = sqrt(1 / fan_in), zero biases, normalization
    scale 1 and shift 0. The result is fully determined by `seed`.

    :param C: number of channels of the attended feature map
    :param G: number of groups, must divide C
    :param seed: seed of the random generator
    :param group_norm: whether to include the per-group normalization of the 1x1 branch
    :return:
    """
    check_divisible(C, G, "groups G")
    rng = np.random.default_rng(seed)
    c = C // G
    buffers = OrderedDict([("conv1x1.weight", _init_weight((c, c, 1, 1), rng)),
                           ("conv1x1.bias", zeros((c,))),
                           ("conv3x3.weight", _init_weight((c, c, 3, 3), rng)),
                           ("conv3x3.bias", zeros((c,)))])
    if group_norm:
        buffers["gn.weight"] = ones((c,))
        buffers["gn.bias"] = zeros((c,))
    logger.debug("initialized EMA parameters C=%s G=%s (c=%s) with seed %s", C, G, c, seed)
    return EmaParams(C, G, buffers, group_norm=group_norm)


class EmaVariant(object):
    """
    Which EMA pipeline to run: `full` fuses both branches with cross-spatial learning, `no_cross_spatial`
    averages them instead. `group_norm` requests the normalized 1x1 branch (the parameters must carry it).
    """
    __slots__ = 'mode', 'groups', 'group_norm'

    MODES = ("full", "no_cross_spatial")

    def __init__(self,
                 mode="full",            # type: Literal["full", "no_cross_spatial"]
                 groups=DEFAULT_GROUPS,  # type: int
                 group_norm=False,       # type: bool
                 ):
        if mode not in self.MODES:
            raise ConfigError("unknown EMA variant mode %r, expected one of %r" % (mode, self.MODES))
        if not isinstance(groups, (int, np.integer)) or groups < 1:
            raise ConfigError("groups must be an integer >= 1, found %r" % (groups,))
        self.mode = mode
        self.groups = int(groups)
        self.group_norm = bool(group_norm)

    @property
    def cross_spatial(self):
        # type: (...) -> bool
        return self.mode == "full"

    @classmethod
    def ablation(cls, name):
        # type: (str) -> EmaVariant
        """
        The ablation variants by name: `EMA_no` (no cross-spatial learning, G=32), `EMA_16` and `EMA_32`.
        """
        try:
            mode, groups = _ABLATIONS[name]
        except KeyError:
            raise ConfigError("unknown EMA ablation %r, expected one of %r" % (name, list(_ABLATIONS)))
        return cls(mode, groups)

    def __eq__(self, other):
        return isinstance(other, EmaVariant) and (self.mode, self.groups, self.group_norm) \
            == (other.mode, other.groups, other.group_norm)

    def __hash__(self):
        return hash((self.mode, self.groups, self.group_norm))

    def __repr__(self):
        return "EmaVariant(mode=%r, groups=%s, group_norm=%s)" % (self.mode, self.groups, self.group_norm)


_ABLATIONS = OrderedDict([("EMA_no", ("no_cross_spatial", 32)),
                          ("EMA_16", ("full", 16)),
                          ("EMA_32", ("full", 32))])


def group_fold(x, G):
    # type: (Tensor, int) -> Tensor
    """
    Folds the G channel groups of x (B, C, H, W) into the batch axis: (B*G, C/G, H, W). Group g of sample b
    becomes folded sample b*G + g.
    """
    if x.ndim != 4:
        raise ShapeError("group_fold expects a (B, C, H, W) tensor, found shape %r" % (x.shape,))
    B, C, H, W = x.shape
    if G < 1 or C % G != 0:
        raise ShapeError("%s channels can not be split in %s groups" % (C, G))
    return reshape(x, (B * G, C // G, H, W))


def group_unfold(y, G):
    # type: (Tensor, int) -> Tensor
    """Inverse of `group_fold`: (B*G, c, H, W) -> (B, G*c, H, W)."""
    if y.ndim != 4:
        raise ShapeError("group_unfold expects a (B*G, c, H, W) tensor, found shape %r" % (y.shape,))
    BG, c, H, W = y.shape
    if G < 1 or BG % G != 0:
        raise ShapeError("folded batch extent %s is not a multiple of %s groups" % (BG, G))
    return reshape(y, (BG // G, G * c, H, W))


def _directional_descriptors(x):
    """(n, c, h, w) -> (n, c, h + w, 1): width-pooled rows stacked over height-pooled columns."""
    ph = avgpool_width(x)
    pw = permute(avgpool_height(x), (0, 1, 3, 2))
    return concat([ph, pw], 2)


def _directional_gates(t, H, W):
    """Splits (n, c, h + w, 1) back into sigmoid gates of shapes (n, c, h, 1) and (n, c, 1, w)."""
    th, tw = split(t, 2, [H, W])
    return sigmoid(th), sigmoid(permute(tw, (0, 1, 3, 2)))


def branch_1x1(p, xg):
    # type: (EmaParams, Tensor) -> Tensor
    """
    The 1x1 branch: both directional descriptors of each group go through the shared 1x1 convolution, and the two
    resulting sigmoid gates re-weight the group input.
    """
    if xg.ndim != 4 or xg.shape[1] != p.c:
        raise ShapeError("the 1x1 branch expects (BG, %s, H, W) inputs, found shape %r" % (p.c, xg.shape))
    H, W = xg.shape[2], xg.shape[3]
    t = conv2d(_directional_descriptors(xg), p.buffers["conv1x1.weight"], p.buffers["conv1x1.bias"])
    gate_h, gate_w = _directional_gates(t, H, W)
    return mul(mul(xg, gate_h), gate_w)


def branch_3x3(p, xg):
    # type: (EmaParams, Tensor) -> Tensor
    """The 3x3 branch: one 3x3 convolution, stride 1 and padding 1, so spatial extents are preserved."""
    if xg.ndim != 4 or xg.shape[1] != p.c:
        raise ShapeError("the 3x3 branch expects (BG, %s, H, W) inputs, found shape %r" % (p.c, xg.shape))
    return conv2d(xg, p.buffers["conv3x3.weight"], p.buffers["conv3x3.bias"], stride=1, padding=1)


def _spatial_map(source, target):
    """(softmax over channels of the pooled `source`) x (flattened `target`): (BG, 1, H*W)."""
    BG, c, H, W = source.shape
    a = softmax_axis(reshape(gap2d(source), (BG, 1, c)), 2)
    return matmul_batched(a, reshape(target, (BG, c, H * W)))


def cross_spatial(xg, x1, x2):
    # type: (Tensor, Tensor, Tensor) -> Tensor
    """
    Cross-spatial learning. The channel descriptor of each branch attends over the pixels of the other one; the
    two spatial maps are summed and their sigmoid gates the group input `xg`.
    """
    if not xg.shape == x1.shape == x2.shape or xg.ndim != 4:
        raise ShapeError("cross-spatial fusion needs three (BG, c, H, W) operands of the same shape, found "
                         "%r, %r and %r" % (xg.shape, x1.shape, x2.shape))
    BG, c, H, W = xg.shape
    y1 = _spatial_map(x1, x2)
    y2 = _spatial_map(x2, x1)
    weights = reshape(sigmoid(add(y1, y2)), (BG, 1, H, W))
    return mul(xg, weights)


def ema_forward(p,        # type: EmaParams
                variant,  # type: Optional[EmaVariant]
                x,        # type: Tensor
                ):
    # type: (...) -> Tensor
    """
    Runs the EMA module on x (B, C, H, W). The output has the shape of x.

    :param p: the module parameters
    :param variant: the pipeline variant. None means the full pipeline with the parameters' group count.
    :param x: the input feature map
    :return:
    """
    if variant is None:
        variant = EmaVariant("full", p.groups, p.group_norm)
    if variant.groups != p.groups:
        raise ConfigError("variant asks for G=%s but the parameters were built for G=%s" % (variant.groups, p.groups))
    if variant.group_norm and not p.group_norm:
        raise ConfigError("variant asks for the normalized 1x1 branch but the parameters do not carry it")
    if p.group_norm and not variant.group_norm:
        raise ConfigError("the parameters carry a normalized 1x1 branch but the variant does not ask for it")
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError("EMA over %s channels can not be applied to a tensor of shape %r" % (p.channels, x.shape))

    xg = group_fold(x, p.groups)
    x1 = branch_1x1(p, xg)
    if variant.group_norm:
        x1 = channel_norm(x1, p.buffers["gn.weight"], p.buffers["gn.bias"])
    x2 = branch_3x3(p, xg)
    if variant.cross_spatial:
        yg = cross_spatial(xg, x1, x2)
    else:
        yg = scale(add(x1, x2), 0.5)
    return group_unfold(yg, p.groups)


# ------------- CA


class CaParams(AttentionParams):
    """
    Learnable weights of a coordinate attention module over C channels with reduction ratio r: a shared reducing
    1x1 convolution (C/r, C) and one expanding 1x1 convolution (C, C/r) per direction, all with biases.
    """
    __slots__ = ()

    kind = "ca"

    def __init__(self, channels, reduction, buffers):
        check_divisible(channels, reduction, "reduction ratio r")
        super(CaParams, self).__init__(channels, reduction, buffers)

    @property
    def reduction(self):
        return self.hyper

    def buffer_shapes(self):
        C, mip = self.channels, self.channels // self.hyper
        return OrderedDict([("reduce.weight", (mip, C, 1, 1)), ("reduce.bias", (mip,)),
                            ("route_h.weight", (C, mip, 1, 1)), ("route_h.bias", (C,)),
                            ("route_w.weight", (C, mip, 1, 1)), ("route_w.bias", (C,))])


def ca_init(C, r=DEFAULT_CA_REDUCTION, seed=0):
    # type: (int, int, int) -> CaParams
    """Creates CA parameters, initialized like `ema_init`."""
    check_divisible(C, r, "reduction ratio r")
    rng = np.random.default_rng(seed)
    mip = C // r
    return CaParams(C, r, OrderedDict([("reduce.weight", _init_weight((mip, C, 1, 1), rng)),
                                       ("reduce.bias", zeros((mip,))),
                                       ("route_h.weight", _init_weight((C, mip, 1, 1), rng)),
                                       ("route_h.bias", zeros((C,))),
                                       ("route_w.weight", _init_weight((C, mip, 1, 1), rng)),
                                       ("route_w.bias", zeros((C,)))]))


def ca_forward(p, x):
    # type: (CaParams, Tensor) -> Tensor
    """Coordinate attention on x (B, C, H, W)."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError("CA over %s channels can not be applied to a tensor of shape %r" % (p.channels, x.shape))
    H, W = x.shape[2], x.shape[3]
    f = relu(conv2d(_directional_descriptors(x), p.buffers["reduce.weight"], p.buffers["reduce.bias"]))
    fh, fw = split(f, 2, [H, W])
    gate_h = sigmoid(conv2d(fh, p.buffers["route_h.weight"], p.buffers["route_h.bias"]))
    gate_w = sigmoid(conv2d(permute(fw, (0, 1, 3, 2)), p.buffers["route_w.weight"], p.buffers["route_w.bias"]))
    return mul(mul(x, gate_h), gate_w)


# ------------- SE


class SeParams(AttentionParams):
    """Squeeze (C/r, C) and excitation (C, C/r) fully-connected weights of an SE module, with biases."""
    __slots__ = ()

    kind = "se"

    def __init__(self, channels, reduction, buffers):
        check_divisible(channels, reduction, "reduction ratio r")
        super(SeParams, self).__init__(channels, reduction, buffers)

    @property
    def reduction(self):
        return self.hyper

    def buffer_shapes(self):
        C, mip = self.channels, self.channels // self.hyper
        return OrderedDict([("squeeze.weight", (mip, C)), ("squeeze.bias", (mip,)),
                            ("excite.weight", (C, mip)), ("excite.bias", (C,))])


def se_init(C, r=DEFAULT_SE_REDUCTION, seed=0):
    # type: (int, int, int) -> SeParams
    check_divisible(C, r, "reduction ratio r")
    rng = np.random.default_rng(seed)
    mip = C // r
    return SeParams(C, r, OrderedDict([("squeeze.weight", _init_weight((mip, C), rng)),
                                       ("squeeze.bias", zeros((mip,))),
                                       ("excite.weight", _init_weight((C, mip), rng)),
                                       ("excite.bias", zeros((C,)))]))


def se_forward(p, x):
    # type: (SeParams, Tensor) -> Tensor
    """Squeeze-and-excitation on x (B, C, H, W): one channel gate per sample, broadcast over H and W."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError("SE over %s channels can not be applied to a tensor of shape %r" % (p.channels, x.shape))
    B, C = x.shape[0], x.shape[1]
    s = reshape(gap2d(x), (B, C))
    s = relu(linear(s, p.buffers["squeeze.weight"], p.buffers["squeeze.bias"]))
    s = sigmoid(linear(s, p.buffers["excite.weight"], p.buffers["excite.bias"]))
    return mul(x, reshape(s, (B, C, 1, 1)))


# ------------- generic access


def attention_init(kind,              # type: AttentionKind
                   C,                 # type: int
                   hyper=None,        # type: Optional[int]
                   seed=0,            # type: int
                   group_norm=False,  # type: bool
                   ):
    # type: (...) -> AttentionParams
    """Initializes the parameters of any module kind, `hyper` being G for EMA and r for CA/SE."""
    kind = _check_kind(kind)
    hyper = default_hyper(kind) if hyper is None else hyper
    if kind == "ema":
        return ema_init(C, hyper, seed, group_norm=group_norm)
    elif kind == "ca":
        return ca_init(C, hyper, seed)
    else:
        return se_init(C, hyper, seed)


def attention_forward(p,             # type: AttentionParams
                      x,             # type: Tensor
                      variant=None,  # type: Optional[EmaVariant]
                      ):
    # type: (...) -> Tensor
    if isinstance(p, EmaParams):
        return ema_forward(p, variant, x)
    elif isinstance(p, CaParams):
        return ca_forward(p, x)
    elif isinstance(p, SeParams):
        return se_forward(p, x)
    raise TypeError("unsupported attention parameters: %r" % (p,))


def default_hyper(kind):
    # type: (str) -> int
    return {"ema": DEFAULT_GROUPS, "ca": DEFAULT_CA_REDUCTION, "se": DEFAULT_SE_REDUCTION}[_check_kind(kind)]


def _check_kind(kind):
    kind = str(kind).lower()
    if kind not in ATTENTION_KINDS:
        raise ConfigError("unknown attention kind %r, expected one of %r" % (kind, ATTENTION_KINDS))
    return kind


def param_count_module(kind,              # type: AttentionKind
                       C,                 # type: int
                       hyper,             # type: int
                       group_norm=False,  # type: bool
                       ):
    # type: (...) -> int
    """
    Number of learnable parameters of one attention module over C channels.

     - EMA (hyper = G, c = C / G): 10 c^2 + 2 c, plus 2 c with the per-group normalization
     - CA (hyper = r): C (C/r) + C/r + 2 ((C/r) C + C)
     - SE (hyper = r): C (C/r) + C/r + (C/r) C + C
    """
    kind = _check_kind(kind)
    if kind == "ema":
        check_divisible(C, hyper, "groups G")
        c = C // hyper
        return 10 * c * c + 2 * c + (2 * c if group_norm else 0)
    check_divisible(C, hyper, "reduction ratio r")
    mip = C // hyper
    if kind == "ca":
        return C * mip + mip + 2 * (mip * C + C)
    return C * mip + mip + mip * C + C


def module_macs(kind,   # type: AttentionKind
                C,      # type: int
                hyper,  # type: int
                H,      # type: int
                W,      # type: int
                ):
    # type: (...) -> int
    """
    Multiply-accumulates of one attention module applied to a single (C, H, W) feature map. Pooling,
    activations, softmax and the final gating multiplications count zero.

     - EMA: per group, the 1x1 convolution over the H + W descriptors (c^2 (H + W)), the 3x3 convolution
       (9 c^2 H W) and the two fusion products (2 c H W)
     - CA: the reducing and the two expanding 1x1 convolutions, 2 C (C/r) (H + W)
     - SE: the two fully-connected layers, 2 C (C/r)
    """
    kind = _check_kind(kind)
    if kind == "ema":
        check_divisible(C, hyper, "groups G")
        c = C // hyper
        return hyper * (c * c * (H + W) + 9 * c * c * H * W + 2 * c * H * W)
    check_divisible(C, hyper, "reduction ratio r")
    mip = C // hyper
    if kind == "ca":
        return 2 * C * mip * (H + W)
    return 2 * C * mip
