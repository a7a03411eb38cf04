"""
Symbolic backbones and their complexity.

A `ModelGraph` is an ordered list of `LayerSpec`s. Layers are named (`layer1.0.conv1`) and refer to the layers they
consume by name, so that residual connections are explicit and attention layers can be inserted without renumbering.
Nothing here computes activations: graphs are only counted.

Conventions: convolution extents are floored like in the common frameworks, one multiply-add counts as one MAC, and
batch normalizations, activations, poolings and additions count zero MACs.
"""
import logging
from collections import OrderedDict
from numbers import Integral
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from typing_extensions import Literal

from emattn.attention import ATTENTION_KINDS, default_hyper, module_macs, param_count_module
from emattn.utils_errors import ConfigError, GraphError

logger = logging.getLogger(__name__)

LayerKind = Literal["conv", "batchnorm", "fc", "attention", "add", "pool", "activation"]
LAYER_KINDS = ("conv", "batchnorm", "fc", "attention", "add", "pool", "activation")

GRAPH_INPUT = "input"


class LayerSpec(object):
    """
    One layer of a symbolic graph.

    `inputs` names the producing layers (`GRAPH_INPUT` for the graph input); only `add` layers have several.
    Convolutions carry kernel, stride, padding, conv-groups and a bias flag; attention layers carry the module kind
    and its hyperparameter (G for EMA, r for CA/SE).
    """
    __slots__ = 'name', 'kind', 'in_channels', 'out_channels', 'inputs', 'stage', 'kernel', 'stride', 'padding', \
                'groups', 'bias', 'attention', 'hyper', 'group_norm', 'cross_spatial'

    def __init__(self,
                 name,                # type: str
                 kind,                # type: LayerKind
                 in_channels,         # type: int
                 out_channels,        # type: int
                 inputs,              # type: Sequence[str]
                 stage="",            # type: str
                 kernel=1,            # type: int
                 stride=1,            # type: int
                 padding=0,           # type: int
                 groups=1,            # type: int
                 bias=False,          # type: bool
                 attention=None,      # type: Optional[str]
                 hyper=None,          # type: Optional[int]
                 group_norm=False,    # type: bool
                 cross_spatial=True,  # type: bool
                 ):
        if kind not in LAYER_KINDS:
            raise GraphError("unknown layer kind %r" % (kind,))
        self.name = name
        self.kind = kind
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.inputs = tuple(inputs)
        self.stage = stage
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.bias = bias
        self.attention = attention
        self.hyper = hyper
        self.group_norm = group_norm
        self.cross_spatial = cross_spatial

    def param_count(self):
        # type: (...) -> int
        if self.kind == "conv":
            return self.out_channels * (self.in_channels // self.groups) * self.kernel ** 2 \
                + (self.out_channels if self.bias else 0)
        elif self.kind == "batchnorm":
            return 2 * self.out_channels
        elif self.kind == "fc":
            return self.in_channels * self.out_channels + (self.out_channels if self.bias else 0)
        elif self.kind == "attention":
            return param_count_module(self.attention, self.out_channels, self.hyper, group_norm=self.group_norm)
        return 0

    def output_hw(self, hw):
        # type: (Tuple[int, int]) -> Tuple[int, int]
        """Spatial extents produced by this layer from an input of extents `hw`."""
        if self.kind == "conv":
            out = tuple((d + 2 * self.padding - self.kernel) // self.stride + 1 for d in hw)
        elif self.kind in ("pool", "fc"):
            out = (1, 1)
        else:
            out = tuple(hw)
        if any(d < 1 for d in out):
            raise GraphError("layer '%s' produces non-positive spatial extents %r from %r" % (self.name, out, hw))
        return out

    def macs(self, hw_in, hw_out):
        # type: (Tuple[int, int], Tuple[int, int]) -> int
        if self.kind == "conv":
            return self.out_channels * (self.in_channels // self.groups) * self.kernel ** 2 * hw_out[0] * hw_out[1]
        elif self.kind == "fc":
            return self.in_channels * self.out_channels
        elif self.kind == "attention":
            macs = module_macs(self.attention, self.out_channels, self.hyper, hw_in[0], hw_in[1])
            if self.attention == "ema" and not self.cross_spatial:
                # no fusion products
                macs -= 2 * self.out_channels * hw_in[0] * hw_in[1]
            return macs
        return 0

    def describe(self):
        # type: (...) -> str
        if self.kind == "conv":
            extra = " k=%s s=%s p=%s" % (self.kernel, self.stride, self.padding) \
                    + (" g=%s" % self.groups if self.groups != 1 else "")
        elif self.kind == "attention":
            extra = " %s(%s)" % (self.attention, self.hyper)
        else:
            extra = ""
        return "%s %s->%s%s" % (self.kind, self.in_channels, self.out_channels, extra)

    def __repr__(self):
        return "LayerSpec(%r, %s)" % (self.name, self.describe())


class InsertionSite(object):
    """A place where an attention layer may be inserted: right after the layer named `after`."""
    __slots__ = 'after', 'site', 'channels', 'stage', 'block'

    def __init__(self, after, site, channels, stage, block):
        self.after = after        # type: str
        self.site = site          # type: str
        self.channels = channels  # type: int
        self.stage = stage        # type: str
        self.block = block        # type: str

    def __repr__(self):
        return "InsertionSite(%r, %s, C=%s)" % (self.after, self.site, self.channels)


class ModelGraph(object):
    """
    An immutable symbolic network: named layers in topological order, the sites where attention can be inserted,
    and the attention layers already attached.
    """
    __slots__ = 'name', 'in_channels', 'layers', 'sites', 'default_site', 'skipped_sites'

    def __init__(self,
                 name,                # type: str
                 in_channels,         # type: int
                 layers,              # type: Sequence[LayerSpec]
                 sites=(),            # type: Sequence[InsertionSite]
                 default_site="output",  # type: str
                 skipped_sites=(),    # type: Sequence[InsertionSite]
                 ):
        self.name = name
        self.in_channels = in_channels
        self.layers = tuple(layers)
        self.sites = tuple(sites)
        self.default_site = default_site
        self.skipped_sites = tuple(skipped_sites)

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def layer(self, name):
        # type: (str) -> LayerSpec
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise GraphError("graph '%s' has no layer named '%s'" % (self.name, name))

    @property
    def attention_layers(self):
        # type: (...) -> List[LayerSpec]
        return [layer for layer in self.layers if layer.kind == "attention"]

    def __repr__(self):
        return "ModelGraph(%r, %s layers, %s attention)" % (self.name, len(self.layers), len(self.attention_layers))


def validate(g):
    # type: (ModelGraph) -> ModelGraph
    """
    Checks that `g` is channel-consistent: names are unique, inputs refer to earlier layers, each layer's input
    channels equal its producer's output channels, and shape-preserving layers keep their channel count.

    :return: g itself
    """
    channels = {GRAPH_INPUT: g.in_channels}  # type: Dict[str, int]
    for layer in g.layers:
        if layer.name in channels:
            raise GraphError("duplicate layer name '%s' in graph '%s'" % (layer.name, g.name))
        if len(layer.inputs) == 0 or (len(layer.inputs) > 1 and layer.kind != "add"):
            raise GraphError("layer '%s' (%s) has %s inputs" % (layer.name, layer.kind, len(layer.inputs)))
        for src in layer.inputs:
            if src not in channels:
                raise GraphError("layer '%s' consumes '%s', which is not produced before it" % (layer.name, src))
            if channels[src] != layer.in_channels:
                raise GraphError("layer '%s' expects %s channels but '%s' produces %s"
                                 % (layer.name, layer.in_channels, src, channels[src]))
        if layer.kind in ("batchnorm", "attention", "add", "pool", "activation") \
                and layer.in_channels != layer.out_channels:
            raise GraphError("%s layer '%s' can not change the channel count (%s -> %s)"
                             % (layer.kind, layer.name, layer.in_channels, layer.out_channels))
        if layer.kind == "conv" and (layer.in_channels % layer.groups or layer.out_channels % layer.groups):
            raise GraphError("conv layer '%s' channels %s->%s are not divisible by its %s groups"
                             % (layer.name, layer.in_channels, layer.out_channels, layer.groups))
        channels[layer.name] = layer.out_channels
    return g


# ------------- builders


class _GraphBuilder(object):
    """Appends layers, each consuming the previous one unless told otherwise."""

    def __init__(self, name, in_channels):
        self.name = name
        self.layers = []  # type: List[LayerSpec]
        self.sites = []   # type: List[InsertionSite]
        self.last = GRAPH_INPUT
        self.channels = in_channels
        self.in_channels = in_channels
        self.stage = "stem"

    def add(self, name, kind, out_channels=None, inputs=None, **kwargs):
        if inputs is None:
            inputs = (self.last,)
        out_channels = self.channels if out_channels is None else out_channels
        self.layers.append(LayerSpec(name, kind, self.channels, out_channels, inputs, stage=self.stage, **kwargs))
        self.last = name
        self.channels = out_channels
        return name

    def conv_bn(self, prefix, out_channels, kernel, stride=1, padding=0, groups=1, act=None, conv="conv", bn="bn"):
        self.add(prefix + conv, "conv", out_channels, kernel=kernel, stride=stride, padding=padding, groups=groups)
        self.add(prefix + bn, "batchnorm")
        if act is not None:
            self.add(prefix + act, "activation")
        return self.last

    def site(self, site, block):
        self.sites.append(InsertionSite(self.last, site, self.channels, self.stage, block))

    def build(self, default_site="output"):
        return validate(ModelGraph(self.name, self.in_channels, self.layers, self.sites, default_site))


def _bottleneck(b, prefix, planes, stride):
    """ResNet bottleneck, stride on the 3x3 convolution, projection shortcut when the shape changes."""
    block_in, in_channels = b.last, b.channels
    out_channels = planes * 4
    b.conv_bn(prefix, planes, 1, act="relu1", conv="conv1", bn="bn1")
    b.conv_bn(prefix, planes, 3, stride=stride, padding=1, act="relu2", conv="conv2", bn="bn2")
    b.conv_bn(prefix, out_channels, 1, conv="conv3", bn="bn3")
    b.site("output", prefix.rstrip("."))
    main = b.last

    shortcut = block_in
    if stride != 1 or in_channels != out_channels:
        b.last, b.channels = block_in, in_channels
        shortcut = b.conv_bn(prefix + "downsample.", out_channels, 1, stride=stride, conv="0", bn="1")
    b.channels = out_channels
    b.add(prefix + "add", "add", inputs=(main, shortcut))
    b.add(prefix + "relu", "activation")


def build_resnet_cifar(depths,            # type: Sequence[int]
                       num_classes=100,   # type: int
                       name="resnet-cifar",
                       ):
    # type: (...) -> ModelGraph
    """
    Bottleneck ResNet for 32x32 inputs: 3x3 stride-1 stem without max-pooling, four stages of widths
    256/512/1024/2048 (stride 2 at the start of stages 2 to 4), global average pooling and a classifier.
    """
    if num_classes < 1:
        raise ConfigError("num_classes must be >= 1, found %r" % (num_classes,))
    b = _GraphBuilder(name, 3)
    b.conv_bn("", 64, 3, stride=1, padding=1, act="relu", conv="conv1", bn="bn1")
    for i, (depth, planes) in enumerate(zip(depths, (64, 128, 256, 512))):
        b.stage = "layer%s" % (i + 1)
        for j in range(depth):
            stride = 2 if (i > 0 and j == 0) else 1
            _bottleneck(b, "layer%s.%s." % (i + 1, j), planes, stride)
    b.stage = "head"
    b.add("avgpool", "pool")
    b.add("fc", "fc", num_classes, bias=True)
    return b.build()


def build_resnet50_cifar(num_classes=100):
    # type: (int) -> ModelGraph
    return build_resnet_cifar((3, 4, 6, 3), num_classes, name="resnet50-cifar")


def build_resnet101_cifar(num_classes=100):
    # type: (int) -> ModelGraph
    return build_resnet_cifar((3, 4, 23, 3), num_classes, name="resnet101-cifar")


MOBILENETV2_SETTINGS = (
    # expansion t, output channels c, repeats n, first stride s
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def _inverted_residual(b, prefix, out_channels, stride, expand_ratio):
    block_in, in_channels = b.last, b.channels
    hidden = in_channels * expand_ratio
    if expand_ratio != 1:
        b.conv_bn(prefix + "expand.", hidden, 1, act="relu6")
    b.conv_bn(prefix + "dw.", hidden, 3, stride=stride, padding=1, groups=hidden, act="relu6")
    b.site("expanded", prefix.rstrip("."))
    b.conv_bn(prefix + "project.", out_channels, 1)
    b.site("output", prefix.rstrip("."))
    if stride == 1 and in_channels == out_channels:
        b.add(prefix + "add", "add", inputs=(b.last, block_in))


def build_mobilenetv2(num_classes=1000):
    # type: (int) -> ModelGraph
    """
    MobileNetV2 (width 1.0) for 224x224 inputs: the standard inverted-residual configuration, a 1x1 convolution to
    1280 channels, global average pooling and a classifier.
    """
    if num_classes < 1:
        raise ConfigError("num_classes must be >= 1, found %r" % (num_classes,))
    b = _GraphBuilder("mobilenetv2", 3)
    b.conv_bn("features.0.", 32, 3, stride=2, padding=1, act="relu6")
    block = 1
    for i, (t, c, n, s) in enumerate(MOBILENETV2_SETTINGS):
        b.stage = "stage%s" % (i + 1)
        for j in range(n):
            _inverted_residual(b, "features.%s." % block, c, s if j == 0 else 1, t)
            block += 1
    b.stage = "head"
    b.conv_bn("features.%s." % block, 1280, 1, act="relu6")
    b.add("avgpool", "pool")
    b.add("classifier", "fc", num_classes, bias=True)
    return b.build()


BACKBONES = OrderedDict([
    ("resnet50-cifar", build_resnet50_cifar),
    ("resnet101-cifar", build_resnet101_cifar),
    ("mobilenetv2", build_mobilenetv2),
])  # type: Dict[str, Callable[[int], ModelGraph]]


def build_backbone(name, num_classes):
    # type: (str, int) -> ModelGraph
    try:
        builder = BACKBONES[name]
    except KeyError:
        raise ConfigError("unknown backbone %r, expected one of %r" % (name, list(BACKBONES)))
    return builder(num_classes)


# ------------- attention insertion


def attach_attention(g,                   # type: ModelGraph
                     kind,                # type: str
                     hyper=None,          # type: Optional[int]
                     site=None,           # type: Optional[str]
                     group_norm=False,    # type: bool
                     cross_spatial=True,  # type: bool
                     ):
    # type: (...) -> ModelGraph
    """
    Inserts one attention layer at every insertion site of `g`. For ResNets the sites are the outputs of the
    bottlenecks' last 1x1 convolution + batchnorm, before the residual addition. For MobileNetV2 the default sites
    are the outputs of the linear projections (`site="output"`); `site="expanded"` uses the outputs of the depthwise
    stages instead.

    Sites whose width is not a multiple of `hyper` (G for EMA, r for CA/SE) are skipped with a
    warning, and listed in `skipped_sites` of the result.

    :raises ConfigError: unknown kind or site, `hyper` < 1, or no site admits the module
    """
    kind = str(kind).lower()
    if kind not in ATTENTION_KINDS:
        raise ConfigError("unknown attention kind %r, expected one of %r" % (kind, ATTENTION_KINDS))
    hyper = default_hyper(kind) if hyper is None else hyper
    if isinstance(hyper, bool) or not isinstance(hyper, Integral) or hyper < 1:
        raise ConfigError("attention hyperparameter must be an integer >= 1, found %r" % (hyper,))
    hyper = int(hyper)
    site = g.default_site if site is None else site
    candidates = [s for s in g.sites if s.site == site]
    if not candidates:
        raise ConfigError("graph '%s' has no '%s' insertion sites" % (g.name, site))

    inserted = OrderedDict()  # type: Dict[str, LayerSpec]
    skipped = []
    for s in candidates:
        if s.channels % hyper != 0:
            logger.warning("skipping %s site after '%s': %s channels are not divisible by %s",
                           kind, s.after, s.channels, hyper)
            skipped.append(s)
            continue
        inserted[s.after] = LayerSpec("%s.%s" % (s.block, kind), "attention", s.channels, s.channels, (s.after,),
                                      stage=s.stage, attention=kind, hyper=hyper, group_norm=group_norm,
                                      cross_spatial=cross_spatial)
    if not inserted:
        raise ConfigError("%s(%s) can not be inserted anywhere in '%s': no site width is divisible by %s"
                          % (kind, hyper, g.name, hyper))

    # insert right after each site, and let every consumer of the site read the attention output instead
    renamed = {after: att.name for after, att in inserted.items()}
    layers = []
    for layer in g.layers:
        new_inputs = tuple(renamed.get(src, src) for src in layer.inputs)
        if new_inputs != layer.inputs:
            layer = _with_inputs(layer, new_inputs)
        layers.append(layer)
        if layer.name in inserted:
            layers.append(inserted[layer.name])

    logger.debug("attached %s %s(%s) layers to '%s', skipped %s sites", len(inserted), kind, hyper, g.name,
                 len(skipped))
    return validate(ModelGraph("%s+%s" % (g.name, kind), g.in_channels, layers, g.sites, g.default_site,
                               tuple(g.skipped_sites) + tuple(skipped)))


def _with_inputs(layer, inputs):
    clone = LayerSpec.__new__(LayerSpec)
    for attr in LayerSpec.__slots__:
        setattr(clone, attr, getattr(layer, attr))
    clone.inputs = tuple(inputs)
    return clone


# ------------- counting


def count_params(g):
    # type: (ModelGraph) -> int
    """Learnable parameters of `g`. Independent of the input resolution."""
    validate(g)
    return sum(layer.param_count() for layer in g.layers)


def _propagate(g, input_hw):
    """Yields (layer, hw_in, hw_out) for every layer."""
    if len(input_hw) != 2 or any(int(d) < 1 for d in input_hw):
        raise GraphError("input extents must be two positive integers, found %r" % (tuple(input_hw),))
    validate(g)
    hw = {GRAPH_INPUT: (int(input_hw[0]), int(input_hw[1]))}
    for layer in g.layers:
        hw_in = hw[layer.inputs[0]]
        for src in layer.inputs[1:]:
            if hw[src] != hw_in:
                raise GraphError("layer '%s' adds tensors of extents %r and %r" % (layer.name, hw_in, hw[src]))
        hw_out = layer.output_hw(hw_in)
        hw[layer.name] = hw_out
        yield layer, hw_in, hw_out


def count_macs(g, input_hw):
    # type: (ModelGraph, Sequence[int]) -> int
    """Multiply-accumulates of one forward pass of `g` on a single input of extents `input_hw` = (H, W)."""
    return sum(layer.macs(hw_in, hw_out) for layer, hw_in, hw_out in _propagate(g, input_hw))


class ComplexityReport(object):
    """Parameter and MAC totals of a graph at an input resolution, with a per-stage breakdown."""
    __slots__ = 'graph', 'input_hw', 'params', 'macs', 'per_stage', 'rows'

    def __init__(self, graph, input_hw, per_stage, rows):
        self.graph = graph          # type: ModelGraph
        self.input_hw = tuple(input_hw)
        self.per_stage = per_stage  # type: Dict[str, Dict[str, int]]
        self.rows = rows            # type: List[Tuple[LayerSpec, Tuple[int, int], int, int]]
        self.params = sum(s["params"] for s in per_stage.values())
        self.macs = sum(s["macs"] for s in per_stage.values())

    def to_dict(self):
        return OrderedDict([
            ("graph", self.graph.name),
            ("input_hw", list(self.input_hw)),
            ("params", self.params),
            ("macs", self.macs),
            ("params_m", round(self.params / 1e6, 4)),
            ("macs_g", round(self.macs / 1e9, 4)),
            ("attention_layers", len(self.graph.attention_layers)),
            ("skipped_sites", [s.block for s in self.graph.skipped_sites]),
            ("per_stage", OrderedDict((k, OrderedDict(v)) for k, v in self.per_stage.items())),
        ])


def complexity_report(g, input_hw):
    # type: (ModelGraph, Sequence[int]) -> ComplexityReport
    per_stage = OrderedDict()  # type: Dict[str, Dict[str, int]]
    rows = []
    for layer, hw_in, hw_out in _propagate(g, input_hw):
        p, m = layer.param_count(), layer.macs(hw_in, hw_out)
        stage = per_stage.setdefault(layer.stage, OrderedDict([("params", 0), ("macs", 0)]))
        stage["params"] += p
        stage["macs"] += m
        rows.append((layer, hw_out, p, m))
    return ComplexityReport(g, input_hw, per_stage, rows)


def dump_graph(g, input_hw):
    # type: (ModelGraph, Sequence[int]) -> str
    """One line per layer: name, kind, channels, kernel, stride, output extents, params and MACs."""
    lines = []
    for layer, hw_out, p, m in complexity_report(g, input_hw).rows:
        lines.append("%-28s %-10s %5s->%-5s k=%-2s s=%-2s out=%sx%s params=%s macs=%s"
                     % (layer.name, layer.kind, layer.in_channels, layer.out_channels,
                        layer.kernel if layer.kind == "conv" else "-", layer.stride if layer.kind == "conv" else "-",
                        hw_out[0], hw_out[1], p, m))
    return "\n".join(lines)


# ------------- comparison tables


def comparison_table(backbone,         # type: str
                     num_classes,      # type: int
                     input_hw,         # type: Sequence[int]
                     ):
    # type: (...) -> List[Dict[str, object]]
    """
    Params and MACs of a backbone alone and with each attention module at its default hyperparameter, plus the
    EMA ablations (no cross-spatial learning, G=16, G=32) for the ResNets.
    """
    base = build_backbone(backbone, num_classes)
    variants = [("baseline", None),
                ("+SE", dict(kind="se")),
                ("+CA", dict(kind="ca")),
                ("+EMA", dict(kind="ema"))]
    if backbone.startswith("resnet"):
        variants += [("+EMA_no", dict(kind="ema", hyper=32, cross_spatial=False)),
                     ("+EMA_16", dict(kind="ema", hyper=16)),
                     ("+EMA_32", dict(kind="ema", hyper=32))]
    base_params, base_macs = count_params(base), count_macs(base, input_hw)
    rows = []
    for label, kwargs in variants:
        g = base if kwargs is None else attach_attention(base, **kwargs)
        params, macs = count_params(g), count_macs(g, input_hw)
        rows.append(OrderedDict([("method", label), ("params", params), ("macs", macs),
                                 ("delta_params", params - base_params), ("delta_macs", macs - base_macs)]))
    return rows
