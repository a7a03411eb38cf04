"""
A small attention-equipped CNN and its training loop (SGD with momentum and weight decay).
"""
import hashlib
import logging
from collections import OrderedDict
from math import ceil
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from typing_extensions import Literal

from emattn.attention import AttentionParams, EmaVariant, attention_forward, attention_init
from emattn.data import Dataset
from emattn.ops import conv2d, gap2d, linear, relu, reshape, softmax_cross_entropy
from emattn.tape import Tape
from emattn.tensor import Tensor, uniform, zeros
from emattn.utils_errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

ToyAttention = Literal["none", "ema", "ca", "se"]
TOY_ATTENTIONS = ("none", "ema", "ca", "se")

TOY_WIDTH = 16
TOY_CLASSES = 4
# module hyperparameters that fit the 16-channel trunk
TOY_DEFAULT_HYPER = {"ema": 8, "ca": 4, "se": 4}

ATTENTION_PREFIX = "attention."


class TrainConfig(object):
    """Optimizer and schedule settings of `train_toy`."""
    __slots__ = 'lr', 'momentum', 'weight_decay', 'batch_size', 'steps', 'seed'

    def __init__(self,
                 lr=0.05,             # type: float
                 momentum=0.9,        # type: float
                 weight_decay=4e-5,   # type: float
                 batch_size=32,       # type: int
                 steps=500,           # type: int
                 seed=0,              # type: int
                 ):
        if not lr >= 0:
            raise ConfigError("learning rate must be >= 0, found %r" % (lr,))
        if not 0 <= momentum < 1:
            raise ConfigError("momentum must lie in [0, 1), found %r" % (momentum,))
        if not weight_decay >= 0:
            raise ConfigError("weight decay must be >= 0, found %r" % (weight_decay,))
        if not isinstance(batch_size, int) or batch_size < 1:
            raise ConfigError("batch size must be an integer >= 1, found %r" % (batch_size,))
        if not isinstance(steps, int) or steps < 0:
            raise ConfigError("step count must be an integer >= 0, found %r" % (steps,))
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed

    def to_dict(self):
        return OrderedDict((k, getattr(self, k)) for k in self.__slots__)

    def __repr__(self):
        return "TrainConfig(%s)" % ", ".join("%s=%r" % kv for kv in self.to_dict().items())


class ToyNet(object):
    """
    conv 3->w (3x3, pad 1), relu, optional attention(w), conv w->w (3x3, pad 1), relu, global average pooling,
    fully-connected w->classes. `params` holds every learnable tensor by name; attention buffers are prefixed
    with `attention.`.
    """
    __slots__ = 'params', 'attention', 'variant', 'width', 'num_classes', '_template'

    def __init__(self,
                 params,        # type: Mapping[str, Tensor]
                 attention,     # type: ToyAttention
                 template,      # type: Optional[AttentionParams]
                 variant,       # type: Optional[EmaVariant]
                 width,         # type: int
                 num_classes,   # type: int
                 ):
        self.params = OrderedDict(params)  # type: Dict[str, Tensor]
        self.attention = attention
        self._template = template
        self.variant = variant
        self.width = width
        self.num_classes = num_classes

    @property
    def hyper(self):
        # type: (...) -> Optional[int]
        return None if self._template is None else self._template.hyper

    def param_count(self):
        # type: (...) -> int
        return sum(t.size for t in self.params.values())

    def attention_params(self, params=None):
        # type: (Optional[Mapping[str, Tensor]]) -> Optional[AttentionParams]
        """The attention module's parameter record, built from `params` (the model's own by default)."""
        if self._template is None:
            return None
        params = self.params if params is None else params
        n = len(ATTENTION_PREFIX)
        return self._template.replace(**{k[n:]: v for k, v in params.items() if k.startswith(ATTENTION_PREFIX)})

    def forward(self, x, params=None):
        # type: (Tensor, Optional[Mapping[str, Tensor]]) -> Tensor
        """Logits (B, classes) of a batch x (B, 3, H, W)."""
        p = self.params if params is None else params
        h = relu(conv2d(x, p["conv1.weight"], p["conv1.bias"], padding=1))
        if self._template is not None:
            h = attention_forward(self.attention_params(p), h, self.variant)
        h = relu(conv2d(h, p["conv2.weight"], p["conv2.bias"], padding=1))
        h = reshape(gap2d(h), (x.shape[0], self.width))
        return linear(h, p["fc.weight"], p["fc.bias"])

    def loss(self, x, labels, params=None):
        # type: (Tensor, np.ndarray, Optional[Mapping[str, Tensor]]) -> Tensor
        return softmax_cross_entropy(self.forward(x, params), labels)

    def __repr__(self):
        return "ToyNet(attention=%s, hyper=%s, width=%s, params=%s)" % (self.attention, self.hyper, self.width,
                                                                        self.param_count())


def _init(shape, rng):
    a = np.sqrt(1. / int(np.prod(shape[1:])))
    return uniform(shape, -a, a, rng)


def build_toy_net(attention="none",        # type: ToyAttention
                  hyper=None,              # type: Optional[int]
                  seed=0,                  # type: int
                  variant=None,            # type: Optional[EmaVariant]
                  width=TOY_WIDTH,         # type: int
                  num_classes=TOY_CLASSES,  # type: int
                  ):
    # type: (...) -> ToyNet
    """
    Builds the toy classifier with freshly initialized parameters, fully determined by `seed`.

    :param attention: the module inserted after the first convolution, or "none"
    :param hyper: G for EMA, r for CA/SE. Defaults to the variant's group count for EMA, or to a value that fits
        the 16-channel trunk.
    :param variant: the EMA pipeline variant (EMA only)
    :param width: channel count of the trunk
    :raises ConfigError: unknown attention kind, or a hyperparameter that does not divide the trunk width
    """
    attention = str(attention).lower()
    if attention not in TOY_ATTENTIONS:
        raise ConfigError("unknown attention %r, expected one of %r" % (attention, TOY_ATTENTIONS))
    if variant is not None:
        if attention != "ema":
            raise ConfigError("an EMA variant was given for a toy net with attention %r" % attention)
        if hyper is not None and hyper != variant.groups:
            raise ConfigError("hyper=%s contradicts the variant's G=%s" % (hyper, variant.groups))
        hyper = variant.groups
    if attention != "none" and hyper is None:
        hyper = TOY_DEFAULT_HYPER[attention]

    rng = np.random.default_rng(seed)
    params = OrderedDict()
    params["conv1.weight"] = _init((width, 3, 3, 3), rng)
    params["conv1.bias"] = zeros((width,))
    template = None
    if attention != "none":
        if hyper > width:
            raise ConfigError("%s hyperparameter %s exceeds the trunk width %s" % (attention, hyper, width))
        template = attention_init(attention, width, hyper, seed=int(rng.integers(2 ** 31)),
                                  group_norm=variant is not None and variant.group_norm)
        for k, v in template.buffers.items():
            params[ATTENTION_PREFIX + k] = v
    params["conv2.weight"] = _init((width, width, 3, 3), rng)
    params["conv2.bias"] = zeros((width,))
    params["fc.weight"] = _init((num_classes, width), rng)
    params["fc.bias"] = zeros((num_classes,))
    return ToyNet(params, attention, template, variant, width, num_classes)


# ------------- optimizer


def sgd_step(params,    # type: Mapping[str, Tensor]
             grads,     # type: Mapping[str, Tensor]
             velocity,  # type: Optional[Mapping[str, Tensor]]
             cfg,       # type: TrainConfig
             ):
    # type: (...) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]
    """
    One SGD step with momentum, weight decay being added to the gradient:
    v <- momentum * v + (g + weight_decay * theta) ; theta <- theta - lr * v

    :param velocity: the momentum buffers, None for zeros
    :return: the new parameters and the new velocity
    """
    if set(grads) != set(params) or (velocity is not None and set(velocity) != set(params)):
        raise ShapeError("parameters, gradients and velocity must hold the same names")
    new_params, new_velocity = OrderedDict(), OrderedDict()
    for name, theta in params.items():
        g = grads[name]
        v = None if velocity is None else velocity[name]
        if g.shape != theta.shape or (v is not None and v.shape != theta.shape):
            raise ShapeError("parameter '%s' of shape %r got a gradient of shape %r and velocity of shape %r"
                             % (name, theta.shape, g.shape, None if v is None else v.shape))
        step = g.data + cfg.weight_decay * theta.data
        if v is not None:
            step = cfg.momentum * v.data + step
        new_velocity[name] = Tensor._wrap(step)
        new_params[name] = Tensor._wrap(theta.data - cfg.lr * step)
    return new_params, new_velocity


# ------------- training


def topk_accuracy(logits, labels, k=1):
    # type: (np.ndarray, np.ndarray, int) -> float
    """Fraction of samples whose label is among the k largest logits."""
    if len(labels) == 0:
        return 0.
    topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(topk == np.asarray(labels)[:, None], axis=1)))


def evaluate(model, ds, batch_size=256):
    # type: (ToyNet, Dataset, int) -> Tuple[float, np.ndarray]
    """Mean loss and logits of `model` over `ds`, without recording anything."""
    logits = []
    for x, _ in ds.batches(batch_size):
        logits.append(model.forward(x).data)
    logits = np.concatenate(logits, axis=0) if logits else np.zeros((0, model.num_classes))
    loss = softmax_cross_entropy(Tensor._wrap(logits), ds.labels).item() if len(ds) else 0.
    return loss, logits


def param_checksum(params):
    # type: (Mapping[str, Tensor]) -> str
    """sha256 of the parameter names and raw float64 values, in order."""
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode("utf-8"))
        h.update(t.data.tobytes())
    return h.hexdigest()


class TrainReport(object):
    """Per-step losses, per-epoch statistics and the final state of a `train_toy` run."""
    __slots__ = 'losses', 'epochs', 'initial_val_accuracy', 'final_val_accuracy', 'top1', 'top5', \
                'param_count', 'checksum'

    def __init__(self, losses, epochs, initial_val_accuracy, final_val_accuracy, top1, top5, param_count, checksum):
        self.losses = losses                              # type: List[float]
        self.epochs = epochs                              # type: List[Dict[str, float]]
        self.initial_val_accuracy = initial_val_accuracy  # type: float
        self.final_val_accuracy = final_val_accuracy      # type: float
        self.top1 = top1                                  # type: float
        self.top5 = top5                                  # type: Optional[float]
        self.param_count = param_count                    # type: int
        self.checksum = checksum                          # type: str

    @property
    def initial_loss(self):
        # type: (...) -> Optional[float]
        return self.losses[0] if self.losses else None

    @property
    def final_epoch_loss(self):
        # type: (...) -> Optional[float]
        return self.epochs[-1]["mean_loss"] if self.epochs else None

    def to_dict(self):
        d = OrderedDict([
            ("steps", len(self.losses)),
            ("losses", list(self.losses)),
            ("epochs", [OrderedDict(e) for e in self.epochs]),
            ("initial_val_accuracy", self.initial_val_accuracy),
            ("final_val_accuracy", self.final_val_accuracy),
            ("top1", self.top1),
        ])
        if self.top5 is not None:
            d["top5"] = self.top5
        d["param_count"] = self.param_count
        d["param_checksum"] = self.checksum
        return d


def train_toy(model,  # type: ToyNet
              train,  # type: Dataset
              val,    # type: Dataset
              cfg,    # type: TrainConfig
              ):
    # type: (...) -> TrainReport
    """
    Trains `model` in place on `train` with softmax cross-entropy, for `cfg.steps` mini-batch steps. Batches are
    drawn epoch after epoch from a permutation seeded with `cfg.seed`; the validation accuracy is measured at the
    end of every (possibly partial) epoch.

    :raises ConfigError: if a dataset's class count differs from the model's head
    """
    for ds in (train, val):
        if ds.num_classes != model.num_classes:
            raise ConfigError("dataset '%s' has %s classes but the model predicts %s"
                              % (ds.name, ds.num_classes, model.num_classes))
    if len(train) == 0:
        raise ConfigError("the training set is empty")

    rng = np.random.default_rng(cfg.seed)
    params, velocity = OrderedDict(model.params), None
    _, logits = evaluate(model, val)
    initial_acc = topk_accuracy(logits, val.labels)

    losses, epochs = [], []
    steps_per_epoch = int(ceil(len(train) / float(cfg.batch_size)))
    for epoch in range(int(ceil(cfg.steps / float(steps_per_epoch)))):
        epoch_losses, correct, seen = [], 0, 0
        for x, labels in train.batches(cfg.batch_size, rng):
            with Tape() as tape:
                watched = OrderedDict((k, tape.watch(v)) for k, v in params.items())
                logits = model.forward(x, watched)
                loss = softmax_cross_entropy(logits, labels)
            grads = tape.backward(loss)
            params, velocity = sgd_step(params, OrderedDict((k, grads[w]) for k, w in watched.items()),
                                        velocity, cfg)
            epoch_losses.append(loss.item())
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            seen += len(labels)
            logger.debug("step %s: loss %.6f", len(losses) + len(epoch_losses), epoch_losses[-1])
            if len(losses) + len(epoch_losses) == cfg.steps:
                break
        losses.extend(epoch_losses)
        model.params = params
        _, logits = evaluate(model, val)
        stats = OrderedDict([("epoch", epoch), ("steps", len(epoch_losses)),
                             ("mean_loss", float(np.mean(epoch_losses))),
                             ("train_accuracy", correct / float(seen)),
                             ("val_accuracy", topk_accuracy(logits, val.labels))])
        epochs.append(stats)
        logger.info("epoch %s: mean loss %.4f, train accuracy %.3f, val accuracy %.3f",
                    epoch, stats["mean_loss"], stats["train_accuracy"], stats["val_accuracy"])

    model.params = params
    _, logits = evaluate(model, val)
    top1 = topk_accuracy(logits, val.labels)
    top5 = topk_accuracy(logits, val.labels, 5) if model.num_classes >= 5 else None
    return TrainReport(losses, epochs, initial_acc, top1, top1, top5, model.param_count(), param_checksum(params))
