"""
Wall-clock timing of the EMA forward pass on ResNet stage shapes.
"""
import logging
from collections import OrderedDict
from time import perf_counter
from typing import Callable, List, Sequence, Tuple

import numpy as np

from emattn.attention import DEFAULT_GROUPS, EmaVariant, ema_forward, ema_init, module_macs
from emattn.tensor import as_shape, randn
from emattn.utils_errors import ConfigError

logger = logging.getLogger(__name__)

# (B, C, H, W) at the output of the four stages of a CIFAR ResNet50 on 32x32 inputs
RESNET_STAGE_SHAPES = ((1, 256, 32, 32), (1, 512, 16, 16), (1, 1024, 8, 8), (1, 2048, 4, 4))

MIN_REPS = 30
WARMUP = 5


def parse_shapes(text):
    # type: (str) -> List[Tuple[int, int, int, int]]
    """Parses 'BxCxHxW,BxCxHxW,...'."""
    shapes = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            dims = tuple(int(d) for d in item.lower().split("x"))
        except ValueError:
            raise ConfigError("invalid shape %r, expected BxCxHxW" % item)
        if len(dims) != 4 or any(d < 1 for d in dims):
            raise ConfigError("invalid shape %r, expected four positive extents BxCxHxW" % item)
        shapes.append(dims)
    if not shapes:
        raise ConfigError("no shape given")
    return shapes


def median_time(fn,                 # type: Callable[[], object]
                reps=MIN_REPS,      # type: int
                warmup=WARMUP,      # type: int
                timer=perf_counter,  # type: Callable[[], float]
                ):
    # type: (...) -> Tuple[float, List[float]]
    """Runs `fn` `warmup` times untimed, then `reps` timed times. Returns the median and all timings, in seconds."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        start = timer()
        fn()
        times.append(timer() - start)
    return float(np.median(times)), times


def bench_ema(shapes=RESNET_STAGE_SHAPES,  # type: Sequence[Sequence[int]]
              groups=DEFAULT_GROUPS,       # type: int
              reps=MIN_REPS,               # type: int
              warmup=WARMUP,               # type: int
              seed=0,                      # type: int
              ):
    # type: (...) -> List[OrderedDict]
    """
    Times `ema_forward` once per shape, and returns one row per shape with the median time per call.

    :raises ConfigError: if `reps` < 30, or a shape's channel count is not divisible by `groups`
    """
    if reps < MIN_REPS:
        raise ConfigError("a benchmark needs at least %s repetitions, found %r" % (MIN_REPS, reps))
    if warmup < 0:
        raise ConfigError("warmup must be >= 0, found %r" % (warmup,))
    variant = EmaVariant("full", groups)
    rows = []
    for shape in shapes:
        B, C, H, W = as_shape(shape)
        p = ema_init(C, groups, seed=seed)
        x = randn((B, C, H, W), seed=seed)
        median, _ = median_time(lambda: ema_forward(p, variant, x), reps=reps, warmup=warmup)
        rows.append(OrderedDict([("shape", [B, C, H, W]), ("groups", groups), ("c", C // groups),
                                 ("macs", B * module_macs("ema", C, groups, H, W)),
                                 ("median_s", median), ("reps", reps), ("warmup", warmup)]))
        logger.info("ema_forward %sx%sx%sx%s (G=%s): median %.3f ms over %s calls", B, C, H, W, groups,
                    median * 1e3, reps)
    return rows
