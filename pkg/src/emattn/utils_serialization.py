"""
Flat binary container for attention parameters.

Layout, all little-endian: the magic bytes `EMA1`, then three unsigned 32-bit integers (kind tag, channel count C,
hyperparameter G or r), then every buffer in declaration order as 64-bit floats.
"""
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Union

import numpy as np

from emattn.attention import AttentionParams, CaParams, EmaParams, SeParams, check_divisible
from emattn.tensor import Tensor, element_count
from emattn.utils_errors import ConfigError, FormatError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"EMA1"
_HEADER = np.dtype([("kind", "<u4"), ("channels", "<u4"), ("hyper", "<u4")])
_FLOAT = np.dtype("<f8")

KIND_TAGS = OrderedDict([("ema", 1), ("ca", 2), ("se", 3), ("ema-gn", 4)])
_KINDS_BY_TAG = {v: k for k, v in KIND_TAGS.items()}


def _empty_params(kind, channels, hyper):
    """A record of the right kind whose buffers are placeholders, used to learn the expected buffer shapes."""
    if kind in ("ema", "ema-gn"):
        shell = EmaParams.__new__(EmaParams)
        shell.group_norm = kind == "ema-gn"
    elif kind == "ca":
        shell = CaParams.__new__(CaParams)
    else:
        shell = SeParams.__new__(SeParams)
    shell.channels = channels
    shell.hyper = hyper
    return shell.buffer_shapes()


def _build(kind, channels, hyper, buffers):
    if kind in ("ema", "ema-gn"):
        return EmaParams(channels, hyper, buffers, group_norm=kind == "ema-gn")
    elif kind == "ca":
        return CaParams(channels, hyper, buffers)
    return SeParams(channels, hyper, buffers)


def params_to_bytes(p):
    # type: (AttentionParams) -> bytes
    """Encodes `p` as a container."""
    header = np.array([(KIND_TAGS[p.kind], p.channels, p.hyper)], dtype=_HEADER)
    body = [t.data.astype(_FLOAT).tobytes() for t in p.buffers.values()]
    return MAGIC + header.tobytes() + b"".join(body)


def params_from_bytes(blob):
    # type: (bytes) -> AttentionParams
    """
    Decodes a container. Rejects unknown magic bytes or kind tags, and any body whose element count does not
    match the buffers implied by the header.
    """
    if len(blob) < len(MAGIC) + _HEADER.itemsize or blob[:len(MAGIC)] != MAGIC:
        raise FormatError("not a parameter container: missing %r header" % MAGIC)
    header = np.frombuffer(blob, dtype=_HEADER, count=1, offset=len(MAGIC))[0]
    tag, channels, hyper = int(header["kind"]), int(header["channels"]), int(header["hyper"])
    try:
        kind = _KINDS_BY_TAG[tag]
    except KeyError:
        raise FormatError("unknown module kind tag %s in parameter container" % tag)

    try:
        check_divisible(channels, hyper, "hyperparameter")
        shapes = _empty_params(kind, channels, hyper)
    except (ConfigError, ShapeError) as e:
        raise FormatError("invalid header for kind %s (C=%s, hyper=%s): %s" % (kind, channels, hyper, e))

    offset = len(MAGIC) + _HEADER.itemsize
    body = len(blob) - offset
    expected = sum(element_count(s) for s in shapes.values())
    if body != expected * _FLOAT.itemsize:
        raise FormatError("parameter container holds %s bytes of values, %s %s buffers need %s elements (%s bytes)"
                          % (body, kind, channels, expected, expected * _FLOAT.itemsize))

    values = np.frombuffer(blob, dtype=_FLOAT, offset=offset)
    buffers = OrderedDict()
    start = 0
    for name, shape in shapes.items():
        n = element_count(shape)
        buffers[name] = Tensor(values[start:start + n], shape=shape)
        start += n
    return _build(kind, channels, hyper, buffers)


def save_params(p,     # type: AttentionParams
                path,  # type: Union[str, Path]
                ):
    Path(path).write_bytes(params_to_bytes(p))
    logger.info("saved %s parameters (%s values) to %s", p.kind, p.param_count(), path)


def load_params(path):
    # type: (Union[str, Path]) -> AttentionParams
    return params_from_bytes(Path(path).read_bytes())
