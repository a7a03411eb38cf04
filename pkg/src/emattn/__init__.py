from emattn.utils_errors import EmattnError, ShapeError, AxisError, ConfigError, TapeError, NumericError, \
    GraphError, FormatError
from emattn.tensor import Tensor, zeros, ones, full, randn
from emattn.tape import Tape, primitive, backward, finite_diff_gradient, gradcheck, GradCheckReport
from emattn.attention import EmaParams, CaParams, SeParams, EmaVariant, ema_init, ca_init, se_init, \
    ema_forward, ca_forward, se_forward, param_count_module
from emattn.graph import ModelGraph, LayerSpec, build_resnet50_cifar, build_resnet101_cifar, build_mobilenetv2, \
    attach_attention, count_params, count_macs, complexity_report
from emattn.utils_serialization import save_params, load_params

try:
    # -- Distribution mode: import from _version.py generated by setuptools_scm during release
    from ._version import version as __version__
except ImportError:
    # -- Source mode: use setuptools_scm to get the current version from src using git
    from setuptools_scm import get_version as _gv
    from os import path as _path
    __version__ = _gv(_path.join(_path.dirname(__file__), _path.pardir))

__all__ = [
    '__version__',
    # submodules
    'tensor', 'tape', 'ops', 'attention', 'graph', 'data', 'training', 'bench', 'main',
    'utils_errors', 'utils_reports', 'utils_serialization',
    # symbols
    'EmattnError', 'ShapeError', 'AxisError', 'ConfigError', 'TapeError', 'NumericError', 'GraphError', 'FormatError',
    'Tensor', 'zeros', 'ones', 'full', 'randn',
    'Tape', 'primitive', 'backward', 'finite_diff_gradient', 'gradcheck', 'GradCheckReport',
    'EmaParams', 'CaParams', 'SeParams', 'EmaVariant', 'ema_init', 'ca_init', 'se_init',
    'ema_forward', 'ca_forward', 'se_forward', 'param_count_module',
    'ModelGraph', 'LayerSpec', 'build_resnet50_cifar', 'build_resnet101_cifar', 'build_mobilenetv2',
    'attach_attention', 'count_params', 'count_macs', 'complexity_report',
    'save_params', 'load_params',
]
