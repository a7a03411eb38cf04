"""
The `emattn` command line: analyze | gradcheck | train | bench | compare.

Each subcommand builds a `RunConfig` from its flags (and optionally a json file given with `--config`), runs, and
writes a report document to `--out` or the standard output. Logs go to the error stream.

Exit codes: 0 success, 2 configuration error (including invalid graphs, malformed files and missing files),
3 numeric failure (non-finite values, failed gradient check).
"""
import argparse
import json
import logging
import sys
from collections import OrderedDict
from typing import Any, Callable, Dict, Mapping, Optional, Sequence

import numpy as np

from emattn.attention import ATTENTION_KINDS, EmaVariant, attention_forward, attention_init, default_hyper
from emattn.bench import MIN_REPS, RESNET_STAGE_SHAPES, bench_ema, parse_shapes
from emattn.data import SYNTH_HW, load_cifar100, synth_quadrant
from emattn.graph import BACKBONES, attach_attention, build_backbone, comparison_table, complexity_report, \
    dump_graph
from emattn.ops import mul, sum_all
from emattn.tape import gradcheck
from emattn.tensor import randn
from emattn.training import TOY_DEFAULT_HYPER, TOY_WIDTH, TrainConfig, build_toy_net, train_toy
from emattn.utils_errors import ConfigError, FormatError, GraphError, NumericError
from emattn.utils_reports import REPORT_FORMATS, make_report, write_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

DEFAULTS = OrderedDict([
    ("backbone", "resnet50-cifar"),
    ("attention", "none"),
    ("groups", 32),
    ("reduction", None),  # 32 for CA, 16 for SE
    ("classes", 100),
    ("input_hw", (32, 32)),
    ("variant", "full"),
    ("site", None),
    ("group_norm", False),
    ("dataset", "synthetic"),
    ("limit", None),
    ("n_train", 2000),
    ("n_val", 500),
    ("width", None),
    ("steps", 500),
    ("lr", 0.05),
    ("momentum", 0.9),
    ("weight_decay", 4e-5),
    ("batch_size", 32),
    ("seed", 0),
    ("batch", 2),
    ("channels", 8),
    ("tolerance", 1e-4),
    ("shapes", None),
    ("reps", MIN_REPS),
    ("dump", False),
    ("format", "text"),
    ("out", None),
])

# what a subcommand changes with respect to DEFAULTS
SUBCOMMAND_DEFAULTS = {
    "gradcheck": {"attention": "ema", "groups": 4, "reduction": 4, "input_hw": (5, 7)},
    "train": {"groups": TOY_DEFAULT_HYPER["ema"], "input_hw": SYNTH_HW},
}

VARIANTS = ("full", "no_cross_spatial", "EMA_no", "EMA_16", "EMA_32")
SITES = ("output", "expanded")


# ------------- configuration


def _parse_hw(value):
    if isinstance(value, str):
        parts = value.lower().replace(",", "x").split("x")
        try:
            value = [int(p) for p in parts]
        except ValueError:
            raise ConfigError("invalid value for 'input_hw': %r, expected H or HxW" % value)
    elif isinstance(value, int):
        value = [value]
    value = list(value)
    if len(value) == 1:
        value = value * 2
    if len(value) != 2 or any(not isinstance(d, int) or d < 1 for d in value):
        raise ConfigError("invalid value for 'input_hw': %r, expected two positive integers" % (value,))
    return tuple(value)


def _check_int(key, value, minimum):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ConfigError("invalid value for '%s': %r, expected an integer >= %s" % (key, value, minimum))
    return int(value)


def _check_choice(key, value, choices):
    if value not in choices:
        raise ConfigError("invalid value for '%s': %r, expected one of %r" % (key, value, list(choices)))
    return value


class RunConfig(object):
    """The validated settings of one command invocation. Build it with `from_mapping`."""
    __slots__ = ('subcommand', ) + tuple(DEFAULTS)

    def __init__(self, subcommand, **values):
        self.subcommand = subcommand
        for k in DEFAULTS:
            setattr(self, k, values[k])

    @classmethod
    def from_mapping(cls, mapping):
        # type: (Mapping[str, Any]) -> RunConfig
        """
        Validates `mapping` on top of the defaults of its subcommand. Entries set to None are considered absent.

        :raises ConfigError: on unknown keys or invalid values, naming the key
        """
        mapping = OrderedDict((k, v) for k, v in mapping.items() if v is not None)
        for k in mapping:
            if k != "subcommand" and k not in DEFAULTS:
                raise ConfigError("unknown configuration key '%s'" % k)
        if "subcommand" not in mapping:
            raise ConfigError("missing configuration key 'subcommand'")
        sub = _check_choice("subcommand", mapping["subcommand"], COMMANDS)

        v = OrderedDict(DEFAULTS)
        v.update(SUBCOMMAND_DEFAULTS.get(sub, {}))
        v.update((k, val) for k, val in mapping.items() if k != "subcommand")

        _check_choice("backbone", v["backbone"], BACKBONES)
        v["attention"] = _check_choice("attention", str(v["attention"]).lower(), ("none", ) + ATTENTION_KINDS)
        _check_choice("variant", v["variant"], VARIANTS)
        _check_choice("format", v["format"], REPORT_FORMATS)
        if v["site"] is not None:
            _check_choice("site", v["site"], SITES)
        for key, minimum in (("groups", 1), ("classes", 1), ("n_train", 1), ("n_val", 1), ("steps", 0),
                             ("batch_size", 1), ("seed", 0), ("batch", 1), ("channels", 1), ("reps", MIN_REPS)):
            v[key] = _check_int(key, v[key], minimum)
        for key, minimum in (("reduction", 1), ("limit", 0), ("width", 1)):
            if v[key] is not None:
                v[key] = _check_int(key, v[key], minimum)
        for key in ("lr", "momentum", "weight_decay", "tolerance"):
            if isinstance(v[key], bool) or not isinstance(v[key], (int, float)):
                raise ConfigError("invalid value for '%s': %r, expected a number" % (key, v[key]))
            v[key] = float(v[key])
        v["input_hw"] = _parse_hw(v["input_hw"])
        if v["shapes"] is not None and not isinstance(v["shapes"], str):
            v["shapes"] = ",".join("x".join(str(d) for d in s) for s in v["shapes"])
        if v["variant"] != "full" and v["attention"] != "ema":
            raise ConfigError("invalid value for 'variant': %r only applies to --attention ema" % v["variant"])
        if sub == "gradcheck" and v["attention"] == "none":
            raise ConfigError("invalid value for 'attention': gradcheck needs one of %r" % (ATTENTION_KINDS,))
        return cls(sub, **v)

    @property
    def hyper(self):
        # type: (...) -> Optional[int]
        """G for EMA, r for CA/SE."""
        if self.attention == "none":
            return None
        if self.attention == "ema":
            return self.ema_variant().groups
        return default_hyper(self.attention) if self.reduction is None else self.reduction

    def ema_variant(self):
        # type: (...) -> EmaVariant
        if self.variant in ("full", "no_cross_spatial"):
            return EmaVariant(self.variant, self.groups, self.group_norm)
        v = EmaVariant.ablation(self.variant)
        return EmaVariant(v.mode, v.groups, self.group_norm)

    def to_dict(self):
        d = OrderedDict([("subcommand", self.subcommand)])
        for k in DEFAULTS:
            val = getattr(self, k)
            d[k] = list(val) if isinstance(val, tuple) else val
        return d


def load_config_file(path):
    # type: (str) -> Dict[str, Any]
    try:
        with open(path, encoding="utf-8") as f:
            content = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("configuration file %s is not valid json: %s" % (path, e))
    if not isinstance(content, dict):
        raise ConfigError("configuration file %s must hold a json object" % path)
    return content


# ------------- subcommands


def _finish(cfg, results, code=EXIT_OK):
    write_report(make_report(cfg.subcommand, cfg.to_dict(), results), cfg.format, cfg.out)
    return code


def cmd_analyze(cfg):
    # type: (RunConfig) -> int
    """Params and MACs of a backbone, with attention attached if requested."""
    g = build_backbone(cfg.backbone, cfg.classes)
    if cfg.attention != "none":
        variant = cfg.ema_variant() if cfg.attention == "ema" else None
        g = attach_attention(g, cfg.attention, cfg.hyper, site=cfg.site, group_norm=cfg.group_norm,
                             cross_spatial=variant is None or variant.cross_spatial)
    results = complexity_report(g, cfg.input_hw).to_dict()
    if cfg.dump:
        results["layers"] = dump_graph(g, cfg.input_hw).splitlines()
    logger.info("%s: %s params, %s MACs at %sx%s", g.name, results["params"], results["macs"], *cfg.input_hw)
    return _finish(cfg, results)


def cmd_gradcheck(cfg):
    # type: (RunConfig) -> int
    """Compares tape gradients of an attention module with finite differences, for all parameters and the input."""
    H, W = cfg.input_hw
    variant = cfg.ema_variant() if cfg.attention == "ema" else None
    p = attention_init(cfg.attention, cfg.channels, cfg.hyper, seed=cfg.seed, group_norm=cfg.group_norm)
    rng = np.random.default_rng(cfg.seed)
    x = randn((cfg.batch, cfg.channels, H, W), rng=rng)
    # a random projection makes the checked scalar depend on every output element
    proj = randn((cfg.batch, cfg.channels, H, W), rng=rng)

    def _objective(x, **buffers):
        return sum_all(mul(attention_forward(p.replace(**buffers), x, variant), proj))

    inputs = OrderedDict([("x", x)])
    inputs.update(p.buffers)
    report = gradcheck(_objective, inputs, tolerance=cfg.tolerance)
    results = report.to_dict()
    results["module"] = p.kind
    if report.passed:
        logger.info("gradient check passed, max relative error %.3e", report.max_error)
    else:
        logger.error("gradient check failed, max relative error %.3e >= %.1e", report.max_error, cfg.tolerance)
    return _finish(cfg, results, EXIT_OK if report.passed else EXIT_NUMERIC)


def _train_datasets(cfg):
    if cfg.dataset == "synthetic":
        H, W = cfg.input_hw
        return synth_quadrant(cfg.n_train, cfg.seed, H, W), synth_quadrant(cfg.n_val, cfg.seed + 1, H, W)
    limit = cfg.limit
    return (load_cifar100(cfg.dataset, "train", limit=limit),
            load_cifar100(cfg.dataset, "test", limit=None if limit is None else max(1, limit // 5)))


def cmd_train(cfg):
    # type: (RunConfig) -> int
    """Trains the toy net on the synthetic quadrant task or a CIFAR-100 subset."""
    train, val = _train_datasets(cfg)
    variant = cfg.ema_variant() if cfg.attention == "ema" else None
    width = cfg.width
    if width is None:
        # the ablations compare G=16 and G=32, so they need a trunk of at least 32 channels
        width = 32 if cfg.variant.startswith("EMA_") else TOY_WIDTH
    hyper = None if cfg.attention in ("none", "ema") else cfg.reduction
    model = build_toy_net(cfg.attention, hyper, seed=cfg.seed, variant=variant, width=width,
                          num_classes=train.num_classes)
    tcfg = TrainConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                       steps=cfg.steps, seed=cfg.seed)
    report = train_toy(model, train, val, tcfg)
    results = OrderedDict([("model", OrderedDict([("attention", model.attention), ("hyper", model.hyper),
                                                  ("variant", None if variant is None else variant.mode),
                                                  ("width", model.width)])),
                           ("dataset", OrderedDict([("name", train.name), ("train", len(train)),
                                                    ("val", len(val)), ("classes", train.num_classes)]))])
    results.update(report.to_dict())
    return _finish(cfg, results)


def cmd_bench(cfg):
    # type: (RunConfig) -> int
    """Median wall time of the EMA forward pass on ResNet stage shapes."""
    shapes = RESNET_STAGE_SHAPES if cfg.shapes is None else parse_shapes(cfg.shapes)
    rows = bench_ema(shapes, groups=cfg.groups, reps=cfg.reps, seed=cfg.seed)
    return _finish(cfg, OrderedDict([("rows", rows)]))


def cmd_compare(cfg):
    # type: (RunConfig) -> int
    """Params and MACs of a backbone alone and with each attention module."""
    rows = comparison_table(cfg.backbone, cfg.classes, cfg.input_hw)
    return _finish(cfg, OrderedDict([("backbone", cfg.backbone), ("rows", rows)]))


COMMANDS = OrderedDict([
    ("analyze", cmd_analyze),
    ("gradcheck", cmd_gradcheck),
    ("train", cmd_train),
    ("bench", cmd_bench),
    ("compare", cmd_compare),
])  # type: Dict[str, Callable[[RunConfig], int]]


# ------------- argument parsing


def _common_flags():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="json file holding configuration keys, overridden by flags")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", help="report format: %s" % " | ".join(REPORT_FORMATS))
    p.add_argument("--out", help="report destination, standard output by default")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logs")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    return p


def _model_flags():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--attention", help="none | ema | ca | se")
    p.add_argument("--groups", type=int, help="EMA group count G")
    p.add_argument("--reduction", type=int, help="CA/SE reduction ratio r")
    p.add_argument("--variant", help=" | ".join(VARIANTS))
    p.add_argument("--group-norm", dest="group_norm", action="store_true", default=None,
                   help="EMA with the normalized 1x1 branch")
    p.add_argument("--input-hw", dest="input_hw", help="input extents, H or HxW")
    return p


def build_parser():
    # type: (...) -> argparse.ArgumentParser
    common, model = _common_flags(), _model_flags()
    parser = argparse.ArgumentParser(prog="emattn", description="Efficient multi-scale attention toolkit.")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    p = subs.add_parser("analyze", parents=[common, model], help="params and MACs of a backbone")
    p.add_argument("--backbone", help=" | ".join(BACKBONES))
    p.add_argument("--classes", type=int)
    p.add_argument("--site", help="MobileNetV2 insertion site: %s" % " | ".join(SITES))
    p.add_argument("--dump", action="store_true", default=None, help="include one line per layer")

    p = subs.add_parser("gradcheck", parents=[common, model], help="finite-difference gradient check")
    p.add_argument("--batch", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--tolerance", type=float)

    p = subs.add_parser("train", parents=[common, model], help="train the toy net")
    p.add_argument("--dataset", help="'synthetic' or the CIFAR-100 binary directory")
    p.add_argument("--limit", type=int, help="CIFAR-100 training records to use")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--width", type=int, help="trunk channels")

    p = subs.add_parser("bench", parents=[common], help="time the EMA forward pass")
    p.add_argument("--groups", type=int)
    p.add_argument("--shapes", help="BxCxHxW,BxCxHxW,...")
    p.add_argument("--reps", type=int)

    p = subs.add_parser("compare", parents=[common], help="complexity of every attention module on a backbone")
    p.add_argument("--backbone", help=" | ".join(BACKBONES))
    p.add_argument("--classes", type=int)
    p.add_argument("--input-hw", dest="input_hw")
    return parser


def _setup_logging(verbose, quiet):
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    level = logging.DEBUG if verbose else (logging.WARNING if quiet else logging.INFO)
    logging.getLogger("emattn").setLevel(level)


def main(argv=None):
    # type: (Optional[Sequence[str]]) -> int
    """Runs the command line and returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_CONFIG
    _setup_logging(args.verbose, args.quiet)

    flags = dict(vars(args))
    config_file = flags.pop("config")
    for k in ("verbose", "quiet"):
        flags.pop(k)
    try:
        mapping = load_config_file(config_file) if config_file else {}
        mapping.update((k, v) for k, v in flags.items() if v is not None)
        cfg = RunConfig.from_mapping(mapping)
        return COMMANDS[cfg.subcommand](cfg)
    except (ConfigError, GraphError, FormatError, FileNotFoundError) as e:
        sys.stderr.write("emattn %s: error: %s\n" % (args.subcommand, e))
        return EXIT_CONFIG
    except NumericError as e:
        sys.stderr.write("emattn %s: numeric failure: %s\n" % (args.subcommand, e))
        return EXIT_NUMERIC
