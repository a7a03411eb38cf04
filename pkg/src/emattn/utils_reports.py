"""
Report documents written by the command line: {tool_version, subcommand, config_echo, results, timestamp},
rendered either as json or as indented `key: value` text.
"""
import json
import logging
import sys
from collections import OrderedDict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, List, Mapping, Optional, Union

from typing_extensions import Literal

from emattn.utils_errors import ConfigError

logger = logging.getLogger(__name__)

ReportFormat = Literal["text", "json"]
REPORT_FORMATS = ("text", "json")
REPORT_FIELDS = ("tool_version", "subcommand", "config_echo", "results", "timestamp")


def _tool_version():
    # imported late: the package imports its modules first
    from emattn import __version__
    return __version__


def make_report(subcommand,      # type: str
                config_echo,     # type: Mapping[str, Any]
                results,         # type: Any
                timestamp=None,  # type: Optional[str]
                ):
    # type: (...) -> OrderedDict
    if timestamp is None:
        timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return OrderedDict([("tool_version", _tool_version()),
                        ("subcommand", subcommand),
                        ("config_echo", OrderedDict(config_echo)),
                        ("results", results),
                        ("timestamp", timestamp)])


def _text_lines(value, indent):
    # type: (Any, int) -> List[str]
    pad = "  " * indent
    lines = []
    if isinstance(value, Mapping):
        for k, v in value.items():
            if isinstance(v, (Mapping, list, tuple)) and not _is_flat(v):
                lines.append("%s%s:" % (pad, k))
                lines.extend(_text_lines(v, indent + 1))
            else:
                lines.append("%s%s: %s" % (pad, k, _scalar_text(v)))
    else:
        for i, v in enumerate(value):
            if isinstance(v, (Mapping, list, tuple)) and not _is_flat(v):
                lines.append("%s- [%s]" % (pad, i))
                lines.extend(_text_lines(v, indent + 1))
            else:
                lines.append("%s- %s" % (pad, _scalar_text(v)))
    return lines


def _is_flat(v):
    return isinstance(v, (list, tuple)) and not any(isinstance(e, (Mapping, list, tuple)) for e in v)


def _scalar_text(v):
    if isinstance(v, (list, tuple)):
        return "[%s]" % ", ".join(_scalar_text(e) for e in v)
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def format_report(doc,          # type: Mapping[str, Any]
                  fmt="text",   # type: ReportFormat
                  ):
    # type: (...) -> str
    if fmt == "json":
        return json.dumps(doc, indent=2)
    elif fmt == "text":
        return "\n".join(_text_lines(doc, 0))
    raise ConfigError("unknown report format %r, expected one of %r" % (fmt, REPORT_FORMATS))


def write_report(doc,        # type: Mapping[str, Any]
                 fmt="text",  # type: ReportFormat
                 out=None,   # type: Optional[Union[str, Path]]
                 ):
    """Writes the rendered report to `out`, or to the standard output."""
    body = format_report(doc, fmt) + "\n"
    if out is None or str(out) == "-":
        sys.stdout.write(body)
        sys.stdout.flush()
    else:
        Path(out).write_text(body, encoding="utf-8")
        logger.info("wrote %s report to %s", doc.get("subcommand"), out)


def report_body(doc):
    # type: (Mapping[str, Any]) -> OrderedDict
    """The report without its timestamp, for comparisons between runs."""
    return OrderedDict((k, v) for k, v in doc.items() if k != "timestamp")
