# SPDX-License-Identifier: LGPL-3.0-or-later

"""
This module implements run configuration and report emission.

Configuration files are flat key = value text. Reports are CSV with a
commented preamble, or a single JSON object; both embed the configuration
so a report can be reproduced from itself. Plain CSV readers must skip
the lines starting with "#".
"""

from .common import (
    RankCriterion,
    RunStatus,
    ConfigError,
)
from .objectives import objective_shapes
from .rng import MASK_64b
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import (
    Any, Dict, List, Mapping, Optional, TextIO, Union, get_type_hints,
)
import configparser
import contextlib
import csv
import io
import json
import sys

FORMATS = ("csv", "json")
_SECTION = "run"
_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


@dataclass
class RunConfig:
    """Everything a training run depends on.

    Attributes:
      optimizer (str): tezo, tezo-m, tezo-adam, mezo, mezo-m, mezo-adam,
        lozo or subzo.
      objective (str): Objective name, e.g. quad16 or mlp:8-16-2.
      steps (int): Number of iterations T.
      eta (float): Learning rate.
      rho (float): Perturbation rate.
      rank (int): Fixed rank of every 2-D layer.
      rank_auto (bool): Select ranks from the weight spectra instead.
      lazy_interval (int): Refresh interval of the LOZO/SubZO factors.
      factor_refresh (int): Redraw TeZO factors every this many steps.
      target_ratio (float): Stop once loss <= target_ratio * initial loss.
      record_wall_time (bool): Add wall-clock columns; such reports are no
        longer bitwise reproducible.
    """
    optimizer: Optional[str] = None
    objective: Optional[str] = None
    steps: Optional[int] = None
    eta: float = 1e-3
    rho: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-5
    rank: int = 4
    rank_auto: bool = False
    threshold: float = 0.25
    r_max: int = 64
    criterion: str = "largest"
    seed: int = 0
    log_every: int = 100
    unbiased_scale: bool = False
    lazy_interval: Optional[int] = None
    factor_refresh: Optional[int] = None
    target_ratio: Optional[float] = None
    divergence_factor: float = 1e6
    record_wall_time: bool = False
    out: Optional[str] = None
    format: str = "csv"

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> "RunConfig":
        """Check every key before any work is done.

        Raises:
          ConfigError: On a missing or out-of-range value.
          UnexpectedTypeError: On an unknown optimizer, objective or
            criterion name.
        """
        from .optimizers import lookup_optimizer

        for key in ("optimizer", "objective", "steps"):
            if getattr(self, key) is None:
                raise ConfigError(key, "missing required key")
        lookup_optimizer(self.optimizer)
        RankCriterion.from_name(self.criterion)
        checks = (
            ("steps", self.steps >= 0, "must not be negative"),
            ("eta", self.eta > 0, "must be positive"),
            ("rho", self.rho > 0, "must be positive"),
            ("beta1", 0 <= self.beta1 < 1, "must lie in [0, 1)"),
            ("beta2", 0 <= self.beta2 < 1, "must lie in [0, 1)"),
            ("eps", self.eps > 0, "must be positive"),
            ("rank", self.rank >= 1, "must be positive"),
            ("threshold", 0 < self.threshold < 1, "must lie in (0, 1)"),
            ("r_max", self.r_max >= 1, "must be positive"),
            ("seed", 0 <= self.seed <= MASK_64b, "must be an unsigned 64-bit value"),
            ("log_every", self.log_every >= 1, "must be positive"),
            ("divergence_factor", self.divergence_factor > 1, "must exceed 1"),
            ("format", self.format in FORMATS, f"must be one of {FORMATS}"),
        )
        for key, ok, reason in checks:
            if not ok:
                raise ConfigError(key, f"{getattr(self, key)!r} {reason}")
        for key in ("lazy_interval", "factor_refresh"):
            value = getattr(self, key)
            if value is not None and value < 1:
                raise ConfigError(key, f"{value!r} must be positive")
        if self.target_ratio is not None and not self.target_ratio > 0:
            raise ConfigError("target_ratio", f"{self.target_ratio!r} must be positive")
        if not self.rank_auto:
            for shape in objective_shapes(self.objective):
                if len(shape) == 2 and self.rank > min(shape):
                    raise ConfigError(
                        "rank",
                        f"{self.rank} exceeds min(m, n) = {min(shape)} "
                        f"of a {shape[0]}x{shape[1]} layer",
                    )
        return self


_HINTS = get_type_hints(RunConfig)


def _coerce(key: str, value: Any) -> Any:
    hint = _HINTS[key]
    args = getattr(hint, "__args__", ())
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), hint)
    if not isinstance(value, str):
        if value is None and not optional:
            raise ConfigError(key, "must not be empty")
        return value
    text = value.strip()
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if base is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if base is int:
            try:
                return int(text, 0)
            except ValueError:
                number = float(text)
                if not number.is_integer():
                    raise
                return int(number)
        if base is float:
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {base.__name__}")
    return text


def parse_config(
    path: Union[str, Path, None] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Load a key = value file, apply flag overrides and validate.

    Override entries that are None are ignored, so unset flags fall through
    to the file or the defaults.

    Raises:
      ConfigError: On unknown keys, unparsable or invalid values.
      OSError: If the file cannot be read.
    """
    names = {f.name for f in fields(RunConfig)}
    values: Dict[str, Any] = dict()
    if path is not None:
        text = Path(path).read_text()
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(f"[{_SECTION}]\n{text}")
        except configparser.Error as e:
            raise ConfigError(str(path), str(e).splitlines()[0])
        for key, value in parser.items(_SECTION):
            if key not in names:
                raise ConfigError(key, "unknown key")
            values[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in names:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, value)
    return RunConfig(**values).validate()


@dataclass
class RunReport:
    """A table of results with the configuration that produced it.

    Attributes:
      header (dict): The configuration or experiment parameters.
      columns (list): Column names.
      rows (list): One tuple per row.
      totals (dict): Run-level results.
      status (RunStatus): How the run ended.
    """
    header: Dict[str, Any] = field(default_factory=dict)
    columns: List[str] = field(default_factory=list)
    rows: List[tuple] = field(default_factory=list)
    totals: Dict[str, Any] = field(default_factory=dict)
    status: RunStatus = RunStatus.completed

    def column(self, name: str) -> List[Any]:
        index = self.columns.index(name)
        return [row[index] for row in self.rows]


def _write_csv(report: RunReport, fp: TextIO) -> None:
    for key, value in report.header.items():
        fp.write(f"# {key} = {value}\n")
    fp.write(f"# status = {report.status}\n")
    for key, value in report.totals.items():
        fp.write(f"# total.{key} = {value}\n")
    writer = csv.writer(fp, lineterminator="\n")
    writer.writerow(report.columns)
    writer.writerows(report.rows)


def _write_json(report: RunReport, fp: TextIO) -> None:
    obj = {
        "config": report.header,
        "columns": report.columns,
        "rows": [list(row) for row in report.rows],
        "totals": report.totals,
        "status": str(report.status),
    }
    json.dump(obj, fp, indent=2)
    fp.write("\n")


@contextlib.contextmanager
def _open_out(path: Union[str, Path, None]):
    if path is None or str(path) == "-":
        yield sys.stdout
        return
    with open(path, "w", newline="") as fp:
        yield fp


def emit_report(
    report: RunReport, format: str = "csv", path: Union[str, Path, None] = None
) -> None:
    """Write report to path, or stdout when path is None or "-".

    Raises:
      ConfigError: On an unknown format.
      OSError: If path cannot be written.
    """
    if format not in FORMATS:
        raise ConfigError("format", f"{format!r} must be one of {FORMATS}")
    with _open_out(path) as fp:
        if format == "json":
            _write_json(report, fp)
        else:
            _write_csv(report, fp)


def render_report(report: RunReport, format: str = "csv") -> str:
    buf = io.StringIO()
    if format == "json":
        _write_json(report, buf)
    else:
        _write_csv(report, buf)
    return buf.getvalue()


def _cell(text: str) -> Any:
    for parse in (int, float):
        try:
            return parse(text)
        except ValueError:
            pass
    return text


def _read_csv(text: str) -> RunReport:
    report = RunReport()
    body = []
    for line in text.splitlines():
        if line.startswith("# ") and not body:
            key, _, value = line[2:].partition(" = ")
            if key == "status":
                report.status = RunStatus.from_name(value)
            elif key.startswith("total."):
                report.totals[key[len("total."):]] = _cell(value)
            else:
                report.header[key] = value
        else:
            body.append(line)
    rows = list(csv.reader(body))
    if rows:
        report.columns = rows[0]
        report.rows = [tuple(_cell(c) for c in row) for row in rows[1:]]
    return report


def _read_json(text: str) -> RunReport:
    obj = json.loads(text)
    return RunReport(
        header=obj["config"],
        columns=obj["columns"],
        rows=[tuple(row) for row in obj["rows"]],
        totals=obj["totals"],
        status=RunStatus.from_name(obj["status"]),
    )


def read_report(path: Union[str, Path]) -> RunReport:
    """Parse a report written by emit_report; the format is detected from
    the content."""
    text = Path(path).read_text()
    return parse_report(text)


def parse_report(text: str) -> RunReport:
    if text.lstrip().startswith("{"):
        return _read_json(text)
    return _read_csv(text)


def config_from_header(header: Mapping[str, Any]) -> RunConfig:
    """Rebuild the RunConfig embedded in a report."""
    return parse_config(overrides={k: v for k, v in header.items()})
