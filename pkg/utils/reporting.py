"""
Rendering of command results.

Every command produces a CommandResult holding a pandas table. Human output
is the table under a heading followed by the warnings; machine output is CSV
or JSON lines plus a metadata record. Machine output carries no timestamps.
"""
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, TextIO

import pandas as pd

from presets.report_templates import SERIES_HEADING, WARNINGS_HEADING, heading
from utils import __version__
from utils.estimators import MaxMomentSeries

logger = logging.getLogger(__name__)

MACHINE_FORMATS = ("csv", "record")


@dataclass
class CommandResult:
    command: str
    table: pd.DataFrame
    config_text: str
    seed: Optional[int] = None
    warnings: List[str] = field(default_factory=list)
    heading_info: Dict[str, Any] = field(default_factory=dict)
    details: Optional[pd.DataFrame] = None
    fragment: Optional[str] = None

    def metadata(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config_sha256": config_hash(self.config_text),
            "seed": self.seed,
            "version": __version__,
            "warnings": list(self.warnings),
        }


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def series_frame(series: MaxMomentSeries) -> pd.DataFrame:
    frame = pd.DataFrame({
        "t": series.times,
        "mean": series.mean,
        "raw_second": series.raw_second,
        "variance": series.variance,
        "cutoff": series.cutoff,
        "grid_points": series.grid_points,
        "gamma": series.gamma,
        "gamma_clamped": series.gamma_clamped,
    })
    if series.probs is not None:
        for i in range(series.probs.shape[1]):
            frame[f"prob_{i + 1}"] = series.probs[:, i]
        frame["prob_zero"] = series.residual
    return frame


def _clean(value: Any) -> Any:
    if hasattr(value, "item"):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def render_machine(frame: pd.DataFrame, fmt: str) -> str:
    if fmt not in MACHINE_FORMATS:
        raise ValueError(f"unknown output format {fmt!r}")
    if fmt == "csv":
        return frame.to_csv(index=False, lineterminator="\n")
    return "".join(json.dumps(row) + "\n" for row in table_records(frame))


def render_metadata(result: CommandResult) -> str:
    return json.dumps(result.metadata(), sort_keys=True)


def render_human(result: CommandResult) -> str:
    parts = [heading(result.command, **result.heading_info).rstrip("\n")]
    with pd.option_context("display.max_columns", None, "display.width", 200, "display.precision", 10):
        parts.append(result.table.to_string(index=False))
        if result.details is not None:
            parts.append(SERIES_HEADING.rstrip("\n"))
            parts.append(result.details.to_string(index=False))
    if result.fragment:
        parts.append(result.fragment.rstrip("\n"))
    if result.warnings:
        parts.append(WARNINGS_HEADING)
        parts.extend(f"  - {w}" for w in result.warnings)
    return "\n".join(parts) + "\n"


def emit(result: CommandResult, stream: TextIO, out: Optional[str] = None, fmt: Optional[str] = None) -> None:
    """Write a result.

    Without ``fmt`` the human report goes to ``stream`` and, if ``out`` is
    set, the CSV table (or the config fragment of ``convert``) to ``out``.
    With ``fmt`` the machine rows go to ``out`` or ``stream``. The metadata
    record goes next to ``out`` as ``<out>.meta.json``, or last on ``stream``.
    """
    if fmt is None:
        stream.write(render_human(result))
        if out is None:
            return
        payload = result.fragment if result.fragment is not None else render_machine(result.table, "csv")
    else:
        payload = render_machine(result.table, fmt)
        if out is None:
            stream.write(payload)
            stream.write(render_metadata(result) + "\n")
            return
    with open(out, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(payload)
    with open(f"{out}.meta.json", "w", encoding="utf-8", newline="\n") as handle:
        handle.write(render_metadata(result) + "\n")
    logger.info(f"💾 Wrote {out}")


def table_records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    """Rows as JSON-safe dicts (non-finite numbers become null)"""
    return [{k: _clean(v) for k, v in row.items()} for row in frame.to_dict(orient="records")]
