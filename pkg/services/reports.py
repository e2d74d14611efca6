"""
Report writer: report.json, CSV tables, plot data and a rendered summary
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from utils.markdown import convert_markdown_to_html, markdown_table

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
PLOT_FILE = "plot.csv"
SUMMARY_FILE = "summary.md"
SUMMARY_HTML = "summary.html"


def _default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, "to_dict"):
        return value.to_dict()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _csv_value(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, np.generic):
        return repr(value.item())
    return value


def write_csv(path: Path, headers, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(headers)
        for row in rows:
            writer.writerow([_csv_value(v) for v in row])


def render_summary(report) -> str:
    """Markdown summary: provenance, check table and the small tables."""
    status = "PASS" if report.passed else "FAIL"
    lines = [
        f"# {report.kind} run: {status}",
        "",
        f"- config hash: `{report.config_hash}`",
    ]
    m0 = report.results.get("m0", getattr(report, "m0", None))
    if m0 is not None:
        lines.append(f"- m0: {m0:.6g}")
    lines += ["", "## Checks", ""]
    rows = []
    for c in report.checks:
        if c.get("skipped"):
            rows.append([c["name"], "skipped", None, None, c["reason"]])
        else:
            rows.append([c["name"], bool(c["passed"]), c.get("value") if not isinstance(c.get("value"), list) else None,
                         c.get("bound"), c.get("error", c.get("sense"))])
    lines.append(markdown_table(["check", "result", "value", "bound", "note"], rows))
    for name, (headers, table_rows) in report.tables.items():
        if name in ("fields", "samples") or len(table_rows) > 50:
            lines += ["", f"Table `{name}`: {len(table_rows)} rows in `{name}.csv`."]
            continue
        lines += ["", f"## {name}", "", markdown_table(headers, table_rows)]
    return "\n".join(lines) + "\n"


def write_report(report, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write every artefact of a run into `out_dir`; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: Dict[str, Path] = {}

    data = report.to_dict()
    with open(out / REPORT_FILE, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, default=_default)
    written["report"] = out / REPORT_FILE

    for name, (headers, rows) in report.tables.items():
        path = out / f"{name}.csv"
        write_csv(path, headers, rows)
        written[name] = path

    if report.plot:
        write_csv(out / PLOT_FILE, ["series", "x", "y"], report.plot)
        written["plot"] = out / PLOT_FILE

    text = render_summary(report)
    (out / SUMMARY_FILE).write_text(text, encoding="utf-8")
    (out / SUMMARY_HTML).write_text(convert_markdown_to_html(text, f"metastab {report.kind}"), encoding="utf-8")
    written["summary"] = out / SUMMARY_FILE
    logger.info(f"Wrote {report.kind} report to {out} ({len(written)} files)")
    return written


def load_report(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
