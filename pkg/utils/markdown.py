"""
Markdown utility functions for run summaries
"""

import html

import markdown


def convert_markdown_to_html(text: str, title: str = "metastab run") -> str:
    """Render a run summary to a standalone HTML page"""
    if not text:
        return ""

    try:
        body = markdown.markdown(text, extensions=["fenced_code", "tables", "toc"])
    except Exception as e:
        # Fallback to the raw text if the markdown library fails
        body = f"<p>Error rendering markdown: {html.escape(str(e))}</p><pre>{html.escape(text)}</pre>"

    return apply_report_styling(body, title)


def apply_report_styling(body: str, title: str) -> str:
    return f"""<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8">
<title>{html.escape(title)}</title>
<style>
    body {{
        font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, sans-serif;
        font-size: 14px;
        line-height: 1.5;
        color: #374151;
        margin: 24px;
    }}

    h1, h2, h3 {{ color: #4c1d95; font-weight: 600; }}

    table {{ border-collapse: collapse; margin: 12px 0; }}
    th, td {{ border: 1px solid #e5e7eb; padding: 4px 10px; text-align: right; }}
    th {{ background-color: #f3f4f6; }}

    code {{
        background-color: #f3f4f6;
        padding: 2px 6px;
        border-radius: 4px;
        font-family: 'Consolas', 'Monaco', monospace;
        font-size: 12px;
    }}

    pre {{
        background-color: #f8fafc;
        border: 1px solid #e2e8f0;
        border-radius: 8px;
        padding: 12px;
        overflow-x: auto;
    }}

    .pass {{ color: #047857; }}
    .fail {{ color: #b91c1c; }}
</style>
</head>
<body>
{body}
</body>
</html>
"""


def markdown_table(headers, rows) -> str:
    """Pipe table from a header list and row sequences"""
    lines = ["| " + " | ".join(str(h) for h in headers) + " |",
             "|" + "|".join("---" for _ in headers) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(_cell(v) for v in row) + " |")
    return "\n".join(lines)


def _cell(value) -> str:
    if isinstance(value, bool):
        return "pass" if value else "FAIL"
    if isinstance(value, float):
        return f"{value:.6g}"
    if value is None:
        return "-"
    return str(value)
