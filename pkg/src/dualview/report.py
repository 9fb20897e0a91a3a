"""Aligned-text and JSON rendering of descriptive-statistics and comparison tables."""

from __future__ import annotations

from .stats import ComparisonResult, DescriptiveStats, Significance

TABLE1_HEADERS = ("Dataset", "Count", "Mean", "MeanDiff", "Std", "Min", "Q1", "Median", "Q3", "Max", "IQR")
TABLE2_HEADERS = ("Dataset", "EMD", "KS D", "p-value")
MISSING = "(missing)"


def fmt(value) -> str:
    """Three decimals; exact zero prints as "0", absent values as "N/A"."""
    if value is None:
        return "N/A"
    if isinstance(value, int):
        return str(value)
    if value == 0:
        return "0"
    return f"{value:.3f}"


def render_table(headers, rows, left_cols=(0,)) -> str:
    """Columns joined by two spaces; ``left_cols`` are left-justified, the
    rest right-justified; trailing blanks are stripped from every line."""
    cells = [list(headers)] + [list(r) for r in rows]
    ncol = len(headers)
    # short rows (gap markers) only constrain the label column
    widths = [max(len(r[i]) for r in cells if len(r) == ncol or i == 0) for i in range(ncol)]
    lines = []
    for r in cells:
        if len(r) < ncol:
            lines.append("  ".join([r[0].ljust(widths[0])] + r[1:]).rstrip())
            continue
        parts = []
        for i, c in enumerate(r):
            parts.append(c.ljust(widths[i]) if i in left_cols else c.rjust(widths[i]))
        lines.append("  ".join(parts).rstrip())
    return "\n".join(lines)


def table1_row(label: str, s: DescriptiveStats | None) -> list[str]:
    if s is None:
        return [label, MISSING]
    return [label, fmt(s.count), fmt(s.mean), fmt(s.mean_difference), fmt(s.std), fmt(s.min),
            fmt(s.q1), fmt(s.median), fmt(s.q3), fmt(s.max), fmt(s.iqr)]


def significance_cell(c: ComparisonResult) -> str:
    cell = c.significance.symbol
    if c.significance is Significance.NONE and c.gap:
        cell += " (gap)"
    return cell


def table2_row(label: str, c: ComparisonResult | None) -> list[str]:
    if c is None:
        return [label, MISSING]
    return [label, fmt(c.emd), fmt(c.ks_d), significance_cell(c)]


def render_table1(metric: str, rows: list[tuple[str, DescriptiveStats | None]]) -> str:
    body = render_table(TABLE1_HEADERS, [table1_row(l, s) for l, s in rows], left_cols=(0,))
    return f"{metric}\n{body}"


def render_table2(metric: str, rows: list[tuple[str, ComparisonResult | None]]) -> str:
    body = render_table(TABLE2_HEADERS, [table2_row(l, c) for l, c in rows], left_cols=(0, 3))
    return f"{metric}\n{body}"
