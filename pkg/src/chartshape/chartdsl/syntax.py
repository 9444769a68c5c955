"""Line-oriented reader and canonical writer for the chart language.

Grammar (``#`` starts a comment outside quotes)::

    chart grid=<rows>x<cols> [title="..."]
    panel id=<id> at=<row>,<col> xrange=<lo>..<hi> yrange=<lo>..<hi>
    series id=<id> kind=line|bar|scatter visible=true|false points=(x1,y1)(x2,y2)...
    annotate id=<id> text="..." at=<x>,<y>
    end

Grid positions are zero-based. ``end`` closes a panel.
"""

from __future__ import annotations

import re
from fractions import Fraction

from .model import (
    Annotation,
    ChartSpec,
    ChartSyntaxError,
    Panel,
    Series,
    validate,
)

NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?\Z")
POINT_RE = re.compile(r"\(\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\)")

_KEYS = {
    "chart": (("grid",), ("title",)),
    "panel": (("id", "at", "xrange", "yrange"), ()),
    "series": (("id", "kind", "visible", "points"), ()),
    "annotate": (("id", "text", "at"), ()),
    "end": ((), ()),
}


def format_number(value: Fraction) -> str:
    """Exact decimal text for a finite-decimal rational."""
    value = Fraction(value)
    sign = "-" if value < 0 else ""
    value = abs(value)
    whole, rest = divmod(value.numerator, value.denominator)
    if rest == 0:
        return f"{sign}{whole}"
    digits = []
    frac = Fraction(rest, value.denominator)
    for _ in range(64):
        frac *= 10
        d = int(frac)
        digits.append(str(d))
        frac -= d
        if frac == 0:
            break
    else:
        raise ValueError(f"{value} has no finite decimal expansion")
    return f"{sign}{whole}." + "".join(digits)


def parse_number(text: str) -> Fraction:
    if not NUMBER_RE.match(text):
        raise ValueError(f"not a decimal number: {text!r}")
    value = Fraction(text)
    return value


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


class _LineScanner:
    def __init__(self, text: str, lineno: int):
        self.text, self.lineno, self.pos = text, lineno, 0

    def error(self, message: str, pos: int | None = None) -> ChartSyntaxError:
        return ChartSyntaxError(message, self.lineno, (self.pos if pos is None else pos) + 1)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t\r":
            self.pos += 1

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text) or self.text[self.pos] == "#"

    def word(self) -> str:
        m = re.compile(r"[A-Za-z_][A-Za-z0-9_]*").match(self.text, self.pos)
        if not m:
            raise self.error("expected a keyword")
        self.pos = m.end()
        return m.group()

    def value(self) -> tuple[str, bool]:
        """Return ``(raw, quoted)`` for the value after ``key=``."""
        if self.pos < len(self.text) and self.text[self.pos] == '"':
            start = self.pos
            self.pos += 1
            out = []
            while self.pos < len(self.text):
                ch = self.text[self.pos]
                if ch == "\\" and self.pos + 1 < len(self.text):
                    nxt = self.text[self.pos + 1]
                    out.append({"n": "\n"}.get(nxt, nxt))
                    self.pos += 2
                    continue
                if ch == '"':
                    self.pos += 1
                    return "".join(out), True
                out.append(ch)
                self.pos += 1
            raise self.error("unterminated string", start)
        if self.pos < len(self.text) and self.text[self.pos] == "(":
            start = self.pos
            while self.pos < len(self.text) and self.text[self.pos] == "(":
                close = self.text.find(")", self.pos)
                if close < 0:
                    raise self.error("unbalanced parenthesis", self.pos)
                self.pos = close + 1
                save = self.pos
                self.skip_ws()
                if self.pos >= len(self.text) or self.text[self.pos] != "(":
                    self.pos = save
                    break
            return self.text[start:self.pos], False
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in " \t\r#":
            self.pos += 1
        return self.text[start:self.pos], False

    def pairs(self) -> list[tuple[str, str, bool, int]]:
        out = []
        while not self.at_end():
            col = self.pos
            key = self.word()
            if self.pos >= len(self.text) or self.text[self.pos] != "=":
                raise self.error("expected '='")
            self.pos += 1
            raw, quoted = self.value()
            out.append((key, raw, quoted, col))
        return out


def _range(raw: str, col: int, scan: _LineScanner) -> tuple[Fraction, Fraction]:
    lo, sep, hi = raw.partition("..")
    try:
        if not sep:
            raise ValueError
        return parse_number(lo), parse_number(hi)
    except ValueError:
        raise scan.error(f"bad range {raw!r}", col) from None


def _pair(raw: str, scan: _LineScanner, col: int, conv) -> tuple:
    a, sep, b = raw.partition(",")
    try:
        if not sep:
            raise ValueError
        return conv(a), conv(b)
    except ValueError:
        raise scan.error(f"bad coordinate pair {raw!r}", col) from None


def _points(raw: str, scan: _LineScanner, col: int) -> tuple[tuple[Fraction, Fraction], ...]:
    pts = []
    pos = 0
    while pos < len(raw):
        if raw[pos] in " \t":
            pos += 1
            continue
        m = POINT_RE.match(raw, pos)
        if not m:
            raise scan.error("bad point list", col + pos)
        pts.append((Fraction(m.group(1)), Fraction(m.group(2))))
        pos = m.end()
    return tuple(pts)


def parse_chart(source: str) -> ChartSpec:
    """Parse chart-language text into a validated :class:`ChartSpec`."""
    header = None
    panels: list[Panel] = []
    current: dict | None = None
    last_line = 0
    for lineno, text in enumerate(source.splitlines(), start=1):
        last_line = lineno
        scan = _LineScanner(text, lineno)
        if scan.at_end():
            continue
        kw_col = scan.pos
        keyword = scan.word()
        if keyword not in _KEYS:
            raise scan.error(f"unknown statement {keyword!r}", kw_col)
        fields: dict[str, tuple[str, bool, int]] = {}
        for key, raw, quoted, col in scan.pairs():
            required, optional = _KEYS[keyword]
            if key not in required and key not in optional:
                raise scan.error(f"unexpected key {key!r} for {keyword}", col)
            if key in fields:
                raise scan.error(f"repeated key {key!r}", col)
            fields[key] = (raw, quoted, col)
        for key in _KEYS[keyword][0]:
            if key not in fields:
                raise scan.error(f"{keyword} is missing {key}=", kw_col)

        def get(key: str, want_quoted: bool = False) -> tuple[str, int]:
            raw, quoted, col = fields[key]
            if quoted != want_quoted:
                raise scan.error(f"{key} must {'' if want_quoted else 'not '}be quoted", col)
            return raw, col

        if keyword == "chart":
            if header is not None:
                raise scan.error("repeated chart header", kw_col)
            raw, col = get("grid")
            m = re.fullmatch(r"(\d+)x(\d+)", raw)
            if not m:
                raise scan.error(f"bad grid {raw!r}", col)
            title = get("title", True)[0] if "title" in fields else None
            header = (int(m.group(1)), int(m.group(2)), title)
            continue
        if header is None:
            raise scan.error("file must start with a chart header", kw_col)
        if keyword == "panel":
            if current is not None:
                raise scan.error("nested panel; missing 'end'", kw_col)
            ident, _ = get("id")
            raw, col = get("at")
            row, column = _pair(raw, scan, col, int)
            current = dict(
                id=ident,
                row=row,
                col=column,
                xrange=_range(*get("xrange"), scan),
                yrange=_range(*get("yrange"), scan),
                series=[],
                annotations=[],
            )
        elif keyword == "end":
            if current is None:
                raise scan.error("'end' without an open panel", kw_col)
            panels.append(
                Panel(
                    id=current["id"],
                    row=current["row"],
                    col=current["col"],
                    xrange=current["xrange"],
                    yrange=current["yrange"],
                    series=tuple(current["series"]),
                    annotations=tuple(current["annotations"]),
                )
            )
            current = None
        else:
            if current is None:
                raise scan.error(f"{keyword} outside a panel", kw_col)
            if keyword == "series":
                kind, kcol = get("kind")
                if kind not in ("line", "bar", "scatter"):
                    raise scan.error(f"unknown series kind {kind!r}", kcol)
                vis, vcol = get("visible")
                if vis not in ("true", "false"):
                    raise scan.error("visible must be true or false", vcol)
                raw, col = get("points")
                current["series"].append(
                    Series(
                        id=get("id")[0],
                        kind=kind,
                        points=_points(raw, scan, col),
                        visible=vis == "true",
                    )
                )
            else:
                raw, col = get("at")
                x, y = _pair(raw, scan, col, parse_number)
                current["annotations"].append(
                    Annotation(id=get("id")[0], text=get("text", True)[0], x=x, y=y)
                )
    if header is None:
        raise ChartSyntaxError("empty program", max(last_line, 1), 1)
    if current is not None:
        raise ChartSyntaxError(f"panel {current['id']!r} is not closed", last_line, 1)
    rows, cols, title = header
    return validate(ChartSpec(grid_rows=rows, grid_cols=cols, panels=tuple(panels), title=title))


def serialize_chart(spec: ChartSpec) -> str:
    """Canonical text: fixed key order, one element per line."""
    lines = [f"chart grid={spec.grid_rows}x{spec.grid_cols}"]
    if spec.title is not None:
        lines[0] += f" title={_quote(spec.title)}"
    for p in spec.panels:
        lines.append(
            f"panel id={p.id} at={p.row},{p.col} "
            f"xrange={format_number(p.xrange[0])}..{format_number(p.xrange[1])} "
            f"yrange={format_number(p.yrange[0])}..{format_number(p.yrange[1])}"
        )
        for s in p.series:
            pts = "".join(f"({format_number(x)},{format_number(y)})" for x, y in s.points)
            lines.append(
                f"series id={s.id} kind={s.kind} visible={'true' if s.visible else 'false'} points={pts}"
            )
        for a in p.annotations:
            lines.append(
                f"annotate id={a.id} text={_quote(a.text)} at={format_number(a.x)},{format_number(a.y)}"
            )
        lines.append("end")
    return "\n".join(lines) + "\n"
