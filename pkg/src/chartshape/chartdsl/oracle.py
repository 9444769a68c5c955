"""Symbolic answering of template questions against a chart AST.

The oracle is the rule-based arbitrator: it proves a multiple-choice
question either *determined* (exactly one option is supported by the
visible data) or *undetermined* (evidence missing, tie, or no unique
matching option). Ties are exact rational equality.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .model import ChartError, ChartSpec, DanglingReference, Series
from .syntax import format_number, parse_number

TEMPLATES = (
    "value_lookup",
    "compare_at_x",
    "series_max",
    "count_crossings",
    "trend_sign",
    "panel_compare",
)
TREND_LABELS = ("increasing", "decreasing", "flat", "mixed")


class UnknownTemplate(ChartError):
    pass


@dataclass(frozen=True)
class Question:
    template: str
    series_ids: tuple[str, ...] = ()
    panel_ids: tuple[str, ...] = ()
    x: Fraction | None = None
    text: str = ""
    options: tuple[str, ...] = ()
    answer_index: int = 0

    def params(self) -> dict:
        return {
            "series": list(self.series_ids),
            "panels": list(self.panel_ids),
            "x": None if self.x is None else format_number(self.x),
        }


@dataclass(frozen=True)
class Verdict:
    index: int | None = None

    @property
    def determined(self) -> bool:
        return self.index is not None

    def __repr__(self) -> str:
        return "Undetermined" if self.index is None else f"Determined({self.index})"


UNDETERMINED = Verdict(None)


def Determined(index: int) -> Verdict:
    return Verdict(index)


class _Missing(Exception):
    """Internal: required evidence is absent or the comparison is tied."""


def _series(spec: ChartSpec, q: Question, count: int) -> list[Series]:
    if len(q.series_ids) != count:
        raise DanglingReference(f"{q.template} needs {count} series, got {len(q.series_ids)}")
    table = spec.series_by_id()
    out = []
    for sid in q.series_ids:
        if sid not in table:
            raise DanglingReference(f"no series {sid!r}")
        s = table[sid]
        if not s.visible or not s.points:
            raise _Missing
        out.append(s)
    return out


def _value(s: Series, x: Fraction | None) -> Fraction:
    if x is None:
        raise DanglingReference("question needs an x value")
    v = s.value_at(x)
    if v is None:
        raise _Missing
    return v


def _strict_max(a: Fraction, b: Fraction) -> Fraction:
    if a == b:
        raise _Missing
    return max(a, b)


def crossing_count(a: Series, b: Series) -> int | None:
    """Sign changes of ``a - b`` over the shared x-interval.

    Both are treated as piecewise-linear curves. ``None`` when the
    curves touch at a breakpoint or do not overlap, since the count is
    then ambiguous on a rendered chart.
    """
    if len(a.points) < 2 or len(b.points) < 2:
        return None
    lo = max(a.points[0][0], b.points[0][0])
    hi = min(a.points[-1][0], b.points[-1][0])
    if not lo < hi:
        return None
    xs = sorted({x for x, _ in a.points + b.points if lo <= x <= hi} | {lo, hi})
    signs = []
    for x in xs:
        d = _interp(a, x) - _interp(b, x)
        if d == 0:
            return None
        signs.append(d > 0)
    return sum(1 for s, t in zip(signs, signs[1:]) if s != t)


def _interp(s: Series, x: Fraction) -> Fraction:
    pts = s.points
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 <= x <= x1:
            if x1 == x0:
                return y0
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    raise ValueError("x outside series domain")


def trend_label(s: Series) -> str:
    ys = [y for _, y in sorted(s.points)]
    steps = [b - a for a, b in zip(ys, ys[1:])]
    if all(d > 0 for d in steps):
        return "increasing"
    if all(d < 0 for d in steps):
        return "decreasing"
    if all(d == 0 for d in steps):
        return "flat"
    return "mixed"


def panel_peak(spec: ChartSpec, panel_id: str) -> Fraction:
    panels = spec.panel_by_id()
    if panel_id not in panels:
        raise DanglingReference(f"no panel {panel_id!r}")
    ys = [y for s in panels[panel_id].visible_series() for _, y in s.points]
    if not ys:
        raise _Missing
    return max(ys)


def true_answer(spec: ChartSpec, q: Question):
    """The template's answer value on ``spec``; ``None`` if undetermined."""
    try:
        return _answer(spec, q)
    except _Missing:
        return None


def _answer(spec: ChartSpec, q: Question):
    t = q.template
    if t == "value_lookup":
        (a,) = _series(spec, q, 1)
        return _value(a, q.x)
    if t == "compare_at_x":
        a, b = _series(spec, q, 2)
        return _strict_max(_value(a, q.x), _value(b, q.x))
    if t == "series_max":
        (a,) = _series(spec, q, 1)
        return max(y for _, y in a.points)
    if t == "count_crossings":
        a, b = _series(spec, q, 2)
        n = crossing_count(a, b)
        if n is None:
            raise _Missing
        return n
    if t == "trend_sign":
        (a,) = _series(spec, q, 1)
        if len(a.points) < 2:
            raise _Missing
        return trend_label(a)
    if t == "panel_compare":
        if len(q.panel_ids) != 2:
            raise DanglingReference("panel_compare needs two panels")
        p1, p2 = (panel_peak(spec, pid) for pid in q.panel_ids)
        return _strict_max(p1, p2)
    raise UnknownTemplate(t)


def _option_value(template: str, text: str):
    if template == "trend_sign":
        return text
    try:
        value = parse_number(text)
    except ValueError:
        return None
    return int(value) if template == "count_crossings" and value.denominator == 1 else value


def oracle_answer(spec: ChartSpec, q: Question) -> Verdict:
    """Determined(k) iff the visible data selects option ``k`` uniquely."""
    if q.template not in TEMPLATES:
        raise UnknownTemplate(q.template)
    answer = true_answer(spec, q)
    if answer is None:
        return UNDETERMINED
    hits = [i for i, opt in enumerate(q.options) if _option_value(q.template, opt) == answer]
    return Determined(hits[0]) if len(hits) == 1 else UNDETERMINED
