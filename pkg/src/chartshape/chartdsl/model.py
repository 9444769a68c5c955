"""Immutable AST for the chart language.

Coordinates are exact :class:`fractions.Fraction` values so that the
symbolic oracle never sees float error. Rasterization quantizes later.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

SERIES_KINDS = ("line", "bar", "scatter")
IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*\Z")


class ChartError(Exception):
    """Base class for every chart-language error."""


class ChartSyntaxError(ChartError):
    def __init__(self, message: str, line: int, column: int):
        self.line, self.column = line, column
        super().__init__(f"line {line}, column {column}: {message}")


class DuplicateId(ChartError):
    pass


class GridOverflow(ChartError):
    pass


class InvalidChart(ChartError):
    pass


class DanglingReference(ChartError):
    pass


Point = tuple[Fraction, Fraction]


@dataclass(frozen=True)
class Series:
    id: str
    kind: str
    points: tuple[Point, ...] = ()
    visible: bool = True

    @property
    def is_placeholder(self) -> bool:
        return not self.visible

    def value_at(self, x: Fraction) -> Fraction | None:
        for px, py in self.points:
            if px == x:
                return py
        return None


@dataclass(frozen=True)
class Annotation:
    id: str
    text: str
    x: Fraction
    y: Fraction


@dataclass(frozen=True)
class LegendEntry:
    series_id: str
    slot: int


@dataclass(frozen=True)
class Panel:
    id: str
    row: int
    col: int
    xrange: tuple[Fraction, Fraction]
    yrange: tuple[Fraction, Fraction]
    series: tuple[Series, ...] = ()
    annotations: tuple[Annotation, ...] = ()

    @property
    def legend(self) -> tuple[LegendEntry, ...]:
        # One slot per declared series, placeholders included.
        return tuple(LegendEntry(s.id, i) for i, s in enumerate(self.series))

    def visible_series(self) -> tuple[Series, ...]:
        return tuple(s for s in self.series if s.visible)


@dataclass(frozen=True)
class ChartSpec:
    grid_rows: int
    grid_cols: int
    panels: tuple[Panel, ...]
    title: str | None = None

    def iter_series(self) -> Iterator[tuple[Panel, Series]]:
        for panel in self.panels:
            for s in panel.series:
                yield panel, s

    def series_by_id(self) -> dict[str, Series]:
        return {s.id: s for _, s in self.iter_series()}

    def panel_by_id(self) -> dict[str, Panel]:
        return {p.id: p for p in self.panels}

    def panel_of_series(self) -> dict[str, Panel]:
        return {s.id: p for p, s in self.iter_series()}

    def series_slot(self, series_id: str) -> int:
        """Chart-wide index of a series in declaration order."""
        for i, (_, s) in enumerate(self.iter_series()):
            if s.id == series_id:
                return i
        raise DanglingReference(f"no series {series_id!r}")

    def layout(self) -> tuple:
        """Fields that view editing must never change."""
        return (
            self.grid_rows,
            self.grid_cols,
            tuple((p.id, p.row, p.col, p.xrange, p.yrange, len(p.legend)) for p in self.panels),
        )


@dataclass(frozen=True)
class ElementSelector:
    panel_ids: frozenset[str] = field(default_factory=frozenset)
    series_ids: frozenset[str] = field(default_factory=frozenset)
    annotation_ids: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def of(cls, panels=(), series=(), annotations=()) -> "ElementSelector":
        return cls(frozenset(panels), frozenset(series), frozenset(annotations))

    def resolve_series(self, spec: ChartSpec) -> frozenset[str]:
        """Series ids named directly or through a selected panel."""
        self.check(spec)
        out = set(self.series_ids)
        for p in spec.panels:
            if p.id in self.panel_ids:
                out.update(s.id for s in p.series)
        return frozenset(out)

    def check(self, spec: ChartSpec) -> None:
        panels = {p.id for p in spec.panels}
        series = {s.id for _, s in spec.iter_series()}
        annotations = {a.id for p in spec.panels for a in p.annotations}
        for kind, wanted, have in (
            ("panel", self.panel_ids, panels),
            ("series", self.series_ids, series),
            ("annotation", self.annotation_ids, annotations),
        ):
            missing = sorted(wanted - have)
            if missing:
                raise DanglingReference(f"unknown {kind} id(s): {', '.join(missing)}")


def is_finite_decimal(value: Fraction) -> bool:
    d = value.denominator
    for p in (2, 5):
        while d % p == 0:
            d //= p
    return d == 1


def validate(spec: ChartSpec) -> ChartSpec:
    """Check every structural invariant; return ``spec`` unchanged."""
    if spec.grid_rows < 1 or spec.grid_cols < 1:
        raise GridOverflow("grid dimensions must be positive")
    if not spec.panels:
        raise InvalidChart("a chart needs at least one panel")
    if len(spec.panels) > spec.grid_rows * spec.grid_cols:
        raise GridOverflow(
            f"{len(spec.panels)} panels do not fit a {spec.grid_rows}x{spec.grid_cols} grid"
        )
    seen_ids: set[str] = set()
    cells: set[tuple[int, int]] = set()

    def claim(ident: str) -> None:
        if not IDENT_RE.match(ident):
            raise InvalidChart(f"bad identifier {ident!r}")
        if ident in seen_ids:
            raise DuplicateId(f"duplicate id {ident!r}")
        seen_ids.add(ident)

    for panel in spec.panels:
        claim(panel.id)
        if not (0 <= panel.row < spec.grid_rows and 0 <= panel.col < spec.grid_cols):
            raise GridOverflow(f"panel {panel.id!r} at {panel.row},{panel.col} is outside the grid")
        if (panel.row, panel.col) in cells:
            raise GridOverflow(f"panel {panel.id!r} reuses cell {panel.row},{panel.col}")
        cells.add((panel.row, panel.col))
        for lo, hi in (panel.xrange, panel.yrange):
            if not lo < hi:
                raise InvalidChart(f"panel {panel.id!r} has a degenerate axis range")
        for s in panel.series:
            claim(s.id)
            if s.kind not in SERIES_KINDS:
                raise InvalidChart(f"series {s.id!r} has unknown kind {s.kind!r}")
            if s.kind == "line":
                xs = [x for x, _ in s.points]
                if xs != sorted(xs):
                    raise InvalidChart(f"line series {s.id!r} must be sorted by x")
            for x, y in s.points:
                if not (is_finite_decimal(x) and is_finite_decimal(y)):
                    raise InvalidChart(f"series {s.id!r} has a non-decimal coordinate")
        for a in panel.annotations:
            claim(a.id)
        if len(panel.legend) != len(panel.series):
            raise InvalidChart("legend/series count mismatch")
    return spec
