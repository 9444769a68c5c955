from __future__ import annotations

from fractions import Fraction

from chartshape.chartdsl import ChartSpec, Panel, Series


def F(v) -> Fraction:
    return Fraction(str(v))


def line(sid: str, ys, xs=None, kind: str = "line", visible: bool = True) -> Series:
    xs = range(len(ys)) if xs is None else xs
    return Series(sid, kind, tuple((F(x), F(y)) for x, y in zip(xs, ys)), visible)


def panel(pid: str, *series: Series, row: int = 0, col: int = 0, xr=(0, 4), yr=(0, 10), notes=()) -> Panel:
    return Panel(pid, row, col, (F(xr[0]), F(xr[1])), (F(yr[0]), F(yr[1])), tuple(series), tuple(notes))


def chart(*panels: Panel, rows: int = 1, cols: int = 1, title: str | None = None) -> ChartSpec:
    return ChartSpec(rows, cols, tuple(panels), title)
