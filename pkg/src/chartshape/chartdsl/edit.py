"""Rule-based view editing on the AST.

Removed series become placeholders: they keep their id, kind and legend
slot but lose all geometry. Grid, panel positions and axis ranges are
never touched.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Literal

from .model import ChartSpec, ElementSelector, Series, validate

EditMode = Literal["preserve_selected", "ablate_selected"]


def placeholder(s: Series) -> Series:
    return replace(s, visible=False, points=())


def edit_remove_elements(spec: ChartSpec, selector: ElementSelector, mode: EditMode) -> ChartSpec:
    """Blank non-selected elements (preserve) or the selected ones (ablate)."""
    if mode not in ("preserve_selected", "ablate_selected"):
        raise ValueError(f"unknown edit mode {mode!r}")
    chosen = selector.resolve_series(spec)
    preserve = mode == "preserve_selected"
    panels = []
    for panel in spec.panels:
        series = tuple(
            s if (s.id in chosen) == preserve else placeholder(s) for s in panel.series
        )
        if preserve:
            # A panel nothing was selected from is blanked down to its axes.
            keep_panel = (
                panel.id in selector.panel_ids
                or any(s.id in chosen for s in panel.series)
                or not panel.visible_series()
            )
            notes = tuple(
                a for a in panel.annotations if keep_panel or a.id in selector.annotation_ids
            )
        else:
            notes = tuple(a for a in panel.annotations if a.id not in selector.annotation_ids)
        panels.append(replace(panel, series=series, annotations=notes))
    return validate(replace(spec, panels=tuple(panels)))


def visible_selector(spec: ChartSpec) -> ElementSelector:
    return ElementSelector.of(series=[s.id for _, s in spec.iter_series()])

