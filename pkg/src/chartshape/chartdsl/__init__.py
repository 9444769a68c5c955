"""A small declarative chart language with exact provenance."""

from .edit import edit_remove_elements, placeholder
from .model import (
    Annotation,
    ChartError,
    ChartSpec,
    ChartSyntaxError,
    DanglingReference,
    DuplicateId,
    ElementSelector,
    GridOverflow,
    InvalidChart,
    LegendEntry,
    Panel,
    Series,
    validate,
)
from .oracle import (
    TEMPLATES,
    TREND_LABELS,
    UNDETERMINED,
    Determined,
    Question,
    UnknownTemplate,
    Verdict,
    crossing_count,
    oracle_answer,
    true_answer,
)
from .syntax import format_number, parse_chart, parse_number, serialize_chart

__all__ = [
    "Annotation",
    "ChartError",
    "ChartSpec",
    "ChartSyntaxError",
    "DanglingReference",
    "Determined",
    "DuplicateId",
    "ElementSelector",
    "GridOverflow",
    "InvalidChart",
    "LegendEntry",
    "Panel",
    "Question",
    "Series",
    "TEMPLATES",
    "TREND_LABELS",
    "UNDETERMINED",
    "UnknownTemplate",
    "Verdict",
    "crossing_count",
    "edit_remove_elements",
    "format_number",
    "oracle_answer",
    "parse_chart",
    "parse_number",
    "placeholder",
    "serialize_chart",
    "true_answer",
    "validate",
]
