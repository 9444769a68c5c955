"""Deterministic grayscale rasterizer for chart ASTs, plus PGM I/O.

No anti-aliasing: every mark is drawn with integer midpoint lines, and
coordinates go through exact rational arithmetic before the final
rounding, so output is byte-identical on every platform.
"""

from __future__ import annotations

import math
import os
import random
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .chartdsl import ChartSpec, Panel

BACKGROUND = 255


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    width: int
    height: int
    pixels: bytes

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ShapeError("image dimensions must be positive")
        if len(self.pixels) != self.width * self.height:
            raise ShapeError(
                f"{len(self.pixels)} pixels for a {self.width}x{self.height} image"
            )

    @classmethod
    def blank(cls, width: int = 64, height: int = 64) -> "Image":
        return cls(width, height, bytes([BACKGROUND]) * (width * height))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Image":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ShapeError("expected a 2-D array")
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise ShapeError("intensities must lie in [0, 255]")
        return cls(arr.shape[1], arr.shape[0], arr.astype(np.uint8).tobytes())

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width)

    def __getitem__(self, rc: tuple[int, int]) -> int:
        r, c = rc
        return self.pixels[r * self.width + c]


@dataclass(frozen=True)
class RenderConfig:
    width: int = 64
    height: int = 64
    margin: int = 4
    stroke_levels: tuple[int, ...] = (0, 60, 120, 170)
    axis_intensity: int = 200
    annotation_intensity: int = 90

    def stroke_intensity(self, slot: int) -> int:
        return self.stroke_levels[slot % len(self.stroke_levels)]

    def check(self, spec: ChartSpec | None = None) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image dimensions must be positive")
        if not self.margin < min(self.width, self.height) / 2:
            raise ConfigError(f"margin {self.margin} too large for {self.width}x{self.height}")
        if self.margin < 3:
            raise ConfigError("margin must leave room for the axis and legend rows")
        for v in (*self.stroke_levels, self.axis_intensity, self.annotation_intensity):
            if not 0 <= v < BACKGROUND:
                raise ConfigError(f"ink intensity {v} must lie in [0, 255)")
        if spec is not None:
            cw, ch = self.width // spec.grid_cols, self.height // spec.grid_rows
            if not self.margin < min(cw, ch) / 2:
                raise ConfigError(
                    f"margin {self.margin} too large for {spec.grid_rows}x{spec.grid_cols} cells"
                )


@dataclass(frozen=True)
class PanelBox:
    """Pixel geometry of one panel cell; bounds are inclusive."""

    x0: int
    y0: int
    cell_w: int
    cell_h: int
    margin: int

    @property
    def left(self) -> int:
        return self.x0 + self.margin

    @property
    def right(self) -> int:
        return self.x0 + self.cell_w - 2

    @property
    def top(self) -> int:
        return self.y0 + 1

    @property
    def bottom(self) -> int:
        return self.y0 + self.cell_h - self.margin - 1

    @property
    def legend_row(self) -> int:
        return self.y0 + self.cell_h - 2

    def contains(self, row: int, col: int) -> bool:
        return self.top <= row <= self.bottom and self.left <= col <= self.right


def panel_box(spec: ChartSpec, panel: Panel, cfg: RenderConfig) -> PanelBox:
    cw, ch = cfg.width // spec.grid_cols, cfg.height // spec.grid_rows
    return PanelBox(panel.col * cw, panel.row * ch, cw, ch, cfg.margin)


def data_mask(spec: ChartSpec, cfg: RenderConfig) -> np.ndarray:
    """Boolean (height, width) mask of every panel's data region."""
    mask = np.zeros((cfg.height, cfg.width), dtype=bool)
    for p in spec.panels:
        b = panel_box(spec, p, cfg)
        mask[b.top : b.bottom + 1, b.left : b.right + 1] = True
    return mask


def _round_half_up(v: Fraction) -> int:
    return math.floor(v + Fraction(1, 2))


def _clamp(v: int, lo: int, hi: int) -> int:
    return lo if v < lo else hi if v > hi else v


def to_pixel(panel: Panel, box: PanelBox, x: Fraction, y: Fraction) -> tuple[int, int]:
    """Map data coordinates to a (row, col) inside the panel's data region."""
    (xlo, xhi), (ylo, yhi) = panel.xrange, panel.yrange
    col = box.left + _round_half_up((Fraction(x) - xlo) * (box.right - box.left) / (xhi - xlo))
    row = box.bottom - _round_half_up((Fraction(y) - ylo) * (box.bottom - box.top) / (yhi - ylo))
    return _clamp(row, box.top, box.bottom), _clamp(col, box.left, box.right)


def midpoint_line(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Integer midpoint (Bresenham) line, endpoints included, any octant."""
    out = []
    dc, dr = abs(c1 - c0), -abs(r1 - r0)
    sc = 1 if c0 < c1 else -1
    sr = 1 if r0 < r1 else -1
    err = dc + dr
    r, c = r0, c0
    while True:
        out.append((r, c))
        if r == r1 and c == c1:
            return out
        e2 = 2 * err
        if e2 >= dr:
            err += dr
            c += sc
        if e2 <= dc:
            err += dc
            r += sr


class _Canvas:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.buf = bytearray([BACKGROUND]) * (width * height)

    def put(self, r: int, c: int, v: int) -> None:
        if 0 <= r < self.height and 0 <= c < self.width:
            self.buf[r * self.width + c] = v


def _draw_panel(canvas: _Canvas, spec: ChartSpec, panel: Panel, cfg: RenderConfig) -> None:
    box = panel_box(spec, panel, cfg)
    axis_col, axis_row = box.left - 1, box.bottom + 1
    for r in range(box.top, axis_row + 1):
        canvas.put(r, axis_col, cfg.axis_intensity)
    for c in range(axis_col, box.right + 1):
        canvas.put(axis_row, c, cfg.axis_intensity)
    # Legend handles survive blanking: one 2-px stamp per declared slot.
    for entry in panel.legend:
        c = box.left + 3 * entry.slot
        if c + 1 <= box.right:
            ink = cfg.stroke_intensity(entry.slot)
            canvas.put(box.legend_row, c, ink)
            canvas.put(box.legend_row, c + 1, ink)

    for slot, s in enumerate(panel.series):
        if not s.visible:
            continue
        ink = cfg.stroke_intensity(slot)
        pix = [to_pixel(panel, box, x, y) for x, y in s.points]
        if s.kind == "line":
            if len(pix) == 1:
                canvas.put(*pix[0], ink)
            for (r0, c0), (r1, c1) in zip(pix, pix[1:]):
                for r, c in midpoint_line(r0, c0, r1, c1):
                    canvas.put(r, c, ink)
        elif s.kind == "bar":
            ylo, yhi = panel.yrange
            base = min(max(Fraction(0), ylo), yhi)
            for (x, _), (r, c) in zip(s.points, pix):
                r_base, _ = to_pixel(panel, box, x, base)
                for rr, cc in midpoint_line(r_base, c, r, c):
                    canvas.put(rr, cc, ink)
        else:
            for r, c in pix:
                for dr, dc in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
                    if box.contains(r + dr, c + dc):
                        canvas.put(r + dr, c + dc, ink)

    for a in panel.annotations:
        r, c = to_pixel(panel, box, a.x, a.y)
        for dr in (0, 1):
            for dc in (0, 1):
                if box.contains(r + dr, c + dc):
                    canvas.put(r + dr, c + dc, cfg.annotation_intensity)


def rasterize(spec: ChartSpec, cfg: RenderConfig = RenderConfig()) -> Image:
    """Render every panel (blanked ones keep axes and legend handles)."""
    cfg.check(spec)
    canvas = _Canvas(cfg.width, cfg.height)
    for panel in spec.panels:
        _draw_panel(canvas, spec, panel, cfg)
    return Image(cfg.width, cfg.height, bytes(canvas.buf))


def mask_patches(img: Image, fraction: float, patch: int, seed: int) -> Image:
    """Blank ``floor(fraction * n_patches)`` square patches chosen without replacement."""
    if patch <= 0 or img.width % patch or img.height % patch:
        raise ShapeError(f"{img.width}x{img.height} is not divisible by patch {patch}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    pc, pr = img.width // patch, img.height // patch
    total = pc * pr
    n = math.floor(fraction * total)
    chosen = random.Random(seed).sample(range(total), n)
    arr = img.to_array().copy()
    for k in chosen:
        r, c = divmod(k, pc)
        arr[r * patch : (r + 1) * patch, c * patch : (c + 1) * patch] = BACKGROUND
    return Image.from_array(arr)


def write_pgm(img: Image, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(img.pixels)


def read_pgm(path: str | os.PathLike, *, opener=open) -> Image:
    with opener(path, "rb") as fh:
        data = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"unsupported magic {tokens[0]!r}; only binary P5 is read")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric PGM header field") from None
    if maxval != 255:
        raise FormatError(f"maxval {maxval} != 255")
    body = data[pos + 1 :]
    if len(body) != width * height:
        raise FormatError(f"expected {width * height} pixel bytes, found {len(body)}")
    return Image(width, height, bytes(body))
