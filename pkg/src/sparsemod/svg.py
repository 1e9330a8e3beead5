"""Tiny string-based SVG writer. Output is deterministic for identical calls."""
from xml.sax.saxutils import escape


def _fmt(v):
    if isinstance(v, float):
        s = f"{v:.3f}".rstrip("0").rstrip(".")
        return "0" if s in ("-0", "") else s
    return str(v)


def _attrs(attrs):
    parts = []
    for k, v in attrs.items():
        if v is None:
            continue
        parts.append(f'{k.rstrip("_").replace("_", "-")}="{escape(_fmt(v), {chr(34): "&quot;"})}"')
    return " ".join(parts)


class Svg:
    def __init__(self, width, height):
        self.width = width
        self.height = height
        self.parts = []

    def _el(self, tag, **attrs):
        self.parts.append(f"<{tag} {_attrs(attrs)}/>")

    def open_group(self, id=None, title=None, **attrs):
        self.parts.append(f"<g {_attrs({'id': id, **attrs})}>")
        if title is not None:
            self.parts.append(f"<title>{escape(title)}</title>")

    def close_group(self):
        self.parts.append("</g>")

    def rect(self, x, y, w, h, **attrs):
        self._el("rect", x=float(x), y=float(y), width=float(w), height=float(h), **attrs)

    def circle(self, cx, cy, r, **attrs):
        self._el("circle", cx=float(cx), cy=float(cy), r=float(r), **attrs)

    def line(self, x1, y1, x2, y2, **attrs):
        self._el("line", x1=float(x1), y1=float(y1), x2=float(x2), y2=float(y2), **attrs)

    def polyline(self, points, **attrs):
        pts = " ".join(f"{_fmt(float(x))},{_fmt(float(y))}" for x, y in points)
        self._el("polyline", points=pts, fill="none", **attrs)

    def polygon(self, points, **attrs):
        pts = " ".join(f"{_fmt(float(x))},{_fmt(float(y))}" for x, y in points)
        self._el("polygon", points=pts, **attrs)

    def text(self, x, y, content, **attrs):
        self.parts.append(f"<text {_attrs({'x': float(x), 'y': float(y), **attrs})}>{escape(str(content))}</text>")

    def to_string(self):
        head = (
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">'
        )
        return "\n".join([head, *self.parts, "</svg>"]) + "\n"


def hex_color(rgb):
    r, g, b = (max(0, min(255, int(round(255 * c)))) for c in rgb)
    return f"#{r:02x}{g:02x}{b:02x}"


class Axes:
    """Maps data coordinates into a pixel box (y grows upward in data space)."""

    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim = _widen(xlim)
        self.ylim = _widen(ylim)

    def px(self, x, y):
        (a, b), (c, d) = self.xlim, self.ylim
        return (self.x0 + (x - a) / (b - a) * self.w, self.y0 + self.h - (y - c) / (d - c) * self.h)


def _widen(lim):
    lo, hi = float(lim[0]), float(lim[1])
    if hi - lo < 1e-12:
        pad = max(abs(lo), 1.0) * 0.5
        return lo - pad, hi + pad
    return lo, hi
