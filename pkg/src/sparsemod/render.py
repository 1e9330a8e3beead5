"""SVG frames of the training state and the metrics figure.

A frame has eight panels when d == 2 and two (attention, metrics) otherwise.
Markers: circles for prefix positions t <= k, squares for spurious ones.
"""
import colorsys
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import TooFewRows
from .svg import Axes, Svg, hex_color

PANELS_2D = (
    "position-embeddings",
    "normalized-embeddings",
    "attention-map",
    "value-transform",
    "sequence-embeddings",
    "level-lines",
    "mlp-weights",
    "metrics",
)
PANELS_ND = ("attention-map", "metrics")
PANEL_TITLES = {
    "position-embeddings": "Position embeddings",
    "normalized-embeddings": "Normalized embeddings and query",
    "attention-map": "Attention map",
    "value-transform": "Value transform VZ(x, t)",
    "sequence-embeddings": "Sequence embeddings",
    "level-lines": "Transform level lines",
    "mlp-weights": "MLP receptors and assemblers",
    "metrics": "Loss and accuracy",
}


def class_palette(n):
    """``n`` well-separated colours (golden-angle hues), fixed per index."""
    out = []
    for i in range(n):
        hue = (i * 0.381966) % 1.0
        out.append(hex_color(colorsys.hsv_to_rgb(hue, 0.75, 0.85)))
    return out


def output_anchors(p):
    """Anchor colour per output class, evenly spaced around the colour wheel."""
    return np.array([colorsys.hsv_to_rgb(v / p, 1.0, 1.0) for v in range(p)])


def mu_to_rgb(mu):
    """Mix class anchors by probability; brighter when the prediction is confident."""
    mu = np.asarray(mu, dtype=np.float64)
    p = mu.shape[-1]
    rgb = mu @ output_anchors(p)
    conf = (mu.max(axis=-1, keepdims=True) - 1.0 / p) / (1.0 - 1.0 / p)
    return rgb * (0.35 + 0.65 * conf)


@dataclass
class FrameLayout:
    k: int
    L: int
    probe_classes: list
    probe_targets: np.ndarray = None
    history: list = field(default_factory=list)   # metric dicts up to and past the frame
    panel: int = 220
    cols: int = 4
    grid: int = 64
    smoothed: bool = False

    @classmethod
    def from_probe(cls, probe, **kw):
        return cls(probe.spec.k, probe.spec.L, list(probe.classes), np.asarray(probe.targets), **kw)

    def class_colors(self):
        order = {}
        for c in self.probe_classes:
            order.setdefault(tuple(c), len(order))
        palette = class_palette(len(order))
        return [palette[order[tuple(c)]] for c in self.probe_classes]


def _bbox(points, pad=0.2):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    return lo - pad * span, hi + pad * span


def _square_axes(x0, y0, size, points, pad=0.2):
    lo, hi = _bbox(points, pad)
    half = max(hi[0] - lo[0], hi[1] - lo[1]) / 2
    cx, cy = (lo + hi) / 2
    return Axes(x0, y0, size, size, (cx - half, cx + half), (cy - half, cy + half))


def _marker(svg, ax, x, y, spurious, fill, size=4.0, **attrs):
    px, py = ax.px(x, y)
    if spurious:
        svg.rect(px - size, py - size, 2 * size, 2 * size, fill=fill, stroke="#222", stroke_width=0.5, **attrs)
    else:
        svg.circle(px, py, size, fill=fill, stroke="#222", stroke_width=0.5, **attrs)


def _frame_box(svg, x0, y0, size, title):
    svg.rect(x0, y0, size, size, fill="#ffffff", stroke="#999", stroke_width=0.5)
    svg.text(x0 + 4, y0 + 12, title, font_size=10, font_family="sans-serif")


def _inner(x0, y0, size):
    return x0 + 10, y0 + 18, size - 20


def _panel_positions(svg, snap, layout, x0, y0, size):
    P = snap.params.P
    E = snap.params.E
    ix, iy, isz = _inner(x0, y0, size)
    ax = _square_axes(ix, iy, isz, np.vstack([P, E, [[0.0, 0.0]]]))
    for t, (x, y) in enumerate(P):
        _marker(svg, ax, x, y, t >= layout.k, "#4477aa", class_="pos-marker", data_t=t + 1)
    for v, (x, y) in enumerate(E):
        px, py = ax.px(x, y)
        svg.polygon([(px, py - 5), (px - 4.5, py + 3.5), (px + 4.5, py + 3.5)], fill="#cc6677",
                    class_="tok-marker", data_v=v)
        svg.text(px + 5, py - 5, str(v), font_size=8)


def _all_pairs_z(params, L, smoothed):
    a = params.E[:, None, :] + params.P[None, :, :]      # (p, L, d)
    return nx.smoothed_normalize(a) if smoothed else nx.normalize(a)


def _panel_normalized(svg, snap, layout, x0, y0, size):
    z = _all_pairs_z(snap.params, layout.L, layout.smoothed)
    q = snap.params.q
    qn = q / max(np.linalg.norm(q), 1e-12)
    ix, iy, isz = _inner(x0, y0, size)
    ax = Axes(ix, iy, isz, isz, (-1.3, 1.3), (-1.3, 1.3))
    cx, cy = ax.px(0, 0)
    svg.circle(cx, cy, ax.px(1, 0)[0] - cx, fill="none", stroke="#ccc")
    pal = class_palette(z.shape[0])
    for v in range(z.shape[0]):
        for t in range(z.shape[1]):
            _marker(svg, ax, z[v, t, 0], z[v, t, 1], t >= layout.k, pal[v], size=3.0)
    tx, ty = ax.px(qn[0], qn[1])
    svg.line(cx, cy, tx, ty, stroke="#000", stroke_width=1.5, class_="query-arrow")
    svg.circle(tx, ty, 2.0, fill="#000")


def _panel_attention(svg, snap, layout, x0, y0, size):
    attn = np.asarray(snap.probe["attn"])
    ix, iy, isz = _inner(x0, y0, size)
    n, L = attn.shape if attn.ndim == 2 else (0, layout.L)
    if n == 0:
        return
    cw, ch = isz / L, isz / n
    for i in range(n):
        for t in range(L):
            a = float(attn[i, t])
            shade = hex_color((1 - a, 1 - a * 0.6, 1.0))
            svg.rect(ix + t * cw, iy + i * ch, cw, ch, fill=shade, class_="attn-cell",
                     data_row=i, data_col=t, data_value=repr(a))
    kx = ix + layout.k * cw
    svg.line(kx, iy, kx, iy + isz, stroke="#c00", stroke_width=0.8)


def _panel_value(svg, snap, layout, x0, y0, size):
    z = _all_pairs_z(snap.params, layout.L, layout.smoothed)
    vz = z @ snap.params.V.T
    ix, iy, isz = _inner(x0, y0, size)
    ax = _square_axes(ix, iy, isz, np.vstack([vz.reshape(-1, 2), [[0.0, 0.0]]]))
    pal = class_palette(vz.shape[0])
    for v in range(vz.shape[0]):
        for t in range(vz.shape[1]):
            _marker(svg, ax, vz[v, t, 0], vz[v, t, 1], t >= layout.k, pal[v], size=3.0)


def _panel_sequences(svg, snap, layout, x0, y0, size):
    xi = np.asarray(snap.probe["xi"])
    ix, iy, isz = _inner(x0, y0, size)
    ax = _square_axes(ix, iy, isz, xi)
    for (x, y), col, c in zip(xi, layout.class_colors(), layout.probe_classes):
        px, py = ax.px(x, y)
        svg.circle(px, py, 3.0, fill=col, stroke="#222", stroke_width=0.3, class_="xi-point",
                   data_class="-".join(map(str, c)))


def _mlp_head(params, xi, smoothed):
    proj = nx.smoothed_normalize if smoothed else nx.normalize
    psi = xi + nx.gelu(proj(xi) @ params.W.T) @ params.U.T
    return nx.softmax(psi @ params.E.T, axis=-1)


def _panel_levels(svg, snap, layout, x0, y0, size):
    xi = np.asarray(snap.probe["xi"])
    ix, iy, isz = _inner(x0, y0, size)
    ax = _square_axes(ix, iy, isz, xi, pad=0.2)
    g = layout.grid
    xs = np.linspace(*ax.xlim, g)
    ys = np.linspace(*ax.ylim, g)
    gx, gy = np.meshgrid(xs, ys)
    mu = _mlp_head(snap.params, np.stack([gx.ravel(), gy.ravel()], axis=1), layout.smoothed)
    rgb = mu_to_rgb(mu).reshape(g, g, 3)
    cell = isz / g
    for r in range(g):
        for c in range(g):
            svg.rect(ix + c * cell, iy + isz - (r + 1) * cell, cell + 0.05, cell + 0.05,
                     fill=hex_color(rgb[r, c]), stroke="none")
    for (x, y) in xi:
        px, py = ax.px(x, y)
        svg.circle(px, py, 1.8, fill="#fff", stroke="#000", stroke_width=0.4)


def _panel_mlp(svg, snap, layout, x0, y0, size):
    W, U = snap.params.W, snap.params.U
    ix, iy, isz = _inner(x0, y0, size)
    ax = _square_axes(ix, iy, isz, np.vstack([W, U.T, [[0.0, 0.0]]]))
    cx, cy = ax.px(0, 0)
    for w in W:
        px, py = ax.px(*w)
        svg.line(cx, cy, px, py, stroke="#228833", stroke_width=0.6, class_="receptor")
    for u in U.T:
        px, py = ax.px(*u)
        svg.line(cx, cy, px, py, stroke="#aa3377", stroke_width=0.6, class_="assembler")


def _series(rows, key):
    return np.array([float(r[key]) for r in rows])


def _panel_metrics(svg, snap, layout, x0, y0, size):
    ix, iy, isz = _inner(x0, y0, size)
    m = snap.metrics
    lines = [
        f"epoch {snap.epoch}",
        f"train loss {m.get('train_loss', float('nan')):.4f}",
        f"test loss {m.get('test_loss', float('nan')):.4f}",
        f"train acc {m.get('train_acc', float('nan')):.3f}",
        f"test acc {m.get('test_acc', float('nan')):.3f}",
    ]
    for i, s in enumerate(lines):
        svg.text(ix, iy + 10 + 11 * i, s, font_size=9, font_family="monospace")
    hist = [r for r in layout.history if r["epoch"] <= snap.epoch]
    if len(hist) < 2:
        return
    top = iy + 70
    h = isz - 70
    ep = _series(hist, "epoch")
    max_epoch = max(r["epoch"] for r in layout.history)
    loss_hi = max(max(_series(layout.history, "train_loss")), max(_series(layout.history, "test_loss")), 1e-9)
    ax = Axes(ix, top, isz, h, (0, max(max_epoch, 1)), (0, loss_hi))
    acc = Axes(ix, top, isz, h, (0, max(max_epoch, 1)), (0, 1))
    for key, color, axes in (("train_loss", "#4477aa", ax), ("test_loss", "#66ccee", ax),
                             ("train_acc", "#228833", acc), ("test_acc", "#ccbb44", acc)):
        svg.polyline([axes.px(e, v) for e, v in zip(ep, _series(hist, key))], stroke=color,
                     stroke_width=1.0, class_=key)


_PANEL_FUNCS = {
    "position-embeddings": _panel_positions,
    "normalized-embeddings": _panel_normalized,
    "attention-map": _panel_attention,
    "value-transform": _panel_value,
    "sequence-embeddings": _panel_sequences,
    "level-lines": _panel_levels,
    "mlp-weights": _panel_mlp,
    "metrics": _panel_metrics,
}


def render_frame(snapshot, layout):
    """One SVG document for a snapshot; a pure function of its inputs."""
    panels = PANELS_2D if snapshot.params.d == 2 else PANELS_ND
    size = layout.panel
    cols = min(layout.cols, len(panels))
    rows = math.ceil(len(panels) / cols)
    svg = Svg(cols * size + 10, rows * size + 30)
    svg.text(6, 16, f"epoch {snapshot.epoch}", font_size=12, font_family="sans-serif")
    for i, name in enumerate(panels):
        x0 = 5 + (i % cols) * size
        y0 = 24 + (i // cols) * size
        svg.open_group(id=name, title=PANEL_TITLES[name], class_="panel")
        _frame_box(svg, x0, y0, size - 6, PANEL_TITLES[name])
        _PANEL_FUNCS[name](svg, snapshot, layout, x0, y0, size - 6)
        svg.close_group()
    return svg.to_string()


METRIC_PLOTS = ("loss", "accuracy", "grad-norms-log", "grad-norms-linear")
GRAD_KEYS = ("grad_E", "grad_P", "grad_q", "grad_V", "grad_W", "grad_U")
GRAD_COLORS = dict(zip(GRAD_KEYS, ("#4477aa", "#66ccee", "#228833", "#ccbb44", "#ee6677", "#aa3377")))


def _metric_rows(source):
    rows = getattr(source, "snapshots", source)
    out = []
    for r in rows:
        if hasattr(r, "metrics") and isinstance(r.metrics, dict):
            out.append(dict(r.metrics, epoch=r.epoch))
        elif hasattr(r, "to_dict"):
            out.append(r.to_dict())
        else:
            out.append(dict(r))
    return out


def render_metrics(source, width=720, plot_height=160):
    """Loss, accuracy and per-layer gradient norms (log and linear) on a shared epoch axis.

    ``source`` is a run log, a list of snapshots, or a list of metric rows.
    """
    rows = _metric_rows(source)
    if len(rows) < 2:
        raise TooFewRows(f"need at least 2 rows to plot metrics, got {len(rows)}")
    ep = _series(rows, "epoch")
    xlim = (float(ep.min()), float(ep.max()))
    svg = Svg(width, 4 * plot_height + 40)
    left, plot_w = 50, width - 70
    for i, name in enumerate(METRIC_PLOTS):
        y0 = 20 + i * plot_height
        h = plot_height - 25
        svg.open_group(id=name, class_="subplot")
        svg.rect(left, y0, plot_w, h, fill="#fff", stroke="#999", stroke_width=0.5)
        svg.text(left + 4, y0 + 11, name, font_size=10, font_family="sans-serif")
        if name == "loss":
            series = {"train_loss": "#4477aa", "test_loss": "#66ccee"}
            data = {k: _series(rows, k) for k in series}
            ylim = (0.0, max(float(np.max(v)) for v in data.values()))
        elif name == "accuracy":
            series = {"train_acc": "#228833", "test_acc": "#ccbb44"}
            data = {k: _series(rows, k) for k in series}
            ylim = (0.0, 1.0)
        else:
            series = GRAD_COLORS
            data = {k: _series(rows, k) for k in series}
            if name == "grad-norms-log":
                pos = np.concatenate([v[v > 0] for v in data.values()])
                floor = float(pos.min()) if pos.size else 1e-12
                data = {k: np.log10(np.maximum(v, floor)) for k, v in data.items()}
            lo = min(float(np.min(v)) for v in data.values())
            hi = max(float(np.max(v)) for v in data.values())
            ylim = (lo if name == "grad-norms-log" else 0.0, hi)
        ax = Axes(left, y0, plot_w, h, xlim, ylim)
        for key, color in series.items():
            svg.polyline([ax.px(e, v) for e, v in zip(ep, data[key])], stroke=color,
                         stroke_width=1.0, class_=key)
        svg.text(left - 45, y0 + 10, f"{ylim[1]:.3g}", font_size=8)
        svg.text(left - 45, y0 + h, f"{ylim[0]:.3g}", font_size=8)
        svg.close_group()
    svg.text(left, 4 * plot_height + 30, f"epoch {xlim[0]:g} .. {xlim[1]:g}", font_size=9)
    return svg.to_string()
