"""Bird's-eye-view SVG rendering of a frame with ground truth and detections."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Box7, bev_corners

POINT_COLOR = "#9a9a9a"
GT_COLOR = "#1f9e3a"
DET_COLOR = "#d62728"


@dataclass(frozen=True)
class BevView:
    """Affine map from the ground plane (x, z) to image pixels.

    Image x grows with world x; image y grows downward, so it runs against world z.
    """

    x_min: float = -40.0
    x_max: float = 40.0
    z_min: float = 0.0
    z_max: float = 70.0
    scale: float = 10.0  # pixels per metre
    margin: float = 30.0

    @property
    def size(self) -> tuple[int, int]:
        w = (self.x_max - self.x_min) * self.scale + 2 * self.margin
        h = (self.z_max - self.z_min) * self.scale + 2 * self.margin
        return int(round(w)), int(round(h))

    def to_pixels(self, xz: np.ndarray) -> np.ndarray:
        xz = np.asarray(xz, dtype=np.float64)
        u = self.margin + (xz[..., 0] - self.x_min) * self.scale
        v = self.margin + (self.z_max - xz[..., 1]) * self.scale
        return np.stack([u, v], axis=-1)


def _num(v: float) -> str:
    return f"{v:.2f}"


def _polygon(corners: np.ndarray, color: str) -> str:
    pts = " ".join(f"{_num(u)},{_num(v)}" for u, v in corners)
    return f'<polygon points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>'


def _heading(box: Box7, view: BevView, color: str) -> str:
    # short tick from the centre toward the front face
    c = np.array([box.x, box.z])
    front = c + 0.5 * box.l * np.array([np.cos(box.theta), -np.sin(box.theta)])
    (u0, v0), (u1, v1) = view.to_pixels(np.stack([c, front]))
    return f'<line x1="{_num(u0)}" y1="{_num(v0)}" x2="{_num(u1)}" y2="{_num(v1)}" stroke="{color}" stroke-width="1"/>'


def render_bev(
    points: np.ndarray | None,
    gts: list[Box7],
    dets: list[Box7],
    view: BevView | None = None,
    title: str = "",
) -> str:
    """SVG text. Output depends only on the inputs, so identical inputs give identical bytes."""
    view = view or BevView()
    W, H = view.size
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
    ]
    # axes through the sensor origin, with 10 m ticks
    (ou, ov), = view.to_pixels(np.array([[0.0, view.z_min]]))
    top = view.to_pixels(np.array([[0.0, view.z_max]]))[0]
    left = view.to_pixels(np.array([[view.x_min, view.z_min]]))[0]
    right = view.to_pixels(np.array([[view.x_max, view.z_min]]))[0]
    out.append(f'<g id="axes" stroke="black" stroke-width="1">')
    out.append(f'<line x1="{_num(left[0])}" y1="{_num(ov)}" x2="{_num(right[0])}" y2="{_num(ov)}"/>')
    out.append(f'<line x1="{_num(ou)}" y1="{_num(ov)}" x2="{_num(top[0])}" y2="{_num(top[1])}"/>')
    for x in np.arange(np.ceil(view.x_min / 10) * 10, view.x_max + 1e-9, 10.0):
        u = view.to_pixels(np.array([[x, view.z_min]]))[0, 0]
        out.append(f'<line x1="{_num(u)}" y1="{_num(ov)}" x2="{_num(u)}" y2="{_num(ov + 5)}"/>')
    for z in np.arange(np.ceil(view.z_min / 10) * 10, view.z_max + 1e-9, 10.0):
        v = view.to_pixels(np.array([[0.0, z]]))[0, 1]
        out.append(f'<line x1="{_num(ou - 5)}" y1="{_num(v)}" x2="{_num(ou)}" y2="{_num(v)}"/>')
    out.append("</g>")
    if title:
        out.append(f'<text x="{_num(view.margin)}" y="{_num(view.margin * 0.6)}" font-size="14">{title}</text>')

    out.append(f'<g id="points" fill="{POINT_COLOR}">')
    if points is not None and len(points):
        pts = np.asarray(points)[:, [0, 2]]
        inside = (
            (pts[:, 0] >= view.x_min) & (pts[:, 0] <= view.x_max) & (pts[:, 1] >= view.z_min) & (pts[:, 1] <= view.z_max)
        )
        for u, v in view.to_pixels(pts[inside]):
            out.append(f'<circle cx="{_num(u)}" cy="{_num(v)}" r="0.8"/>')
    out.append("</g>")

    for group, boxes, color in (("gt", gts, GT_COLOR), ("detections", dets, DET_COLOR)):
        out.append(f'<g id="{group}">')
        if boxes:
            for box, corners in zip(boxes, bev_corners(boxes)):
                out.append(_polygon(view.to_pixels(corners), color))
                out.append(_heading(box, view, color))
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def polygon_points(svg: str, group: str) -> list[np.ndarray]:
    """Parse the polygon vertices of one group back out of rendered SVG."""
    start = svg.index(f'<g id="{group}">')
    end = svg.index("</g>", start)
    polys = []
    for line in svg[start:end].splitlines():
        if line.startswith("<polygon"):
            pts = line.split('points="', 1)[1].split('"', 1)[0]
            polys.append(np.array([[float(a) for a in p.split(",")] for p in pts.split()]))
    return polys
