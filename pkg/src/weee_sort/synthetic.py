"""Procedurally drawn stand-in dataset for exercising the pipeline end to end.

Every class gets its own shape and texture family so a small classifier can
tell them apart:

* battery      striped rounded rectangle, dark blue-gray
* pcb          green plate with a grid of drilled holes
* glass        bright pane with a diagonal gloss gradient
* metal_piece  irregular solid metallic-gray blob

Polygons are emitted in the annotation-file schema with the exact vertices
that were rasterized.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .geometry import BACKGROUNDS, CLASSES, Polygon, convex_hull
from .io import atomic_write_text

BACKGROUND_RGB = {"gray": (128, 128, 128), "black": (12, 12, 12), "white": (243, 243, 243)}


@dataclass(frozen=True)
class SyntheticSpec:
    counts: dict[str, int]
    image_size: int = 256
    seed: int = 0
    backgrounds: tuple[str, ...] = field(default=BACKGROUNDS)

    def __post_init__(self):
        if any(n < 0 for n in self.counts.values()):
            raise ValueError("synthetic class counts must be >= 0")
        unknown = set(self.counts) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown synthetic classes {sorted(unknown)}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if not self.backgrounds or set(self.backgrounds) - set(BACKGROUNDS):
            raise ValueError(f"backgrounds must be drawn from {BACKGROUNDS}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(dict(d["counts"]), int(d.get("image_size", 256)), int(d.get("seed", 0)),
                   tuple(d.get("backgrounds", BACKGROUNDS)))

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "image_size": self.image_size, "seed": self.seed,
                "backgrounds": list(self.backgrounds)}


def _rounded_rect(hw, hh, r, per_corner=4):
    pts = []
    for cx, cy, a0 in ((hw - r, hh - r, 0), (-hw + r, hh - r, 90),
                       (-hw + r, -hh + r, 180), (hw - r, -hh + r, 270)):
        for k in range(per_corner + 1):
            a = math.radians(a0 + 90 * k / per_corner)
            pts.append((cx + r * math.cos(a), cy + r * math.sin(a)))
    return pts


def _outline(cls, rng, size):
    """Polygon in the component's local frame (centered, unrotated)."""
    if cls == "battery":
        hw = size / 2
        hh = hw / rng.uniform(1.6, 2.2)
        return _rounded_rect(hw, hh, 0.25 * hh)
    if cls == "pcb":
        hw = size / 2
        hh = hw / rng.uniform(1.0, 1.4)
        return [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
    if cls == "glass":
        hw = size / 2
        hh = hw / rng.uniform(1.3, 1.8)
        j = rng.uniform(-0.08, 0.08, size=(4, 2)) * size
        return [(-hw + j[0, 0], -hh + j[0, 1]), (hw + j[1, 0], -hh + j[1, 1]),
                (hw + j[2, 0], hh + j[2, 1]), (-hw + j[3, 0], hh + j[3, 1])]
    n = int(rng.integers(7, 11))
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = rng.uniform(0.3, 0.5, n) * size
    return [(r * math.cos(a), r * math.sin(a)) for a, r in zip(angles, radii)]


def _texture(cls, u, v, size, rng):
    """RGB float texture evaluated at local coordinates (u along the long axis)."""
    shape = u.shape + (3,)
    if cls == "battery":
        stripes = (np.sin(u * (2 * math.pi * 6 / size)) > 0)[..., None]
        dark, light = np.array([40, 50, 80.0]), np.array([150, 160, 190.0])
        return np.where(stripes, light, dark) * np.ones(shape)
    if cls == "pcb":
        pitch = max(size / 6, 2.0)
        du = np.mod(u, pitch) - pitch / 2
        dv = np.mod(v, pitch) - pitch / 2
        hole = (du * du + dv * dv) < (0.22 * pitch) ** 2
        base = np.array([30, 140, 50.0]) * np.ones(shape)
        base[hole] = (220, 190, 60)
        return base
    if cls == "glass":
        t = np.clip((u + v) / size + 0.5, 0, 1)[..., None]
        return (1 - t) * np.array([120, 200, 230.0]) + t * np.array([250, 255, 255.0])
    tone = rng.uniform(150, 185)
    noise = rng.normal(0, 6, u.shape)[..., None]
    return np.array([tone, tone, tone + 8]) + noise


def _draw_component(canvas, cls, center, size, angle, rng):
    local = _outline(cls, rng, size)
    c, s = math.cos(angle), math.sin(angle)
    poly = [(round(center[0] + x * c - y * s, 2), round(center[1] + x * s + y * c, 2))
            for x, y in local]
    h, w = canvas.shape[:2]
    poly = [(min(max(x, 0.0), float(w)), min(max(y, 0.0), float(h))) for x, y in poly]
    if not Polygon(tuple(poly)).is_simple():
        # rounding can fold tiny arcs onto each other; the hull of the
        # rounded points is always a valid outline
        poly = [(float(x), float(y)) for x, y in convex_hull(poly)]
    mask_img = Image.new("L", (w, h), 0)
    ImageDraw.Draw(mask_img).polygon(poly, fill=255)
    mask = np.asarray(mask_img) > 0
    ys, xs = np.nonzero(mask)
    if len(xs):
        dx, dy = xs + 0.5 - center[0], ys + 0.5 - center[1]
        u, v = dx * c + dy * s, -dx * s + dy * c
        canvas[ys, xs] = _texture(cls, u, v, size, rng)
    return [[x, y] for x, y in poly]


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> Path:
    """Render images plus an ``annotations.json`` under ``out_dir``; return the file path.

    Output is a pure function of ``spec``: the same spec yields byte-identical
    files.
    """
    labels = [c for c in CLASSES for _ in range(spec.counts.get(c, 0))]
    if not labels:
        raise ValueError("synthetic spec has zero components in total")
    rng = np.random.default_rng(spec.seed)
    rng.shuffle(labels)

    groups, i = [], 0
    while i < len(labels):
        k = int(rng.integers(1, 5))
        groups.append(labels[i:i + k])
        i += k

    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    n = spec.image_size
    cell = n / 2
    entries = []
    for idx, group in enumerate(groups):
        background = spec.backgrounds[idx % len(spec.backgrounds)]
        canvas = np.empty((n, n, 3), dtype=float)
        canvas[:] = BACKGROUND_RGB[background]
        canvas += rng.normal(0, 3, canvas.shape)
        cells = rng.permutation(4)[: len(group)]
        annotations = []
        for cls, q in zip(group, cells):
            size = rng.uniform(0.55, 0.8) * cell
            cx = (q % 2 + 0.5) * cell + rng.uniform(-0.08, 0.08) * cell
            cy = (q // 2 + 0.5) * cell + rng.uniform(-0.08, 0.08) * cell
            angle = rng.uniform(0, math.pi)
            poly = _draw_component(canvas, cls, (cx, cy), size, angle, rng)
            annotations.append({"class": cls, "polygon": poly})
        image_id = f"syn{idx:05d}"
        rel = f"images/{image_id}.png"
        Image.fromarray(np.clip(np.rint(canvas), 0, 255).astype(np.uint8)).save(out_dir / rel)
        entries.append({"image_id": image_id, "image_path": rel, "width": n, "height": n,
                        "face": "AB"[idx % 2], "background": background,
                        "annotations": annotations})
    path = out_dir / "annotations.json"
    atomic_write_text(path, json.dumps({"images": entries}, indent=1) + "\n")
    return path
