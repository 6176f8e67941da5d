"""Procedural street-like scenes with exact labels, depth, fog and optical flow.

The camera model is a zoom about the image center: frame ``k`` shows the
frame-0 layout magnified by ``zoom**k``, so later frames are near views of the
same scene.  Region depths shrink by the same factor (the sky stays at its
fixed far depth), which makes later frames less foggy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import parse_kv
from .core import ConfidenceMap, FlowField, LabelMap
from .errors import ConfigError
from .ingest import (
    Manifest,
    ManifestEntry,
    write_conf,
    write_flo,
    write_label_png,
    write_manifest,
    write_rgb,
)

# class templates: name, base color, depth range (m); index 0 -> class 1
CLASS_TEMPLATES = [
    ("road", (90, 88, 92), (35.0, 45.0)),
    ("sky", (105, 155, 225), (1000.0, 1000.0)),
    ("building", (150, 95, 70), (55.0, 90.0)),
    ("vegetation", (55, 135, 50), (35.0, 60.0)),
    ("car", (200, 40, 45), (18.0, 32.0)),
    ("sign", (230, 200, 40), (25.0, 45.0)),
    ("person", (190, 120, 170), (15.0, 30.0)),
    ("pole", (140, 140, 160), (20.0, 40.0)),
]
SKY_DEPTH = 1000.0


@dataclass
class Region:
    cls: int
    rgb: tuple[int, int, int]
    depth: float
    polygon: np.ndarray  # [n, 2] (x, y) in frame-0 pixel coordinates

    @property
    def static(self) -> bool:
        return self.depth >= SKY_DEPTH


@dataclass
class SceneSpec:
    seed: int = 0
    width: int = 128
    height: int = 96
    classes: int = 5
    frames: int = 12
    zoom_per_frame: float = 1.05
    beta: float = 0.01
    atmospheric_light: tuple[float, float, float] = (235.0, 235.0, 235.0)
    jitter: float = 6.0
    delta: int = 1
    source_images: int = 8
    source_seed: int | None = None
    layout: list[Region] = field(default_factory=list)

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ConfigError("scene must be at least 2x2")
        if not 1 <= self.classes <= 255:
            raise ConfigError(f"classes must be in [1, 255], got {self.classes}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.zoom_per_frame <= 0:
            raise ConfigError("zoom_per_frame must be > 0")
        if self.frames < 1 or self.delta < 1:
            raise ConfigError("frames and delta must be >= 1")
        for r in self.layout:
            if r.depth <= 0:
                raise ConfigError("region depths must be > 0")
            if not 1 <= r.cls <= self.classes:
                raise ConfigError(f"region class {r.cls} outside 1..{self.classes}")
        if not self.layout:
            self.layout = default_layout(self.width, self.height, self.classes, self.seed)

    @property
    def center(self) -> tuple[float, float]:
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0

    def class_names(self) -> list[str]:
        return [CLASS_TEMPLATES[k][0] if k < len(CLASS_TEMPLATES) else f"class{k + 1}" for k in range(self.classes)]

    def palette(self) -> list[tuple[int, int, int]]:
        rng = np.random.default_rng(1234)
        out = [(0, 0, 0)]
        for k in range(self.classes):
            if k < len(CLASS_TEMPLATES):
                out.append(CLASS_TEMPLATES[k][1])
            else:
                out.append(tuple(int(v) for v in rng.integers(0, 256, 3)))
        return out

    def source_spec(self) -> "SceneSpec":
        seed = self.source_seed if self.source_seed is not None else self.seed + 7919
        return SceneSpec(seed=seed, width=self.width, height=self.height, classes=self.classes,
                         frames=self.frames, zoom_per_frame=self.zoom_per_frame, beta=0.0,
                         atmospheric_light=self.atmospheric_light, jitter=self.jitter, delta=self.delta,
                         source_images=self.source_images)


def _rect(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def default_layout(width: int, height: int, classes: int, seed: int) -> list[Region]:
    """Random street-like layout: sky over road, buildings and trees at the sides, objects on the road."""
    rng = np.random.default_rng(seed)
    w, h = float(width), float(height)
    horizon = h * rng.uniform(0.38, 0.5)
    regions = []

    def template(cls):
        if cls - 1 < len(CLASS_TEMPLATES):
            _, rgb, (d0, d1) = CLASS_TEMPLATES[cls - 1]
        else:
            rgb, (d0, d1) = tuple(int(v) for v in rng.integers(30, 230, 3)), (20.0, 60.0)
        return rgb, float(rng.uniform(d0, d1))

    base = 1
    rgb, d = template(base)
    regions.append(Region(base, rgb, d, _rect(-1, horizon, w + 1, h + 1)))
    if classes == 1:
        regions[0] = Region(1, rgb, d, _rect(-1, -1, w + 1, h + 1))
        return regions
    rgb, _ = template(2)
    regions.append(Region(2, rgb, SKY_DEPTH if classes >= 2 else d, _rect(-1, -1, w + 1, horizon)))
    others = list(range(3, classes + 1))
    for cls in others:
        name = CLASS_TEMPLATES[cls - 1][0] if cls - 1 < len(CLASS_TEMPLATES) else "object"
        n = 2 if name in ("building", "vegetation") else int(rng.integers(1, 3))
        for _ in range(n):
            rgb, d = template(cls)
            if name == "building":
                left = rng.random() < 0.5
                bw = w * rng.uniform(0.18, 0.3)
                x0 = rng.uniform(-0.05, 0.1) * w if left else w - bw - rng.uniform(-0.05, 0.1) * w
                top = horizon - h * rng.uniform(0.15, 0.35)
                poly = _rect(x0, top, x0 + bw, horizon + h * rng.uniform(0.05, 0.15))
            elif name == "vegetation":
                cx, cy = rng.uniform(0.1, 0.9) * w, horizon - h * rng.uniform(0.0, 0.1)
                rx, ry = w * rng.uniform(0.06, 0.12), h * rng.uniform(0.08, 0.16)
                t = np.linspace(0, 2 * np.pi, 24, endpoint=False)
                poly = np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)
            else:
                cw, ch = w * rng.uniform(0.08, 0.16), h * rng.uniform(0.06, 0.12)
                x0 = rng.uniform(0.05, 0.95) * w - cw / 2
                y0 = rng.uniform(horizon + 0.1 * h, h - ch - 0.05 * h)
                poly = _rect(x0, y0, x0 + cw, y0 + ch)
            regions.append(Region(cls, rgb, d, poly))
    return regions


def _points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray casting, vectorised over points."""
    inside = np.zeros(px.shape, dtype=bool)
    xs, ys = poly[:, 0], poly[:, 1]
    j = len(poly) - 1
    for i in range(len(poly)):
        xi, yi, xj, yj = xs[i], ys[i], xs[j], ys[j]
        crosses = (yi > py) != (yj > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (xj - xi) * (py - yi) / (yj - yi) + xi
        inside ^= crosses & (px < xint)
        j = i
    return inside


def frame_scale(spec: SceneSpec, frame_index: int) -> float:
    return spec.zoom_per_frame ** frame_index


def render_frame(spec: SceneSpec, frame_index: int):
    """Return ``(clear_rgb uint8 [H,W,3], LabelMap, depth float64 [H,W])``."""
    if not 0 <= frame_index < spec.frames:
        raise ConfigError(f"frame index {frame_index} outside 0..{spec.frames - 1}")
    h, w = spec.height, spec.width
    s = frame_scale(spec, frame_index)
    cx, cy = spec.center
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = cx + (xx - cx) / s, cy + (yy - cy) / s
    labels = np.zeros((h, w), dtype=np.uint8)
    depth = np.full((h, w), np.inf)
    rgb = np.zeros((h, w, 3))
    for r in spec.layout:
        d = r.depth if r.static else r.depth / s
        m = _points_in_polygon(px, py, r.polygon) & (d <= depth)
        labels[m] = r.cls
        depth[m] = d
        rgb[m] = r.rgb
    if not np.isfinite(depth).all():
        raise ConfigError("layout regions do not cover the frame")
    rng = np.random.default_rng([spec.seed, frame_index])
    rgb = rgb + rng.normal(0.0, spec.jitter, rgb.shape)
    clear = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return clear, LabelMap(labels, spec.classes), depth


def apply_fog(clear: np.ndarray, depth: np.ndarray, beta: float, light) -> np.ndarray:
    """Atmospheric scattering: ``J * t + A * (1 - t)`` with ``t = exp(-beta * depth)``, rounded to uint8."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    t = np.exp(-beta * np.asarray(depth, dtype=np.float64))[..., None]
    a = np.asarray(light, dtype=np.float64).reshape(1, 1, 3)
    out = np.asarray(clear, dtype=np.float64) * t + a * (1.0 - t)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def exact_flow(spec: SceneSpec, ref_index: int, tgt_index: int) -> tuple[FlowField, ConfidenceMap]:
    """Analytic flow on the reference grid mapping each reference pixel to its target position."""
    for i in (ref_index, tgt_index):
        if not 0 <= i < spec.frames:
            raise ConfigError(f"frame index {i} outside 0..{spec.frames - 1}")
    h, w = spec.height, spec.width
    cx, cy = spec.center
    s_rel = spec.zoom_per_frame ** (ref_index - tgt_index)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    tx = cx + (xx - cx) / s_rel
    ty = cy + (yy - cy) / s_rel
    inside = (tx >= -0.5) & (tx < w - 0.5) & (ty >= -0.5) & (ty < h - 0.5)
    return FlowField(tx - xx, ty - yy), ConfidenceMap(inside.astype(np.float32))


def foggy_frame(spec: SceneSpec, frame_index: int, beta: float | None = None):
    clear, labels, depth = render_frame(spec, frame_index)
    return apply_fog(clear, depth, spec.beta if beta is None else beta, spec.atmospheric_light), labels, depth


# -- spec files --------------------------------------------------------------

def parse_scene_spec(text: str, source: str = "<scene>") -> SceneSpec:
    kwargs: dict = {}
    regions = []
    ints = {"seed", "width", "height", "classes", "frames", "delta", "source_images", "source_seed"}
    floats = {"zoom_per_frame", "beta", "jitter"}
    for key, value in parse_kv(text, source):
        try:
            if key in ints:
                kwargs[key] = int(value)
            elif key in floats:
                kwargs[key] = float(value)
            elif key == "atmospheric_light":
                vals = [float(v) for v in value.split()]
                if len(vals) != 3:
                    raise ValueError(value)
                kwargs[key] = tuple(vals)
            elif key == "region":
                nums = value.split()
                cls, r, g, b = (int(v) for v in nums[:4])
                depth = float(nums[4])
                pts = np.array([float(v) for v in nums[5:]]).reshape(-1, 2)
                if len(pts) < 3:
                    raise ValueError(value)
                regions.append(Region(cls, (r, g, b), depth, pts))
            else:
                raise ConfigError(f"{source}: unknown scene key {key!r}")
        except ValueError:
            raise ConfigError(f"{source}: bad value for {key}: {value!r}") from None
    return SceneSpec(layout=regions, **kwargs)


def load_scene_spec(path) -> SceneSpec:
    path = Path(path)
    return parse_scene_spec(path.read_text(encoding="utf-8"), str(path))


def format_scene_spec(spec: SceneSpec) -> str:
    lines = [f"seed = {spec.seed}", f"width = {spec.width}", f"height = {spec.height}",
             f"classes = {spec.classes}", f"frames = {spec.frames}", f"zoom_per_frame = {spec.zoom_per_frame!r}",
             f"beta = {spec.beta!r}", "atmospheric_light = " + " ".join(repr(float(v)) for v in spec.atmospheric_light),
             f"jitter = {spec.jitter!r}", f"delta = {spec.delta}", f"source_images = {spec.source_images}"]
    if spec.source_seed is not None:
        lines.append(f"source_seed = {spec.source_seed}")
    for r in spec.layout:
        pts = " ".join(repr(float(v)) for v in r.polygon.ravel())
        lines.append(f"region = {r.cls} {r.rgb[0]} {r.rgb[1]} {r.rgb[2]} {r.depth!r} {pts}")
    return "\n".join(lines) + "\n"


# -- dataset emission ----------------------------------------------------------

SOURCE_MANIFEST = "source.manifest"
TARGET_MANIFEST = "target.manifest"


def emit_dataset(spec: SceneSpec, out_dir) -> Manifest:
    """Write a clear source split and a foggy target sequence; return the target manifest.

    Target entries pair frame ``k`` (far view) with frame ``k + delta`` (near
    view, the reference).  Ground-truth labels are written for evaluation.
    Probability paths point into ``probs/`` and are filled in by the pipeline
    or an external predictor.
    """
    out = Path(out_dir)
    for sub in ("source", "target", "gt", "flow", "probs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    names, palette = spec.class_names(), spec.palette()

    src = spec.source_spec()
    src_entries = []
    for k in range(spec.source_images):
        # a fresh layout per source image, at varying zoom levels
        layout_k = SceneSpec(**{**src.__dict__, "seed": src.seed + k, "layout": []})
        clear, labels, _ = render_frame(layout_k, k % src.frames)
        img_p, lab_p = out / "source" / f"img_{k:03d}.png", out / "source" / f"label_{k:03d}.png"
        write_rgb(clear, img_p)
        write_label_png(labels, lab_p)
        src_entries.append(ManifestEntry(img_p, out / "probs" / f"source_{k:03d}.prb", gt_label_path=lab_p))
    src_manifest = Manifest(src_entries, spec.classes, names, palette, out)
    write_manifest(src_manifest, out / SOURCE_MANIFEST)

    for k in range(spec.frames):
        foggy, labels, _ = foggy_frame(spec, k)
        write_rgb(foggy, out / "target" / f"img_{k:03d}.png")
        write_label_png(labels, out / "gt" / f"label_{k:03d}.png")
    entries = []
    for k in range(spec.frames - spec.delta):
        r = k + spec.delta
        flow, conf = exact_flow(spec, r, k)
        flow_p, conf_p = out / "flow" / f"flow_{k:03d}.flo", out / "flow" / f"conf_{k:03d}.cnf"
        write_flo(flow, flow_p)
        write_conf(conf, conf_p)
        entries.append(ManifestEntry(
            target_image_path=out / "target" / f"img_{k:03d}.png",
            target_prob_path=out / "probs" / f"target_{k:03d}.prb",
            reference_prob_path=out / "probs" / f"target_{r:03d}.prb",
            flow_path=flow_p,
            flow_conf_path=conf_p,
            gt_label_path=out / "gt" / f"label_{k:03d}.png",
            reference_image_path=out / "target" / f"img_{r:03d}.png",
        ))
    manifest = Manifest(entries, spec.classes, names, palette, out)
    write_manifest(manifest, out / TARGET_MANIFEST)
    (out / "scene.txt").write_text(format_scene_spec(spec), encoding="utf-8")
    return manifest


def emit_fog_sweep(spec: SceneSpec, out_dir, betas=(0.005, 0.01, 0.02)) -> dict[float, Manifest]:
    """One dataset per attenuation coefficient, in ``out_dir/beta_<value>``."""
    out = {}
    for b in betas:
        s = SceneSpec(**{**spec.__dict__, "beta": float(b)})
        out[float(b)] = emit_dataset(s, Path(out_dir) / f"beta_{b:g}")
    return out
