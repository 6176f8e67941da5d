"""Readers and writers for every on-disk artifact, plus the dataset manifest.

Binary layouts (all little-endian):

* PRB1 -- ``b"PRB1"``, u32 width, height, channels, float32 ``[c][y][x]``
* CNF1 -- ``b"CNF1"``, u32 width, height, float32 ``[y][x]``
* .flo -- float32 202021.25, i32 width, height, float32 ``(u, v)`` interleaved row-major
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ConfidenceMap, FeatureMap, FlowField, LabelMap, ProbMap
from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

PRB_MAGIC = b"PRB1"
CNF_MAGIC = b"CNF1"
FLO_MAGIC = 202021.25
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


# -- PNG --------------------------------------------------------------------

def png_header(path) -> tuple[int, int, int, int]:
    """Return ``(width, height, bit_depth, color_type)`` from a PNG's IHDR chunk."""
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise FormatError(f"{path}: not a PNG file")
    width, height, depth, ctype = struct.unpack(">IIBB", head[16:26])
    return width, height, depth, ctype


def read_label_png(path, num_classes: int | None = None) -> LabelMap:
    """Read an 8-bit grayscale or paletted PNG as a label map.

    Paletted images yield their palette indices.  ``num_classes`` defaults to
    the largest value present (at least 1).
    """
    _, _, depth, ctype = png_header(path)
    if ctype not in (0, 3):
        kinds = {2: "RGB", 4: "gray+alpha", 6: "RGBA"}
        raise FormatError(f"{path}: label PNG must be single-channel, got {kinds.get(ctype, ctype)} color type")
    if depth != 8:
        raise FormatError(f"{path}: label PNG must have bit depth 8, got {depth}")
    with Image.open(path) as im:
        data = np.array(im, dtype=np.uint8)
    if num_classes is None:
        num_classes = max(1, int(data.max()))
    elif int(data.max()) > num_classes:
        raise FormatError(f"{path}: label value {int(data.max())} exceeds {num_classes} classes")
    return LabelMap(data, num_classes)


def write_label_png(labels: LabelMap, path, palette=None) -> None:
    """Write a label map as 8-bit grayscale, or paletted when ``palette`` is given."""
    if palette is None:
        Image.fromarray(np.asarray(labels.data, dtype=np.uint8), mode="L").save(path)
        return
    im = Image.fromarray(np.asarray(labels.data, dtype=np.uint8), mode="P")
    flat = [int(c) for rgb in palette for c in rgb]
    im.putpalette(flat + [0] * (768 - len(flat)))
    im.save(path)


def read_mask_png(path) -> np.ndarray:
    """Read a single-channel 8-bit PNG as a boolean mask (nonzero = True)."""
    return read_label_png(path, 255).data != 0


def write_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_index_png(path) -> np.ndarray:
    """Read a 16-bit (or 8-bit) single-channel PNG of integer ids."""
    _, _, depth, ctype = png_header(path)
    if ctype != 0 or depth not in (8, 16):
        raise FormatError(f"{path}: id PNG must be 8- or 16-bit grayscale")
    with Image.open(path) as im:
        return np.array(im).astype(np.int32)


def write_index_png(ids: np.ndarray, path) -> None:
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() > 65535:
        raise ValueError("ids must fit in 16 bits")
    Image.fromarray(ids.astype(np.uint16)).save(path)


def read_rgb(path) -> np.ndarray:
    """Read any image Pillow understands as ``(H, W, 3)`` uint8 RGB."""
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def write_rgb(image: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


# -- PRB1 -------------------------------------------------------------------

def _read_exact(path, magic: bytes, header_fmt: str):
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    hsize = 4 + struct.calcsize(header_fmt)
    if len(raw) < hsize:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(header_fmt, raw[4:hsize])
    return raw, hsize, dims


def encode_prob(data: np.ndarray) -> bytes:
    c, h, w = data.shape
    return PRB_MAGIC + struct.pack("<III", w, h, c) + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_prob_array(path) -> np.ndarray:
    raw, hsize, (w, h, c) = _read_exact(path, PRB_MAGIC, "<III")
    need = 4 * w * h * c
    if len(raw) - hsize != need:
        raise FormatError(f"{path}: payload is {len(raw) - hsize} bytes, header implies {need} (truncated or oversized)")
    return np.frombuffer(raw, dtype="<f4", offset=hsize).reshape(c, h, w).astype(np.float32)


def read_prob(path, check_softmax: bool = True, strict: bool = False, tol: float = 1e-3) -> ProbMap:
    """Read a PRB1 probability map.

    A channel-sum violation is a warning by default and a :class:`FormatError`
    when ``strict`` is set.
    """
    probs = ProbMap(decode_prob_array(path))
    if check_softmax:
        try:
            probs.check_softmax(tol)
        except FormatError as exc:
            if strict:
                raise FormatError(f"{path}: {exc}") from None
            warnings.warn(f"{path}: {exc}", stacklevel=2)
    return probs


def write_prob(probs: ProbMap, path) -> None:
    Path(path).write_bytes(encode_prob(probs.data))


def read_features(path) -> FeatureMap:
    """PRB1 container reused for feature maps (no softmax check)."""
    return FeatureMap(decode_prob_array(path))


def write_features(features: FeatureMap, path) -> None:
    Path(path).write_bytes(encode_prob(features.data))


# -- CNF1 -------------------------------------------------------------------

def read_conf(path) -> ConfidenceMap:
    """Read a CNF1 confidence map; out-of-range values are clamped and counted."""
    raw, hsize, (w, h) = _read_exact(path, CNF_MAGIC, "<II")
    need = 4 * w * h
    if len(raw) - hsize != need:
        raise FormatError(f"{path}: payload is {len(raw) - hsize} bytes, header implies {need}")
    data = np.frombuffer(raw, dtype="<f4", offset=hsize).reshape(h, w)
    conf = ConfidenceMap(data)
    if conf.clamped:
        log.warning("%s: clamped %d confidence values into [0, 1]", path, conf.clamped)
    return conf


def write_conf(conf: ConfidenceMap, path) -> None:
    h, w = conf.shape
    Path(path).write_bytes(CNF_MAGIC + struct.pack("<II", w, h) + np.ascontiguousarray(conf.data, dtype="<f4").tobytes())


# -- Middlebury .flo ----------------------------------------------------------

def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    magic = struct.unpack("<f", raw[:4])[0]
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic!r}, expected {FLO_MAGIC}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w < 1 or h < 1:
        raise FormatError(f"{path}: invalid .flo size {w}x{h}")
    need = 8 * w * h
    if len(raw) - 12 != need:
        raise FormatError(f"{path}: payload is {len(raw) - 12} bytes, header implies {need} (truncated or oversized)")
    uv = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(uv[..., 0], uv[..., 1])


def write_flo(flow: FlowField, path) -> None:
    h, w = flow.shape
    uv = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    Path(path).write_bytes(struct.pack("<fii", FLO_MAGIC, w, h) + uv.tobytes())


# -- manifest ---------------------------------------------------------------

ENTRY_FIELDS = (
    "target_image_path",
    "target_prob_path",
    "reference_prob_path",
    "flow_path",
    "flow_conf_path",
    "gt_label_path",
    "reference_image_path",
)


@dataclass
class ManifestEntry:
    target_image_path: Path
    target_prob_path: Path
    reference_prob_path: Path | None = None
    flow_path: Path | None = None
    flow_conf_path: Path | None = None
    gt_label_path: Path | None = None
    reference_image_path: Path | None = None

    @property
    def has_flow(self) -> bool:
        return self.flow_path is not None

    def paths(self) -> list[Path]:
        return [p for p in (getattr(self, f) for f in ENTRY_FIELDS) if p is not None]


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    num_classes: int
    class_names: list[str]
    class_palette: list[tuple[int, int, int]]
    root: Path = field(default_factory=Path)

    @property
    def has_flow(self) -> bool:
        return any(e.has_flow for e in self.entries)

    def check_files(self, require_probs: bool = False) -> None:
        """Raise :class:`ConfigError` for any dangling path (prob files optional)."""
        for i, e in enumerate(self.entries):
            for name in ENTRY_FIELDS:
                p = getattr(e, name)
                if p is None:
                    continue
                if not require_probs and name in ("target_prob_path", "reference_prob_path"):
                    continue
                if not p.exists():
                    raise ConfigError(f"manifest entry {i}: {name} {p} does not exist")


def parse_manifest(text: str, root=".", source: str = "<manifest>") -> Manifest:
    root = Path(root)
    num_classes = None
    names: dict[int, str] = {}
    colors: dict[int, tuple[int, int, int]] = {}
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if "\t" not in raw and "=" in raw:
            key, value = (s.strip() for s in raw.split("=", 1))
            if key == "classes":
                try:
                    num_classes = int(value)
                except ValueError:
                    raise ConfigError(f"{where}: bad class count {value!r}") from None
                if num_classes < 1:
                    raise ConfigError(f"{where}: classes must be >= 1, got {num_classes}")
            elif key.startswith("class "):
                try:
                    k = int(key.split()[1])
                    parts = value.split()
                    name, (r, g, b) = " ".join(parts[:-3]), (int(x) for x in parts[-3:])
                except (ValueError, IndexError):
                    raise ConfigError(f"{where}: expected 'class k = name r g b', got {raw!r}") from None
                if not all(0 <= c <= 255 for c in (r, g, b)):
                    raise ConfigError(f"{where}: color components must be in [0, 255]")
                names[k], colors[k] = name, (r, g, b)
            else:
                raise ConfigError(f"{where}: unknown header key {key!r}")
            continue
        cols = raw.rstrip("\n").split("\t")
        if len(cols) not in (6, 7):
            raise ConfigError(f"{where}: expected 6 or 7 tab-separated fields, got {len(cols)}")
        vals = [None if c.strip() == "-" else root / c.strip() for c in cols]
        vals += [None] * (7 - len(vals))
        if vals[0] is None or vals[1] is None:
            raise ConfigError(f"{where}: target image and target prob paths are required")
        ref_group = vals[2:5]
        if any(v is None for v in ref_group) and any(v is not None for v in ref_group):
            raise ConfigError(f"{where}: reference/flow must co-occur")
        entries.append(ManifestEntry(*vals))
    if num_classes is None:
        raise ConfigError(f"{source}: missing 'classes = N' declaration")
    missing = [k for k in range(1, num_classes + 1) if k not in names]
    if missing:
        raise ConfigError(f"{source}: missing class declarations for {missing}")
    extra = [k for k in names if k < 0 or k > num_classes]
    if extra:
        raise ConfigError(f"{source}: class ids {extra} outside 0..{num_classes}")
    names.setdefault(0, "ignore")
    colors.setdefault(0, (0, 0, 0))
    return Manifest(
        entries=entries,
        num_classes=num_classes,
        class_names=[names[k] for k in range(num_classes + 1)][1:],
        class_palette=[colors[k] for k in range(num_classes + 1)],
        root=root,
    )


def read_manifest(path, check: bool = False) -> Manifest:
    """Parse a manifest file; relative paths resolve against its directory."""
    path = Path(path)
    m = parse_manifest(path.read_text(encoding="utf-8"), root=path.parent, source=str(path))
    if check:
        m.check_files()
    return m


def format_manifest(m: Manifest, relative_to=None) -> str:
    base = Path(relative_to) if relative_to is not None else m.root
    lines = [f"classes = {m.num_classes}"]
    for k, rgb in enumerate(m.class_palette):
        name = "ignore" if k == 0 else m.class_names[k - 1]
        lines.append(f"class {k} = {name} {rgb[0]} {rgb[1]} {rgb[2]}")

    def rel(p):
        if p is None:
            return "-"
        try:
            return Path(p).relative_to(base).as_posix()
        except ValueError:
            return str(p)

    for e in m.entries:
        cols = [rel(getattr(e, f)) for f in ENTRY_FIELDS]
        if cols[-1] == "-":
            cols = cols[:-1]
        lines.append("\t".join(cols))
    return "\n".join(lines) + "\n"


def write_manifest(m: Manifest, path) -> None:
    path = Path(path)
    path.write_text(format_manifest(m, relative_to=path.parent), encoding="utf-8")
