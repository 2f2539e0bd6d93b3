"""
Toy scene rendering, PNG image/mask I/O and the ``.mckpt`` checkpoint container.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"MCKPT\\x00\\x00\\x01"
    8 bytes   uint64 manifest length n
    n bytes   UTF-8 JSON manifest {format_version, metadata, arrays, data_sha256}
    rest      concatenated raw float32 (<f4) array payloads

``arrays`` lists ``{name, shape, offset, nbytes}`` with offsets relative to
the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataIOError, MaskValidationError, SchemaError

FORMAT_VERSION = 1
MAGIC = b"MCKPT\x00\x00\x01"
CHECKPOINT_SUFFIX = ".mckpt"

SHAPES = ("circle", "square", "triangle")
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 210, 40),
    "magenta": (200, 50, 200),
    "cyan": (40, 200, 210),
}
BASE_WORDS = ("a", "photo", "of", "and")


def subject_word(color: str, shape: str) -> str:
    return f"{color}-{shape}"


def corpus_words() -> list[str]:
    return list(BASE_WORDS) + [subject_word(c, s) for c in PALETTE for s in SHAPES]


# --------------------------------------------------------------------------
# toy scenes


@dataclass
class SubjectSpec:
    shape: str
    color: str
    scale_range: tuple = (14, 24)
    # range of the top-left corner; None means anywhere the subject fits
    x_range: tuple | None = None
    y_range: tuple | None = None

    @property
    def rgb(self) -> tuple:
        return PALETTE[self.color]

    @property
    def word(self) -> str:
        return subject_word(self.color, self.shape)


@dataclass
class SceneSpec:
    canvas: int = 64
    subjects: list = field(default_factory=list)
    # "random" or an (r, g, b) tuple
    background: object = "random"
    min_background_distance: float = 80.0
    caption_template: str = "a photo of {subjects}"
    allow_overlap: bool = False
    max_tries: int = 100

    def validate(self):
        if not self.subjects:
            raise ConfigError("scene needs at least one subject", key="subjects")
        colors = [s.color for s in self.subjects]
        if len(set(colors)) != len(colors):
            raise ConfigError("subject colors must be distinct within a scene", key="subjects")
        for s in self.subjects:
            if s.shape not in SHAPES:
                raise ConfigError(f"unknown shape {s.shape!r}", key="shape")
            if s.color not in PALETTE:
                raise ConfigError(f"unknown color {s.color!r}", key="color")
            lo, hi = s.scale_range
            if not 1 <= lo <= hi <= self.canvas:
                raise ConfigError(f"scale range {s.scale_range} does not fit canvas {self.canvas}")
            for r in (s.x_range, s.y_range):
                if r is not None and not (0 <= r[0] <= r[1] and r[1] + hi <= self.canvas):
                    raise ConfigError(f"position range {r} lets subject leave the canvas")
        return self


@dataclass
class Scene:
    image: np.ndarray  # (3, H, W) float32 in [-1, 1]
    masks: dict  # subject index -> (H, W) uint8 {0, 1}
    caption: str
    words: list  # per-subject caption word
    colors: list  # per-subject rgb
    positions: list  # per-subject (x0, y0, size)


def shape_footprint(shape: str, canvas: int, x0: int, y0: int, size: int) -> np.ndarray:
    """Binary footprint of a shape in the size x size box with top-left (x0, y0)."""
    m = np.zeros((canvas, canvas), dtype=np.uint8)
    if shape == "square":
        m[y0:y0 + size, x0:x0 + size] = 1
        return m
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "circle":
        r = size / 2
        inside = (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    elif shape == "triangle":
        # apex at top centre, base along the bottom edge
        inside = np.abs(xx - size / 2) <= yy / 2
    else:
        raise ConfigError(f"unknown shape {shape!r}", key="shape")
    m[y0:y0 + size, x0:x0 + size] = inside
    return m


def to_signed(rgb_u8: np.ndarray) -> np.ndarray:
    return (rgb_u8.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def make_toy_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    spec.validate()
    n = spec.canvas
    for _ in range(spec.max_tries):
        feet, positions = [], []
        for s in spec.subjects:
            size = int(rng.integers(s.scale_range[0], s.scale_range[1] + 1))
            xr = s.x_range or (0, n - size)
            yr = s.y_range or (0, n - size)
            x0 = int(rng.integers(xr[0], min(xr[1], n - size) + 1))
            y0 = int(rng.integers(yr[0], min(yr[1], n - size) + 1))
            feet.append(shape_footprint(s.shape, n, x0, y0, size))
            positions.append((x0, y0, size))
        if spec.allow_overlap or not np.any(np.sum(feet, axis=0) > 1):
            break
    else:
        raise ConfigError(f"could not place non-overlapping subjects in {spec.max_tries} tries")

    colors = [np.array(s.rgb, dtype=np.int64) for s in spec.subjects]
    bg = _background(spec, colors, rng)
    canvas = np.empty((n, n, 3), dtype=np.uint8)
    canvas[:] = bg
    masks = {}
    for i, (s, foot) in enumerate(zip(spec.subjects, feet)):
        canvas[foot.astype(bool)] = s.rgb
        for j in range(i):
            masks[j] &= 1 - foot
        masks[i] = foot.copy()
    words = [s.word for s in spec.subjects]
    caption = spec.caption_template.format(subjects=" and ".join(words))
    image = to_signed(canvas).transpose(2, 0, 1).copy()
    return Scene(image, masks, caption, words, [s.rgb for s in spec.subjects], positions)


def _background(spec: SceneSpec, colors, rng) -> tuple:
    if spec.background != "random":
        return tuple(int(c) for c in spec.background)
    for _ in range(1000):
        bg = rng.integers(0, 256, size=3)
        if all(np.linalg.norm(bg - c) >= spec.min_background_distance for c in colors):
            return tuple(int(c) for c in bg)
    raise ConfigError("could not sample a background far enough from the subject colors")


def random_scene_spec(rng: np.random.Generator, canvas: int = 64, max_subjects: int = 2,
                      scale_range: tuple | None = None) -> SceneSpec:
    """A corpus scene: 1..max_subjects subjects with distinct colors, random shapes."""
    if scale_range is None:
        scale_range = (max(2, canvas * 7 // 32), max(3, canvas * 3 // 8))
    k = int(rng.integers(1, max_subjects + 1))
    color_names = list(PALETTE)
    cols = rng.choice(len(color_names), size=k, replace=False)
    subjects = [
        SubjectSpec(SHAPES[int(rng.integers(len(SHAPES)))], color_names[int(c)], scale_range)
        for c in cols
    ]
    return SceneSpec(canvas=canvas, subjects=subjects)


def sample_corpus_scene(rng: np.random.Generator, canvas: int = 64, max_subjects: int = 2) -> Scene:
    return make_toy_scene(random_scene_spec(rng, canvas, max_subjects), rng)


def toy_fixture_spec(canvas: int = 64) -> SceneSpec:
    """Fixed two-subject source image: a red circle (subject 0) and a blue square (subject 1)."""
    size = canvas * 5 // 16
    s0 = SubjectSpec("circle", "red", (size, size), (canvas // 8, canvas // 8), (canvas // 8, canvas // 8))
    x1 = canvas - canvas // 8 - size
    s1 = SubjectSpec("square", "blue", (size, size), (x1, x1), (canvas // 2, canvas // 2))
    return SceneSpec(canvas=canvas, subjects=[s0, s1], background=(110, 110, 100))


def toy_fixture(canvas: int = 64) -> Scene:
    return make_toy_scene(toy_fixture_spec(canvas), np.random.default_rng(0))


def translate_mask(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift a mask by (dx, dy) pixels; content shifted off the canvas is dropped."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    ys, xs = np.nonzero(mask)
    ys, xs = ys + dy, xs + dx
    keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    out[ys[keep], xs[keep]] = 1
    return out


# --------------------------------------------------------------------------
# PNG I/O


def _open(path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
        return im
    except (OSError, UnidentifiedImageError) as e:
        raise DataIOError(f"cannot read image {path}: {e}", path=str(path)) from e


def load_image(path, target_size: int) -> np.ndarray:
    im = _open(path).convert("RGB")
    if im.size != (target_size, target_size):
        im = im.resize((target_size, target_size), Image.BILINEAR)
    return to_signed(np.asarray(im)).transpose(2, 0, 1).copy()


def load_mask(path, target_size: int, allow_blank: bool = False) -> np.ndarray:
    im = _open(path)
    arr = np.asarray(im.convert("L"))
    binary = (arr >= 128).astype(np.uint8)
    if binary.shape != (target_size, target_size):
        binary = np.array(
            Image.fromarray(binary).resize((target_size, target_size), Image.NEAREST), dtype=np.uint8
        )
    if not allow_blank and not binary.any():
        raise MaskValidationError(f"mask {path} is empty after thresholding at 128")
    return binary


def load_pair(image_path, mask_paths, target_size: int):
    """Read an RGB image and its per-subject masks; returns (image, {i: mask})."""
    image = load_image(image_path, target_size)
    masks = {i: load_mask(p, target_size) for i, p in enumerate(mask_paths)}
    return image, masks


def save_image(path, image: np.ndarray):
    """Write a (3, H, W) image in [-1, 1] as 8-bit RGB PNG."""
    arr = to_uint8(np.asarray(image).transpose(1, 2, 0))
    Image.fromarray(arr, "RGB").save(path)


def save_mask(path, mask: np.ndarray):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, "L").save(path)


def save_gray(path, m: np.ndarray):
    """Write a map with values in [0, 1] as 8-bit grayscale."""
    Image.fromarray(np.clip(np.round(np.asarray(m) * 255), 0, 255).astype(np.uint8), "L").save(path)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    arrays: dict  # name -> np.ndarray
    metadata: dict

    def equal(self, other: "Checkpoint") -> bool:
        if self.arrays.keys() != other.arrays.keys():
            return False
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


def save_checkpoint(path, ckpt: Checkpoint):
    """Atomically write ``ckpt``: payload goes to a temp file that replaces ``path``."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        a = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "metadata": ckpt.metadata,
        "arrays": entries,
        "data_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(head)))
            f.write(head)
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e}", path=str(path)) from e
    if len(data) < 16 or data[:8] != MAGIC:
        raise SchemaError(f"{path}: not a checkpoint file (bad magic or truncated header)")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise SchemaError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"{path}: unreadable manifest: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: format_version {version!r} not recognized", key="format_version")
    payload = data[16 + n:]
    for key in ("metadata", "arrays", "data_sha256"):
        if key not in manifest:
            raise SchemaError(f"{path}: manifest missing {key!r}", key=key)
    if hashlib.sha256(payload).hexdigest() != manifest["data_sha256"]:
        raise SchemaError(f"{path}: payload checksum mismatch (truncated or corrupted)")
    arrays = {}
    for e in manifest["arrays"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if e["nbytes"] != 4 * count or e["offset"] + e["nbytes"] > len(payload):
            raise SchemaError(f"{path}: array {e['name']!r} extends past payload", key=e["name"])
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"]).reshape(shape).copy()
    metadata = manifest["metadata"]
    metadata["format_version"] = version
    return Checkpoint(arrays, metadata)
