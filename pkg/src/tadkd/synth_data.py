"""Procedural detection scenes: anti-aliased disks, squares and triangles on noise.

Class ids: 1 = disk, 2 = square, 3 = triangle (0 is background).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .geometry import iou_matrix

CLASS_NAMES = ("background", "disk", "square", "triangle")

DATASET_VERSION = 1
IMAGE_MAGIC = 0x4B444154  # "TADK" little-endian
IMAGE_VERSION = 1
_HEADER = struct.Struct("<5I")

MAX_PLACEMENT_ATTEMPTS = 1000
MAX_PAIR_IOU = 0.3
_SUPERSAMPLE = 4


class GenerationError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


class VersionMismatchError(DatasetError):
    pass


class CorruptFileError(DatasetError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    num_classes: int = 3
    objects_per_image: Tuple[int, int] = (1, 4)
    object_scale: Tuple[float, float] = (10.0, 28.0)
    noise_std: float = 0.05
    color_jitter: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "objects_per_image", tuple(int(v) for v in self.objects_per_image))
        object.__setattr__(self, "object_scale", tuple(float(v) for v in self.object_scale))
        lo, hi = self.objects_per_image
        slo, shi = self.object_scale
        if not (1 <= lo <= hi):
            raise ValueError(f"objects_per_image must be a non-empty range, got {self.objects_per_image}")
        if not (0 < slo <= shi < self.image_size):
            raise ValueError(f"object_scale must satisfy 0 < min <= max < image_size, got {self.object_scale}")
        if not 1 <= self.num_classes <= 3:
            raise ValueError("num_classes must be between 1 and 3")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_image"] = list(self.objects_per_image)
        d["object_scale"] = list(self.object_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Scene:
    image: np.ndarray  # (3, H, W) in [0, 1]
    gt_boxes: np.ndarray  # (n, 4)
    gt_labels: np.ndarray  # (n,) ints in 1..num_classes
    seed: int = field(default=0)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.gt_boxes, other.gt_boxes)
            and np.array_equal(self.gt_labels, other.gt_labels)
        )


def _inside(shape: int, u: np.ndarray, v: np.ndarray, orient: int) -> np.ndarray:
    """Membership in the unit-box shape, with (u, v) in [0, 1]^2 box-relative coordinates."""
    if shape == 1:
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if shape == 2:
        return (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    # isosceles triangle filling the box, apex direction picked by orient
    if orient == 0:  # apex up
        a, b = v, u
    elif orient == 1:  # apex down
        a, b = 1 - v, u
    elif orient == 2:  # apex left
        a, b = u, v
    else:
        a, b = 1 - u, v
    half = 0.5 * a
    return (a >= 0) & (a <= 1) & (np.abs(b - 0.5) <= half)


def _coverage(shape: int, box: np.ndarray, size: int, orient: int):
    """Fractional pixel coverage of a shape over the pixels its box touches."""
    x0, y0, x1, y1 = box
    c0, r0 = int(np.floor(x0)), int(np.floor(y0))
    c1, r1 = min(int(np.ceil(x1)), size), min(int(np.ceil(y1)), size)
    offs = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    xs = (np.arange(c0, c1)[:, None] + offs[None, :]).reshape(-1)
    ys = (np.arange(r0, r1)[:, None] + offs[None, :]).reshape(-1)
    u = (xs[None, :] - x0) / (x1 - x0)
    v = (ys[:, None] - y0) / (y1 - y0)
    hit = _inside(shape, u, v, orient).astype(np.float64)
    cov = hit.reshape(r1 - r0, _SUPERSAMPLE, c1 - c0, _SUPERSAMPLE).mean(axis=(1, 3))
    return cov, (r0, r1, c0, c1)


def _tight_box(cov: np.ndarray, window) -> np.ndarray:
    r0, _, c0, _ = window
    rows = np.nonzero(cov.max(axis=1) > 0)[0]
    cols = np.nonzero(cov.max(axis=0) > 0)[0]
    return np.array([c0 + cols[0], r0 + rows[0], c0 + cols[-1] + 1, r0 + rows[-1] + 1], dtype=np.float64)


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Render one scene; a pure function of ``(seed, config)``."""
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    size = config.image_size
    lo, hi = config.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))

    background = rng.uniform(0.2, 0.8, size=3)
    image = np.broadcast_to(background[:, None, None], (3, size, size)).copy()
    # low-frequency illumination gradient so the background is not flat
    gx, gy = rng.uniform(-0.1, 0.1, size=2)
    ramp = gx * (np.arange(size)[None, :] / size - 0.5) + gy * (np.arange(size)[:, None] / size - 0.5)
    image += ramp[None]

    boxes: List[np.ndarray] = []
    labels: List[int] = []
    layers = []
    attempts = 0
    while len(boxes) < n_obj:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise GenerationError(
                f"could not place {n_obj} objects within {MAX_PLACEMENT_ATTEMPTS} attempts (seed={seed})"
            )
        label = int(rng.integers(1, config.num_classes + 1))
        s = rng.uniform(*config.object_scale)
        aspect = rng.uniform(0.8, 1.25)
        w, h = s * np.sqrt(aspect), s / np.sqrt(aspect)
        w, h = min(w, size - 1.0), min(h, size - 1.0)
        x0 = rng.uniform(0, size - w)
        y0 = rng.uniform(0, size - h)
        orient = int(rng.integers(0, 4))
        outline = np.array([x0, y0, x0 + w, y0 + h])
        cov, window = _coverage(label, outline, size, orient)
        if not cov.any():
            continue
        box = _tight_box(cov, window)
        if boxes and iou_matrix(box, np.array(boxes)).max() > MAX_PAIR_IOU:
            continue
        color = rng.uniform(0, 1, size=3)
        while np.abs(color - background).mean() < 0.25:
            color = rng.uniform(0, 1, size=3)
        shade = rng.uniform(-config.color_jitter, config.color_jitter, size=3)
        boxes.append(box)
        labels.append(label)
        layers.append((cov, window, color, shade))

    for cov, (r0, r1, c0, c1), color, shade in layers:
        t = np.linspace(-0.5, 0.5, r1 - r0)[:, None] if r1 - r0 > 1 else np.zeros((1, 1))
        fill = color[:, None, None] + shade[:, None, None] * t[None]
        patch = image[:, r0:r1, c0:c1]
        image[:, r0:r1, c0:c1] = patch * (1 - cov) + fill * cov

    image += rng.normal(0.0, config.noise_std, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return Scene(image=image, gt_boxes=np.array(boxes).reshape(-1, 4), gt_labels=np.array(labels, dtype=np.int64), seed=seed)


def generate_split(seeds: Sequence[int], config: SceneConfig = SceneConfig()) -> List[Scene]:
    return [generate_scene(s, config) for s in seeds]


def split_seeds(base_seed: int, split: str, count: int) -> List[int]:
    """Disjoint, reproducible per-split scene seeds."""
    offset = {"train": 0, "val": 1, "test": 2}[split]
    return [(base_seed * 1_000_003 + offset) * 10_000_019 + i for i in range(count)]


# ----------------------------------------------------------------------- I/O
def _write_image(path: Path, image: np.ndarray) -> None:
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, c, h, w))
        fh.write(np.ascontiguousarray(image, dtype="<f8").tobytes())


def _read_image(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CorruptFileError(f"{path.name}: image file missing") from None
    if len(raw) < _HEADER.size:
        raise CorruptFileError(f"{path.name}: truncated header")
    magic, version, c, h, w = _HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise CorruptFileError(f"{path.name}: bad magic 0x{magic:08x}")
    if version != IMAGE_VERSION:
        raise VersionMismatchError(f"{path.name}: image version {version}, expected {IMAGE_VERSION}")
    expected = _HEADER.size + 8 * c * h * w
    if len(raw) != expected:
        raise CorruptFileError(f"{path.name}: payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64).reshape(c, h, w)


def write_dataset(scenes: Sequence[Scene], directory, config: SceneConfig = SceneConfig()) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scene in enumerate(scenes):
        name = f"{i:06d}.bin"
        _write_image(d / name, scene.image)
        entries.append(
            {
                "file": name,
                "seed": int(scene.seed),
                "boxes": [[float(v) for v in b] for b in scene.gt_boxes],
                "labels": [int(v) for v in scene.gt_labels],
            }
        )
    index = {"version": DATASET_VERSION, "size": len(entries), "config": config.to_dict(), "entries": entries}
    (d / "index.json").write_text(json.dumps(index, indent=1), encoding="utf-8")


def read_index(directory) -> dict:
    path = Path(directory) / "index.json"
    if not path.is_file():
        raise DatasetError(f"index file not found: {path}")
    try:
        index = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"index.json: {exc}") from None
    if index.get("version") != DATASET_VERSION:
        raise VersionMismatchError(f"dataset version {index.get('version')}, expected {DATASET_VERSION}")
    return index


def read_dataset(directory) -> List[Scene]:
    d = Path(directory)
    index = read_index(d)
    entries = index["entries"]
    if index.get("size") != len(entries):
        raise CorruptFileError(f"index.json: declares {index.get('size')} entries but lists {len(entries)}")
    on_disk = sorted(p.name for p in d.glob("*.bin"))
    names = [e["file"] for e in entries]
    if len(set(names)) != len(names):
        raise CorruptFileError("index.json: duplicate file names")
    if sorted(names) != on_disk:
        missing = sorted(set(names) - set(on_disk))
        extra = sorted(set(on_disk) - set(names))
        raise CorruptFileError(f"index/file mismatch: missing {missing[:3]}, unindexed {extra[:3]}")
    scenes = []
    for e in entries:
        image = _read_image(d / e["file"])
        boxes = np.array(e["boxes"], dtype=np.float64).reshape(-1, 4)
        labels = np.array(e["labels"], dtype=np.int64)
        if len(boxes) != len(labels):
            raise CorruptFileError(f"{e['file']}: {len(boxes)} boxes but {len(labels)} labels")
        scenes.append(Scene(image=image, gt_boxes=boxes, gt_labels=labels, seed=int(e.get("seed", 0))))
    return scenes


def dataset_config(directory) -> SceneConfig:
    return SceneConfig.from_dict(read_index(directory)["config"])
