"""Deterministic synthetic multi-object scenes with in-distribution and OOD splits.

Every scene is generated from its own SplitMix64 stream seeded with
``seed ^ scene_index`` (indices run across splits), so a scene never depends on
the order in which scenes are produced.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .constants import SPLITS, UsageError
from .diffcore import Tensor
from .imageio import read_ppm, write_ppm
from .settings import DatasetSpec
from .splitmix import SplitMix64

logger = logging.getLogger(__name__)

OOD_CLASS_ID = -1

BASE_COLORS: Dict[str, Tuple[float, float, float]] = {
    "circle": (0.90, 0.20, 0.20),
    "square": (0.20, 0.75, 0.25),
    "triangle": (0.20, 0.35, 0.90),
    "plus": (0.95, 0.85, 0.15),
    "ring": (0.85, 0.25, 0.85),
    "star": (0.15, 0.85, 0.85),
    "cross": (0.95, 0.55, 0.10),
    "crescent": (0.55, 0.30, 0.10),
}


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    center: Tuple[float, float]
    size: Tuple[float, float]
    color: Tuple[float, float, float]
    shape: Optional[str] = None

    @property
    def is_ood(self) -> bool:
        return self.class_id < 0

    def clipped_box(self) -> Tuple[float, float, float, float]:
        """(x0, y0, x1, y1) of the box clipped to the unit square."""
        (cx, cy), (w, h) = self.center, self.size
        return (max(0.0, cx - w / 2), max(0.0, cy - h / 2), min(1.0, cx + w / 2), min(1.0, cy + h / 2))

    def to_json(self) -> dict:
        return {
            "class_id": self.class_id,
            "cx": self.center[0],
            "cy": self.center[1],
            "w": self.size[0],
            "h": self.size[1],
            "shape": self.shape,
            "color": list(self.color),
        }

    @classmethod
    def from_json(cls, data: dict) -> "SceneObject":
        return cls(
            class_id=int(data["class_id"]),
            center=(float(data["cx"]), float(data["cy"])),
            size=(float(data["w"]), float(data["h"])),
            color=tuple(data.get("color", (0.0, 0.0, 0.0))),
            shape=data.get("shape"),
        )


@dataclass(frozen=True)
class Scene:
    image: Tensor
    objects: Tuple[SceneObject, ...]
    index: int = 0

    @property
    def is_ood(self) -> bool:
        # A scene is OOD when none of its objects belongs to an in-distribution class
        return not any(obj.class_id >= 0 for obj in self.objects)

    def labels(self, num_classes: int) -> np.ndarray:
        """Multi-hot vector of the in-distribution classes present."""
        out = np.zeros(num_classes)
        for obj in self.objects:
            if obj.class_id >= 0:
                out[obj.class_id] = 1.0
        return out


class Dataset(NamedTuple):
    train: List[Scene]
    val: List[Scene]
    test_id: List[Scene]
    test_ood: List[Scene]


def _shape_mask(shape: str, obj: SceneObject, size: int) -> np.ndarray:
    """Boolean [S,S] mask of the filled shape, restricted to the object's clipped box."""
    (cx, cy), (w, h) = obj.center, obj.size

    def px(u: float, v: float) -> Tuple[float, float]:
        return ((cx + u * w / 2) * size, (cy + v * h / 2) * size)

    def box(u0: float, v0: float, u1: float, v1: float) -> List[float]:
        (x0, y0), (x1, y1) = px(u0, v0), px(u1, v1)
        return [x0, y0, x1, y1]

    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    match shape:
        case "circle":
            draw.ellipse(box(-1, -1, 1, 1), fill=255)
        case "square":
            draw.rectangle(box(-1, -1, 1, 1), fill=255)
        case "triangle":
            draw.polygon([px(0, -1), px(1, 1), px(-1, 1)], fill=255)
        case "plus":
            draw.rectangle(box(-0.3, -1, 0.3, 1), fill=255)
            draw.rectangle(box(-1, -0.3, 1, 0.3), fill=255)
        case "ring":
            draw.ellipse(box(-1, -1, 1, 1), fill=255)
            draw.ellipse(box(-0.55, -0.55, 0.55, 0.55), fill=0)
        case "star":
            angles = -np.pi / 2 + np.arange(10) * np.pi / 5
            radii = np.where(np.arange(10) % 2 == 0, 1.0, 0.4)
            draw.polygon([px(r * np.cos(a), r * np.sin(a)) for r, a in zip(radii, angles)], fill=255)
        case "cross":
            t = 0.25
            draw.polygon([px(-1 + t, -1), px(1, 1 - t), px(1 - t, 1), px(-1, -1 + t)], fill=255)
            draw.polygon([px(1 - t, -1), px(1, -1 + t), px(-1 + t, 1), px(-1, 1 - t)], fill=255)
        case "crescent":
            draw.ellipse(box(-1, -1, 1, 1), fill=255)
            draw.ellipse(box(-0.5, -1, 1.5, 1), fill=0)
        case _:
            raise UsageError(f"Unknown shape {shape!r}")

    x0, y0, x1, y1 = (edge * size for edge in obj.clipped_box())
    centers = np.arange(size) + 0.5
    in_cols = (centers >= x0) & (centers <= x1)
    in_rows = (centers >= y0) & (centers <= y1)
    return (np.asarray(canvas) > 0) & in_rows[:, None] & in_cols[None, :]


def rasterize(objects: Sequence[SceneObject], size: int, rng: SplitMix64,
              base_gray: float = 0.5, noise_amplitude: float = 0.05) -> Tensor:
    """Draw ``objects`` back-to-front over a noisy gray background.

    :param objects: objects in drawing order; later objects cover earlier ones
    :param size: image side S (at least 32)
    :param rng: stream used for the background noise
    :return: [3,S,S] image with values in [0,1]
    """
    if size < 32:
        raise UsageError(f"image size must be at least 32, got {size}")
    noise = rng.uniform_block(3 * size * size, -noise_amplitude, noise_amplitude)
    image = np.clip(base_gray + noise.reshape(3, size, size), 0.0, 1.0)
    for obj in objects:
        mask = _shape_mask(obj.shape, obj, size)
        image[:, mask] = np.asarray(obj.color)[:, None]
    return Tensor(image)


def _make_object(rng: SplitMix64, spec: DatasetSpec, shape: str, class_id: int) -> SceneObject:
    w = rng.uniform(*spec.size_range)
    h = rng.uniform(*spec.size_range)
    cx = rng.uniform(w / 2, 1.0 - w / 2)
    cy = rng.uniform(h / 2, 1.0 - h / 2)
    color = tuple(
        float(np.clip(c * (1.0 + rng.uniform(-spec.color_jitter, spec.color_jitter)), 0.0, 1.0))
        for c in BASE_COLORS[shape]
    )
    return SceneObject(class_id=class_id, center=(cx, cy), size=(w, h), color=color, shape=shape)


def generate_scene(spec: DatasetSpec, index: int, ood: bool) -> Scene:
    """One scene; in-distribution scenes hold >= 1 ID object plus an optional OOD distractor."""
    rng = SplitMix64(spec.seed ^ index)
    low, high = spec.objects_per_scene
    count = rng.randint(low, high)
    objects: List[SceneObject] = []
    if ood:
        for _ in range(count):
            shape = spec.ood_shapes[rng.randint(0, len(spec.ood_shapes) - 1)]
            objects.append(_make_object(rng, spec, shape, OOD_CLASS_ID))
    else:
        # Distractors are drawn first so ID objects stay on top
        if spec.ood_shapes and rng.bernoulli(spec.distractor_probability):
            shape = spec.ood_shapes[rng.randint(0, len(spec.ood_shapes) - 1)]
            objects.append(_make_object(rng, spec, shape, OOD_CLASS_ID))
        for _ in range(count):
            class_id = rng.randint(0, spec.num_classes - 1)
            objects.append(_make_object(rng, spec, spec.class_shapes[class_id], class_id))
    image = rasterize(objects, spec.image_size, rng, spec.base_gray, spec.noise_amplitude)
    return Scene(image=image, objects=tuple(objects), index=index)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Generate the four splits; a pure function of ``spec``."""
    spec.check_shapes()
    counts = spec.counts
    layout = [
        ("train", counts.train, False),
        ("val", counts.val, False),
        ("test_id", counts.test_id, False),
        ("test_ood", counts.test_ood, True),
    ]
    splits: Dict[str, List[Scene]] = {}
    offset = 0
    for name, count, ood in layout:
        splits[name] = [generate_scene(spec, offset + i, ood) for i in range(count)]
        offset += count
    logger.info(f"Generated dataset seed={spec.seed}: " +
                ", ".join(f"{name}={len(scenes)}" for name, scenes in splits.items()))
    return Dataset(**splits)


def dump_dataset(dataset: Dataset, directory: str | Path) -> None:
    """Write one directory per split: binary PPM images plus ``annotations.json``."""
    directory = Path(directory)
    for name in SPLITS:
        split_dir = directory / name
        split_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for position, scene in enumerate(getattr(dataset, name)):
            filename = f"{position:05d}.ppm"
            write_ppm(split_dir / filename, scene.image.data)
            records.append({
                "file": filename,
                "index": scene.index,
                "is_ood": scene.is_ood,
                "objects": [obj.to_json() for obj in scene.objects],
            })
        with open(split_dir / "annotations.json", "w") as f:
            json.dump({"split": name, "scenes": records}, f, indent=2, sort_keys=True)
        logger.info(f"Wrote {len(records)} scenes to {split_dir}")


def load_split(split_dir: str | Path) -> List[Scene]:
    """Read a split written by ``dump_dataset``; images come back 8-bit quantized."""
    split_dir = Path(split_dir)
    try:
        with open(split_dir / "annotations.json", "r") as f:
            document = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"No annotations.json in {split_dir}")
    scenes = []
    for record in document["scenes"]:
        objects = tuple(SceneObject.from_json(o) for o in record["objects"])
        scenes.append(Scene(image=Tensor(read_ppm(split_dir / record["file"])),
                            objects=objects, index=int(record.get("index", 0))))
    return scenes


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    return Dataset(**{name: load_split(directory / name) for name in SPLITS})
