"""COCO-format ingestion, synthetic conflicting-taxonomy datasets and the joint sampler."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError
from .taxonomy import (
    DEFAULT_MAX_LENGTH,
    CategoryVocabulary,
    DatasetEmbedding,
    DetectionPrompt,
    EmbedderSpec,
    build_prompt,
    embed_prompt,
    tokenize_prompt,
)

logger = logging.getLogger(__name__)


@dataclass
class AnnotationRecord:
    image_id: int
    boxes: np.ndarray   # [N, 4] absolute x1, y1, x2, y2
    labels: np.ndarray  # [N] category index into the source vocabulary
    dataset_name: str
    width: int = 0
    height: int = 0
    file_name: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise DataError(f"image {self.image_id}: {len(self.boxes)} boxes vs {len(self.labels)} labels")
        if self.width and self.height:
            self.boxes = np.clip(self.boxes, 0, [self.width, self.height, self.width, self.height])


@dataclass
class DatasetDescriptor:
    name: str
    vocabulary: CategoryVocabulary
    prompt: DetectionPrompt
    embedding: DatasetEmbedding
    size: int = 0
    category_frequencies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    image_root: Path | None = None

    @property
    def categories(self) -> tuple[str, ...]:
        return self.vocabulary.categories


def category_frequencies(records: Sequence[AnnotationRecord], num_categories: int) -> np.ndarray:
    """Fraction of images in which each category appears at least once."""
    counts = np.zeros(num_categories)
    for rec in records:
        counts[np.unique(rec.labels)] += 1
    return counts / max(len(records), 1)


def make_descriptor(vocab: CategoryVocabulary, records: Sequence[AnnotationRecord] = (),
                    max_length: int = DEFAULT_MAX_LENGTH, embedder: EmbedderSpec | None = None,
                    d: int = 64, image_root: Path | None = None) -> DatasetDescriptor:
    prompt = tokenize_prompt(build_prompt(vocab), max_length)
    embedding = embed_prompt(prompt, embedder or EmbedderSpec(), d)
    return DatasetDescriptor(vocab.dataset_name, vocab, prompt, embedding, len(records),
                             category_frequencies(records, len(vocab)), image_root)


def load_coco_format(path: str | Path, dataset_name: str | None = None, *,
                     max_length: int = DEFAULT_MAX_LENGTH, embedder: EmbedderSpec | None = None,
                     d: int = 64, image_root: str | Path | None = None):
    """Parse a COCO-style JSON file into a descriptor and per-image records.

    Category order follows ascending category id. Crowd annotations are dropped.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read COCO JSON ({exc})") from exc
    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise DataError(f"{path}: missing required key {key!r}")
    name = dataset_name or payload.get("info", {}).get("dataset_name") or path.parent.name
    cats = sorted(payload["categories"], key=lambda c: c["id"])
    vocab = CategoryVocabulary(name, tuple(c["name"] for c in cats))
    cat_index = {c["id"]: i for i, c in enumerate(cats)}
    images = {img["id"]: img for img in payload["images"]}
    per_image: dict[int, tuple[list, list]] = {i: ([], []) for i in images}
    for ann in payload["annotations"]:
        if ann.get("iscrowd", 0):
            continue
        if ann["category_id"] not in cat_index:
            raise DataError(f"{path}: annotation {ann.get('id')} has unknown category_id {ann['category_id']}")
        if ann["image_id"] not in images:
            raise DataError(f"{path}: annotation {ann.get('id')} refers to unknown image {ann['image_id']}")
        x, y, w, h = ann["bbox"]
        boxes, labels = per_image[ann["image_id"]]
        boxes.append([x, y, x + w, y + h])
        labels.append(cat_index[ann["category_id"]])
    records = [
        AnnotationRecord(i, per_image[i][0], per_image[i][1], name,
                         images[i].get("width", 0), images[i].get("height", 0),
                         images[i].get("file_name", ""))
        for i in sorted(images)
    ]
    root = Path(image_root) if image_root is not None else path.parent
    return make_descriptor(vocab, records, max_length, embedder, d, root), records


def write_coco_format(path: str | Path, vocab: CategoryVocabulary,
                      records: Sequence[AnnotationRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images, anns = [], []
    for rec in records:
        images.append({"id": int(rec.image_id), "file_name": rec.file_name,
                       "width": int(rec.width), "height": int(rec.height)})
        for box, label in zip(rec.boxes, rec.labels):
            x1, y1, x2, y2 = (float(v) for v in box)
            anns.append({"id": len(anns) + 1, "image_id": int(rec.image_id),
                         "category_id": int(label) + 1, "bbox": [x1, y1, x2 - x1, y2 - y1],
                         "area": (x2 - x1) * (y2 - y1), "iscrowd": 0})
    payload = {
        "info": {"dataset_name": vocab.dataset_name},
        "images": images,
        "annotations": anns,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(vocab.categories)],
    }
    path.write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_image(root: Path, record: AnnotationRecord) -> np.ndarray:
    with Image.open(Path(root) / record.file_name) as im:
        return np.asarray(im.convert("RGB"))


# ---------------------------------------------------------------------------
# Synthetic datasets with conflicting taxonomies


@dataclass
class SynthDatasetSpec:
    name: str
    visible: tuple[str, ...]
    rename: Mapping[str, str] = field(default_factory=dict)
    num_images: int = 200

    @property
    def vocabulary(self) -> CategoryVocabulary:
        return CategoryVocabulary(self.name, tuple(self.rename.get(c, c) for c in self.visible))


@dataclass
class SynthSpec:
    classes: tuple[str, ...] = ("circle", "square", "triangle")
    class_probs: tuple[float, ...] | None = None
    datasets: tuple[SynthDatasetSpec, ...] = (
        SynthDatasetSpec("A", ("circle", "square")),
        SynthDatasetSpec("B", ("triangle", "square"), {"square": "box"}),
    )
    image_size: int = 128
    min_shapes: int = 1
    max_shapes: int = 5
    min_size: int = 16
    max_size: int = 40
    max_iou: float = 0.3
    noise: float = 20.0

    @classmethod
    def with_datasets(cls, count: int, num_images: int = 200, **kw) -> "SynthSpec":
        pool = [
            SynthDatasetSpec("A", ("circle", "square"), {}, num_images),
            SynthDatasetSpec("B", ("triangle", "square"), {"square": "box"}, num_images),
            SynthDatasetSpec("C", ("circle", "triangle"), {"circle": "ring"}, num_images),
        ]
        if not 1 <= count <= len(pool):
            raise DataError(f"synthetic spec supports 1..{len(pool)} datasets, got {count}")
        return cls(datasets=tuple(pool[:count]), **kw)

    def probs(self) -> np.ndarray:
        p = np.ones(len(self.classes)) if self.class_probs is None else np.asarray(self.class_probs, float)
        return p / p.sum()

    def validate(self) -> None:
        if self.min_size < 4 or self.max_size < self.min_size or self.max_size >= self.image_size:
            raise DataError("impossible synthetic spec: shape sizes do not fit the image")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise DataError("impossible synthetic spec: min_shapes > max_shapes")
        if self.max_shapes * self.min_size ** 2 > 0.5 * self.image_size ** 2 / (1 + self.max_iou):
            raise DataError("impossible synthetic spec: too many shapes for the canvas")
        for ds in self.datasets:
            missing = set(ds.visible) - set(self.classes)
            if missing:
                raise DataError(f"dataset {ds.name!r} names unknown classes {sorted(missing)}")
        if self.class_probs is not None and len(self.class_probs) != len(self.classes):
            raise DataError("class_probs length does not match classes")


@dataclass
class SynthDataset:
    descriptor: DatasetDescriptor
    records: list[AnnotationRecord]
    images: list[np.ndarray]
    reference: list[AnnotationRecord]  # every rendered shape, labelled by global class index
    spec: SynthDatasetSpec


def _box_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, box, color) -> None:
    x1, y1, x2, y2 = box
    if kind == "circle":
        draw.ellipse([x1, y1, x2 - 1, y2 - 1], fill=color)
    elif kind == "square":
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=color)
    elif kind == "triangle":
        draw.polygon([((x1 + x2) / 2, y1), (x2 - 1, y2 - 1), (x1, y2 - 1)], fill=color)
    else:
        raise DataError(f"no renderer for shape class {kind!r}")


def render_image(spec: SynthSpec, rng: np.random.Generator):
    """One noisy canvas with 1..max_shapes non-overlapping shapes.

    Returns (uint8 image [S, S, 3], boxes [N, 4], class indices [N]).
    """
    s = spec.image_size
    base = rng.integers(60, 196)
    canvas = np.clip(base + rng.normal(0, spec.noise, (s, s, 3)), 0, 255).astype(np.uint8)
    img = Image.fromarray(canvas)
    draw = ImageDraw.Draw(img)
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    classes = rng.choice(len(spec.classes), size=count, p=spec.probs())
    boxes = []
    for _ in range(count):
        for _attempt in range(100):
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            x1 = int(rng.integers(0, s - size + 1))
            y1 = int(rng.integers(0, s - size + 1))
            box = (x1, y1, x1 + size, y1 + size)
            if all(_box_iou(box, other) <= spec.max_iou for other in boxes):
                boxes.append(box)
                break
        else:
            raise DataError("could not place a shape under the overlap limit; synthetic layout too crowded")
    for box, cls in zip(boxes, classes):
        color = tuple(int(v) for v in rng.integers(0, 256, 3))
        _draw_shape(draw, spec.classes[cls], box, color)
    return np.asarray(img), np.asarray(boxes, dtype=np.float64).reshape(-1, 4), classes.astype(np.int64)


def synth_conflict_datasets(spec: SynthSpec | None = None, seed: int = 0, *,
                            max_length: int = DEFAULT_MAX_LENGTH,
                            embedder: EmbedderSpec | None = None, d: int = 64,
                            image_offset: int = 0) -> list[SynthDataset]:
    """Render one dataset per dataset entry, each with its own partial, renamed annotation.

    Every image may contain any shape class; a dataset only annotates its
    ``visible`` classes (under its renamed names), so unlisted shapes remain
    in the pixels as unlabelled background.
    """
    spec = spec or SynthSpec()
    spec.validate()
    children = np.random.SeedSequence(seed).spawn(len(spec.datasets))
    out = []
    for ds_spec, child in zip(spec.datasets, children):
        rng = np.random.default_rng(child)
        vocab = ds_spec.vocabulary
        visible_index = {spec.classes.index(c): i for i, c in enumerate(ds_spec.visible)}
        records, reference, images = [], [], []
        for n in range(ds_spec.num_images):
            image, boxes, classes = render_image(spec, rng)
            image_id = image_offset + n + 1
            keep = np.array([c in visible_index for c in classes], dtype=bool)
            labels = np.array([visible_index[c] for c in classes[keep]], dtype=np.int64)
            fname = f"{image_id:06d}.png"
            records.append(AnnotationRecord(image_id, boxes[keep], labels, ds_spec.name,
                                            spec.image_size, spec.image_size, fname))
            reference.append(AnnotationRecord(image_id, boxes, classes, ds_spec.name,
                                              spec.image_size, spec.image_size, fname))
            images.append(image)
        descriptor = make_descriptor(vocab, records, max_length, embedder, d)
        out.append(SynthDataset(descriptor, records, images, reference, ds_spec))
    return out


def write_synth_dataset(root: str | Path, ds: SynthDataset, split: str) -> Path:
    """Write ``images/*.png`` and ``annotations/<split>.json`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for rec, image in zip(ds.records, ds.images):
        Image.fromarray(image).save(root / "images" / rec.file_name, optimize=False)
    records = [AnnotationRecord(r.image_id, r.boxes, r.labels, r.dataset_name, r.width, r.height,
                                f"images/{r.file_name}") for r in ds.records]
    out = root / "annotations" / f"{split}.json"
    write_coco_format(out, ds.descriptor.vocabulary, records)
    return out


# ---------------------------------------------------------------------------
# Re-balancing and the joint sampler


def repeat_factor_weights(category_freqs: Sequence[float], records: Sequence[AnnotationRecord],
                          threshold: float = 0.01, size: int | None = None) -> dict[int, float]:
    """Per-image repeat factor ``max over its categories of max(1, sqrt(t / f_c))``."""
    if not 0 < threshold < 1:
        raise DataError(f"rebalance threshold must lie in (0, 1), got {threshold}")
    freqs = np.asarray(category_freqs, dtype=np.float64)
    size = size or len(records) or 1
    freqs = np.where(freqs > 0, freqs, 1.0 / size)
    per_cat = np.maximum(1.0, np.sqrt(threshold / freqs))
    out = {}
    for rec in records:
        out[rec.image_id] = float(per_cat[np.unique(rec.labels)].max()) if len(rec.labels) else 1.0
    return out


@dataclass
class SamplerPlan:
    epoch_schedule: list[tuple[str, int]]
    per_image_repeat: dict[tuple[str, int], float]
    seed: int
    batch_size: int = 1
    batch_lengths: list[int] | None = None

    def __len__(self):
        return len(self.epoch_schedule)

    def batches(self):
        s = self.epoch_schedule
        if self.batch_lengths is None:
            return [s[i:i + self.batch_size] for i in range(0, len(s), self.batch_size)]
        bounds = np.cumsum([0] + list(self.batch_lengths))
        return [s[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass
class SamplerSource:
    name: str
    records: Sequence[AnnotationRecord]
    category_frequencies: np.ndarray | None = None


def make_sampler_plan(datasets: Sequence[SamplerSource], batch_size: int = 1, seed: int = 0,
                      balancing: bool = False, threshold: float = 0.01,
                      homogeneous: bool = False) -> SamplerPlan:
    """Shuffle the union of (repeated) images of every dataset into one schedule.

    With balancing on, each image is repeated ``floor(r) + Bernoulli(frac(r))``
    times under the plan seed.
    """
    if not datasets:
        raise DataError("sampler needs at least one dataset")
    rng = np.random.default_rng(seed)
    repeats: dict[tuple[str, int], float] = {}
    entries: list[tuple[str, int]] = []
    per_dataset: dict[str, list[tuple[str, int]]] = {}
    for src in datasets:
        if not src.records:
            raise DataError(f"dataset {src.name!r} is empty")
        if balancing:
            freqs = src.category_frequencies
            if freqs is None:
                n_cat = max((int(r.labels.max()) + 1 for r in src.records if len(r.labels)), default=0)
                freqs = category_frequencies(src.records, n_cat)
            factors = repeat_factor_weights(freqs, src.records, threshold)
        else:
            factors = {r.image_id: 1.0 for r in src.records}
        items = []
        for rec in src.records:
            r = factors[rec.image_id]
            repeats[(src.name, rec.image_id)] = r
            whole = math.floor(r)
            n = whole + int(rng.random() < r - whole)
            items.extend([(src.name, rec.image_id)] * n)
        per_dataset[src.name] = items
        entries.extend(items)
    if homogeneous:
        batches = []
        for name, items in per_dataset.items():
            order = rng.permutation(len(items))
            shuffled = [items[i] for i in order]
            batches.extend(shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size))
        order = rng.permutation(len(batches))
        schedule = [e for i in order for e in batches[i]]
        return SamplerPlan(schedule, repeats, seed, batch_size, [len(batches[i]) for i in order])
    schedule = [entries[i] for i in rng.permutation(len(entries))]
    return SamplerPlan(schedule, repeats, seed, batch_size)
