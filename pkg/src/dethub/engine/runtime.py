"""Shared plumbing for training and evaluation: datasets on disk, prompts per mode, model build."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from ..boxes import xyxy_to_cxcywh
from ..config import TrainConfig
from ..data import AnnotationRecord, DatasetDescriptor, load_coco_format, load_image, make_descriptor
from ..detector import Detector, DetectorConfig
from ..errors import DataError
from ..losses import GroundTruth
from ..taxonomy import (
    CategoryVocabulary,
    DatasetEmbedding,
    DetectionPrompt,
    EmbedderSpec,
    build_prompt,
    embed_prompt,
    get_embedder,
    tokenize_prompt,
)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def embedder_spec(cfg: TrainConfig) -> EmbedderSpec:
    e = cfg.embedder
    return EmbedderSpec(e.kind, e.embed_dim, e.seed, e.contextual)


def frozen_embedder(cfg: TrainConfig):
    return get_embedder(embedder_spec(cfg), cfg.model.hidden_dim)


def detector_config(cfg: TrainConfig) -> DetectorConfig:
    rpn, dec = cfg.effective_adaptation()
    return DetectorConfig(
        hidden_dim=cfg.model.hidden_dim,
        feature_channels=cfg.model.feature_channels,
        backbone_width=cfg.model.backbone_width,
        backbone_depth=cfg.model.backbone_depth,
        num_queries=cfg.queries.count,
        num_stages=cfg.model.stages,
        heads=cfg.model.heads,
        kernel_size=cfg.dyconv.kernel_size,
        bottleneck_ratio=cfg.dyconv.bottleneck_ratio,
        embed_dim=cfg.embedder.embed_dim,
        rpn_adaptation=rpn,
        decoder_adaptation=dec,
        linear_test_mode=cfg.model.linear_test_mode,
    )


def build_model(cfg: TrainConfig) -> Detector:
    torch.manual_seed(cfg.train.seed)
    return Detector(detector_config(cfg))


@dataclass
class DatasetBundle:
    """A descriptor, its records and (lazily decoded) images."""

    descriptor: DatasetDescriptor
    records: list[AnnotationRecord]
    images: dict[int, np.ndarray] = field(default_factory=dict)
    root: Path | None = None

    @property
    def name(self) -> str:
        return self.descriptor.name

    def record(self, image_id: int) -> AnnotationRecord:
        if not hasattr(self, "_by_id"):
            self._by_id = {r.image_id: r for r in self.records}
        return self._by_id[image_id]

    def image(self, image_id: int) -> np.ndarray:
        if image_id not in self.images:
            if self.root is None:
                raise DataError(f"{self.name}: image {image_id} not in memory and no image root")
            self.images[image_id] = load_image(self.root, self.record(image_id))
        return self.images[image_id]


def load_dataset_dir(path: str | Path, split: str, cfg: TrainConfig) -> DatasetBundle:
    """Load ``<path>/annotations/<split>.json`` with images resolved under ``<path>``."""
    path = Path(path)
    ann = path / "annotations" / f"{split}.json"
    if not ann.exists():
        raise DataError(f"{path}: no annotations for split {split!r}")
    descriptor, records = load_coco_format(
        ann, max_length=cfg.prompt.max_length, embedder=embedder_spec(cfg),
        d=cfg.model.hidden_dim, image_root=path)
    return DatasetBundle(descriptor, records, root=path)


def bundle_from_synth(ds, cfg: TrainConfig) -> DatasetBundle:
    descriptor = make_descriptor(ds.descriptor.vocabulary, ds.records, cfg.prompt.max_length,
                                 embedder_spec(cfg), cfg.model.hidden_dim)
    images = {r.image_id: img for r, img in zip(ds.records, ds.images)}
    return DatasetBundle(descriptor, list(ds.records), images)


def image_tensor(image: np.ndarray, size: int) -> tuple[torch.Tensor, float, float]:
    """Normalized ``[3, size, size]`` tensor plus the (x, y) scale applied."""
    h, w = image.shape[:2]
    if (h, w) != (size, size):
        image = np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))
    t = torch.from_numpy(np.array(image, copy=True)).permute(2, 0, 1).float() / 255.0
    return (t - PIXEL_MEAN) / PIXEL_STD, size / w, size / h


def normalized_gt(record: AnnotationRecord, labels: np.ndarray, image_hw: tuple[int, int]) -> GroundTruth:
    h, w = image_hw
    boxes = torch.as_tensor(record.boxes, dtype=torch.float32).reshape(-1, 4)
    boxes = boxes / torch.tensor([w, h, w, h], dtype=torch.float32)
    keep = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return GroundTruth(torch.as_tensor(labels, dtype=torch.long)[keep], xyxy_to_cxcywh(boxes[keep]))


@dataclass
class Conditioning:
    """Prompt and embedding an image is trained or evaluated against."""

    prompt: DetectionPrompt
    embedding: DatasetEmbedding
    label_map: np.ndarray  # source-vocabulary index -> prompt category index
    category_tokens: torch.Tensor


class PromptResolver:
    """Chooses the prompt per image according to the adaptation mode.

    * query-adaptation: the image's source-dataset prompt.
    * global-embedding: one prompt over the union of every dataset's categories.
    * instance-embedding: a prompt of only the categories present in the image.
    """

    def __init__(self, cfg: TrainConfig, descriptors: Sequence[DatasetDescriptor],
                 global_categories: Sequence[str] | None = None):
        self.cfg = cfg
        self.mode = cfg.adaptation.mode
        self.descriptors = {d.name: d for d in descriptors}
        self.spec = embedder_spec(cfg)
        self._cache: dict[tuple, Conditioning] = {}
        if global_categories is None:
            global_categories = []
            for d in descriptors:
                global_categories.extend(c for c in d.categories if c not in global_categories)
        self.global_categories = tuple(global_categories)

    def _conditioning(self, key, categories: Sequence[str], label_map: np.ndarray) -> Conditioning:
        if key not in self._cache:
            prompt = tokenize_prompt(build_prompt(CategoryVocabulary("_", tuple(categories))),
                                     self.cfg.prompt.max_length)
            emb = embed_prompt(prompt, self.spec, self.cfg.model.hidden_dim)
            self._cache[key] = Conditioning(prompt, emb, label_map,
                                            torch.as_tensor(prompt.category_token_matrix()))
        return self._cache[key]

    def dataset(self, name: str) -> Conditioning:
        """Conditioning used at evaluation time for ``name``."""
        desc = self.descriptors[name]
        if self.mode == "global-embedding":
            label_map = np.array([self.global_categories.index(c) for c in desc.categories])
            return self._conditioning(("global",), self.global_categories, label_map)
        key = ("dataset", name)
        if key not in self._cache:
            self._cache[key] = Conditioning(desc.prompt, desc.embedding,
                                            np.arange(len(desc.categories)),
                                            torch.as_tensor(desc.prompt.category_token_matrix()))
        return self._cache[key]

    def for_record(self, name: str, record: AnnotationRecord) -> Conditioning:
        if self.mode != "instance-embedding" or not len(record.labels):
            return self.dataset(name)
        desc = self.descriptors[name]
        present = sorted(set(int(l) for l in record.labels))
        label_map = np.full(len(desc.categories), -1)
        label_map[present] = np.arange(len(present))
        return self._conditioning(("instance", name, tuple(present)),
                                  [desc.categories[i] for i in present], label_map)
