"""
Deterministic synthetic COCO corpus for tests and demos.

Each image is a smooth gradient with a sinusoidal texture and mild noise,
plus two annotated objects painted slightly brighter than the background:
a polygon quadrilateral and an ellipse stored as RLE (compressed on even
image ids, uncompressed on odd ones).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import cv2
import numpy as np
from PIL import Image
from pycocotools import mask as mask_utils

CATEGORIES = [{"id": 1, "name": "quad", "supercategory": "shape"},
              {"id": 2, "name": "blob", "supercategory": "shape"}]


@dataclass
class FixtureCorpus:
    annotation_file: Path
    image_root: Path
    image_ids: List[int] = field(default_factory=list)

    def image_path(self, image_id: int) -> Path:
        return self.image_root / f"img_{int(image_id):03d}.png"


def uncompressed_rle(mask: np.ndarray) -> Dict[str, Any]:
    """Column-major run lengths starting with a zero run, as COCO stores them."""
    flat = np.asarray(mask, dtype=np.uint8).ravel(order="F")
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": [int(c) for c in counts]}


def _texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx / width + np.sin(angle) * yy / height)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    freq = rng.uniform(0.15, 0.45, size=2)
    wave = 0.5 + 0.5 * np.sin(freq[0] * xx + freq[1] * yy + rng.uniform(0, 2 * np.pi))
    base = 0.2 + 0.45 * ramp + 0.15 * wave
    tint = rng.uniform(0.85, 1.15, size=3)
    img = base[..., None] * tint[None, None, :]
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.05, 0.9)


def _quad(rng: np.random.Generator, height: int, width: int) -> List[float]:
    cx, cy = rng.uniform(0.3, 0.7) * width, rng.uniform(0.3, 0.7) * height
    rx, ry = rng.uniform(0.12, 0.25) * width, rng.uniform(0.12, 0.25) * height
    pts = []
    for k in range(4):
        a = k * np.pi / 2 + rng.uniform(-0.3, 0.3)
        pts += [float(np.clip(cx + rx * np.cos(a), 1, width - 2)), float(np.clip(cy + ry * np.sin(a), 1, height - 2))]
    return [round(v, 2) for v in pts]


def _ellipse(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    center = (int(rng.integers(width // 4, 3 * width // 4)), int(rng.integers(height // 4, 3 * height // 4)))
    axes = (int(rng.integers(3, width // 5)), int(rng.integers(3, height // 5)))
    cv2.ellipse(mask, center, axes, float(rng.uniform(0, 180)), 0, 360, 1, thickness=-1)
    return mask


def _annotation(ann_id: int, image_id: int, category_id: int, segmentation: Any, rle: Dict[str, Any]) -> Dict[str, Any]:
    x, y, w, h = (float(v) for v in mask_utils.toBbox(rle))
    return {
        "id": ann_id, "image_id": image_id, "category_id": category_id,
        "segmentation": segmentation, "area": float(mask_utils.area(rle)),
        "bbox": [x, y, w, h], "iscrowd": 0 if isinstance(segmentation, list) else 1,
    }


def build_fixture_corpus(root: str | Path, n_images: int = 20, seed: int = 0,
                         size: Tuple[int, int] = (64, 48)) -> FixtureCorpus:
    """Write `n_images` PNGs under root/images and root/annotations.json.

    Args:
        size: (width, height) of every image
    """
    root = Path(root)
    image_root = root / "images"
    image_root.mkdir(parents=True, exist_ok=True)
    width, height = size
    images, annotations = [], []
    corpus = FixtureCorpus(annotation_file=root / "annotations.json", image_root=image_root)

    for image_id in range(1, n_images + 1):
        rng = np.random.default_rng([seed, image_id])
        img = _texture(rng, height, width)

        poly = _quad(rng, height, width)
        poly_rle = mask_utils.merge(mask_utils.frPyObjects([poly], height, width))
        blob = _ellipse(rng, height, width)
        blob_rle = mask_utils.encode(np.asfortranarray(blob))

        for m, lift in ((mask_utils.decode(poly_rle), 0.08), (blob, -0.06)):
            img[m.astype(bool)] += lift
        img = np.clip(img, 0.0, 1.0)

        path = corpus.image_path(image_id)
        Image.fromarray(np.floor(img * 255.0 + 0.5).astype(np.uint8)).save(path, format="PNG")

        if image_id % 2 == 0:
            blob_seg: Any = {"size": [height, width], "counts": blob_rle["counts"].decode("ascii")}
        else:
            blob_seg = uncompressed_rle(blob)
        images.append({"id": image_id, "file_name": path.name, "width": width, "height": height})
        annotations.append(_annotation(2 * image_id - 1, image_id, 1, [poly], poly_rle))
        annotations.append(_annotation(2 * image_id, image_id, 2, blob_seg, blob_rle))
        corpus.image_ids.append(image_id)

    doc = {
        "info": {"description": "lumaforge synthetic fixture", "version": "1"},
        "licenses": [],
        "images": images,
        "annotations": annotations,
        "categories": CATEGORIES,
    }
    corpus.annotation_file.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return corpus
