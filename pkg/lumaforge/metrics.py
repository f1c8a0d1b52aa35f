"""
Image-quality and segmentation metrics over generated pairs.

- ssim: gaussian-windowed SSIM on Rec.601 luma, valid positions only
- mask_iou / annotation_to_mask: instance overlap, COCO polygon and RLE decoding
- severity_report: per-tier SSIM statistics, optional per-instance IoU histogram,
  two-system win/loss/tie counts and clean-to-variant robustness drop
"""
from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np
from pycocotools import mask as mask_utils

from .errors import ContractError, ImageIOError, LumaforgeError
from .imagecore import ColorSpace, RasterImage, load_image
from .pairgen import ANNOTATIONS_NAME, PairManifest

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
IOU_BINS = np.linspace(0.0, 1.0, 21)
TIE_EPS = 1e-9


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ContractError(f"SSIM window must be odd and >= 3, got {self.window}")
        if self.k1 <= 0 or self.k2 <= 0 or self.sigma <= 0 or self.dynamic_range <= 0:
            raise ContractError("SSIM sigma, K1, K2 and dynamic range must be positive")

    def kernel(self) -> np.ndarray:
        g = cv2.getGaussianKernel(self.window, self.sigma, cv2.CV_64F)
        return np.outer(g, g.transpose())


def luma(img: RasterImage) -> np.ndarray:
    return img.data.astype(np.float64) @ np.asarray(LUMA_WEIGHTS, dtype=np.float64)


def ssim(a: RasterImage, b: RasterImage, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM over valid window positions; exactly 1.0 for identical inputs."""
    if a.shape != b.shape:
        raise ContractError(f"ssim: dimension mismatch {a.shape} vs {b.shape}")
    if a.space != ColorSpace.SRGB or b.space != ColorSpace.SRGB:
        raise ContractError("ssim expects srgb images")
    if min(a.height, a.width) < params.window:
        raise ContractError(f"ssim: image {a.width}x{a.height} smaller than the {params.window}px window")

    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    x = np.ascontiguousarray(luma(a))
    y = np.ascontiguousarray(luma(b))
    window = params.kernel()
    r = params.window // 2
    valid = (slice(r, -r), slice(r, -r))

    mu1 = cv2.filter2D(x, -1, window)[valid]
    mu2 = cv2.filter2D(y, -1, window)[valid]
    mu1_sq = mu1 * mu1
    mu2_sq = mu2 * mu2
    mu1_mu2 = mu1 * mu2
    sigma1_sq = cv2.filter2D(x * x, -1, window)[valid] - mu1_sq
    sigma2_sq = cv2.filter2D(y * y, -1, window)[valid] - mu2_sq
    sigma12 = cv2.filter2D(x * y, -1, window)[valid] - mu1_mu2

    ssim_map = ((2 * mu1_mu2 + c1) * (2 * sigma12 + c2)) / ((mu1_sq + mu2_sq + c1) * (sigma1_sq + sigma2_sq + c2))
    return float(ssim_map.mean())


# ---------------------------------------------------------------- masks

@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        arr = np.array(self.bits, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise ContractError(f"BinaryMask expects a 2-D array, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """|a & b| / |a | b|, 1.0 when both masks are empty."""
    if a.bits.shape != b.bits.shape:
        raise ContractError(f"mask_iou: dimension mismatch {a.bits.shape} vs {b.bits.shape}")
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a.bits, b.bits).sum()) / union


def annotation_to_mask(segmentation: Any, height: int, width: int) -> BinaryMask:
    """Rasterize a COCO segmentation: polygon list, uncompressed RLE or compressed RLE."""
    if isinstance(segmentation, list):
        if not segmentation:
            return BinaryMask(np.zeros((height, width), dtype=bool))
        rle = mask_utils.merge(mask_utils.frPyObjects(segmentation, height, width))
    elif isinstance(segmentation, dict) and isinstance(segmentation.get("counts"), list):
        rle = mask_utils.frPyObjects(segmentation, height, width)
    elif isinstance(segmentation, dict) and "counts" in segmentation:
        rle = dict(segmentation)
        if isinstance(rle["counts"], str):
            rle["counts"] = rle["counts"].encode("ascii")
    else:
        raise ContractError(f"unsupported segmentation type {type(segmentation).__name__}")
    if [int(s) for s in rle["size"]] != [int(height), int(width)]:
        raise ContractError(f"RLE size {rle['size']} does not match image {height}x{width}")
    return BinaryMask(mask_utils.decode(rle).astype(bool))


# ---------------------------------------------------------------- report

@dataclass
class TierStats:
    tier: int
    n: int = 0
    ssim_mean: Optional[float] = None
    ssim_std: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        # fid and fsim are reserved, never computed here
        return {"tier": self.tier, "n": self.n, "ssim_mean": self.ssim_mean, "ssim_std": self.ssim_std,
                "fid": None, "fsim": None}


@dataclass
class SeverityReport:
    tiers: Dict[int, TierStats] = field(default_factory=dict)
    rows: List[Dict[str, Any]] = field(default_factory=list)
    unreadable: List[Dict[str, Any]] = field(default_factory=list)
    iou_histograms: Dict[str, List[int]] = field(default_factory=dict)
    instance_counts: Dict[str, int] = field(default_factory=dict)
    comparison: Optional[Dict[str, Any]] = None
    robustness_drop: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tiers": [self.tiers[t].to_dict() for t in sorted(self.tiers)],
            "pairs": self.rows,
            "unreadable": self.unreadable,
            "iou_bins": [round(float(b), 2) for b in IOU_BINS],
            "iou_histograms": self.iou_histograms,
            "instance_counts": self.instance_counts,
            "comparison": self.comparison,
            "robustness_drop": self.robustness_drop,
        }


def _pair_ssim(pair, out_root: Path, params: SsimParams) -> Tuple[Any, Optional[float], Optional[str]]:
    clean_path = Path(pair.clean_path)
    clean_path = clean_path if clean_path.is_absolute() else out_root / clean_path
    try:
        clean = load_image(clean_path)
        variant = load_image(out_root / pair.variant_path)
        return pair, ssim(clean, variant, params), None
    except (ImageIOError, ContractError) as e:
        return pair, None, str(e)


def iou_histogram(values: Iterable[float]) -> List[int]:
    counts, _ = np.histogram(np.asarray(list(values), dtype=np.float64), bins=IOU_BINS)
    return [int(c) for c in counts]


def load_predictions(path: str | Path) -> List[Dict[str, Any]]:
    """Prediction records: {system, stream, annotation_id, segmentation[, variant_index]}."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LumaforgeError(f"predictions file not found: {path}")
    except json.JSONDecodeError as e:
        raise LumaforgeError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    records = doc.get("predictions") if isinstance(doc, dict) else doc
    if not isinstance(records, list):
        raise LumaforgeError(f"{path}: expected a list of prediction records")
    for r in records:
        if not isinstance(r, dict) or not {"system", "stream", "annotation_id", "segmentation"} <= set(r):
            raise LumaforgeError(f"{path}: prediction record missing system/stream/annotation_id/segmentation: {r!r}")
        if r["stream"] not in ("clean", "variant"):
            raise LumaforgeError(f"{path}: stream must be 'clean' or 'variant', got {r['stream']!r}")
    return records


def _instance_ious(manifest: PairManifest, out_root: Path, predictions: Sequence[Mapping[str, Any]]
                   ) -> Dict[Tuple[str, str, Any, int], float]:
    """(system, stream, annotation_id, variant_index) -> IoU against ground truth."""
    doc = json.loads((out_root / (manifest.annotations_file or ANNOTATIONS_NAME)).read_text(encoding="utf-8"))
    sizes = {str(im["id"]): (int(im["height"]), int(im["width"])) for im in doc["images"]}
    gt = {str(a["id"]): a for a in doc["annotations"]}
    out: Dict[Tuple[str, str, Any, int], float] = {}
    for rec in predictions:
        ann = gt.get(str(rec["annotation_id"]))
        if ann is None:
            logger.warning("prediction for unknown annotation %s ignored", rec["annotation_id"])
            continue
        h, w = sizes[str(ann["image_id"])]
        truth = annotation_to_mask(ann["segmentation"], h, w)
        pred = annotation_to_mask(rec["segmentation"], h, w)
        key = (str(rec["system"]), rec["stream"], str(rec["annotation_id"]), int(rec.get("variant_index", 0)))
        out[key] = mask_iou(pred, truth)
    return out


def severity_report(manifest: PairManifest, out_root: str | Path, *, params: SsimParams = SsimParams(),
                    predictions: Optional[Sequence[Mapping[str, Any]]] = None,
                    compare: Optional[Tuple[str, str]] = None, workers: int = 1) -> SeverityReport:
    """Per-tier SSIM statistics; IoU analysis when prediction masks are supplied. Never raises on bad pairs."""
    out = Path(out_root)
    report = SeverityReport(tiers={t: TierStats(t) for t in (1, 2, 3)})

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda p: _pair_ssim(p, out, params), manifest.pairs))
    else:
        results = [_pair_ssim(p, out, params) for p in manifest.pairs]

    scores: Dict[int, List[float]] = defaultdict(list)
    for pair, score, err in results:
        if err is not None:
            report.unreadable.append({"image_id": pair.image_id, "variant_index": pair.variant_index, "reason": err})
            continue
        scores[pair.severity].append(score)
        report.rows.append({
            "image_id": pair.image_id,
            "variant_index": pair.variant_index,
            "severity": pair.severity,
            "n_ops": len(pair.recipe.steps),
            "ops": "+".join(s.kind.value for s in pair.recipe.steps),
            "ssim": score,
        })
    for tier, stats in report.tiers.items():
        vals = np.asarray(scores.get(tier, []), dtype=np.float64)
        stats.n = int(vals.size)
        if vals.size:
            stats.ssim_mean = float(vals.mean())
            stats.ssim_std = float(vals.std())

    if predictions:
        _add_iou_analysis(report, manifest, out, predictions, compare)
    return report


def _add_iou_analysis(report: SeverityReport, manifest: PairManifest, out: Path,
                      predictions: Sequence[Mapping[str, Any]], compare: Optional[Tuple[str, str]]) -> None:
    ious = _instance_ious(manifest, out, predictions)
    groups: Dict[str, List[float]] = defaultdict(list)
    for (system, stream, _, _), v in sorted(ious.items()):
        groups[f"{system}/{stream}"].append(v)
    report.iou_histograms = {k: iou_histogram(v) for k, v in sorted(groups.items())}
    report.instance_counts = {k: len(v) for k, v in sorted(groups.items())}

    systems = sorted({k[0] for k in ious})
    if compare is None and len(systems) >= 2:
        compare = (systems[0], systems[1])
    if compare is not None:
        a, b = compare
        wins = losses = ties = 0
        for (system, stream, ann_id, k), va in ious.items():
            if system != a or stream != "variant":
                continue
            vb = ious.get((b, "variant", ann_id, k))
            if vb is None:
                continue
            if va > vb + TIE_EPS:
                wins += 1
            elif va < vb - TIE_EPS:
                losses += 1
            else:
                ties += 1
        report.comparison = {"system_a": a, "system_b": b, "wins": wins, "losses": losses, "ties": ties}

    # annotation -> tier of each variant
    tier_of: Dict[Tuple[str, int], int] = {}
    for p in manifest.pairs:
        for ann_id in p.annotation_ids:
            tier_of[(str(ann_id), p.variant_index)] = p.severity
    for system in systems:
        drops: Dict[int, List[float]] = defaultdict(list)
        for (s, stream, ann_id, k), v_var in ious.items():
            if s != system or stream != "variant":
                continue
            v_clean = ious.get((system, "clean", ann_id, 0))
            if v_clean is None or (ann_id, k) not in tier_of:
                continue
            drops[tier_of[(ann_id, k)]].append(v_clean - v_var)
        report.robustness_drop[system] = {
            str(t): (float(np.mean(drops[t])) if drops.get(t) else None) for t in (1, 2, 3)
        }


def write_report(report: SeverityReport, json_path: str | Path, csv_path: Optional[str | Path] = None) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["image_id", "variant_index", "severity", "n_ops", "ops", "ssim"])
            writer.writeheader()
            writer.writerows(report.rows)
