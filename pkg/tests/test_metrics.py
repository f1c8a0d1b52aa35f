from __future__ import annotations

import csv
import json
from copy import deepcopy

import cv2
import numpy as np
import pytest

from lumaforge.config import DEFAULT_SEVERITY_CONFIG
from lumaforge.errors import ContractError
from lumaforge.fixtures import uncompressed_rle
from lumaforge.imagecore import RasterImage
from lumaforge.metrics import (
    BinaryMask,
    SsimParams,
    annotation_to_mask,
    iou_histogram,
    luma,
    mask_iou,
    severity_report,
    ssim,
    write_report,
)
from lumaforge.pairgen import generate_pairs, ingest_coco
from lumaforge.sampler import SeverityConfig, SeverityPolicy

IDENTITY = {
    ("exposure", "ev"): 0.0, ("brightness", "percent"): 0.0, ("contrast", "factor"): 1.0,
    ("gamma", "gamma"): 1.0, ("warm", "tint"): 0.0, ("cool", "tint"): 0.0,
    ("vignette", "strength"): 0.0, ("vignette", "center_offset"): 0.0,
    ("shadow", "strength"): 0.0, ("grain", "intensity"): 0.0, ("haze", "alpha"): 0.0,
    ("color_cast", "strength"): 0.0, ("flare", "amplitude"): 0.0, ("flare", "edge_margin"): 0.0,
}


def _identity_config() -> SeverityConfig:
    doc = deepcopy(DEFAULT_SEVERITY_CONFIG)
    for (op, param), value in IDENTITY.items():
        for tier in doc["operations"][op][param]:
            doc["operations"][op][param][tier] = [value, value]
    return SeverityConfig.from_dict(doc)


def _ssim_oracle(a: RasterImage, b: RasterImage, window: int = 11, sigma: float = 1.5) -> float:
    x, y = luma(a), luma(b)
    k = np.arange(window) - window // 2
    g = np.exp(-(k ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(x.shape[0] - window + 1):
        for j in range(x.shape[1] - window + 1):
            px, py = x[i:i + window, j:j + window], y[i:i + window, j:j + window]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_gaussian_window_matches_closed_form():
    k = np.arange(11) - 5
    g = np.exp(-(k ** 2) / (2 * 1.5 ** 2))
    assert np.allclose(SsimParams().kernel(), np.outer(g, g) / np.outer(g, g).sum(), atol=1e-12)
    assert cv2.getGaussianKernel(11, 1.5).shape == (11, 1)


def test_ssim_identical_inputs_is_exactly_one(textured):
    assert ssim(textured, textured) == 1.0


def test_ssim_is_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = RasterImage(rng.uniform(size=(16, 16, 3)))
        b = RasterImage(rng.uniform(size=(16, 16, 3)))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_matches_brute_force_on_gradient_offset():
    ramp = np.tile(np.linspace(0.0, 0.85, 64)[None, :, None], (64, 1, 3))
    a = RasterImage(ramp)
    b = RasterImage(ramp + 0.1)
    assert ssim(a, b) == pytest.approx(_ssim_oracle(a, b), abs=1e-6)


def test_ssim_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(10):
        a = RasterImage(rng.uniform(size=(64, 64, 3)))
        b = RasterImage(np.clip(a.data + rng.normal(0, 0.1, size=a.shape), 0, 1))
        assert ssim(a, b) == pytest.approx(_ssim_oracle(a, b), abs=1e-6)


def test_ssim_contracts():
    small = RasterImage.filled(8, 8, (0.5, 0.5, 0.5))
    with pytest.raises(ContractError, match="window"):
        ssim(small, small)
    with pytest.raises(ContractError, match="mismatch"):
        ssim(RasterImage.filled(12, 12, (0, 0, 0)), RasterImage.filled(12, 13, (0, 0, 0)))
    with pytest.raises(ContractError):
        SsimParams(window=10)


def test_mask_iou_examples():
    a = BinaryMask(np.array([[1, 1], [0, 0]]))
    b = BinaryMask(np.array([[0, 1], [0, 1]]))
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, BinaryMask(np.array([[0, 0], [1, 1]]))) == 0.0
    empty = BinaryMask(np.zeros((2, 2)))
    assert mask_iou(empty, empty) == 1.0
    with pytest.raises(ContractError):
        mask_iou(a, BinaryMask(np.zeros((3, 2))))


def test_polygon_and_rle_decoding_agree():
    mask = np.zeros((10, 12), dtype=np.uint8)
    mask[2:6, 3:9] = 1
    poly = [[3.0, 2.0, 9.0, 2.0, 9.0, 6.0, 3.0, 6.0]]
    from_poly = annotation_to_mask(poly, 10, 12)
    from_rle = annotation_to_mask(uncompressed_rle(mask), 10, 12)
    assert from_rle == BinaryMask(mask)
    assert mask_iou(from_poly, from_rle) > 0.6


def test_compressed_rle_string_decodes(corpus):
    doc = json.loads(corpus.annotation_file.read_text())
    blob = next(a for a in doc["annotations"] if a["image_id"] == 2 and a["category_id"] == 2)
    assert isinstance(blob["segmentation"]["counts"], str)
    mask = annotation_to_mask(blob["segmentation"], 48, 64)
    assert mask.count() == int(round(blob["area"]))
    with pytest.raises(ContractError):
        annotation_to_mask(blob["segmentation"], 40, 64)


def test_iou_histogram_bins():
    counts = iou_histogram([0.0, 0.01, 0.5, 1.0, 1.0])
    assert len(counts) == 20
    assert counts[0] == 2 and counts[10] == 1 and counts[19] == 2


def _augment(corpus, tmp_path, name, config, policy, variants=1):
    index, anns = ingest_coco(corpus.annotation_file, corpus.image_root)
    out = tmp_path / name
    return generate_pairs(index, anns, config, 11, out, policy=policy, variants_per_image=variants), out


def test_identity_recipes_score_one(corpus, tmp_path):
    manifest, out = _augment(corpus, tmp_path, "ident", _identity_config(), SeverityPolicy(), variants=3)
    report = severity_report(manifest, out)
    assert sum(s.n for s in report.tiers.values()) == 60
    for stats in report.tiers.values():
        if stats.n:
            assert stats.ssim_mean == 1.0


def test_mean_ssim_decreases_with_severity(corpus, tmp_path, severity_config):
    means = []
    for tier in (1, 2, 3):
        manifest, out = _augment(corpus, tmp_path, f"t{tier}", severity_config, SeverityPolicy.parse(str(tier)), variants=3)
        report = severity_report(manifest, out, workers=4)
        assert report.tiers[tier].n == 60
        means.append(report.tiers[tier].ssim_mean)
    assert means[0] > means[1] > means[2]


def _predictions(manifest, annotations_doc):
    gt = {a["id"]: a for a in annotations_doc["annotations"]}
    records = []
    for pair in manifest.pairs:
        for ann_id in pair.annotation_ids:
            for stream in ("clean", "variant"):
                records.append({"system": "oracle", "stream": stream, "annotation_id": ann_id,
                                "segmentation": gt[ann_id]["segmentation"], "variant_index": pair.variant_index})
                records.append({"system": "blank", "stream": stream, "annotation_id": ann_id,
                                "segmentation": [], "variant_index": pair.variant_index})
    return records


def test_iou_analysis_with_predictions(small_corpus, tmp_path, severity_config):
    manifest, out = _augment(small_corpus, tmp_path, "pred", severity_config, SeverityPolicy.parse("2"))
    doc = json.loads((out / "annotations.json").read_text())
    report = severity_report(manifest, out, predictions=_predictions(manifest, doc))
    for key, hist in report.iou_histograms.items():
        assert sum(hist) == report.instance_counts[key]
    assert report.instance_counts["oracle/variant"] == 6
    assert report.iou_histograms["oracle/variant"][19] == 6
    assert report.iou_histograms["blank/variant"][0] == 6
    assert report.comparison == {"system_a": "blank", "system_b": "oracle", "wins": 0, "losses": 6, "ties": 0}
    assert report.robustness_drop["oracle"] == {"1": None, "2": 0.0, "3": None}


def test_report_files_and_unreadable_pairs(small_corpus, tmp_path, severity_config):
    manifest, out = _augment(small_corpus, tmp_path, "files", severity_config, SeverityPolicy())
    (out / manifest.pairs[0].variant_path).write_bytes(b"broken")
    report = severity_report(manifest, out)
    assert len(report.unreadable) == 1
    assert len(report.rows) == 2
    write_report(report, tmp_path / "r.json", tmp_path / "r.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert [t["tier"] for t in doc["tiers"]] == [1, 2, 3]
    assert all(t["fid"] is None and t["fsim"] is None for t in doc["tiers"])
    with open(tmp_path / "r.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 and set(rows[0]) == {"image_id", "variant_index", "severity", "n_ops", "ops", "ssim"}
