"""
Paired clean/variant dataset generation from a COCO-style annotation file.

- ingest_coco: parse + referential checks; unusable image files become skip records
- generate_pairs: per-image worker pool writes clean/ and variant/ images,
  one shared annotations.json and a manifest.json that replays every variant
- verify_pairs: re-executes every recipe and compares pixel digests

Output layout under out_root:
    clean/<file_name>          byte copies of the source images (unless reference mode)
    variant/<stem>.png         or <stem>_v<k>.png with several variants per image; the stem is
                               the image id, plus a short digest when sanitising or case folding
                               would make two ids share a file
    annotations.json           the annotation records shared by both streams
    manifest.json              PairManifest, schema_version 1
"""
from __future__ import annotations

import errno
import hashlib
import json
import logging
import re
import shutil
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from PIL import Image, UnidentifiedImageError

from . import __version__
from .config import ensure_valid, load_schema
from .errors import ConfigError, ImageIOError, IngestError, LumaforgeError, ManifestError
from .imagecore import RasterImage, load_image, pixel_digest, save_image
from .lightops import apply_step
from .sampler import (
    SeverityConfig,
    SeverityPolicy,
    VariantRecipe,
    assign_severity,
    sample_recipe,
    validate_recipe,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
ANNOTATIONS_NAME = "annotations.json"
MANIFEST_SCHEMA_VERSION = 1
BBOX_TOLERANCE = 1.0
_FATAL_ERRNOS = {errno.ENOSPC, getattr(errno, "EDQUOT", errno.ENOSPC)}


def image_sort_key(image_id: str) -> Tuple[int, Union[int, str]]:
    """Numeric ids sort numerically and before non-numeric ones."""
    s = str(image_id)
    return (0, int(s)) if s.isdigit() else (1, s)


def _safe_name(image_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", str(image_id))


def variant_stems(image_ids: Sequence[str]) -> Dict[str, str]:
    """Collision-free filename stem per image id.

    Ids that survive sanitising unchanged and unique (case-insensitively) keep
    their own name; every other id gets an 8-hex BLAKE2b suffix of the raw id.
    """
    folded = Counter(_safe_name(i).lower() for i in image_ids)
    stems: Dict[str, str] = {}
    for image_id in image_ids:
        stem = _safe_name(image_id)
        if stem != image_id or folded[stem.lower()] > 1:
            stem = f"{stem}_{hashlib.blake2b(image_id.encode('utf-8'), digest_size=4).hexdigest()}"
        stems[image_id] = stem
    return stems


def _escapes_root(file_name: str) -> bool:
    rel = Path(file_name)
    return rel.is_absolute() or bool(rel.drive) or ".." in rel.parts


def _json_bytes(doc: Any) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


# ---------------------------------------------------------------- ingestion

@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    file_name: str
    path: Path
    width: int
    height: int
    annotation_ids: Tuple[Any, ...] = ()
    record: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)


@dataclass(frozen=True)
class SkipRecord:
    image_id: str
    stage: str
    reason: str

    def to_dict(self) -> Dict[str, str]:
        return {"image_id": self.image_id, "stage": self.stage, "reason": self.reason}


@dataclass
class DatasetIndex:
    entries: List[ImageEntry]
    categories: Dict[Any, Mapping[str, Any]]
    skipped: List[SkipRecord] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, image_id: str) -> Optional[ImageEntry]:
        for e in self.entries:
            if e.image_id == str(image_id):
                return e
        return None


@dataclass
class AnnotationSet:
    """Annotation records grouped by image; the dicts pass through untouched."""
    by_image: Dict[str, List[Mapping[str, Any]]] = field(default_factory=dict)

    def for_image(self, image_id: str) -> List[Mapping[str, Any]]:
        return self.by_image.get(str(image_id), [])

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_image.values())


def _require_list(doc: Mapping[str, Any], key: str, path: Path) -> List[Any]:
    value = doc.get(key)
    if not isinstance(value, list):
        raise IngestError(f"{path}: top-level '{key}' must be an array")
    return value


def _require_keys(record: Any, keys: Sequence[str], what: str, path: Path) -> None:
    if not isinstance(record, dict):
        raise IngestError(f"{path}: {what} entry is not an object: {record!r}")
    missing = [k for k in keys if k not in record]
    if missing:
        raise IngestError(f"{path}: {what} {record.get('id', '?')!r} missing {', '.join(missing)}")


def _probe_size(path: Path) -> Tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def ingest_coco(annotation_file: str | Path, image_root: str | Path) -> Tuple[DatasetIndex, AnnotationSet]:
    """Index every image whose file resolves; group annotations by image.

    Malformed JSON and referential errors are fatal (IngestError). Missing,
    unreadable or mis-sized image files become SkipRecords.
    """
    path = Path(annotation_file)
    root = Path(image_root)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise IngestError(f"annotation file not found: {path}")
    except OSError as e:
        raise IngestError(f"cannot read annotation file {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise IngestError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise IngestError(f"{path}: expected a JSON object at top level")

    images = _require_list(doc, "images", path)
    anns = _require_list(doc, "annotations", path)
    cats = _require_list(doc, "categories", path)

    categories: Dict[Any, Mapping[str, Any]] = {}
    for c in cats:
        _require_keys(c, ("id",), "category", path)
        if c["id"] in categories:
            raise IngestError(f"{path}: duplicate category id {c['id']!r}")
        categories[c["id"]] = c

    image_records: Dict[str, Mapping[str, Any]] = {}
    for im in images:
        _require_keys(im, ("id", "file_name", "width", "height"), "image", path)
        key = str(im["id"])
        if key in image_records:
            raise IngestError(f"{path}: duplicate image id {im['id']!r}")
        image_records[key] = im

    by_image: Dict[str, List[Mapping[str, Any]]] = {k: [] for k in image_records}
    seen_ann: set = set()
    for a in anns:
        _require_keys(a, ("id", "image_id", "category_id"), "annotation", path)
        if a["id"] in seen_ann:
            raise IngestError(f"{path}: duplicate annotation id {a['id']!r}")
        seen_ann.add(a["id"])
        key = str(a["image_id"])
        if key not in image_records:
            raise IngestError(f"{path}: annotation {a['id']!r} references unknown image id {a['image_id']!r}")
        if a["category_id"] not in categories:
            raise IngestError(f"{path}: annotation {a['id']!r} references unknown category id {a['category_id']!r}")
        bbox = a.get("bbox")
        if bbox is not None:
            im = image_records[key]
            x, y, w, h = (float(v) for v in bbox)
            if (x < -BBOX_TOLERANCE or y < -BBOX_TOLERANCE or w < 0 or h < 0
                    or x + w > float(im["width"]) + BBOX_TOLERANCE
                    or y + h > float(im["height"]) + BBOX_TOLERANCE):
                raise IngestError(f"{path}: annotation {a['id']!r} bbox {bbox} outside image {a['image_id']!r} bounds")
        by_image[key].append(a)

    entries: List[ImageEntry] = []
    skipped: List[SkipRecord] = []
    for key in sorted(image_records, key=image_sort_key):
        im = image_records[key]
        if _escapes_root(str(im["file_name"])):
            skipped.append(SkipRecord(key, "ingest", f"file name leaves the image root: {im['file_name']}"))
            continue
        file_path = root / im["file_name"]
        if not file_path.is_file():
            skipped.append(SkipRecord(key, "ingest", f"missing file {im['file_name']}"))
            continue
        try:
            w, h = _probe_size(file_path)
        except (UnidentifiedImageError, OSError) as e:
            skipped.append(SkipRecord(key, "ingest", f"unreadable file {im['file_name']}: {e}"))
            continue
        if (w, h) != (int(im["width"]), int(im["height"])):
            skipped.append(SkipRecord(key, "ingest", f"dimension mismatch: file {w}x{h}, declared {im['width']}x{im['height']}"))
            continue
        entries.append(ImageEntry(
            image_id=key, file_name=str(im["file_name"]), path=file_path, width=w, height=h,
            annotation_ids=tuple(a["id"] for a in by_image[key]), record=im,
        ))

    for s in skipped:
        logger.warning("skipping image %s: %s", s.image_id, s.reason)
    logger.info("Ingested %d images (%d skipped), %d annotations, %d categories",
                len(entries), len(skipped), len(seen_ann), len(categories))
    extra = {k: doc[k] for k in ("info", "licenses") if k in doc}
    index = DatasetIndex(entries=entries, categories=categories, skipped=skipped, extra=extra)
    return index, AnnotationSet(by_image=by_image)


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class PairRecord:
    image_id: str
    variant_index: int
    clean_path: str
    variant_path: str
    severity: int
    recipe: VariantRecipe
    clean_digest: str
    variant_digest: str
    annotation_ids: Tuple[Any, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "variant_index": self.variant_index,
            "clean_path": self.clean_path,
            "variant_path": self.variant_path,
            "severity": self.severity,
            "recipe": self.recipe.to_dict(),
            "clean_digest": self.clean_digest,
            "variant_digest": self.variant_digest,
            "annotation_ids": list(self.annotation_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PairRecord":
        return cls(
            image_id=str(d["image_id"]),
            variant_index=int(d["variant_index"]),
            clean_path=str(d["clean_path"]),
            variant_path=str(d["variant_path"]),
            severity=int(d["severity"]),
            recipe=VariantRecipe.from_dict(d["recipe"]),
            clean_digest=str(d["clean_digest"]),
            variant_digest=str(d["variant_digest"]),
            annotation_ids=tuple(d.get("annotation_ids", [])),
        )


@dataclass
class PairManifest:
    global_seed: int
    severity_policy: Dict[str, Any]
    severity_config: Dict[str, Any]
    pairs: List[PairRecord] = field(default_factory=list)
    skipped: List[SkipRecord] = field(default_factory=list)
    variants_per_image: int = 1
    reference_clean: bool = False
    annotations_file: str = ANNOTATIONS_NAME
    annotations_digest: str = ""
    pipeline_version: str = __version__
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "pipeline_version": self.pipeline_version,
            "global_seed": self.global_seed,
            "severity_policy": self.severity_policy,
            "severity_config": self.severity_config,
            "variants_per_image": self.variants_per_image,
            "reference_clean": self.reference_clean,
            "annotations_file": self.annotations_file,
            "annotations_digest": self.annotations_digest,
            "pairs": [p.to_dict() for p in self.pairs],
            "skipped": [s.to_dict() for s in self.skipped],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PairManifest":
        return cls(
            global_seed=int(d["global_seed"]),
            severity_policy=dict(d["severity_policy"]),
            severity_config=dict(d["severity_config"]),
            pairs=[PairRecord.from_dict(p) for p in d["pairs"]],
            skipped=[SkipRecord(str(s["image_id"]), str(s["stage"]), str(s["reason"])) for s in d.get("skipped", [])],
            variants_per_image=int(d.get("variants_per_image", 1)),
            reference_clean=bool(d.get("reference_clean", False)),
            annotations_file=str(d.get("annotations_file", ANNOTATIONS_NAME)),
            annotations_digest=str(d.get("annotations_digest", "")),
            pipeline_version=str(d["pipeline_version"]),
            schema_version=int(d["schema_version"]),
        )

    def config(self) -> SeverityConfig:
        return SeverityConfig.from_dict(self.severity_config)


def write_manifest(manifest: PairManifest, out_root: str | Path) -> Path:
    path = Path(out_root) / MANIFEST_NAME
    path.write_bytes(_json_bytes(manifest.to_dict()))
    return path


def load_manifest(path: str | Path) -> PairManifest:
    """Read and schema-check a manifest; accepts the file or its output directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
    try:
        ensure_valid(doc, load_schema("pair_manifest.schema.json"), f"manifest {path}")
    except ConfigError as e:
        raise ManifestError(str(e)) from e
    return PairManifest.from_dict(doc)


# ---------------------------------------------------------------- generation

def render_variant(clean: RasterImage, recipe: VariantRecipe) -> RasterImage:
    """Apply the recipe's steps in stored order."""
    img = clean
    for step in recipe.steps:
        img = apply_step(img, step.kind, step.params)
    return img


def _variant_name(stem: str, k: int, variants_per_image: int) -> str:
    return f"{stem}.png" if variants_per_image == 1 else f"{stem}_v{k}.png"


def _is_fatal(exc: BaseException) -> bool:
    return isinstance(exc, OSError) and getattr(exc, "errno", None) in _FATAL_ERRNOS


def _process_image(entry: ImageEntry, stem: str, config: SeverityConfig, policy: SeverityPolicy, global_seed: int,
                   out_root: Path, variants_per_image: int, reference_clean: bool
                   ) -> Tuple[List[PairRecord], Optional[SkipRecord]]:
    try:
        clean = load_image(entry.path)
        clean_digest = pixel_digest(clean)
        if reference_clean:
            clean_path = str(entry.path)
        else:
            rel = Path("clean") / entry.file_name
            (out_root / rel).parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(entry.path, out_root / rel)
            clean_path = rel.as_posix()

        records = []
        for k in range(variants_per_image):
            severity = assign_severity(policy, global_seed, entry.image_id, k)
            recipe = sample_recipe(global_seed, entry.image_id, severity, config, k)
            variant = render_variant(clean, recipe)
            rel_v = Path("variant") / _variant_name(stem, k, variants_per_image)
            save_image(variant, out_root / rel_v)
            records.append(PairRecord(
                image_id=entry.image_id, variant_index=k, clean_path=clean_path,
                variant_path=rel_v.as_posix(), severity=int(severity), recipe=recipe,
                clean_digest=clean_digest, variant_digest=pixel_digest(variant),
                annotation_ids=entry.annotation_ids,
            ))
            logger.debug("%s v%d: severity %d, ops %s", entry.image_id, k, severity,
                         [s.kind.value for s in recipe.steps])
        return records, None
    except Exception as e:
        if _is_fatal(e) or getattr(e.__cause__, "errno", None) in _FATAL_ERRNOS:
            raise
        if not isinstance(e, (LumaforgeError, OSError, ValueError)):
            raise
        logger.warning("skipping image %s: %s", entry.image_id, e)
        return [], SkipRecord(entry.image_id, "generate", str(e))


def _annotations_document(index: DatasetIndex, annotations: AnnotationSet, kept: Sequence[str]) -> Dict[str, Any]:
    kept_set = set(kept)
    images = [e.record for e in index.entries if e.image_id in kept_set]
    anns = [a for e in index.entries if e.image_id in kept_set for a in annotations.for_image(e.image_id)]
    doc: Dict[str, Any] = dict(index.extra)
    doc.update({"images": images, "annotations": anns, "categories": list(index.categories.values())})
    return doc


def generate_pairs(index: DatasetIndex, annotations: AnnotationSet, config: SeverityConfig, global_seed: int,
                   out_root: str | Path, *, policy: Optional[SeverityPolicy] = None, variants_per_image: int = 1,
                   workers: int = 1, reference_clean: bool = False) -> PairManifest:
    """Write clean/variant pairs, the shared annotations and the manifest under `out_root`.

    Args:
        policy: severity assignment per (image, variant); uniform over tiers by default
        variants_per_image: recipes per image, keyed by (seed, image_id, variant_index)
        workers: thread pool size; outputs do not depend on it
        reference_clean: store source paths instead of copying clean images
    """
    if variants_per_image < 1:
        raise ConfigError(f"variants_per_image must be >= 1 (got {variants_per_image})")
    if workers < 1:
        raise ConfigError(f"worker count must be >= 1 (got {workers})")
    policy = policy or SeverityPolicy()
    out = Path(out_root)
    (out / "variant").mkdir(parents=True, exist_ok=True)
    if not reference_clean:
        (out / "clean").mkdir(parents=True, exist_ok=True)

    logger.info("Generating pairs for %d images with %d worker(s), seed %d", len(index), workers, global_seed)
    stems = variant_stems([e.image_id for e in index.entries])
    job = lambda e: _process_image(e, stems[e.image_id], config, policy, global_seed, out, variants_per_image, reference_clean)  # noqa: E731
    if workers == 1:
        results = [job(e) for e in index.entries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, index.entries))

    pairs: List[PairRecord] = []
    skipped: List[SkipRecord] = list(index.skipped)
    for records, skip in results:
        pairs.extend(records)
        if skip is not None:
            skipped.append(skip)
    pairs.sort(key=lambda p: (image_sort_key(p.image_id), p.variant_index))
    skipped.sort(key=lambda s: (image_sort_key(s.image_id), s.stage))

    kept = sorted({p.image_id for p in pairs}, key=image_sort_key)
    ann_bytes = _json_bytes(_annotations_document(index, annotations, kept))
    (out / ANNOTATIONS_NAME).write_bytes(ann_bytes)

    manifest = PairManifest(
        global_seed=int(global_seed),
        severity_policy=policy.to_dict(),
        severity_config=config.to_dict(),
        pairs=pairs,
        skipped=skipped,
        variants_per_image=variants_per_image,
        reference_clean=reference_clean,
        annotations_digest=hashlib.sha256(ann_bytes).hexdigest(),
    )
    path = write_manifest(manifest, out)
    logger.info("Wrote %d pairs (%d skipped) to %s", len(pairs), len(skipped), path)
    return manifest


# ---------------------------------------------------------------- verification

@dataclass
class VerifyReport:
    checked: int = 0
    mismatches: List[Dict[str, Any]] = field(default_factory=list)
    missing: List[Dict[str, Any]] = field(default_factory=list)
    annotation_drift: List[str] = field(default_factory=list)
    recipe_violations: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.mismatches or self.missing or self.annotation_drift or self.recipe_violations)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ok": self.ok,
            "checked": self.checked,
            "mismatches": self.mismatches,
            "missing": self.missing,
            "annotation_drift": self.annotation_drift,
            "recipe_violations": self.recipe_violations,
        }


def _resolve(out_root: Path, stored: str) -> Path:
    p = Path(stored)
    return p if p.is_absolute() else out_root / p


def _check_annotations(manifest: PairManifest, out_root: Path, report: VerifyReport) -> None:
    ann_path = out_root / manifest.annotations_file
    if not ann_path.is_file():
        report.missing.append({"image_id": None, "path": manifest.annotations_file, "what": "annotations"})
        return
    data = ann_path.read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest.annotations_digest:
        report.annotation_drift.append(f"{manifest.annotations_file} digest differs from manifest")
    try:
        doc = json.loads(data)
        known = {str(a["id"]) for a in doc.get("annotations", [])}
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
        report.annotation_drift.append(f"{manifest.annotations_file} unreadable: {e}")
        return
    for p in manifest.pairs:
        lost = [a for a in p.annotation_ids if str(a) not in known]
        if lost:
            report.annotation_drift.append(f"image {p.image_id}: annotation ids {lost} missing from {manifest.annotations_file}")


def verify_pairs(manifest: PairManifest, out_root: str | Path) -> VerifyReport:
    """Replay every recipe and compare digests; one mismatch record per pair at most. Never raises."""
    out = Path(out_root)
    report = VerifyReport()
    try:
        config: Optional[SeverityConfig] = manifest.config()
    except (LumaforgeError, KeyError, ValueError) as e:
        logger.warning("manifest severity config unusable, recipe validation skipped: %s", e)
        config = None
    _check_annotations(manifest, out, report)

    cleans: Dict[str, Optional[RasterImage]] = {}
    for pair in manifest.pairs:
        report.checked += 1
        clean_file = _resolve(out, pair.clean_path)
        variant_file = _resolve(out, pair.variant_path)
        if pair.clean_path not in cleans:
            try:
                cleans[pair.clean_path] = load_image(clean_file)
            except ImageIOError:
                cleans[pair.clean_path] = None
        clean = cleans[pair.clean_path]
        if clean is None:
            report.missing.append({"image_id": pair.image_id, "path": pair.clean_path, "what": "clean"})
            continue
        if not variant_file.is_file():
            report.missing.append({"image_id": pair.image_id, "path": pair.variant_path, "what": "variant"})
            continue

        if config is not None:
            for v in validate_recipe(pair.recipe, config):
                report.recipe_violations.append({"image_id": pair.image_id, "variant_index": pair.variant_index, **v.to_dict()})

        reasons: List[str] = []
        if pixel_digest(clean) != pair.clean_digest:
            reasons.append("clean image digest differs")
        try:
            replay = pixel_digest(render_variant(clean, pair.recipe))
            if replay != pair.variant_digest:
                reasons.append("recipe replay digest differs")
        except LumaforgeError as e:
            reasons.append(f"recipe replay failed: {e}")
        try:
            if pixel_digest(load_image(variant_file)) != pair.variant_digest:
                reasons.append("variant file digest differs")
        except ImageIOError as e:
            reasons.append(f"variant file unreadable: {e}")
        if reasons:
            report.mismatches.append({"image_id": pair.image_id, "variant_index": pair.variant_index, "reasons": reasons})
            logger.warning("mismatch %s v%d: %s", pair.image_id, pair.variant_index, "; ".join(reasons))

    logger.info("Verified %d pairs: %d mismatches, %d missing", report.checked, len(report.mismatches), len(report.missing))
    return report
