"""
lumaforge command line.

Subcommands:
  augment       COCO json + image root -> clean/variant pairs + manifest
  preview       one op with explicit params on one image
  validate      replay every recipe in a manifest and compare digests
  report        per-tier SSIM (and IoU analysis when predictions are given)
  lca-selftest  invariant, oracle and gradient checks of the LCA reference

Exit codes: 0 success, 1 fatal error or failed check, 2 partial (skipped or
unreadable items). With --json stdout carries exactly one JSON document.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import __version__
from .config import DEFAULT_SEVERITY_CONFIG, resolve_workers
from .errors import LumaforgeError, ParameterError
from .imagecore import load_image, save_image
from .lcanum import run_selftest
from .lightops import OpKind, apply_step, params_from_dict
from .metrics import load_predictions, severity_report, write_report
from .pairgen import generate_pairs, ingest_coco, load_manifest, verify_pairs
from .sampler import SeverityConfig, SeverityPolicy, tier_boundaries

logger = logging.getLogger("lumaforge")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


@dataclass(frozen=True)
class PipelineConfig:
    """Everything `augment` needs besides the dataset paths."""
    global_seed: int
    policy: SeverityPolicy
    out_root: Path
    variants_per_image: int = 1
    workers: int = 1
    config_file: Optional[Path] = None
    reference_clean: bool = False

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "PipelineConfig":
        return cls(
            global_seed=args.seed,
            policy=SeverityPolicy.parse(args.severity),
            out_root=Path(args.out),
            variants_per_image=args.variants_per_image,
            workers=resolve_workers(args.workers),
            config_file=Path(args.config) if args.config else None,
            reference_clean=args.reference_clean,
        )


def _severity_table() -> str:
    lines = ["severity table (defaults, tiers 1 / 2 / 3):"]
    for op, params in DEFAULT_SEVERITY_CONFIG["operations"].items():
        for name, tiers in params.items():
            cells = " / ".join(f"[{lo:g}, {hi:g}]" for lo, hi in (tiers.get(t, (None, None)) for t in ("1", "2", "3")) if lo is not None)
            lines.append(f"  {op + '.' + name:<24} {cells}")
    caps = DEFAULT_SEVERITY_CONFIG["max_ops"]
    lines.append(f"  max ops per recipe       {caps['1']} / {caps['2']} / {caps['3']}")
    lines.append(f"  severity 3 only          {', '.join(DEFAULT_SEVERITY_CONFIG['severe_only'])}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lumaforge",
        description="Deterministic lighting-variant pair generation and evaluation",
        epilog=_severity_table(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=str, default=None,
                        help="severity config JSON merged over the built-in table (default: built-in table)")
    parser.add_argument("--json", action="store_true", help="print one JSON document on stdout")
    parser.add_argument("--config-dump", action="store_true",
                        help="print the effective severity config and tier boundary report, then exit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("augment", help="generate clean/variant pairs from a COCO dataset")
    p.add_argument("coco_json", help="COCO annotation file")
    p.add_argument("image_root", help="directory holding the images named by file_name")
    p.add_argument("--out", required=True, help="output root")
    p.add_argument("--seed", type=int, required=True, help="global seed, 0 <= seed < 2**64 (mandatory)")
    p.add_argument("--severity", default="uniform",
                   help="1|2|3, fixed:N, uniform or weighted:a,b,c (default: uniform)")
    p.add_argument("--variants-per-image", type=int, default=1, help="variants per clean image (default: 1)")
    p.add_argument("--workers", type=int, default=None, help="worker threads (default: $LUMAFORGE_WORKERS or 1)")
    p.add_argument("--reference-clean", action="store_true", help="store source paths instead of copying clean images")

    p = sub.add_parser("preview", help="apply one op with explicit parameters to one image")
    p.add_argument("image")
    p.add_argument("op", choices=[k.value for k in OpKind])
    p.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                   help="op parameter, repeatable; lists as comma-separated values")
    p.add_argument("--severity", type=int, choices=(1, 2, 3), default=None,
                   help="reject ops and values outside this tier of the severity table")
    p.add_argument("--out", default=None, help="output path (default: <image>_<op>.png beside the input)")

    p = sub.add_parser("validate", help="replay every recipe and compare pixel digests")
    p.add_argument("manifest", help="manifest.json or its output directory")
    p.add_argument("--out-root", default=None, help="output root (default: the manifest's directory)")

    p = sub.add_parser("report", help="per-severity SSIM report")
    p.add_argument("manifest", help="manifest.json or its output directory")
    p.add_argument("--out-root", default=None, help="output root (default: the manifest's directory)")
    p.add_argument("--predictions", default=None, help="prediction masks JSON for IoU analysis")
    p.add_argument("--compare", default=None, metavar="A,B", help="systems to compare on the variant stream")
    p.add_argument("--report-json", default=None, help="report path (default: <out-root>/report.json)")
    p.add_argument("--csv", default=None, help="also write per-pair rows as CSV")
    p.add_argument("--workers", type=int, default=None, help="worker threads (default: $LUMAFORGE_WORKERS or 1)")

    p = sub.add_parser("lca-selftest", help="run the LCA numeric self-test suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gradcheck-seeds", type=int, default=1, help="number of gradient-check problems (default: 1)")
    return parser


def _setup_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="[%(levelname)s] %(message)s", stream=sys.stderr, force=True)


def _emit(args: argparse.Namespace, doc: Dict[str, Any], lines: Sequence[str]) -> None:
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _manifest_root(args: argparse.Namespace) -> Path:
    if args.out_root:
        return Path(args.out_root)
    path = Path(args.manifest)
    return path if path.is_dir() else path.parent


def _parse_value(name: str, raw: str) -> Any:
    if name == "noise_seed":
        return int(raw)
    if "," in raw:
        return [float(v) for v in raw.split(",")]
    return float(raw)


def _parse_params(items: Sequence[str]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for item in items:
        name, sep, raw = item.partition("=")
        if not sep or not name.strip():
            raise LumaforgeError(f"--param expects NAME=VALUE, got {item!r}")
        try:
            out[name.strip()] = _parse_value(name.strip(), raw.strip())
        except ValueError:
            raise LumaforgeError(f"--param {name.strip()}: cannot parse {raw!r} as a number")
    return out


# ---------------------------------------------------------------- subcommands

def cmd_config_dump(args: argparse.Namespace) -> int:
    config = SeverityConfig.load(args.config)
    doc = {"severity_config": config.to_dict(), "tier_boundaries": tier_boundaries(config)}
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_augment(args: argparse.Namespace) -> int:
    pipeline = PipelineConfig.from_args(args)
    config = SeverityConfig.load(pipeline.config_file)
    index, annotations = ingest_coco(args.coco_json, args.image_root)
    manifest = generate_pairs(
        index, annotations, config, pipeline.global_seed, pipeline.out_root,
        policy=pipeline.policy, variants_per_image=pipeline.variants_per_image,
        workers=pipeline.workers, reference_clean=pipeline.reference_clean,
    )
    manifest_path = pipeline.out_root / "manifest.json"
    code = EXIT_PARTIAL if manifest.skipped else EXIT_OK
    per_tier = {str(t): sum(1 for p in manifest.pairs if p.severity == t) for t in (1, 2, 3)}
    doc = {
        "exit_code": code,
        "manifest": str(manifest_path),
        "pairs": len(manifest.pairs),
        "per_tier": per_tier,
        "skipped": [s.to_dict() for s in manifest.skipped],
    }
    lines = [f"[SKIP] {s.image_id} ({s.stage}): {s.reason}" for s in manifest.skipped]
    lines.append(f"[OK] {len(manifest.pairs)} pairs written, manifest: {manifest_path}")
    lines.append(f"[OK] per severity: 1={per_tier['1']} 2={per_tier['2']} 3={per_tier['3']}")
    _emit(args, doc, lines)
    return code


def _check_tier(kind: OpKind, params: Dict[str, Any], config: SeverityConfig, tier: int) -> None:
    if not config.available_at(kind, tier):
        raise LumaforgeError(f"{kind.value} is not available at severity {tier}")
    for name, value in params.items():
        bounds = config.ranges[kind].get(name, {}).get(tier)
        if bounds is None or isinstance(value, list):
            continue
        if not (bounds[0] <= value <= bounds[1]):
            raise ParameterError(kind.value, name, value, bounds, reason=f"outside severity {tier} interval [{bounds[0]}, {bounds[1]}]")
        inner = config.band(kind, name, tier)
        if inner is not None and inner[0] < value < inner[1]:
            raise ParameterError(kind.value, name, value, bounds, reason=f"inside the severity {tier - 1} interval [{inner[0]}, {inner[1]}]")


def cmd_preview(args: argparse.Namespace) -> int:
    kind = OpKind(args.op)
    raw = _parse_params(args.param)
    if args.severity is not None:
        _check_tier(kind, raw, SeverityConfig.load(args.config), args.severity)
    params = params_from_dict(kind, raw)
    src = Path(args.image)
    img = load_image(src)
    out = apply_step(img, kind, params)
    dest = Path(args.out) if args.out else src.with_name(f"{src.stem}_{kind.value}.png")
    save_image(out, dest)
    doc = {"exit_code": EXIT_OK, "op": kind.value, "params": params.to_dict(), "output": str(dest)}
    _emit(args, doc, [f"[OK] {kind.value} {json.dumps(params.to_dict(), sort_keys=True)} -> {dest}"])
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    report = verify_pairs(manifest, _manifest_root(args))
    code = EXIT_OK if report.ok else EXIT_FATAL
    lines: List[str] = []
    for m in report.mismatches:
        lines.append(f"[ERR] {m['image_id']} v{m['variant_index']}: {'; '.join(m['reasons'])}")
    for m in report.missing:
        lines.append(f"[ERR] missing {m['what']}: {m['path']}")
    lines += [f"[ERR] {d}" for d in report.annotation_drift]
    for v in report.recipe_violations:
        lines.append(f"[ERR] {v['image_id']} v{v['variant_index']}: {v['invariant']}: {v['message']}")
    lines.append(f"[OK] {report.checked} pairs verified" if report.ok else f"[ERR] {report.checked} pairs checked, validation failed")
    _emit(args, {"exit_code": code, **report.to_dict()}, lines)
    return code


def cmd_report(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    root = _manifest_root(args)
    predictions = load_predictions(args.predictions) if args.predictions else None
    compare = None
    if args.compare:
        a, sep, b = args.compare.partition(",")
        if not sep or not a or not b:
            raise LumaforgeError(f"--compare expects A,B, got {args.compare!r}")
        compare = (a.strip(), b.strip())
    report = severity_report(manifest, root, predictions=predictions, compare=compare,
                             workers=resolve_workers(args.workers))
    json_path = Path(args.report_json) if args.report_json else root / "report.json"
    write_report(report, json_path, args.csv)
    code = EXIT_PARTIAL if report.unreadable else EXIT_OK
    lines = [f"[SKIP] {u['image_id']} v{u['variant_index']}: {u['reason']}" for u in report.unreadable]
    for t in sorted(report.tiers):
        s = report.tiers[t]
        mean = "n/a" if s.ssim_mean is None else f"{s.ssim_mean:.4f} +/- {s.ssim_std:.4f}"
        lines.append(f"[OK] severity {t}: n={s.n} ssim={mean}")
    lines.append(f"[OK] report written to {json_path}")
    _emit(args, {"exit_code": code, "report": str(json_path), **report.to_dict()}, lines)
    return code


def cmd_lca_selftest(args: argparse.Namespace) -> int:
    verdict = run_selftest(seed=args.seed, gradcheck_seeds=args.gradcheck_seeds)
    code = EXIT_OK if verdict["ok"] else EXIT_FATAL
    lines = [f"[{'OK' if c['passed'] else 'ERR'}] {c['name']}" for c in verdict["checks"]]
    _emit(args, {"exit_code": code, **verdict}, lines)
    return code


COMMANDS = {
    "augment": cmd_augment,
    "preview": cmd_preview,
    "validate": cmd_validate,
    "report": cmd_report,
    "lca-selftest": cmd_lca_selftest,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)
    try:
        if args.config_dump:
            return cmd_config_dump(args)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_FATAL
        return COMMANDS[args.command](args)
    except LumaforgeError as e:
        logger.error("%s", e)
        return EXIT_FATAL
    except OSError as e:
        logger.error("I/O failure: %s", e)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
