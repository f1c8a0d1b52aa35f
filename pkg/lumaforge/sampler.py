"""
Conflict-aware, severity-tiered sampling of variant recipes.

- Every recipe is a pure function of (global_seed, image_id, severity, variant_index):
  the Philox key is a BLAKE2b digest of those values, so images can be
  processed in any order by any number of workers.
- Op count is uniform in 1..max_ops(tier); kinds are drawn without replacement
  and each draw removes its conflict partners from the pool.
- Steps are stored in the canonical stage order (scene, then optics, then sensor).
"""
from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import load_severity_config
from .errors import ConfigError, ContractError, ParameterError
from .lightops import (
    ColorCastParams,
    ExposureParams,
    BrightnessParams,
    ContrastParams,
    FlareParams,
    GammaParams,
    GrainParams,
    HazeParams,
    OpKind,
    OpParams,
    PARAMS_TYPES,
    ShadowParams,
    TintParams,
    VignetteParams,
    params_from_dict,
)

logger = logging.getLogger(__name__)

SEED_LIMIT = 2**64
_EPS = 1e-9


class SeverityLevel(IntEnum):
    MILD = 1
    MODERATE = 2
    SEVERE = 3


# name -> mutually exclusive kinds
CONFLICT_GROUPS: Tuple[Tuple[str, FrozenSet[OpKind]], ...] = (
    ("warm/cool", frozenset({OpKind.WARM, OpKind.COOL})),
    ("exposure/brightness", frozenset({OpKind.EXPOSURE, OpKind.BRIGHTNESS})),
    ("haze/contrast", frozenset({OpKind.HAZE, OpKind.CONTRAST})),
    ("flare/haze", frozenset({OpKind.FLARE, OpKind.HAZE})),
)

STAGES: Tuple[Tuple[OpKind, ...], ...] = (
    (OpKind.HAZE,),
    (OpKind.SHADOW,),
    (OpKind.FLARE,),
    (OpKind.EXPOSURE,),
    (OpKind.BRIGHTNESS,),
    (OpKind.WARM, OpKind.COOL),
    (OpKind.COLOR_CAST,),
    (OpKind.VIGNETTE,),
    (OpKind.CONTRAST,),
    (OpKind.GAMMA,),
    (OpKind.GRAIN,),
)
STAGE_RANK: Dict[OpKind, int] = {k: i for i, stage in enumerate(STAGES) for k in stage}


def conflicts_of(kind: OpKind) -> FrozenSet[OpKind]:
    """Every kind that may not share a recipe with `kind` (itself included)."""
    out = {kind}
    for _, group in CONFLICT_GROUPS:
        if kind in group:
            out |= group
    return frozenset(out)


def canonical_order(kinds: Iterable[OpKind | str]) -> List[OpKind]:
    """Stable sort by the fixed stage list."""
    return sorted((OpKind(k) for k in kinds), key=lambda k: STAGE_RANK[k])


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class SeverityConfig:
    ranges: Mapping[OpKind, Mapping[str, Mapping[int, Tuple[float, float]]]]
    max_ops: Mapping[int, int]
    severe_only: FrozenSet[OpKind]
    haze_color: Tuple[float, float, float]

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SeverityConfig":
        """Build from a document already merged and validated by config.load_severity_config."""
        ranges: Dict[OpKind, Dict[str, Dict[int, Tuple[float, float]]]] = {}
        for op, params in doc["operations"].items():
            kind = OpKind(op)
            ranges[kind] = {
                name: {int(t): (float(b[0]), float(b[1])) for t, b in tiers.items()}
                for name, tiers in params.items()
            }
        max_ops = {int(t): int(n) for t, n in doc["max_ops"].items()}
        for tier in SeverityLevel:
            if tier.value not in max_ops:
                raise ConfigError(f"severity config: max_ops missing tier {tier.value}")
        return cls(
            ranges=ranges,
            max_ops=max_ops,
            severe_only=frozenset(OpKind(k) for k in doc.get("severe_only", [])),
            haze_color=tuple(float(c) for c in doc["haze_color"]),  # type: ignore[arg-type]
        )

    @classmethod
    def load(cls, config_file: Optional[str] = None) -> "SeverityConfig":
        return cls.from_dict(load_severity_config(config_file))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": 1,
            "max_ops": {str(t): n for t, n in sorted(self.max_ops.items())},
            "severe_only": sorted(k.value for k in self.severe_only),
            "haze_color": list(self.haze_color),
            "operations": {
                kind.value: {
                    name: {str(t): list(b) for t, b in sorted(tiers.items())}
                    for name, tiers in params.items()
                }
                for kind, params in self.ranges.items()
            },
        }

    def interval(self, kind: OpKind, param: str, tier: int) -> Tuple[float, float]:
        try:
            return self.ranges[kind][param][int(tier)]
        except KeyError:
            raise ContractError(f"no {kind.value}.{param} interval at severity {int(tier)}")

    def band(self, kind: OpKind, param: str, tier: int) -> Optional[Tuple[float, float]]:
        """The previous tier's interval when `tier`'s interval strictly encloses it.

        Values of such a row are drawn outside the inner interval, so the
        upper bound of one tier is the lower bound of the next in magnitude.
        """
        tiers = self.ranges.get(kind, {}).get(param, {})
        t = int(tier)
        if t - 1 not in tiers or t not in tiers:
            return None
        (plo, phi), (lo, hi) = tiers[t - 1], tiers[t]
        if plo >= phi or (plo, phi) == (lo, hi) or not (lo <= plo and phi <= hi):
            return None
        return plo, phi

    def available_at(self, kind: OpKind, tier: int) -> bool:
        if kind in self.severe_only and int(tier) < SeverityLevel.SEVERE:
            return False
        params = self.ranges.get(kind)
        return bool(params) and all(int(tier) in tiers for tiers in params.values())

    def pool(self, tier: int) -> List[OpKind]:
        """Kinds eligible at `tier`, in declaration order."""
        return [k for k in OpKind if self.available_at(k, tier)]


# ---------------------------------------------------------------- recipes

@dataclass(frozen=True)
class RecipeStep:
    kind: OpKind
    params: OpParams

    def to_dict(self) -> Dict[str, Any]:
        return {"op": self.kind.value, "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RecipeStep":
        kind = OpKind(data["op"])
        return cls(kind, params_from_dict(kind, data.get("params", {})))


@dataclass(frozen=True)
class VariantRecipe:
    image_id: str
    severity: SeverityLevel
    seed: int
    steps: Tuple[RecipeStep, ...]
    variant_index: int = 0

    @property
    def kinds(self) -> List[OpKind]:
        return [s.kind for s in self.steps]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "severity": int(self.severity),
            "seed": int(self.seed),
            "variant_index": int(self.variant_index),
            "steps": [s.to_dict() for s in self.steps],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VariantRecipe":
        return cls(
            image_id=str(data["image_id"]),
            severity=SeverityLevel(int(data["severity"])),
            seed=int(data["seed"]),
            steps=tuple(RecipeStep.from_dict(s) for s in data["steps"]),
            variant_index=int(data.get("variant_index", 0)),
        )


@dataclass(frozen=True)
class Violation:
    invariant: str
    step_index: Optional[int]
    kind: Optional[str]
    message: str

    def to_dict(self) -> Dict[str, Any]:
        return {"invariant": self.invariant, "step_index": self.step_index, "kind": self.kind, "message": self.message}


def _check_seed(global_seed: int) -> int:
    if isinstance(global_seed, bool) or not isinstance(global_seed, (int, np.integer)):
        raise ContractError(f"global_seed must be an integer, got {global_seed!r}")
    seed = int(global_seed)
    if not (0 <= seed < SEED_LIMIT):
        raise ContractError(f"global_seed must lie in [0, 2**64), got {seed}")
    return seed


def derive_key(*parts: Any) -> int:
    """128-bit Philox key from a BLAKE2b digest of the joined parts."""
    text = ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest(), "big")


def keyed_rng(*parts: Any) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))


def _uniform(rng: np.random.Generator, bounds: Tuple[float, float]) -> float:
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _draw(rng: np.random.Generator, config: SeverityConfig, kind: OpKind, name: str, tier: int) -> float:
    lo, hi = config.interval(kind, name, tier)
    inner = config.band(kind, name, tier)
    if inner is None:
        return _uniform(rng, (lo, hi))
    # random side of the inner interval: a sign for EV and percent, a side of 1.0 for factors
    sides = [s for s in ((lo, inner[0]), (inner[1], hi)) if s[1] > s[0]]
    return _uniform(rng, sides[int(rng.integers(0, len(sides)))])


def _sample_params(kind: OpKind, tier: int, config: SeverityConfig, rng: np.random.Generator) -> OpParams:
    draw = lambda name: _draw(rng, config, kind, name, tier)  # noqa: E731
    if kind is OpKind.EXPOSURE:
        return ExposureParams(ev=draw("ev"))
    if kind is OpKind.BRIGHTNESS:
        return BrightnessParams(percent=draw("percent"))
    if kind is OpKind.CONTRAST:
        return ContrastParams(factor=draw("factor"))
    if kind is OpKind.GAMMA:
        return GammaParams(gamma=draw("gamma"))
    if kind in (OpKind.WARM, OpKind.COOL):
        return TintParams(tint=draw("tint"))
    if kind is OpKind.VIGNETTE:
        strength = draw("strength")
        cx = 0.5 + draw("center_offset")
        cy = 0.5 + draw("center_offset")
        return VignetteParams(strength=strength, center_x=cx, center_y=cy, power=draw("power"))
    if kind is OpKind.SHADOW:
        return ShadowParams(
            angle_deg=draw("angle_deg"),
            strength=draw("strength"),
            sharpness=draw("sharpness"),
        )
    if kind is OpKind.GRAIN:
        intensity = draw("intensity")
        return GrainParams(intensity=intensity, noise_seed=int(rng.integers(0, 2**63)))
    if kind is OpKind.HAZE:
        return HazeParams(alpha=draw("alpha"), haze_color=config.haze_color)
    if kind is OpKind.COLOR_CAST:
        return ColorCastParams(hue_deg=draw("hue_deg"), strength=draw("strength"))
    if kind is OpKind.FLARE:
        sigma = draw("sigma")
        amplitude = draw("amplitude")
        inset = draw("edge_margin")
        edge = int(rng.integers(0, 4))
        along = float(rng.uniform(0.0, 1.0))
        cx, cy = [(inset, along), (1.0 - inset, along), (along, inset), (along, 1.0 - inset)][edge]
        return FlareParams(center_x=cx, center_y=cy, sigma=sigma, amplitude=amplitude)
    raise ContractError(f"no sampler for {kind!r}")


def sample_recipe(global_seed: int, image_id: str, severity: SeverityLevel | int,
                  config: SeverityConfig, variant_index: int = 0) -> VariantRecipe:
    """Draw one recipe; identical arguments always give an identical recipe."""
    seed = _check_seed(global_seed)
    tier = SeverityLevel(int(severity))
    rng = keyed_rng(seed, image_id, int(variant_index))

    n_ops = int(rng.integers(1, config.max_ops[tier] + 1))
    pool = config.pool(tier)
    chosen: List[OpKind] = []
    for _ in range(n_ops):
        if not pool:
            logger.warning("candidate pool exhausted for %s at severity %d after %d ops", image_id, tier, len(chosen))
            break
        kind = pool[int(rng.integers(0, len(pool)))]
        chosen.append(kind)
        blocked = conflicts_of(kind)
        pool = [k for k in pool if k not in blocked]

    params = {k: _sample_params(k, tier, config, rng) for k in chosen}
    steps = tuple(RecipeStep(k, params[k]) for k in canonical_order(chosen))
    return VariantRecipe(image_id=str(image_id), severity=tier, seed=seed, steps=steps, variant_index=int(variant_index))


def _param_values(step: RecipeStep, name: str) -> List[float]:
    """Values a config row constrains; derived rows map to the geometry they produce."""
    p = step.params
    if step.kind is OpKind.VIGNETTE and name == "center_offset":
        return [p.center_x - 0.5, p.center_y - 0.5]  # type: ignore[attr-defined]
    if step.kind is OpKind.FLARE and name == "edge_margin":
        return [min(p.center_x, 1.0 - p.center_x, p.center_y, 1.0 - p.center_y)]  # type: ignore[attr-defined]
    return [float(getattr(p, name))]


def validate_recipe(recipe: VariantRecipe, config: SeverityConfig) -> List[Violation]:
    """Every broken recipe invariant, one entry each. Never raises."""
    out: List[Violation] = []
    try:
        tier = int(recipe.severity)
    except (TypeError, ValueError):
        return [Violation("severity", None, None, f"invalid severity {recipe.severity!r}")]
    if tier not in config.max_ops:
        return [Violation("severity", None, None, f"severity {tier} not configured")]

    n = len(recipe.steps)
    if not (1 <= n <= config.max_ops[tier]):
        out.append(Violation("op_count", None, None, f"{n} steps, severity {tier} allows 1..{config.max_ops[tier]}"))

    seen: Dict[OpKind, int] = {}
    for i, step in enumerate(recipe.steps):
        if step.kind in seen:
            out.append(Violation("duplicate_kind", i, step.kind.value, f"{step.kind.value} already applied at step {seen[step.kind]}"))
        else:
            seen[step.kind] = i

    for name, group in CONFLICT_GROUPS:
        members = [(i, s.kind) for i, s in enumerate(recipe.steps) if s.kind in group]
        if len({k for _, k in members}) > 1:
            i, k = members[-1]
            out.append(Violation("conflict", i, k.value, f"conflict group {name}: {', '.join(sorted({m.value for _, m in members}))}"))

    for i, step in enumerate(recipe.steps):
        if step.kind in config.severe_only and tier < SeverityLevel.SEVERE:
            out.append(Violation("severe_only", i, step.kind.value, f"{step.kind.value} is severity-3 only (recipe severity {tier})"))
            continue
        expected = PARAMS_TYPES.get(step.kind)
        if expected is None or not isinstance(step.params, expected):
            want = expected.__name__ if expected else "a registered params type"
            out.append(Violation("param_type", i, step.kind.value, f"{step.kind.value} expects {want}, got {type(step.params).__name__}"))
            continue
        try:
            step.params.validate(step.kind)
        except ParameterError as e:
            out.append(Violation("param_range", i, step.kind.value, str(e)))
            continue
        for name, tiers in config.ranges.get(step.kind, {}).items():
            if tier not in tiers:
                out.append(Violation("param_range", i, step.kind.value, f"{step.kind.value}.{name} has no severity {tier} interval"))
                continue
            lo, hi = tiers[tier]
            if step.kind is OpKind.FLARE and name == "edge_margin":
                lo = 0.0  # the along-edge coordinate may sit closer to a corner
            for v in _param_values(step, name):
                if v < lo - _EPS or v > hi + _EPS:
                    out.append(Violation("param_range", i, step.kind.value, f"{step.kind.value}.{name}={v!r} outside [{lo}, {hi}] at severity {tier}"))
                    continue
                inner = config.band(step.kind, name, tier)
                if inner is not None and inner[0] + _EPS < v < inner[1] - _EPS:
                    out.append(Violation("param_band", i, step.kind.value, f"{step.kind.value}.{name}={v!r} inside the severity {tier - 1} interval [{inner[0]}, {inner[1]}]"))

    kinds = recipe.kinds
    if kinds != canonical_order(kinds):
        out.append(Violation("canonical_order", None, None, f"steps {[k.value for k in kinds]} not in canonical order"))
    return out


# ---------------------------------------------------------------- severity policy

@dataclass(frozen=True)
class SeverityPolicy:
    """How a tier is picked per image: fixed tier, uniform over tiers, or weighted."""
    mode: str = "uniform"
    tier: Optional[int] = None
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.mode not in ("fixed", "uniform", "weighted"):
            raise ContractError(f"severity policy mode must be fixed, uniform or weighted, got {self.mode!r}")
        if self.mode == "fixed" and (self.tier is None or int(self.tier) not in (1, 2, 3)):
            raise ContractError(f"fixed severity policy needs a tier in 1..3, got {self.tier!r}")
        if self.mode == "weighted":
            w = tuple(float(x) for x in self.weights)
            if len(w) != 3 or any(x < 0 for x in w) or sum(w) <= 0:
                raise ContractError(f"weighted severity policy needs three non-negative weights, got {self.weights!r}")
            object.__setattr__(self, "weights", w)

    @classmethod
    def parse(cls, text: str) -> "SeverityPolicy":
        """'1'/'2'/'3', 'fixed:N', 'uniform' or 'weighted:a,b,c'."""
        text = str(text).strip().lower()
        if text in ("1", "2", "3"):
            return cls(mode="fixed", tier=int(text))
        if text == "uniform":
            return cls()
        mode, _, rest = text.partition(":")
        try:
            if mode == "fixed":
                return cls(mode="fixed", tier=int(rest))
            if mode == "weighted":
                return cls(mode="weighted", weights=tuple(float(x) for x in rest.split(",")))  # type: ignore[arg-type]
        except ValueError:
            pass
        raise ContractError(f"cannot parse severity policy {text!r}")

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"mode": self.mode}
        if self.mode == "fixed":
            d["tier"] = int(self.tier)  # type: ignore[arg-type]
        if self.mode == "weighted":
            d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SeverityPolicy":
        return cls(mode=data["mode"], tier=data.get("tier"), weights=tuple(data.get("weights", (1.0, 1.0, 1.0))))  # type: ignore[arg-type]


def assign_severity(policy: SeverityPolicy, global_seed: int, image_id: str, variant_index: int = 0) -> SeverityLevel:
    if policy.mode == "fixed":
        return SeverityLevel(int(policy.tier))  # type: ignore[arg-type]
    rng = keyed_rng("severity", _check_seed(global_seed), image_id, int(variant_index))
    if policy.mode == "uniform":
        return SeverityLevel(int(rng.integers(1, 4)))
    w = np.asarray(policy.weights, dtype=np.float64)
    return SeverityLevel(int(rng.choice(3, p=w / w.sum())) + 1)


# ---------------------------------------------------------------- table analysis

def _classify_row(intervals: Sequence[Tuple[float, float]]) -> str:
    if len(intervals) < 2:
        return "single"
    pairs = list(zip(intervals, intervals[1:]))
    if all(a[1] == b[0] and a[0] < b[0] for a, b in pairs):
        return "contiguous"
    if all(a[1] < b[0] for a, b in pairs):
        return "disjoint"
    if all(a == b for a, b in pairs):
        return "shared"
    if all(b[0] <= a[0] and a[1] <= b[1] for a, b in pairs):
        # every tier strictly encloses the one below
        return "banded" if all(a != b and a[0] < a[1] for a, b in pairs) else "nested"
    return "overlapping"


def tier_boundaries(config: SeverityConfig) -> Dict[str, Dict[str, str]]:
    """Classify each table row.

    contiguous and disjoint rows separate tiers by value; banded rows nest and
    are separated by magnitude (see SeverityConfig.band); shared rows use one
    interval at every tier. Anything else is nested, overlapping or single.
    """
    return {
        kind.value: {
            name: _classify_row([tiers[t] for t in sorted(tiers)])
            for name, tiers in params.items()
        }
        for kind, params in config.ranges.items()
    }


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepResult:
    tier: int
    count: int
    op_counts: Dict[int, int] = field(default_factory=dict)
    kind_counts: Dict[str, int] = field(default_factory=dict)
    violations: int = 0
    examples: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tier": self.tier,
            "count": self.count,
            "op_counts": {str(k): v for k, v in sorted(self.op_counts.items())},
            "kind_counts": dict(sorted(self.kind_counts.items())),
            "violations": self.violations,
            "examples": self.examples,
        }


def sweep(config: SeverityConfig, tier: int, count: int, seed: int = 0, keep_examples: int = 5) -> SweepResult:
    """Sample `count` recipes at `tier` and validate each one."""
    op_counts: Counter = Counter()
    kind_counts: Counter = Counter()
    result = SweepResult(tier=int(tier), count=int(count))
    for i in range(int(count)):
        recipe = sample_recipe(seed, f"sweep-{i}", tier, config)
        op_counts[len(recipe.steps)] += 1
        kind_counts.update(k.value for k in recipe.kinds)
        bad = validate_recipe(recipe, config)
        if bad:
            result.violations += len(bad)
            if len(result.examples) < keep_examples:
                result.examples.append({"recipe": recipe.to_dict(), "violations": [v.to_dict() for v in bad]})
    result.op_counts = dict(op_counts)
    result.kind_counts = dict(kind_counts)
    if result.violations:
        logger.warning("sweep at severity %d: %d violations in %d recipes", tier, result.violations, count)
    return result
