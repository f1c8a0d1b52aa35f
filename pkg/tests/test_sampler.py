from __future__ import annotations

from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from lumaforge.errors import ContractError
from lumaforge.lightops import ContrastParams, ExposureParams, HazeParams, OpKind, TintParams
from lumaforge.sampler import (
    CONFLICT_GROUPS,
    RecipeStep,
    SeverityLevel,
    SeverityPolicy,
    VariantRecipe,
    assign_severity,
    canonical_order,
    sample_recipe,
    sweep,
    validate_recipe,
)


def test_severity_one_has_exactly_one_step(severity_config):
    for i in range(200):
        assert len(sample_recipe(11, f"img{i}", 1, severity_config).steps) == 1


def test_same_inputs_same_recipe(severity_config):
    a = sample_recipe(7, "42", 3, severity_config)
    b = sample_recipe(7, "42", 3, severity_config)
    assert a == b
    assert a.to_dict() == b.to_dict()
    assert VariantRecipe.from_dict(a.to_dict()) == a


def test_recipes_differ_across_keys(severity_config):
    base = sample_recipe(7, "42", 3, severity_config)
    others = [
        sample_recipe(8, "42", 3, severity_config),
        sample_recipe(7, "43", 3, severity_config),
        sample_recipe(7, "42", 3, severity_config, variant_index=1),
    ]
    assert any(o.to_dict()["steps"] != base.to_dict()["steps"] for o in others)


def test_warm_never_with_cool(severity_config):
    for i in range(2000):
        kinds = set(sample_recipe(3, str(i), 3, severity_config).kinds)
        assert not {OpKind.WARM, OpKind.COOL} <= kinds


def test_seed_must_fit_64_bits(severity_config):
    sample_recipe(2**64 - 1, "x", 2, severity_config)
    with pytest.raises(ContractError):
        sample_recipe(2**64, "x", 2, severity_config)
    with pytest.raises(ContractError):
        sample_recipe(-1, "x", 2, severity_config)


def test_canonical_order_examples():
    assert canonical_order([OpKind.GRAIN, OpKind.HAZE]) == [OpKind.HAZE, OpKind.GRAIN]
    assert canonical_order([OpKind.GAMMA]) == [OpKind.GAMMA]
    assert canonical_order(["gamma", "shadow", "warm"]) == [OpKind.SHADOW, OpKind.WARM, OpKind.GAMMA]


def test_sampled_recipes_are_in_canonical_order(severity_config):
    for i in range(500):
        r = sample_recipe(5, str(i), 3, severity_config)
        assert r.kinds == canonical_order(r.kinds)


def test_validator_flags_conflict(severity_config):
    recipe = VariantRecipe("1", SeverityLevel.MODERATE, 0, (
        RecipeStep(OpKind.HAZE, HazeParams(alpha=0.2)),
        RecipeStep(OpKind.CONTRAST, ContrastParams(factor=1.1)),
    ))
    bad = validate_recipe(recipe, severity_config)
    assert [v.invariant for v in bad] == ["conflict"]


def test_validator_flags_tier_range(severity_config):
    recipe = VariantRecipe("1", SeverityLevel.MILD, 0, (RecipeStep(OpKind.EXPOSURE, ExposureParams(ev=0.5)),))
    bad = validate_recipe(recipe, severity_config)
    assert len(bad) == 1
    assert bad[0].invariant == "param_range" and "ev" in bad[0].message


def test_validator_flags_severe_only_and_count(severity_config):
    fresh = sample_recipe(1, "z", 3, severity_config)
    assert validate_recipe(fresh, severity_config) == []
    demoted = replace(fresh, severity=SeverityLevel.MILD)
    invariants = {v.invariant for v in validate_recipe(demoted, severity_config)}
    if len(fresh.steps) > 1:
        assert "op_count" in invariants
    if set(fresh.kinds) & {OpKind.COLOR_CAST, OpKind.FLARE}:
        assert "severe_only" in invariants


def test_validator_flags_duplicates_and_order(severity_config):
    step = RecipeStep(OpKind.EXPOSURE, ExposureParams(ev=0.5))
    dup = VariantRecipe("1", SeverityLevel.MODERATE, 0, (step, step))
    assert "duplicate_kind" in {v.invariant for v in validate_recipe(dup, severity_config)}
    swapped = VariantRecipe("1", SeverityLevel.MODERATE, 0, (
        RecipeStep(OpKind.CONTRAST, ContrastParams(factor=1.1)),
        RecipeStep(OpKind.EXPOSURE, ExposureParams(ev=0.5)),
    ))
    assert [v.invariant for v in validate_recipe(swapped, severity_config)] == ["canonical_order"]


def test_validator_flags_mismatched_params_type(severity_config):
    recipe = VariantRecipe("1", SeverityLevel.MODERATE, 0, (RecipeStep(OpKind.EXPOSURE, TintParams(tint=0.05)),))
    bad = validate_recipe(recipe, severity_config)
    assert [v.invariant for v in bad] == ["param_type"]
    assert "ExposureParams" in bad[0].message and "TintParams" in bad[0].message


def test_validator_flags_value_inside_milder_band(severity_config):
    def check(tier, kind, params):
        return [v.invariant for v in validate_recipe(VariantRecipe("1", SeverityLevel(tier), 0, (RecipeStep(kind, params),)), severity_config)]

    assert check(3, OpKind.EXPOSURE, ExposureParams(ev=0.2)) == ["param_band"]
    assert check(3, OpKind.EXPOSURE, ExposureParams(ev=-0.5)) == ["param_band"]
    assert check(3, OpKind.EXPOSURE, ExposureParams(ev=-1.2)) == []
    assert check(3, OpKind.EXPOSURE, ExposureParams(ev=0.8)) == []
    assert check(2, OpKind.CONTRAST, ContrastParams(factor=1.0)) == ["param_band"]
    assert check(2, OpKind.CONTRAST, ContrastParams(factor=0.8)) == []
    assert check(1, OpKind.EXPOSURE, ExposureParams(ev=0.0)) == []


@pytest.mark.parametrize("tier", [2, 3])
def test_nested_rows_keep_higher_tiers_out_of_milder_bands(severity_config, tier):
    rows = {OpKind.EXPOSURE: "ev", OpKind.BRIGHTNESS: "percent", OpKind.CONTRAST: "factor", OpKind.GAMMA: "gamma"}
    seen = Counter()
    sides = Counter()
    for i in range(4000):
        for step in sample_recipe(23, f"band-{i}", tier, severity_config).steps:
            if step.kind not in rows:
                continue
            name = rows[step.kind]
            v = getattr(step.params, name)
            lo, hi = severity_config.interval(step.kind, name, tier - 1)
            assert v <= lo or v >= hi, (step.kind.value, v)
            seen[step.kind] += 1
            centre = 1.0 if step.kind in (OpKind.CONTRAST, OpKind.GAMMA) else 0.0
            sides[(step.kind, v > centre)] += 1
    for kind in rows:
        assert seen[kind] > 50
        assert sides[(kind, True)] > 0 and sides[(kind, False)] > 0


@pytest.mark.parametrize("tier", [1, 2, 3])
def test_quick_sweep_is_clean(severity_config, tier):
    result = sweep(severity_config, tier, 2000, seed=17)
    assert result.violations == 0
    assert sum(result.op_counts.values()) == 2000
    assert max(result.op_counts) <= tier
    if tier < 3:
        assert "color_cast" not in result.kind_counts and "flare" not in result.kind_counts


@pytest.mark.slow
@pytest.mark.parametrize("tier", [1, 2, 3])
def test_conflict_soundness_over_many_recipes(severity_config, tier):
    result = sweep(severity_config, tier, 100_000, seed=2024)
    assert result.violations == 0
    assert result.examples == []
    if tier < 3:
        assert "color_cast" not in result.kind_counts and "flare" not in result.kind_counts


@pytest.mark.slow
def test_op_count_uniform_at_tier_three(severity_config):
    counts = sweep(severity_config, 3, 100_000, seed=99).op_counts
    observed = np.array([counts.get(k, 0) for k in (1, 2, 3)], dtype=np.float64)
    expected = observed.sum() / 3.0
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    # 2 degrees of freedom, p = 0.01
    assert chi2 < 9.21


def test_every_conflict_group_can_occur_separately(severity_config):
    seen = Counter()
    for i in range(3000):
        for k in sample_recipe(0, str(i), 3, severity_config).kinds:
            seen[k] += 1
    for _, group in CONFLICT_GROUPS:
        assert all(seen[k] > 0 for k in group)


def test_severity_policy_parse_and_assign():
    assert SeverityPolicy.parse("2") == SeverityPolicy(mode="fixed", tier=2)
    assert SeverityPolicy.parse("fixed:3").tier == 3
    assert SeverityPolicy.parse("uniform").mode == "uniform"
    weighted = SeverityPolicy.parse("weighted:0,0,1")
    assert all(assign_severity(weighted, 5, str(i)) == SeverityLevel.SEVERE for i in range(50))
    with pytest.raises(ContractError):
        SeverityPolicy.parse("hard")
    with pytest.raises(ContractError):
        SeverityPolicy.parse("fixed:4")


def test_uniform_policy_is_keyed_and_covers_tiers():
    policy = SeverityPolicy()
    tiers = [assign_severity(policy, 3, str(i)) for i in range(300)]
    assert set(tiers) == {1, 2, 3}
    assert tiers == [assign_severity(policy, 3, str(i)) for i in range(300)]
    assert SeverityPolicy.from_dict(policy.to_dict()) == policy
