import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multigran.errors import ConfigError, FormatError, InfeasiblePlanError, ShapeError
from multigran.experiment import format_ratio, reduction_ratio
from multigran.numerics import make_rng
from multigran.tokens import (
    PatchStats, PatchStrategy, ReductionPlan, assemble, compute_entry_stats, compute_patch_stats, decode_bundle,
    empty_bundle, encode_bundle, read_bundle, reduce, scale_affine, scale_token, write_bundle,
)

from tokens_fixtures import layout

# full-scale layout: 6x6 pooled patches, CLS, 100 proposals + background
LARGE_PLANS = [
    (ReductionPlan(), 138),
    (ReductionPlan(object_keep=20), 57),
    (ReductionPlan(object_keep=5), 42),
    (ReductionPlan(PatchStrategy.prune_random(23, seed=0), object_keep=5), 29),
    (ReductionPlan(PatchStrategy.pool(2), object_keep=5), 15),
]


@pytest.fixture(scope="module")
def large_bundle():
    g, grid, objs = layout(101)
    return assemble(g, grid, objs)


def test_large_full_bundle(large_bundle):
    assert large_bundle.counts == {"global": 1, "local": 36, "object": 101}
    assert len(large_bundle) == 138


@pytest.mark.parametrize("plan,total", LARGE_PLANS)
def test_large_compositions(large_bundle, plan, total):
    out = reduce(large_bundle, plan)
    assert len(out) == total
    assert out.matrix().shape == (total, 16)
    assert plan.predict_counts(large_bundle.counts, large_bundle.local_grid) == out.counts


@pytest.mark.parametrize("tokens,text", [(144, "75%"), (57, "90%"), (15, "97%"), (576, "0%")])
def test_reduction_ratio_vs_576(tokens, text):
    assert format_ratio(reduction_ratio(tokens, 576)) == text


def test_bundle_order(large_bundle):
    m = large_bundle.matrix()
    kinds = [t.kind for t in large_bundle.tokens()]
    assert kinds == ["global"] + ["local"] * 36 + ["object"] * 101
    conf = large_bundle.object_confidence
    assert np.all(np.diff(conf) <= 0)
    assert np.array_equal(m[1:37], large_bundle.local_tokens)


@given(st.integers(0, 2**31), st.integers(1, 12))
def test_norm_retarget_contract(seed, n):
    g, grid, objs = layout(n, seed=seed)
    b = assemble(g, grid, objs)
    mu = compute_patch_stats(grid.reshape(-1, 16)).mu
    raw = [g] + [o.embedding for o in sorted(objs, key=lambda o: -o.confidence)]
    for before, after in zip(raw, [b.global_token, *b.object_tokens]):
        assert abs(np.linalg.norm(after) - mu) <= 1e-9
        cos = before @ after / np.linalg.norm(before) / np.linalg.norm(after)
        assert abs(cos - 1) <= 1e-12
    assert np.array_equal(b.local_tokens, grid.reshape(-1, 16))


@given(st.integers(0, 2**31))
def test_literal_affine_contract(seed):
    g, grid, objs = layout(4, seed=seed)
    b = assemble(g, grid, objs, scale_mode="literal_affine")
    st_ = compute_entry_stats(grid.reshape(-1, 16))
    for t in [b.global_token, *b.object_tokens]:
        assert abs(t.mean() - st_.mu) <= 1e-6
        assert abs(t.std() - st_.sigma) <= 1e-6


def test_norm_standardize_spreads_norms():
    g, grid, objs = layout(6)
    b = assemble(g, grid, objs, scale_mode="norm_standardize")
    stats = b.patch_stats
    norms = np.linalg.norm(b.object_tokens, axis=1)
    assert abs(norms.mean() - stats.mu) < 1e-9


def test_unscaled_assembly_keeps_embeddings():
    g, grid, objs = layout(3)
    b = assemble(g, grid, objs, do_scale=False)
    assert np.array_equal(b.global_token, g)
    assert not b.scaled and b.patch_stats is None


def test_post_scale_position_added_after_scaling():
    g, grid, objs = layout(3)
    from dataclasses import replace

    late = [replace(o, position_applied=False) for o in objs]
    b = assemble(g, grid, late)
    mu = b.patch_stats.mu
    for t, o in zip(b.object_tokens, sorted(late, key=lambda o: -o.confidence)):
        assert abs(np.linalg.norm(t - o.pos_embedding) - mu) < 1e-9


def test_scale_errors():
    with pytest.raises(ValueError):
        scale_token(np.zeros(3), PatchStats(1.0, 0.0))
    with pytest.raises(ValueError):
        scale_affine(np.ones(3), PatchStats(1.0, 1.0))
    with pytest.raises(ValueError):
        compute_patch_stats(np.ones((1, 3)))
    with pytest.raises(ConfigError):
        assemble(None, np.ones((2, 2, 3)), [], scale_mode="other")
    with pytest.raises(ShapeError):
        assemble(np.ones(4), np.ones((2, 2, 3)), [])


def test_infeasible_plans(large_bundle):
    with pytest.raises(InfeasiblePlanError) as e:
        reduce(large_bundle, ReductionPlan(object_keep=200))
    assert e.value.available["object"] == 101
    with pytest.raises(InfeasiblePlanError):
        reduce(large_bundle, ReductionPlan(PatchStrategy.pool(4)))
    with pytest.raises(InfeasiblePlanError):
        reduce(large_bundle, ReductionPlan(PatchStrategy.prune_random(40, seed=0)))
    with pytest.raises(ConfigError):
        PatchStrategy("prune_random", n=3)
    with pytest.raises(ConfigError):
        ReductionPlan(object_keep=-1)


@given(st.integers(0, 2**31), st.integers(0, 36))
def test_reduce_never_rescales_or_reorders(seed, n):
    g, grid, objs = layout(7, seed=seed)
    b = assemble(g, grid, objs)
    out = reduce(b, ReductionPlan(PatchStrategy.prune_random(n, seed=seed), object_keep=3))
    rows = [tuple(r) for r in b.local_tokens]
    idx = [rows.index(tuple(r)) for r in out.local_tokens]
    assert idx == sorted(idx)
    assert np.array_equal(out.object_tokens, b.object_tokens[:3])
    assert np.array_equal(out.global_token, b.global_token)


def test_prune_random_is_seeded(large_bundle):
    a = reduce(large_bundle, ReductionPlan(PatchStrategy.prune_random(10, seed=4)))
    b = reduce(large_bundle, ReductionPlan(PatchStrategy.prune_random(10, seed=4)))
    assert a.same_as(b)


def test_topk_norm_and_maxpool(large_bundle):
    top = reduce(large_bundle, ReductionPlan(PatchStrategy.prune_topk_norm(5)))
    norms = np.linalg.norm(large_bundle.local_tokens, axis=1)
    assert set(np.linalg.norm(top.local_tokens, axis=1)) == set(np.sort(norms)[-5:])
    mp = reduce(large_bundle, ReductionPlan(PatchStrategy.maxpool(3)))
    assert mp.local_grid == (2, 2) and len(mp.local_tokens) == 4


def test_plan_dict_round_trip():
    plan = ReductionPlan(PatchStrategy.prune_random(23, seed=0), object_keep=5, use_global=False)
    assert ReductionPlan.from_dict(plan.to_dict()) == plan
    with pytest.raises(ConfigError):
        ReductionPlan.from_dict({"bogus": 1})


@given(st.integers(0, 2**31))
def test_bundle_round_trip(seed):
    g, grid, objs = layout(int(make_rng(seed).integers(0, 6)), seed=seed)
    b = assemble(g if seed % 2 else None, grid, objs)
    if seed % 3 == 0:
        b = reduce(b, ReductionPlan(PatchStrategy.prune_random(9, seed=seed)))
    data = encode_bundle(b)
    back = decode_bundle(data)
    assert back.same_as(b)
    assert encode_bundle(back) == data


def test_bundle_file_and_empty(tmp_path):
    e = empty_bundle(4)
    write_bundle(e, tmp_path / "b.mgtb")
    assert read_bundle(tmp_path / "b.mgtb").same_as(e)
    with pytest.raises(FormatError) as exc:
        decode_bundle(encode_bundle(e)[:-1])
    assert exc.value.kind in ("checksum", "truncated")
