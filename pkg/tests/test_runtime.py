import numpy as np
import pytest

from lazyattn import (
    GLA,
    VLA,
    AttentionCapture,
    LazyBlock,
    LazyPlan,
    TokenSequence,
    ValidationError,
    decode,
    decode_gla,
    decode_standard,
    decode_vla,
    empty_plan,
    generate,
    oracle_full_generate,
    oracle_prefill,
    prefill,
    prefill_gla,
    prefill_standard,
    prefill_vla,
    prune_visual_tokens,
)

from conftest import make_model, random_plan, random_prompt


def two_block_plan(mode, n_layers=6):
    return LazyPlan(
        mode=mode,
        n_layers=n_layers,
        blocks=[LazyBlock(1, (2, 3)), LazyBlock(4, (5,))],
        epsilon=0.5,
    )


@pytest.fixture(scope="module")
def model():
    return make_model(n_layers=6, seed=21)


@pytest.fixture(scope="module")
def prompt():
    return TokenSequence([3, 9, 2, 7, 5, 11, 13, 1], [1, 1, 1, 0, 0, 0, 0, 0])


def test_empty_plan_is_bitwise_standard(model, prompt):
    l_std, _ = prefill_standard(model, prompt)
    l_gla, _ = prefill_gla(model, prompt, empty_plan(GLA, 6))
    l_vla, _ = prefill_vla(model, prompt, empty_plan(VLA, 6))
    assert np.array_equal(l_std, l_gla)
    assert np.array_equal(l_std, l_vla)


def test_empty_plan_decode_is_bitwise_standard(model, prompt):
    _, s_std = prefill_standard(model, prompt)
    _, s_gla = prefill_gla(model, prompt, empty_plan(GLA, 6))
    _, s_vla = prefill_vla(model, prompt, empty_plan(VLA, 6))
    d_std = decode_standard(model, s_std, 4)
    assert np.array_equal(d_std, decode_gla(model, s_gla, 4))
    assert np.array_equal(d_std, decode_vla(model, s_vla, 4))


def test_gla_lazy_attention_equals_anchor_bitwise(model, prompt):
    plan = two_block_plan(GLA)
    capture = AttentionCapture(per_head=True)
    prefill_gla(model, prompt, plan, capture=capture)
    mats = capture.snapshot.head_matrices
    for block in plan.blocks:
        for lazy in block.lazy_layers:
            for h in range(model.config.n_heads):
                assert np.array_equal(mats[block.anchor][h], mats[lazy][h])


def test_prefill_matches_recompute_oracle_bitwise(model, prompt):
    for plan in (two_block_plan(GLA), two_block_plan(VLA)):
        logits, _ = prefill(model, prompt, plan)
        assert np.array_equal(logits, oracle_prefill(model, prompt, plan))


def test_gla_decode_consistency(model, prompt):
    plan = two_block_plan(GLA)
    ext = TokenSequence(prompt.token_ids + [17], prompt.modality + [0])
    lf, _ = prefill_gla(model, ext, plan)
    _, store = prefill_gla(model, prompt, plan)
    dl = decode_gla(model, store, 17)
    assert np.max(np.abs(lf[-1] - dl)) <= 1e-5


def test_vla_decode_consistency(model, prompt):
    plan = two_block_plan(VLA)
    ext = TokenSequence(prompt.token_ids + [17], prompt.modality + [0])
    lf, _ = prefill_vla(model, ext, plan)
    _, store = prefill_vla(model, prompt, plan)
    dl = decode_vla(model, store, 17)
    assert np.max(np.abs(lf[-1] - dl)) <= 1e-5


def test_gla_lazy_layers_store_no_keys(model, prompt):
    plan = two_block_plan(GLA)
    _, store = prefill_gla(model, prompt, plan)
    for _ in range(4):
        decode_gla(model, store, 3)
    for block in plan.blocks:
        for lazy in block.lazy_layers:
            assert store.layers[lazy].key_bytes == 0
        assert store.layers[block.anchor].key_bytes > 0


def test_vla_lazy_layers_store_text_keys_only(model, prompt):
    plan = two_block_plan(VLA)
    _, store = prefill_vla(model, prompt, plan)
    d = model.config.d_model
    for block in plan.blocks:
        for lazy in block.lazy_layers:
            assert store.layers[lazy].key_bytes == prompt.n_text * d * 4
    decode_vla(model, store, 3)
    for block in plan.blocks:
        for lazy in block.lazy_layers:
            assert store.layers[lazy].key_bytes == (prompt.n_text + 1) * d * 4


def test_qcache_lifecycle_and_bound(model, prompt):
    plan = two_block_plan(GLA)
    _, store = prefill_gla(model, prompt, plan)
    d = model.config.d_model
    s = len(prompt)
    # released after prefill, but the peak saw the full anchor Q
    assert store.qcache.nbytes == 0
    assert store.qcache.q_heads is None
    assert store.qcache.peak_bytes == s * d * 4
    std_kv = 2 * s * d * 4 * model.config.n_layers
    assert store.qcache.peak_bytes <= std_kv / (2 * model.config.n_layers)
    # during decode only the single current row is resident
    decode_gla(model, store, 3)
    assert store.qcache.peak_bytes == s * d * 4


def test_vla_qcache_holds_visual_rows_only(model, prompt):
    plan = two_block_plan(VLA)
    _, store = prefill_vla(model, prompt, plan)
    d = model.config.d_model
    assert store.qcache.peak_bytes == prompt.n_visual * d * 4


def test_mode_mismatch_rejected(model, prompt):
    _, s_std = prefill_standard(model, prompt)
    with pytest.raises(ValidationError):
        decode_gla(model, s_std, 1)
    with pytest.raises(ValidationError):
        decode_vla(model, s_std, 1)
    _, s_gla = prefill_gla(model, prompt, two_block_plan(GLA))
    with pytest.raises(ValidationError):
        decode_standard(model, s_gla, 1)
    with pytest.raises(ValidationError):
        prefill_gla(model, prompt, two_block_plan(VLA))
    with pytest.raises(ValidationError):
        prefill_vla(model, prompt, two_block_plan(GLA))


def test_plan_layer_count_mismatch_rejected(model, prompt):
    with pytest.raises(ValidationError):
        prefill_gla(model, prompt, two_block_plan(GLA, n_layers=8))


def test_vla_zero_visual_equals_standard_bitwise(model):
    text_only = TokenSequence([3, 9, 2, 7, 5], [0] * 5)
    plan = two_block_plan(VLA)
    lv, sv = prefill_vla(model, text_only, plan)
    ls, ss = prefill_standard(model, text_only)
    assert np.array_equal(lv, ls)
    assert np.array_equal(decode_vla(model, sv, 8), decode_standard(model, ss, 8))


def test_vla_zero_text_equals_gla_bitwise(model):
    visual_only = TokenSequence([3, 9, 2, 7, 5], [1] * 5)
    lv, _ = prefill_vla(model, visual_only, two_block_plan(VLA))
    lg, _ = prefill_gla(model, visual_only, two_block_plan(GLA))
    assert np.array_equal(lv, lg)


def test_generate_matches_oracle_over_random_plans(model):
    rng = np.random.default_rng(31)
    for trial in range(6):
        mode = GLA if trial % 2 == 0 else VLA
        plan = random_plan(rng, 6, mode)
        tokens = random_prompt(rng, model.config.vocab_size)
        ids, _ = generate(model, tokens, 8, plan)
        assert ids == oracle_full_generate(model, tokens, 8, plan)


# ---------------------------------------------------------------------------
# Visual-token pruning hook
# ---------------------------------------------------------------------------


def test_prune_keep_one_is_exact_noop(model, prompt):
    capture = AttentionCapture()
    logits, store = prefill_standard(model, prompt, capture=capture)
    before = store.kv_bytes()
    idx = prune_visual_tokens(store, capture.snapshot, 2, 1.0)
    assert store.kv_bytes() == before
    assert store.prune_record is None
    assert idx.n_visual == prompt.n_visual
    # decode is bitwise what it would have been without the call
    _, untouched = prefill_standard(model, prompt)
    assert np.array_equal(
        decode_standard(model, store, 5), decode_standard(model, untouched, 5)
    )


def test_prune_selects_top_attention_positions(model, prompt):
    capture = AttentionCapture()
    _, store = prefill_standard(model, prompt, capture=capture)
    idx = prune_visual_tokens(store, capture.snapshot, 2, 0.5)
    scores = capture.snapshot.last_rows[2]
    visual = [0, 1, 2]
    expected = sorted(sorted(visual, key=lambda p: (-scores[p], p))[:2])
    assert idx.visual_positions == expected
    assert len(store.prune_record.removed) == 1


def test_prune_bookkeeping_through_decode(model, prompt):
    capture = AttentionCapture()
    logits, store = prefill_standard(model, prompt, capture=capture)
    prune_visual_tokens(store, capture.snapshot, 2, 0.5)
    steps = 3
    generate(model, prompt, steps, None, store=store, last_logits=logits[-1])
    kept = prompt.n_text + 2 + steps
    for l, cache in enumerate(store.layers):
        if l > 2:
            assert cache.stored_len == kept
        else:
            assert cache.stored_len == len(prompt) + steps


def test_prune_validation(model, prompt):
    capture = AttentionCapture()
    _, store = prefill_standard(model, prompt, capture=capture)
    with pytest.raises(ValidationError):
        prune_visual_tokens(store, capture.snapshot, 2, 0.0)
    with pytest.raises(ValidationError):
        prune_visual_tokens(store, capture.snapshot, 2, 1.5)
    with pytest.raises(ValidationError):
        prune_visual_tokens(store, capture.snapshot, 99, 0.5)


def test_pruned_store_matches_prune_aware_oracle(model, prompt):
    from lazyattn import PruneSpec

    for plan in (None, two_block_plan(GLA), two_block_plan(VLA)):
        capture = AttentionCapture()
        logits, store = prefill(model, prompt, plan, capture=capture)
        prune_visual_tokens(store, capture.snapshot, 2, 0.5)
        spec = PruneSpec.from_record(store.prune_record)
        ids, _ = generate(model, prompt, 6, plan, store=store, last_logits=logits[-1])
        assert ids == oracle_full_generate(model, prompt, 6, plan, prune=spec)


def test_prune_straddling_block_prunes_with_anchor(model, prompt):
    # Block anchored at 2 with lazy layers 3 and 4: pruning at layer 3 must
    # leave the whole block (K source and V) unpruned, layer 5 pruned.
    plan = LazyPlan(mode=GLA, n_layers=6, blocks=[LazyBlock(2, (3, 4))], epsilon=0.5)
    capture = AttentionCapture()
    logits, store = prefill_gla(model, prompt, plan, capture=capture)
    prune_visual_tokens(store, capture.snapshot, 3, 0.5)
    assert store.layers[2].stored_len == len(prompt)
    assert store.layers[3].stored_len == len(prompt)  # V only, unpruned with anchor
    assert store.layers[5].stored_len < len(prompt)
    from lazyattn import PruneSpec

    spec = PruneSpec.from_record(store.prune_record)
    ids, _ = generate(model, prompt, 5, plan, store=store, last_logits=logits[-1])
    assert ids == oracle_full_generate(model, prompt, 5, plan, prune=spec)
