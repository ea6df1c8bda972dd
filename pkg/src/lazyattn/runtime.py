"""Prefill/decode runtimes: standard, GLA, and VLA.

All three modes run the same layer loop; a layer's role under the active
plan decides where its queries and keys come from:

  standard/anchor  project Q and K themselves (keys cached post-rotation);
                   anchors additionally publish Q to the block's Q cache
  lazy + GLA       skip the Q/K projections and rotation entirely; read the
                   anchor's Q from the Q cache and the anchor's K cache
  lazy + VLA       project Q/K for TEXT positions only (at their original
                   sequence positions); visual rows come from the anchor via
                   the Q cache / the anchor's K cache

Values, the output projection, and the MLP are always computed per layer.
During decode the generated token is TEXT: under GLA lazy layers reuse the
anchor's fresh query and key, under VLA every layer projects the new token
itself and lazy layers assemble K from their own text keys plus the
anchor's visual keys, preserving original position order.

A FastV-style pruning hook drops the lowest-attention visual positions from
every cache that lives past a chosen layer (a lazy block prunes with its
anchor, so shared K and per-layer V stay aligned).
"""

from __future__ import annotations

import math

import numpy as np

from .caches import (
    ROLE_ANCHOR,
    ROLE_LAZY,
    ROLE_STANDARD,
    CacheStore,
    LayerRole,
    ModalityIndex,
    PruneRecord,
)
from .errors import ValidationError
from .kernels import (
    CausalMask,
    apply_rope,
    attention_scale,
    masked_softmax_rows,
    matmul,
    rms_norm,
    silu,
)
from .model import ModelWeights, TokenSequence
from .planner import GLA, VLA, LazyPlan


def _split_heads(m: np.ndarray, n_heads: int, d_head: int) -> list[np.ndarray]:
    return [np.ascontiguousarray(m[:, h * d_head : (h + 1) * d_head]) for h in range(n_heads)]


def _validate_tokens(tokens: TokenSequence, vocab_size: int) -> None:
    if len(tokens) == 0:
        raise ValidationError("token sequence must be non-empty")
    for t in tokens.token_ids:
        if not 0 <= t < vocab_size:
            raise ValidationError(f"token id {t} outside vocabulary of size {vocab_size}")


def _record(meter, label: str, m: int, k: int, n: int) -> None:
    if meter is not None:
        meter.record(label, m, k, n)


def prefill(
    weights: ModelWeights,
    tokens: TokenSequence,
    plan: LazyPlan | None = None,
    capture=None,
    meter=None,
) -> tuple[np.ndarray, CacheStore]:
    """Run the prompt through the model, returning logits for every position
    and the populated cache store. `plan=None` is the standard runtime."""
    config = weights.config
    _validate_tokens(tokens, config.vocab_size)
    store = CacheStore(config, plan, tokens)
    mode = store.mode
    n_heads, d_head = config.n_heads, config.d_head
    s = len(tokens)
    positions = list(range(s))
    scale = attention_scale(d_head)
    mask = CausalMask(0)
    text_pos = list(store.modality.text_positions)
    visual_pos = list(store.modality.visual_positions)
    text_idx = np.asarray(text_pos, dtype=np.intp)
    visual_idx = np.asarray(visual_pos, dtype=np.intp)

    x = np.ascontiguousarray(
        weights.embedding[np.asarray(tokens.token_ids, dtype=np.intp)]
    )

    for l, lw in enumerate(weights.layers):
        role = store.roles[l]
        cache = store.layers[l]
        xn = rms_norm(x, lw.attn_gain, config.norm_eps)

        v = matmul(xn, lw.wv)
        _record(meter, "attn_v", s, config.d_model, config.d_model)
        v_heads = _split_heads(v, n_heads, d_head)
        cache.append_values(v_heads, positions)

        if role.kind != ROLE_LAZY:
            q = matmul(xn, lw.wq)
            _record(meter, "attn_q", s, config.d_model, config.d_model)
            k = matmul(xn, lw.wk)
            _record(meter, "attn_k", s, config.d_model, config.d_model)
            q_heads = [apply_rope(qh, positions, config.rope_theta) for qh in _split_heads(q, n_heads, d_head)]
            k_heads = [apply_rope(kh, positions, config.rope_theta) for kh in _split_heads(k, n_heads, d_head)]
            cache.append_keys(k_heads, positions)
            if role.kind == ROLE_ANCHOR:
                if mode == GLA:
                    store.qcache.publish(role.block, q_heads, positions)
                else:
                    shared = [np.ascontiguousarray(qh[visual_idx]) for qh in q_heads]
                    store.qcache.publish(role.block, shared, visual_pos)
            attn_q = q_heads
            attn_k = k_heads
        elif mode == GLA:
            anchor = store.anchor_cache(role)
            attn_q = store.qcache.read(role.block)
            attn_k = [anchor.keys[h].data for h in range(n_heads)]
        else:  # VLA lazy layer
            xt = np.ascontiguousarray(xn[text_idx])
            qt = matmul(xt, lw.wq)
            _record(meter, "attn_q", len(text_pos), config.d_model, config.d_model)
            kt = matmul(xt, lw.wk)
            _record(meter, "attn_k", len(text_pos), config.d_model, config.d_model)
            qt_heads = [apply_rope(qh, text_pos, config.rope_theta) for qh in _split_heads(qt, n_heads, d_head)]
            kt_heads = [apply_rope(kh, text_pos, config.rope_theta) for kh in _split_heads(kt, n_heads, d_head)]
            cache.append_keys(kt_heads, text_pos)
            anchor = store.anchor_cache(role)
            shared_q = store.qcache.read(role.block)
            attn_q, attn_k = [], []
            for h in range(n_heads):
                qf = np.empty((s, d_head), dtype=np.float32)
                qf[text_idx] = qt_heads[h]
                qf[visual_idx] = shared_q[h]
                kf = np.empty((s, d_head), dtype=np.float32)
                kf[text_idx] = kt_heads[h]
                kf[visual_idx] = anchor.keys[h].data[visual_idx]
                attn_q.append(qf)
                attn_k.append(kf)

        head_attn = [] if capture is not None else None
        out_heads = []
        for h in range(n_heads):
            scores = matmul(attn_q[h], attn_k[h].T)
            _record(meter, "attn_scores", s, d_head, s)
            attn = masked_softmax_rows(scores, mask, scale)
            out_heads.append(matmul(attn, v_heads[h]))
            _record(meter, "attn_wv", s, s, d_head)
            if head_attn is not None:
                head_attn.append(attn)
        if capture is not None:
            capture.record(l, head_attn)

        o = np.concatenate(out_heads, axis=1)
        attn_out = matmul(o, lw.wo)
        _record(meter, "attn_out", s, config.d_model, config.d_model)
        x = x + attn_out

        hn = rms_norm(x, lw.mlp_gain, config.norm_eps)
        gate = matmul(hn, lw.w_gate)
        _record(meter, "mlp_gate", s, config.d_model, config.d_ff)
        up = matmul(hn, lw.w_up)
        _record(meter, "mlp_up", s, config.d_model, config.d_ff)
        act = silu(gate) * up
        down = matmul(act, lw.w_down)
        _record(meter, "mlp_down", s, config.d_ff, config.d_model)
        x = x + down

    # Prefill-era shared queries are never reread by decode; release them so
    # the Q cache occupancy bound stays honest (peak remains recorded).
    store.qcache.release()

    xn = rms_norm(x, weights.final_gain, config.norm_eps)
    logits = matmul(xn, weights.lm_head)
    _record(meter, "lm_head", s, config.d_model, config.vocab_size)
    store.seq_len = s
    return logits, store


def decode(weights: ModelWeights, store: CacheStore, next_token: int, meter=None) -> np.ndarray:
    """One greedy-decode step: appends the token's K/V per layer role and
    returns the next-token logits vector. Mutates the store in place."""
    config = weights.config
    if store.seq_len == 0:
        raise ValidationError("decode requires caches populated by a prefill")
    if not 0 <= next_token < config.vocab_size:
        raise ValidationError(f"token id {next_token} outside vocabulary")
    n_heads, d_head = config.n_heads, config.d_head
    pos = store.seq_len
    scale = attention_scale(d_head)
    mode = store.mode

    x = np.ascontiguousarray(weights.embedding[np.asarray([next_token], dtype=np.intp)])
    store.modality.append_text(pos)

    for l, lw in enumerate(weights.layers):
        role = store.roles[l]
        cache = store.layers[l]
        xn = rms_norm(x, lw.attn_gain, config.norm_eps)

        v = matmul(xn, lw.wv)
        _record(meter, "attn_v", 1, config.d_model, config.d_model)
        v_heads = _split_heads(v, n_heads, d_head)
        cache.append_values(v_heads, [pos])

        if role.kind != ROLE_LAZY:
            q = matmul(xn, lw.wq)
            _record(meter, "attn_q", 1, config.d_model, config.d_model)
            k = matmul(xn, lw.wk)
            _record(meter, "attn_k", 1, config.d_model, config.d_model)
            q_heads = [apply_rope(qh, [pos], config.rope_theta) for qh in _split_heads(q, n_heads, d_head)]
            k_heads = [apply_rope(kh, [pos], config.rope_theta) for kh in _split_heads(k, n_heads, d_head)]
            cache.append_keys(k_heads, [pos])
            if role.kind == ROLE_ANCHOR and mode == GLA:
                store.qcache.publish(role.block, q_heads, [pos])
            attn_q = q_heads
            attn_k = [cache.keys[h].data for h in range(n_heads)]
        elif mode == GLA:
            anchor = store.anchor_cache(role)
            attn_q = store.qcache.read(role.block)
            attn_k = [anchor.keys[h].data for h in range(n_heads)]
        else:  # VLA lazy: own projections for the text token, merged K
            q = matmul(xn, lw.wq)
            _record(meter, "attn_q", 1, config.d_model, config.d_model)
            k = matmul(xn, lw.wk)
            _record(meter, "attn_k", 1, config.d_model, config.d_model)
            q_heads = [apply_rope(qh, [pos], config.rope_theta) for qh in _split_heads(q, n_heads, d_head)]
            k_new = [apply_rope(kh, [pos], config.rope_theta) for kh in _split_heads(k, n_heads, d_head)]
            cache.append_keys(k_new, [pos])
            anchor = store.anchor_cache(role)
            # Visual coverage follows the anchor's cache (a block prunes as a
            # unit with its anchor), not the global modality index.
            vis_rows = np.array(
                [i for i, p in enumerate(anchor.key_positions) if p in store.visual_set],
                dtype=np.intp,
            )
            vis_positions = [anchor.key_positions[i] for i in vis_rows]
            merged_pos = np.concatenate(
                [
                    np.asarray(cache.key_positions, dtype=np.int64),
                    np.asarray(vis_positions, dtype=np.int64),
                ]
            )
            order = np.argsort(merged_pos, kind="stable")
            attn_q = q_heads
            attn_k = []
            for h in range(n_heads):
                stacked = np.concatenate(
                    [cache.keys[h].data, anchor.keys[h].data[vis_rows]], axis=0
                )
                attn_k.append(np.ascontiguousarray(stacked[order]))

        out_heads = []
        for h in range(n_heads):
            L = attn_k[h].shape[0]
            scores = matmul(attn_q[h], attn_k[h].T)
            _record(meter, "attn_scores", 1, d_head, L)
            attn = masked_softmax_rows(scores, None, scale)
            out_heads.append(matmul(attn, cache.values[h].data))
            _record(meter, "attn_wv", 1, L, d_head)

        o = np.concatenate(out_heads, axis=1)
        attn_out = matmul(o, lw.wo)
        _record(meter, "attn_out", 1, config.d_model, config.d_model)
        x = x + attn_out

        hn = rms_norm(x, lw.mlp_gain, config.norm_eps)
        gate = matmul(hn, lw.w_gate)
        _record(meter, "mlp_gate", 1, config.d_model, config.d_ff)
        up = matmul(hn, lw.w_up)
        _record(meter, "mlp_up", 1, config.d_model, config.d_ff)
        act = silu(gate) * up
        down = matmul(act, lw.w_down)
        _record(meter, "mlp_down", 1, config.d_ff, config.d_model)
        x = x + down

    xn = rms_norm(x, weights.final_gain, config.norm_eps)
    logits = matmul(xn, weights.lm_head)
    _record(meter, "lm_head", 1, config.d_model, config.vocab_size)
    store.seq_len = pos + 1
    return logits[0]


# ---------------------------------------------------------------------------
# Mode-checked public surface
# ---------------------------------------------------------------------------


def prefill_standard(weights, tokens, capture=None, meter=None):
    return prefill(weights, tokens, None, capture=capture, meter=meter)


def decode_standard(weights, store, next_token, meter=None):
    if store.mode != "standard":
        raise ValidationError(f"store was built for mode {store.mode!r}, not standard")
    return decode(weights, store, next_token, meter=meter)


def prefill_gla(weights, tokens, plan, capture=None, meter=None):
    if plan.mode != GLA:
        raise ValidationError(f"prefill_gla needs a GLA plan, got mode {plan.mode!r}")
    return prefill(weights, tokens, plan, capture=capture, meter=meter)


def decode_gla(weights, store, next_token, meter=None):
    if store.mode != GLA:
        raise ValidationError(f"store was built for mode {store.mode!r}, not {GLA!r}")
    return decode(weights, store, next_token, meter=meter)


def prefill_vla(weights, tokens, plan, capture=None, meter=None):
    if plan.mode != VLA:
        raise ValidationError(f"prefill_vla needs a VLA plan, got mode {plan.mode!r}")
    return prefill(weights, tokens, plan, capture=capture, meter=meter)


def decode_vla(weights, store, next_token, meter=None):
    if store.mode != VLA:
        raise ValidationError(f"store was built for mode {store.mode!r}, not {VLA!r}")
    return decode(weights, store, next_token, meter=meter)


def generate(
    weights,
    tokens,
    steps: int,
    plan: LazyPlan | None = None,
    capture=None,
    store: CacheStore | None = None,
    last_logits: np.ndarray | None = None,
) -> tuple[list[int], CacheStore]:
    """Greedy generation: argmax feedback, ties broken by lowest index.

    Pass an existing (store, last_logits) pair to continue from a store that
    was prefilled (and possibly pruned) earlier.
    """
    if steps < 0:
        raise ValidationError("steps must be >= 0")
    if store is None:
        logits, store = prefill(weights, tokens, plan, capture=capture)
        last = logits[-1]
    else:
        if last_logits is None:
            raise ValidationError("continuing from a store requires last_logits")
        last = last_logits
    ids: list[int] = []
    for _ in range(steps):
        t = int(np.argmax(last))
        ids.append(t)
        last = decode(weights, store, t)
    return ids, store


def prune_visual_tokens(store: CacheStore, snapshot, layer: int, keep_ratio: float) -> ModalityIndex:
    """Drop the lowest-attention visual positions from caches past `layer`.

    Ranking uses the head-averaged last-row attention captured at `layer`
    during prefill (ties keep the earlier position). Standard layers and
    anchors prune when their own index exceeds `layer`; a lazy layer prunes
    exactly when its anchor does, which keeps its K source and its V cache
    covering the same positions. keep_ratio=1 leaves the store untouched.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ValidationError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    if not 0 <= layer < store.config.n_layers:
        raise ValidationError(f"layer {layer} out of range")
    if store.seq_len == 0:
        raise ValidationError("prune requires a prefilled store")
    visual = list(store.modality.visual_positions)
    keep_count = math.ceil(keep_ratio * len(visual))
    if keep_count >= len(visual):
        return store.modality
    scores = snapshot.last_rows[layer]
    ranked = sorted(visual, key=lambda p: (-float(scores[p]), p))
    removed = set(ranked[keep_count:])

    for l, role in enumerate(store.roles):
        ref = l if role.anchor_layer is None else role.anchor_layer
        if ref > layer:
            store.layers[l].prune_positions(removed)
    store.modality.drop_visual(removed)
    store.prune_record = PruneRecord(layer, tuple(sorted(removed)), store.seq_len)
    return store.modality
