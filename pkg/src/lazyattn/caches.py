"""Cache structures for the three runtimes.

Layer roles come from the plan: standard layers and block anchors own a full
post-rotation K cache plus a V cache; GLA lazy layers own no K at all (reads
resolve to their anchor); VLA lazy layers own K rows only for TEXT positions
and read visual K from their anchor. Every layer owns its full V cache.

The Q cache is block-scoped: it holds at most one block's anchor queries at
any moment (the full sequence during prefill, a single row during GLA
decode) and is released once prefill ends. Byte accounting everywhere is
logical: stored elements times 4, independent of buffer capacity.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .model import TEXT, VISUAL, ModelConfig, TokenSequence
from .planner import GLA, LazyPlan

ROLE_STANDARD = "standard"
ROLE_ANCHOR = "anchor"
ROLE_LAZY = "lazy"


class LayerRole:
    __slots__ = ("kind", "block", "anchor_layer")

    def __init__(self, kind: str, block: int | None = None, anchor_layer: int | None = None):
        self.kind = kind
        self.block = block
        self.anchor_layer = anchor_layer


def roles_from_plan(plan: LazyPlan | None, n_layers: int) -> list[LayerRole]:
    roles = [LayerRole(ROLE_STANDARD) for _ in range(n_layers)]
    if plan is None:
        return roles
    plan.validate()
    if plan.n_layers != n_layers:
        raise ValidationError(
            f"plan covers {plan.n_layers} layers but the model has {n_layers}"
        )
    for b, block in enumerate(plan.blocks):
        roles[block.anchor] = LayerRole(ROLE_ANCHOR, block=b, anchor_layer=block.anchor)
        for l in block.lazy_layers:
            roles[l] = LayerRole(ROLE_LAZY, block=b, anchor_layer=block.anchor)
    return roles


class GrowableMatrix:
    """Row-appendable float32 matrix with amortized doubling.

    `data` is a contiguous view of the filled prefix, safe to hand to the
    kernels; logical bytes ignore spare capacity.
    """

    def __init__(self, cols: int, capacity: int = 8):
        self.cols = cols
        self._buf = np.empty((max(capacity, 1), cols), dtype=np.float32)
        self._len = 0

    def append(self, rows: np.ndarray) -> None:
        n = rows.shape[0]
        need = self._len + n
        if need > self._buf.shape[0]:
            cap = max(need, self._buf.shape[0] * 2)
            buf = np.empty((cap, self.cols), dtype=np.float32)
            buf[: self._len] = self._buf[: self._len]
            self._buf = buf
        self._buf[self._len : need] = rows
        self._len = need

    @property
    def data(self) -> np.ndarray:
        return self._buf[: self._len]

    def __len__(self) -> int:
        return self._len

    @property
    def nbytes(self) -> int:
        return self._len * self.cols * 4

    def keep_rows(self, keep: np.ndarray) -> None:
        """Compact to the given row indices (ascending)."""
        kept = self._buf[keep]
        self._buf = np.ascontiguousarray(kept)
        self._len = kept.shape[0]

    def clone(self) -> "GrowableMatrix":
        out = GrowableMatrix(self.cols, capacity=max(self._len, 1))
        out.append(self.data)
        return out


class LayerCache:
    """One layer's K/V store, split per head, with per-row position labels.

    Keys and values may cover different position sets (VLA lazy layers keep
    text-only keys but full values); positions are always stored ascending.
    """

    def __init__(self, n_heads: int, d_head: int, own_keys: bool):
        self.n_heads = n_heads
        self.d_head = d_head
        self.keys: list[GrowableMatrix] | None = (
            [GrowableMatrix(d_head) for _ in range(n_heads)] if own_keys else None
        )
        self.values: list[GrowableMatrix] = [GrowableMatrix(d_head) for _ in range(n_heads)]
        self.key_positions: list[int] = []
        self.value_positions: list[int] = []

    @property
    def stored_len(self) -> int:
        return len(self.value_positions)

    def append_keys(self, k_heads: list[np.ndarray], positions: list[int]) -> None:
        if self.keys is None:
            raise ValidationError("layer owns no key cache")
        for h in range(self.n_heads):
            self.keys[h].append(k_heads[h])
        self.key_positions.extend(positions)

    def append_values(self, v_heads: list[np.ndarray], positions: list[int]) -> None:
        for h in range(self.n_heads):
            self.values[h].append(v_heads[h])
        self.value_positions.extend(positions)

    @property
    def key_bytes(self) -> int:
        return sum(k.nbytes for k in self.keys) if self.keys is not None else 0

    @property
    def value_bytes(self) -> int:
        return sum(v.nbytes for v in self.values)

    @property
    def nbytes(self) -> int:
        return self.key_bytes + self.value_bytes

    def prune_positions(self, removed: set[int]) -> None:
        if self.keys is not None and any(p in removed for p in self.key_positions):
            keep = np.array(
                [i for i, p in enumerate(self.key_positions) if p not in removed], dtype=np.intp
            )
            for k in self.keys:
                k.keep_rows(keep)
            self.key_positions = [p for p in self.key_positions if p not in removed]
        if any(p in removed for p in self.value_positions):
            keep = np.array(
                [i for i, p in enumerate(self.value_positions) if p not in removed], dtype=np.intp
            )
            for v in self.values:
                v.keep_rows(keep)
            self.value_positions = [p for p in self.value_positions if p not in removed]

    def clone(self) -> "LayerCache":
        out = LayerCache(self.n_heads, self.d_head, own_keys=self.keys is not None)
        if self.keys is not None:
            out.keys = [k.clone() for k in self.keys]
        out.values = [v.clone() for v in self.values]
        out.key_positions = list(self.key_positions)
        out.value_positions = list(self.value_positions)
        return out


class QCache:
    """The block-shared query cache.

    Holds at most one block's anchor queries at a time; publish() on a new
    block overwrites the previous one. Peak logical bytes are tracked so the
    1/(2N) overhead bound can be checked against real occupancy.
    """

    def __init__(self):
        self.block: int | None = None
        self.q_heads: list[np.ndarray] | None = None
        self.positions: list[int] = []
        self.peak_bytes = 0

    def publish(self, block: int, q_heads: list[np.ndarray], positions: list[int]) -> None:
        self.block = block
        self.q_heads = q_heads
        self.positions = list(positions)
        self.peak_bytes = max(self.peak_bytes, self.nbytes)

    def read(self, block: int) -> list[np.ndarray]:
        if self.q_heads is None or self.block != block:
            raise ValidationError(
                f"Q cache holds block {self.block}, layer asked for block {block}"
            )
        return self.q_heads

    def release(self) -> None:
        self.block = None
        self.q_heads = None
        self.positions = []

    @property
    def nbytes(self) -> int:
        if self.q_heads is None:
            return 0
        return sum(q.shape[0] * q.shape[1] * 4 for q in self.q_heads)

    def clone(self) -> "QCache":
        out = QCache()
        out.block = self.block
        out.q_heads = None if self.q_heads is None else [q.copy() for q in self.q_heads]
        out.positions = list(self.positions)
        out.peak_bytes = self.peak_bytes
        return out


class ModalityIndex:
    """Partition of sequence positions into text and visual, kept sorted."""

    def __init__(self, text_positions: list[int], visual_positions: list[int]):
        self.text_positions = sorted(text_positions)
        self.visual_positions = sorted(visual_positions)

    @staticmethod
    def from_sequence(tokens: TokenSequence) -> "ModalityIndex":
        text = [i for i, m in enumerate(tokens.modality) if m == TEXT]
        visual = [i for i, m in enumerate(tokens.modality) if m == VISUAL]
        return ModalityIndex(text, visual)

    def append_text(self, position: int) -> None:
        self.text_positions.append(position)

    def drop_visual(self, removed: set[int]) -> None:
        self.visual_positions = [p for p in self.visual_positions if p not in removed]

    @property
    def n_text(self) -> int:
        return len(self.text_positions)

    @property
    def n_visual(self) -> int:
        return len(self.visual_positions)

    def clone(self) -> "ModalityIndex":
        return ModalityIndex(list(self.text_positions), list(self.visual_positions))


class PruneRecord:
    """What a visual-token pruning pass removed; consumed by the oracle."""

    __slots__ = ("layer", "removed", "prompt_len")

    def __init__(self, layer: int, removed: tuple[int, ...], prompt_len: int):
        self.layer = layer
        self.removed = removed
        self.prompt_len = prompt_len


class CacheStore:
    """All request state for one in-flight sequence."""

    def __init__(self, config: ModelConfig, plan: LazyPlan | None, tokens: TokenSequence):
        self.config = config
        self.plan = plan
        self.mode = plan.mode if plan is not None else "standard"
        self.roles = roles_from_plan(plan, config.n_layers)
        self.layers: list[LayerCache] = []
        for role in self.roles:
            if role.kind == ROLE_LAZY and plan is not None and plan.mode == GLA:
                own_keys = False
            else:
                own_keys = True
            self.layers.append(LayerCache(config.n_heads, config.d_head, own_keys=own_keys))
        self.qcache = QCache()
        self.modality = ModalityIndex.from_sequence(tokens)
        # Prompt-time visual membership; decode appends are always TEXT and
        # pruning never adds positions, so this is immutable.
        self.visual_set = frozenset(self.modality.visual_positions)
        self.seq_len = 0
        self.prune_record: PruneRecord | None = None

    def kv_bytes(self) -> int:
        return sum(layer.nbytes for layer in self.layers)

    def layer_kv_bytes(self) -> list[tuple[int, int]]:
        return [(layer.key_bytes, layer.value_bytes) for layer in self.layers]

    def anchor_cache(self, role: LayerRole) -> LayerCache:
        return self.layers[role.anchor_layer]

    def clone(self) -> "CacheStore":
        out = object.__new__(CacheStore)
        out.config = self.config
        out.plan = self.plan
        out.mode = self.mode
        out.roles = self.roles
        out.layers = [layer.clone() for layer in self.layers]
        out.qcache = self.qcache.clone()
        out.modality = self.modality.clone()
        out.visual_set = self.visual_set
        out.seq_len = self.seq_len
        out.prune_record = self.prune_record
        return out
