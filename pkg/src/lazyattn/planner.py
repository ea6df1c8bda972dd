"""Lazy-block planning.

A block is a run of consecutive decode layers whose adjacent attention
similarity (JS divergence) stays below a threshold epsilon; the first layer
anchors the block and computes queries/keys normally, the rest inherit them.
Planning is a greedy left-to-right scan, optionally capped by a maximum
block span. A seeded random planner with matched block sizes provides the
sanity-check baseline.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import PlanError, ValidationError
from .rng import Splitmix

GLA = "gla"
VLA = "vla"

SOURCE_THRESHOLD = "threshold"
SOURCE_RANDOM = "random"


@dataclass(frozen=True)
class LazyBlock:
    anchor: int
    lazy_layers: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.lazy_layers)

    @property
    def span(self) -> int:
        return 1 + self.n

    def layers(self) -> tuple[int, ...]:
        return (self.anchor,) + self.lazy_layers


@dataclass
class LazyPlan:
    mode: str
    n_layers: int
    blocks: list[LazyBlock] = field(default_factory=list)
    source: str = SOURCE_THRESHOLD
    epsilon: float | None = None
    seed: int | None = None

    def validate(self) -> None:
        if self.mode not in (GLA, VLA):
            raise PlanError(f"mode must be '{GLA}' or '{VLA}', got {self.mode!r}")
        if self.source not in (SOURCE_THRESHOLD, SOURCE_RANDOM):
            raise PlanError(f"unknown plan source {self.source!r}")
        if self.n_layers < 1:
            raise PlanError("n_layers must be >= 1")
        if self.epsilon is not None and not 0.0 < self.epsilon <= 1.0:
            raise PlanError(f"epsilon must be in (0, 1], got {self.epsilon}")
        covered: set[int] = set()
        prev_end = -1
        for b in self.blocks:
            if b.n < 1:
                raise PlanError(f"block anchored at {b.anchor} has no lazy layers")
            if tuple(b.lazy_layers) != tuple(range(b.anchor + 1, b.anchor + 1 + b.n)):
                raise PlanError(
                    f"block anchored at {b.anchor}: lazy layers {list(b.lazy_layers)} are not "
                    "consecutive immediately after the anchor"
                )
            if b.anchor < 0 or b.lazy_layers[-1] >= self.n_layers:
                raise PlanError(
                    f"block {list(b.layers())} falls outside layers [0, {self.n_layers})"
                )
            overlap = covered.intersection(b.layers())
            if overlap:
                raise PlanError(f"overlapping blocks at layers {sorted(overlap)}")
            if b.anchor <= prev_end:
                raise PlanError(f"blocks are not sorted (anchor {b.anchor} after layer {prev_end})")
            covered.update(b.layers())
            prev_end = b.lazy_layers[-1]

    @property
    def n_lazy(self) -> int:
        return sum(b.n for b in self.blocks)

    def lazy_fraction(self) -> float:
        return self.n_lazy / self.n_layers

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "n_layers": self.n_layers,
            "source": self.source,
            "blocks": [{"anchor": b.anchor, "lazy": list(b.lazy_layers)} for b in self.blocks],
        }
        if self.epsilon is not None:
            d["epsilon"] = self.epsilon
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @staticmethod
    def from_dict(d: dict) -> "LazyPlan":
        try:
            blocks = [
                LazyBlock(anchor=int(b["anchor"]), lazy_layers=tuple(int(x) for x in b["lazy"]))
                for b in d["blocks"]
            ]
            plan = LazyPlan(
                mode=d["mode"],
                n_layers=int(d["n_layers"]),
                blocks=blocks,
                source=d.get("source", SOURCE_THRESHOLD),
                epsilon=float(d["epsilon"]) if "epsilon" in d else None,
                seed=int(d["seed"]) if "seed" in d else None,
            )
        except (KeyError, TypeError) as exc:
            raise PlanError(f"malformed plan: {exc}") from exc
        plan.validate()
        return plan


def empty_plan(mode: str, n_layers: int) -> LazyPlan:
    plan = LazyPlan(mode=mode, n_layers=n_layers, blocks=[], epsilon=1.0)
    plan.validate()
    return plan


def plan_from_profile(
    profile, epsilon: float, mode: str = GLA, max_block_span: int | None = None
) -> LazyPlan:
    """Greedy scan of the adjacent similarities S(l, l+1).

    A block opens at the first layer whose adjacent similarity is below
    epsilon and extends while the next adjacent similarity is also below
    epsilon (and the span stays under max_block_span, when given). The
    block's first layer is the anchor.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValidationError(f"epsilon must be in (0, 1], got {epsilon}")
    if max_block_span is not None and max_block_span < 2:
        raise ValidationError("max_block_span must be >= 2 (anchor plus one lazy layer)")
    adj = profile.adjacent()
    n_layers = profile.n_layers
    blocks: list[LazyBlock] = []
    i = 0
    while i < n_layers - 1:
        if adj[i] >= epsilon:
            i += 1
            continue
        anchor = i
        lazy = [i + 1]
        i += 1
        while (
            i < n_layers - 1
            and adj[i] < epsilon
            and (max_block_span is None or 1 + len(lazy) < max_block_span)
        ):
            lazy.append(i + 1)
            i += 1
        blocks.append(LazyBlock(anchor=anchor, lazy_layers=tuple(lazy)))
        # adj[i] connects the block's last lazy layer to the next layer and
        # cannot be consumed (that layer is taken); resume one past it.
        i += 1
    plan = LazyPlan(
        mode=mode, n_layers=n_layers, blocks=blocks, source=SOURCE_THRESHOLD, epsilon=epsilon
    )
    plan.validate()
    return plan


def plan_random(
    n_layers: int, n_blocks: int, layers_per_block: list[int], seed: int, mode: str = GLA
) -> LazyPlan:
    """Uniform random disjoint placement of contiguous blocks with given spans.

    Block spans are placed left to right in the given order; the free layers
    are distributed uniformly over the n_blocks+1 gaps (stars and bars), so
    every feasible placement of the ordered spans is equally likely.
    """
    if n_blocks < 0:
        raise ValidationError("n_blocks must be >= 0")
    if len(layers_per_block) != n_blocks:
        raise ValidationError(
            f"layers_per_block has {len(layers_per_block)} entries for {n_blocks} blocks"
        )
    for span in layers_per_block:
        if span < 2:
            raise ValidationError("each block needs span >= 2 (anchor plus one lazy layer)")
    used = sum(layers_per_block)
    free = n_layers - used
    if free < 0:
        raise ValidationError(
            f"blocks with spans {layers_per_block} do not fit in {n_layers} layers"
        )
    sm = Splitmix(seed)
    # Choose gap sizes g_0..g_k >= 0 summing to `free` uniformly: pick k
    # divider positions among free+k slots.
    dividers = sm.sample_without_replacement(free + n_blocks, n_blocks)
    gaps = []
    prev = -1
    for d in dividers:
        gaps.append(d - prev - 1)
        prev = d
    gaps.append(free + n_blocks - 1 - prev)
    blocks: list[LazyBlock] = []
    cursor = 0
    for gap, span in zip(gaps, layers_per_block):
        cursor += gap
        blocks.append(
            LazyBlock(anchor=cursor, lazy_layers=tuple(range(cursor + 1, cursor + span)))
        )
        cursor += span
    plan = LazyPlan(
        mode=mode,
        n_layers=n_layers,
        blocks=blocks,
        source=SOURCE_RANDOM,
        seed=seed,
    )
    plan.validate()
    return plan


def save_plan(plan: LazyPlan, path: str) -> None:
    plan.validate()
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(plan.to_dict(), fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def load_plan(path: str) -> LazyPlan:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PlanError(f"unparseable plan {path}: {exc}") from exc
    return LazyPlan.from_dict(d)
