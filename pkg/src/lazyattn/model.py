"""Toy multimodal decoder model: config, weights, token sequences, checkpoints.

The architecture is fixed: pre-norm RMSNorm -> rotary multi-head attention ->
residual -> RMSNorm -> gated (silu) MLP -> residual, with a final RMSNorm
before the vocabulary head. Keys are always cached post-rotation so layers
can share them without re-rotating.

Checkpoint format: a directory holding `model.json` (config plus an ordered
tensor table with name/shape/byte offset, dtype f32le) and `model.bin`
(little-endian raw float32 in table order). Token input is JSON Lines, one
record per sequence: {"tokens": [...], "modality": [0|1, ...]} with 1 = VISUAL.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import (
    DimensionMismatchError,
    ManifestError,
    TruncatedWeightsError,
    ValidationError,
)

TEXT = 0
VISUAL = 1

_DTYPE_TAG = "f32le"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_ff: int
    vocab_size: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ValidationError("n_layers must be >= 1")
        if min(self.n_heads, self.d_model, self.d_head, self.d_ff, self.vocab_size) < 1:
            raise ValidationError("all dimensions must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ValidationError(
                f"d_model ({self.d_model}) != n_heads*d_head ({self.n_heads}*{self.d_head})"
            )
        if self.d_head % 2 != 0:
            raise ValidationError("d_head must be even (rotary pairs)")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ValidationError("rope_theta and norm_eps must be positive")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_head": self.d_head,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "rope_theta": self.rope_theta,
            "norm_eps": self.norm_eps,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        try:
            return ModelConfig(
                n_layers=int(d["n_layers"]),
                n_heads=int(d["n_heads"]),
                d_model=int(d["d_model"]),
                d_head=int(d["d_head"]),
                d_ff=int(d["d_ff"]),
                vocab_size=int(d["vocab_size"]),
                rope_theta=float(d["rope_theta"]),
                norm_eps=float(d["norm_eps"]),
            )
        except KeyError as exc:
            raise ManifestError(f"manifest config missing field {exc}") from exc


@dataclass
class LayerWeights:
    attn_gain: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_gain: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights] = field(default_factory=list)
    final_gain: np.ndarray | None = None
    lm_head: np.ndarray | None = None

    def validate(self) -> None:
        c = self.config
        c.validate()
        expected = dict(_tensor_specs(c))
        for name, arr in self.named_tensors():
            if tuple(arr.shape) != expected[name]:
                raise ValidationError(
                    f"tensor {name} has shape {tuple(arr.shape)}, expected {expected[name]}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"tensor {name} contains non-finite values")

    def named_tensors(self):
        """(name, array) pairs in the canonical manifest order."""
        yield "embedding", self.embedding
        for l, lw in enumerate(self.layers):
            yield f"layer{l}.attn_gain", lw.attn_gain
            yield f"layer{l}.wq", lw.wq
            yield f"layer{l}.wk", lw.wk
            yield f"layer{l}.wv", lw.wv
            yield f"layer{l}.wo", lw.wo
            yield f"layer{l}.mlp_gain", lw.mlp_gain
            yield f"layer{l}.w_gate", lw.w_gate
            yield f"layer{l}.w_up", lw.w_up
            yield f"layer{l}.w_down", lw.w_down
        yield "final_gain", self.final_gain
        yield "lm_head", self.lm_head


def _tensor_specs(c: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    specs: list[tuple[str, tuple[int, ...]]] = [("embedding", (c.vocab_size, c.d_model))]
    for l in range(c.n_layers):
        specs += [
            (f"layer{l}.attn_gain", (c.d_model,)),
            (f"layer{l}.wq", (c.d_model, c.d_model)),
            (f"layer{l}.wk", (c.d_model, c.d_model)),
            (f"layer{l}.wv", (c.d_model, c.d_model)),
            (f"layer{l}.wo", (c.d_model, c.d_model)),
            (f"layer{l}.mlp_gain", (c.d_model,)),
            (f"layer{l}.w_gate", (c.d_model, c.d_ff)),
            (f"layer{l}.w_up", (c.d_model, c.d_ff)),
            (f"layer{l}.w_down", (c.d_ff, c.d_model)),
        ]
    specs += [("final_gain", (c.d_model,)), ("lm_head", (c.d_model, c.vocab_size))]
    return specs


# Norm gains start at one; every other tensor is drawn from one global
# splitmix64 stream, consumed in manifest order with uniform values in
# [-1/sqrt(d_model), +1/sqrt(d_model)]. Identical (config, seed) therefore
# reproduces bit-identical checkpoints.
_DRAWN_SUFFIXES = ("embedding", ".wq", ".wk", ".wv", ".wo", ".w_gate", ".w_up", ".w_down", "lm_head")


def init_synthetic_model(config: ModelConfig, seed: int) -> ModelWeights:
    config.validate()
    bound = 1.0 / float(np.sqrt(config.d_model))
    cursor = 0

    def draw(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal cursor
        n = int(np.prod(shape))
        vals = rng.uniform(seed, cursor, n, -bound, bound).astype(np.float32)
        cursor += n
        return np.ascontiguousarray(vals.reshape(shape))

    tensors: dict[str, np.ndarray] = {}
    for name, shape in _tensor_specs(config):
        if name.endswith(_DRAWN_SUFFIXES):
            tensors[name] = draw(shape)
        else:
            tensors[name] = np.ones(shape, dtype=np.float32)

    layers = [
        LayerWeights(
            attn_gain=tensors[f"layer{l}.attn_gain"],
            wq=tensors[f"layer{l}.wq"],
            wk=tensors[f"layer{l}.wk"],
            wv=tensors[f"layer{l}.wv"],
            wo=tensors[f"layer{l}.wo"],
            mlp_gain=tensors[f"layer{l}.mlp_gain"],
            w_gate=tensors[f"layer{l}.w_gate"],
            w_up=tensors[f"layer{l}.w_up"],
            w_down=tensors[f"layer{l}.w_down"],
        )
        for l in range(config.n_layers)
    ]
    weights = ModelWeights(
        config=config,
        embedding=tensors["embedding"],
        layers=layers,
        final_gain=tensors["final_gain"],
        lm_head=tensors["lm_head"],
    )
    weights.validate()
    return weights


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

MANIFEST_NAME = "model.json"
BLOB_NAME = "model.bin"


def save_checkpoint(weights: ModelWeights, path: str) -> None:
    """Write model.json + model.bin into directory `path` (created if needed)."""
    weights.validate()
    os.makedirs(path, exist_ok=True)
    table = []
    offset = 0
    blobs = []
    for name, arr in weights.named_tensors():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    manifest = {
        "dtype": _DTYPE_TAG,
        "config": weights.config.to_dict(),
        "tensors": table,
        "total_bytes": offset,
    }
    _atomic_write_bytes(
        os.path.join(path, MANIFEST_NAME),
        (json.dumps(manifest, indent=2) + "\n").encode("utf-8"),
    )
    _atomic_write_bytes(os.path.join(path, BLOB_NAME), b"".join(blobs))


def load_checkpoint(path: str) -> ModelWeights:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    blob_path = os.path.join(path, BLOB_NAME)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"unparseable manifest {manifest_path}: {exc}") from exc

    if manifest.get("dtype") != _DTYPE_TAG:
        raise ManifestError(f"unsupported dtype {manifest.get('dtype')!r}")
    config = ModelConfig.from_dict(manifest.get("config", {}))
    try:
        config.validate()
    except ValidationError as exc:
        raise ManifestError(f"invalid config in manifest: {exc}") from exc

    specs = _tensor_specs(config)
    table = manifest.get("tensors")
    if not isinstance(table, list) or len(table) != len(specs):
        raise DimensionMismatchError(
            f"manifest lists {0 if table is None else len(table)} tensors, "
            f"config implies {len(specs)}"
        )
    offset = 0
    for entry, (name, shape) in zip(table, specs):
        if entry.get("name") != name:
            raise ManifestError(f"unexpected tensor {entry.get('name')!r}, wanted {name!r}")
        if tuple(entry.get("shape", ())) != shape:
            raise DimensionMismatchError(
                f"tensor {name}: manifest shape {entry.get('shape')} does not match "
                f"config-derived shape {list(shape)}"
            )
        if entry.get("offset") != offset:
            raise ManifestError(f"tensor {name}: non-contiguous offset {entry.get('offset')}")
        offset += int(np.prod(shape)) * 4
    if manifest.get("total_bytes") != offset:
        raise DimensionMismatchError(
            f"manifest total_bytes {manifest.get('total_bytes')} != expected {offset}"
        )

    with open(blob_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < offset:
        raise TruncatedWeightsError(
            f"truncated weights: blob has {len(blob)} bytes, manifest needs {offset}"
        )
    if len(blob) > offset:
        raise ManifestError(f"blob has {len(blob) - offset} trailing bytes beyond manifest")

    tensors: dict[str, np.ndarray] = {}
    pos = 0
    for name, shape in specs:
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=pos).astype(np.float32)
        tensors[name] = np.ascontiguousarray(arr.reshape(shape))
        pos += n

    layers = [
        LayerWeights(
            attn_gain=tensors[f"layer{l}.attn_gain"],
            wq=tensors[f"layer{l}.wq"],
            wk=tensors[f"layer{l}.wk"],
            wv=tensors[f"layer{l}.wv"],
            wo=tensors[f"layer{l}.wo"],
            mlp_gain=tensors[f"layer{l}.mlp_gain"],
            w_gate=tensors[f"layer{l}.w_gate"],
            w_up=tensors[f"layer{l}.w_up"],
            w_down=tensors[f"layer{l}.w_down"],
        )
        for l in range(config.n_layers)
    ]
    weights = ModelWeights(
        config=config,
        embedding=tensors["embedding"],
        layers=layers,
        final_gain=tensors["final_gain"],
        lm_head=tensors["lm_head"],
    )
    try:
        weights.validate()
    except ValidationError as exc:
        raise DimensionMismatchError(str(exc)) from exc
    return weights


def _atomic_write_bytes(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Token sequences
# ---------------------------------------------------------------------------


@dataclass
class TokenSequence:
    """Token ids plus a per-token modality flag (TEXT=0, VISUAL=1)."""

    token_ids: list[int]
    modality: list[int]

    def __post_init__(self):
        if len(self.token_ids) != len(self.modality):
            raise ValidationError(
                f"token_ids ({len(self.token_ids)}) and modality ({len(self.modality)}) "
                "must have equal length"
            )
        for m in self.modality:
            if m not in (TEXT, VISUAL):
                raise ValidationError(f"modality flags must be 0 or 1, got {m}")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def n_text(self) -> int:
        return sum(1 for m in self.modality if m == TEXT)

    @property
    def n_visual(self) -> int:
        return sum(1 for m in self.modality if m == VISUAL)

    @staticmethod
    def all_text(token_ids: list[int]) -> "TokenSequence":
        return TokenSequence(list(token_ids), [TEXT] * len(token_ids))


def read_sequences_jsonl(path: str) -> list[TokenSequence]:
    """Parse the JSON Lines token input format (missing modality = all TEXT)."""
    out: list[TokenSequence] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            if "tokens" not in rec:
                raise ValidationError(f"{path}:{lineno}: missing 'tokens' field")
            tokens = [int(t) for t in rec["tokens"]]
            modality = [int(m) for m in rec.get("modality", [TEXT] * len(tokens))]
            try:
                out.append(TokenSequence(tokens, modality))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_sequences_jsonl(path: str, sequences: list[TokenSequence]) -> None:
    lines = [
        json.dumps({"tokens": seq.token_ids, "modality": seq.modality})
        for seq in sequences
    ]
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def synthetic_prompt(
    vocab_size: int, length: int, seed: int, visual_fraction: float = 0.0
) -> TokenSequence:
    """Deterministic prompt: a leading visual span followed by text tokens."""
    if length < 1:
        raise ValidationError("prompt length must be >= 1")
    if not 0.0 <= visual_fraction <= 1.0:
        raise ValidationError("visual_fraction must be in [0, 1]")
    ids = [int(v % vocab_size) for v in rng.splitmix64(seed, 0, length)]
    n_visual = int(round(visual_fraction * length))
    n_visual = min(n_visual, length - 1) if length > 1 else 0
    modality = [VISUAL] * n_visual + [TEXT] * (length - n_visual)
    return TokenSequence(ids, modality)
