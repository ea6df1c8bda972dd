"""Inter-layer attention similarity profiling.

For every input sample the engine captures each layer's head-averaged
attention distribution for the final token (the full matrix behind a flag
for small sequences). Similarity between two layers is the Jensen-Shannon
divergence of those distributions, averaged over the corpus, giving the
symmetric matrix S with values in [0, ln 2] (natural log throughout).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

LN2 = math.log(2.0)

_SUM_TOL = 1e-6


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValidationError(f"{name} must be 1-D")
    if np.any(p < 0):
        raise ValidationError(f"{name} has negative entries")
    total = float(np.sum(p))
    if abs(total - 1.0) > _SUM_TOL:
        raise ValidationError(f"{name} sums to {total}, not 1 within {_SUM_TOL}")
    return p


def kl_divergence(p, q) -> float:
    """Sum of p_i * ln(p_i / q_i) with the 0*ln(0/x) := 0 convention.

    Returns +inf when some p_i > 0 has q_i = 0.
    """
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValidationError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    ps = p[support]
    return float(np.sum(ps * np.log(ps / q[support])))


def js_divergence(p, q) -> float:
    """0.5*[KL(p||m) + KL(q||m)] with m = (p+q)/2; symmetric, in [0, ln 2]."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValidationError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    m = (p + q) / 2.0
    # m_i = 0 implies p_i = q_i = 0, so both KL terms are finite.
    return 0.5 * (_kl_against(p, m) + _kl_against(q, m))


def _kl_against(p: np.ndarray, m: np.ndarray) -> float:
    support = p > 0
    ps = p[support]
    return float(np.sum(ps * np.log(ps / m[support])))


@dataclass
class AttentionSnapshot:
    """Per-layer head-averaged attention rows captured during one prefill."""

    last_rows: list[np.ndarray] = field(default_factory=list)
    matrices: list[np.ndarray] | None = None
    head_matrices: list[list[np.ndarray]] | None = None

    def validate(self) -> None:
        if not self.last_rows:
            raise ValidationError("snapshot is empty")
        length = self.last_rows[0].shape[0]
        for l, row in enumerate(self.last_rows):
            if row.shape[0] != length:
                raise ValidationError(f"layer {l} row length {row.shape[0]} != {length}")
            _check_distribution(row, f"layer {l} attention row")


class AttentionCapture:
    """Capture hook handed to prefill; collects what the caller asked for."""

    def __init__(self, full_matrix: bool = False, per_head: bool = False):
        self.full_matrix = full_matrix
        self.per_head = per_head
        self.snapshot = AttentionSnapshot(
            last_rows=[],
            matrices=[] if full_matrix else None,
            head_matrices=[] if per_head else None,
        )

    def record(self, layer: int, head_attn: list[np.ndarray]) -> None:
        mean = head_attn[0].astype(np.float64)
        for a in head_attn[1:]:
            mean = mean + a
        mean = mean / len(head_attn)
        self.snapshot.last_rows.append(mean[-1])
        if self.full_matrix:
            self.snapshot.matrices.append(mean)
        if self.per_head:
            self.snapshot.head_matrices.append([a.copy() for a in head_attn])


@dataclass
class SimilarityProfile:
    n_layers: int
    n_samples: int
    S: np.ndarray  # (n_layers, n_layers) float64, symmetric, zero diagonal

    def validate(self) -> None:
        if self.S.shape != (self.n_layers, self.n_layers):
            raise ValidationError(f"S has shape {self.S.shape}, expected square n_layers")
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if not np.allclose(self.S, self.S.T, atol=1e-12):
            raise ValidationError("S must be symmetric")
        if np.any(np.abs(np.diag(self.S)) > 1e-12):
            raise ValidationError("S diagonal must be zero")
        if np.any(self.S < -1e-9) or np.any(self.S > LN2 + 1e-9):
            raise ValidationError("S entries must lie in [0, ln 2]")

    def adjacent(self) -> np.ndarray:
        """Vector of S(l, l+1) for l = 0 .. n_layers-2."""
        return np.array([self.S[i, i + 1] for i in range(self.n_layers - 1)])

    def similarity_view(self) -> np.ndarray:
        """Elementwise ln 2 - S; diagonal becomes ln 2 (maximal similarity)."""
        return LN2 - self.S

    def to_dict(self) -> dict:
        return {"n_layers": self.n_layers, "n_samples": self.n_samples, "S": self.S.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "SimilarityProfile":
        try:
            profile = SimilarityProfile(
                n_layers=int(d["n_layers"]),
                n_samples=int(d["n_samples"]),
                S=np.asarray(d["S"], dtype=np.float64),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed profile: {exc}") from exc
        profile.validate()
        return profile


def adjacent_profile(profile: SimilarityProfile) -> np.ndarray:
    return profile.adjacent()


def similarity_view(profile: SimilarityProfile) -> np.ndarray:
    return profile.similarity_view()


def profile_model(weights, corpus, full_matrix: bool = False, threads: int = 1) -> SimilarityProfile:
    """Mean pairwise JS divergence of per-layer attention over the corpus.

    Each sample is prefilled once with a capture hook; with full_matrix the
    divergence is averaged over every query row instead of only the last.
    Samples are accumulated in corpus order, so the result is deterministic
    for a given (weights, corpus).
    """
    from .runtime import prefill_standard

    if not corpus:
        raise ValidationError("corpus must be non-empty")
    for i, seq in enumerate(corpus):
        if len(seq) < 2:
            raise ValidationError(f"corpus sample {i} has length {len(seq)}, need >= 2")

    n_layers = weights.config.n_layers

    def snapshot_for(seq):
        capture = AttentionCapture(full_matrix=full_matrix)
        prefill_standard(weights, seq, capture=capture)
        return capture.snapshot

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            snapshots = list(pool.map(snapshot_for, corpus))
    else:
        snapshots = [snapshot_for(seq) for seq in corpus]

    S = np.zeros((n_layers, n_layers), dtype=np.float64)
    for snap in snapshots:
        snap.validate()
        for a in range(n_layers):
            for b in range(a + 1, n_layers):
                if full_matrix:
                    rows_a = snap.matrices[a]
                    rows_b = snap.matrices[b]
                    js = 0.0
                    for r in range(rows_a.shape[0]):
                        n_vis = r + 1  # causal row r is supported on positions <= r
                        js += js_divergence(rows_a[r, :n_vis], rows_b[r, :n_vis])
                    js /= rows_a.shape[0]
                else:
                    js = js_divergence(snap.last_rows[a], snap.last_rows[b])
                S[a, b] += js
    S /= len(snapshots)
    S = S + S.T
    profile = SimilarityProfile(n_layers=n_layers, n_samples=len(snapshots), S=S)
    profile.validate()
    return profile


def save_profile(profile: SimilarityProfile, path: str) -> None:
    profile.validate()
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(profile.to_dict(), fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def load_profile(path: str) -> SimilarityProfile:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"unparseable profile {path}: {exc}") from exc
    return SimilarityProfile.from_dict(d)


def adjacent_profile_csv(profile: SimilarityProfile) -> str:
    lines = ["layer_pair,js_divergence"]
    adj = profile.adjacent()
    for i, v in enumerate(adj):
        lines.append(f"{i}-{i + 1},{float(v)!r}")
    return "\n".join(lines) + "\n"
