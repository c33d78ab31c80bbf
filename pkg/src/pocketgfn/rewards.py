"""Deterministic surrogate rewards and evaluation metrics.

The docking surrogate scores a ligand by how well its heavy-atom count and
polarity match what the pocket geometry asks for. It is a stand-in for a
learned affinity predictor: cheap, smooth, and exactly enumerable, which is
what the sampling oracles need.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from hashlib import sha256

import numpy as np

from .ligand import LigandState
from .pocket import N_RESIDUE_TYPES, PocketGraph, radius_of_gyration

# Surrogate constants: target ligand size is RHO heavy atoms per angstrom of
# pocket radius of gyration; sigmas set how forgiving each Gaussian term is.
RHO = 1.5
SIGMA_SIZE = 4.0
SIGMA_POLARITY = 0.2
DS_SCALE = -12.0

# Per-residue-type polarity, increasing with the type id.
POLARITY_TABLE = np.arange(N_RESIDUE_TYPES) / (N_RESIDUE_TYPES - 1)

FINGERPRINT_BITS = 256
FINGERPRINT_RADIUS = 2


class MetricError(ValueError):
    pass


def _require_terminal(s: LigandState, op: str) -> None:
    if not s.terminal:
        raise MetricError(f"{op} needs a terminal state, got a partial one with {s.n} nodes")
    if s.n == 0:
        raise MetricError(f"{op} needs a nonempty state")


def pocket_polarity(pocket: PocketGraph, table: np.ndarray = POLARITY_TABLE) -> float:
    return float(np.mean([table[r.residue_type] for r in pocket.residues]))


def ligand_size(s: LigandState, library) -> int:
    return sum(library.get(fid).size for fid in s.nodes)


def ligand_polarity(s: LigandState, library) -> float:
    return float(np.mean([library.get(fid).polarity for fid in s.nodes]))


def docking_proxy(pocket: PocketGraph, s: LigandState, library, table: np.ndarray = POLARITY_TABLE) -> float:
    """Quality in [0, 1]; peaks when size and polarity both hit the pocket's targets."""
    _require_terminal(s, "docking_proxy")
    target_size = RHO * radius_of_gyration(pocket.coords)
    size_term = math.exp(-((ligand_size(s, library) - target_size) ** 2) / (2 * SIGMA_SIZE**2))
    pol_term = math.exp(-((ligand_polarity(s, library) - pocket_polarity(pocket, table)) ** 2) / (2 * SIGMA_POLARITY**2))
    return size_term * pol_term


def docking_score(pocket: PocketGraph, s: LigandState, library) -> float:
    """Negative presentation scale: best possible is DS_SCALE, worst approaches 0."""
    return DS_SCALE * docking_proxy(pocket, s, library)


def qed_proxy(s: LigandState) -> float:
    _require_terminal(s, "qed_proxy")
    return math.exp(-((s.n - 4) ** 2) / 2)


def sa_proxy(s: LigandState) -> float:
    _require_terminal(s, "sa_proxy")
    most_common = Counter(s.nodes).most_common(1)[0][1]
    return most_common / s.n


@dataclass(frozen=True)
class RewardWeights:
    w_ds: float = 1.0
    w_qed: float = 0.0
    w_sa: float = 0.0

    def __post_init__(self):
        for name, w in (("w_ds", self.w_ds), ("w_qed", self.w_qed), ("w_sa", self.w_sa)):
            if w < 0:
                raise MetricError(f"{name} must be nonnegative, got {w}")
        total = self.w_ds + self.w_qed + self.w_sa
        if abs(total - 1.0) > 1e-9:
            raise MetricError(f"weights must sum to 1, got {total}")


def combined_quality(q_ds: float, q_qed: float, q_sa: float, weights: RewardWeights) -> float:
    for name, q in (("q_ds", q_ds), ("q_qed", q_qed), ("q_sa", q_sa)):
        if not 0.0 <= q <= 1.0:
            raise MetricError(f"{name} must lie in [0, 1], got {q}")
    return weights.w_ds * q_ds + weights.w_qed * q_qed + weights.w_sa * q_sa


def state_quality(pocket: PocketGraph, s: LigandState, library, weights: RewardWeights) -> float:
    return combined_quality(
        docking_proxy(pocket, s, library), qed_proxy(s), sa_proxy(s), weights
    )


# -- fingerprints and diversity ---------------------------------------------


def _wl_labels(s: LigandState, radius: int) -> list[list[str]]:
    """Refinement labels per node for radii 0..radius.

    A node's neighborhood descriptor lists (own ap, neighbor ap, neighbor
    label) sorted, so labels depend only on graph structure, never on node
    numbering.
    """
    neigh: dict[int, list[tuple[int, int, int]]] = {v: [] for v in range(s.n)}
    for i, ap_i, j, ap_j in s.edges:
        neigh[i].append((ap_i, ap_j, j))
        neigh[j].append((ap_j, ap_i, i))
    labels = [str(fid) for fid in s.nodes]
    rounds = [list(labels)]
    for _ in range(radius):
        labels = [
            labels[v] + "|" + ",".join(
                f"{a}:{b}:{labels[u]}" for a, b, u in sorted(neigh[v], key=lambda t: (t[0], t[1], labels[t[2]]))
            )
            for v in range(s.n)
        ]
        rounds.append(list(labels))
    return rounds


def fingerprint(s: LigandState, n_bits: int = FINGERPRINT_BITS, radius: int = FINGERPRINT_RADIUS) -> np.ndarray:
    """Binary vector hashed from rooted subgraph labels up to the given radius."""
    _require_terminal(s, "fingerprint")
    bits = np.zeros(n_bits, dtype=np.uint8)
    for r, labels in enumerate(_wl_labels(s, radius)):
        for label in labels:
            digest = sha256(f"{r}|{label}".encode()).digest()
            bits[int.from_bytes(digest[:8], "big") % n_bits] = 1
    return bits


def tanimoto_distance(f1: np.ndarray, f2: np.ndarray) -> float:
    if f1.shape != f2.shape:
        raise MetricError(f"fingerprint length mismatch: {f1.shape} vs {f2.shape}")
    a = f1.astype(bool)
    b = f2.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return 1.0 - np.logical_and(a, b).sum() / union


def diversity(states: list[LigandState]) -> float:
    """Mean pairwise Tanimoto distance between state fingerprints."""
    if len(states) < 2:
        raise MetricError(f"diversity needs at least 2 states, got {len(states)}")
    prints = [fingerprint(s) for s in states]
    total = 0.0
    count = 0
    for i in range(len(prints)):
        for j in range(i + 1, len(prints)):
            total += tanimoto_distance(prints[i], prints[j])
            count += 1
    return total / count


def top_k_mean(scores: list[float], k: int) -> float:
    """Mean of the k most negative scores; k larger than the list means all."""
    if not scores:
        raise MetricError("top_k_mean needs a nonempty score list")
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    ordered = sorted(scores)
    return float(np.mean(ordered[: min(k, len(ordered))]))


def mean_and_se(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise MetricError("mean_and_se needs at least one value")
    if arr.size == 1 or arr.min() == arr.max():
        # identical observations have exactly zero spread; skip the summation rounding
        return float(arr[0] if arr.min() == arr.max() else arr.mean()), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def evaluation_report(
    per_pocket: dict[str, tuple[PocketGraph, list[LigandState]]], library, top_k: int = 10
) -> dict:
    """Aggregate metrics per pocket, then average across pockets.

    Diversity is intra-pocket (pairs never straddle two pockets); the global
    row is the across-pocket mean of each per-pocket value.
    """
    if not per_pocket:
        raise MetricError("evaluation needs at least one pocket")
    breakdown = {}
    for pid, (pocket, states) in per_pocket.items():
        if not states:
            raise MetricError(f"pocket {pid!r} has no sampled states")
        ds = [docking_score(pocket, s, library) for s in states]
        breakdown[pid] = {
            "n_samples": len(states),
            "diversity": diversity(states) if len(states) >= 2 else 0.0,
            "ds_mean": float(np.mean(ds)),
            "ds_top10_mean": top_k_mean(ds, top_k),
            "qed_mean": float(np.mean([qed_proxy(s) for s in states])),
            "sa_mean": float(np.mean([sa_proxy(s) for s in states])),
        }
    report = {
        key: float(np.mean([row[key] for row in breakdown.values()]))
        for key in ("diversity", "ds_mean", "ds_top10_mean", "qed_mean", "sa_mean")
    }
    report["per_pocket"] = breakdown
    return report
