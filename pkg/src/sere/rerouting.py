"""Similarity-based expert re-routing over top-k assignments.

Given a batch's routing table, the experts picked by the strongest S
slots of any token form the batch's primary set. Every other routed
expert is either redirected to its most similar primary expert or, when
a positive threshold says it is too dissimilar to substitute, kept as a
critical expert. Routing weights are never touched; only the index
table is rewritten, which shrinks the number of distinct experts the
batch has to load.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigError, DimensionError, InputError, SereError

if TYPE_CHECKING:  # only for annotations; no runtime dependency
    from .moe import RoutingAssignment
    from .similarity import SimilarityMatrix

PHASE_MODES = ("all_phases", "decode_only")


@dataclass(frozen=True)
class RerouteConfig:
    """How aggressively to rewrite: keep top `retain_count` slots, redirect
    the rest unless their best similarity falls below `threshold`.

    threshold 0 redirects unconditionally; threshold 1 keeps everything
    whose best similarity is below 1, i.e. effectively disables rewriting.
    """

    retain_count: int
    threshold: float
    phase_mode: str = "all_phases"

    def __post_init__(self) -> None:
        if int(self.retain_count) < 1:
            raise ConfigError(f"retain_count must be >= 1, got {self.retain_count}")
        object.__setattr__(self, "retain_count", int(self.retain_count))
        if not 0.0 <= float(self.threshold) <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        object.__setattr__(self, "threshold", float(self.threshold))
        if self.phase_mode not in PHASE_MODES:
            raise ConfigError(
                f"phase_mode must be one of {PHASE_MODES}, got {self.phase_mode!r}"
            )


@dataclass
class RerouteResult:
    """Rewritten index table plus the sets that explain it."""

    new_indices: np.ndarray
    primary_set: frozenset[int]
    preserved_critical: frozenset[int]
    final_active: frozenset[int]
    reroute_map: dict[int, int]


def select_primary(assignment: "RoutingAssignment", retain_count: int) -> frozenset[int]:
    """Union of every token's strongest `retain_count` expert indices."""
    k = assignment.indices.shape[1]
    if not 1 <= retain_count < k:
        raise ConfigError(
            f"retain_count must satisfy 1 <= S < K (got S={retain_count}, K={k})"
        )
    return frozenset(np.unique(assignment.indices[:, :retain_count]).tolist())


def best_primary_match(
    expert: int, primary_set: frozenset[int] | set[int], sim: "SimilarityMatrix"
) -> tuple[float, int]:
    """Most similar primary expert to `expert`.

    Scans candidates in ascending index order requiring a strict
    improvement, so ties resolve to the lowest index.
    """
    if not primary_set:
        raise SereError("primary set is empty")
    values = sim.values
    best_s = -np.inf
    best_e = -1
    for cand in range(values.shape[0]):
        if cand in primary_set:
            s = values[expert, cand]
            if s > best_s:
                best_s = s
                best_e = cand
    return float(best_s), int(best_e)


def _validate_inputs(
    assignment: "RoutingAssignment", sim: "SimilarityMatrix", config: RerouteConfig
) -> None:
    k = assignment.indices.shape[1]
    if config.retain_count > k:
        raise ConfigError(
            f"retain_count must not exceed K (got S={config.retain_count}, K={k})"
        )
    m = sim.values.shape[0]
    if sim.values.ndim != 2 or sim.values.shape != (m, m):
        raise DimensionError(f"similarity matrix must be square, got {sim.values.shape}")
    if assignment.indices.min(initial=0) < 0 or assignment.indices.max(initial=-1) >= m:
        raise DimensionError(
            f"similarity matrix of dimension {m} does not cover every routed index"
        )
    if sim.values.min() < 0.0 or sim.values.max() > 1.0:
        raise InputError("similarity values must lie in [0, 1]")


def _identity_result(assignment: "RoutingAssignment") -> RerouteResult:
    everything = frozenset(np.unique(assignment.indices).tolist())
    return RerouteResult(
        new_indices=assignment.indices.copy(),
        primary_set=everything,
        preserved_critical=frozenset(),
        final_active=everything,
        reroute_map={},
    )


def apply_sere(
    assignment: "RoutingAssignment", sim: "SimilarityMatrix", config: RerouteConfig
) -> RerouteResult:
    """Rewrite one batch's routing table against one similarity matrix.

    The decision is per expert, not per occurrence: every slot holding
    the same non-primary expert is redirected to the same target (or all
    kept). retain_count == K is the degenerate identity rewrite. The
    assignment's weights are read-only and do not appear in the result.
    """
    _validate_inputs(assignment, sim, config)
    idx = assignment.indices
    t_count, k = idx.shape
    s_slots = config.retain_count
    if s_slots == k:
        return _identity_result(assignment)

    primary = frozenset(np.unique(idx[:, :s_slots]).tolist())
    new = idx.copy()
    matches: dict[int, tuple[float, int]] = {}
    preserved: set[int] = set()
    reroute_map: dict[int, int] = {}
    for kk in range(s_slots, k):
        for t in range(t_count):
            e = int(idx[t, kk])
            if e in primary:
                continue
            if e not in matches:
                matches[e] = best_primary_match(e, primary, sim)
            best_s, best_e = matches[e]
            if config.threshold > 0.0 and best_s < config.threshold:
                preserved.add(e)
            else:
                new[t, kk] = best_e
                reroute_map[e] = best_e
    return RerouteResult(
        new_indices=new,
        primary_set=primary,
        preserved_critical=frozenset(preserved),
        final_active=primary | frozenset(preserved),
        reroute_map=reroute_map,
    )


def apply_sere_parallel(
    assignment: "RoutingAssignment",
    sim: "SimilarityMatrix",
    config: RerouteConfig,
    workers: int = 4,
) -> RerouteResult:
    """Same contract as apply_sere, computed as a flat (token, slot) kernel.

    The T*(K-S) rewritable cells are split across `workers` threads;
    each cell is decided independently from the immutable primary mask,
    so the partitioning cannot change the result.
    """
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    _validate_inputs(assignment, sim, config)
    idx = assignment.indices
    t_count, k = idx.shape
    s_slots = config.retain_count
    if s_slots == k:
        return _identity_result(assignment)

    m = sim.values.shape[0]
    values = sim.values
    mask = np.zeros(m, dtype=bool)
    mask[np.unique(idx[:, :s_slots])] = True
    new = idx.copy()
    width = k - s_slots
    total = t_count * width
    threshold = config.threshold

    def scan(expert: int) -> tuple[float, int]:
        best_s = -np.inf
        best_e = -1
        for cand in range(m):
            if mask[cand]:
                s = values[expert, cand]
                if s > best_s:
                    best_s = s
                    best_e = cand
        return best_s, best_e

    def run_range(lo: int, hi: int) -> None:
        for tid in range(lo, hi):
            t = tid // width
            kk = s_slots + tid % width
            e = int(idx[t, kk])
            if mask[e]:
                continue
            best_s, best_e = scan(e)
            if threshold > 0.0 and best_s < threshold:
                continue
            new[t, kk] = best_e

    n_workers = min(workers, total) if total else 1
    bounds = np.linspace(0, total, n_workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        list(pool.map(lambda i: run_range(bounds[i], bounds[i + 1]), range(n_workers)))

    primary = frozenset(np.flatnonzero(mask).tolist())
    preserved: set[int] = set()
    reroute_map: dict[int, int] = {}
    for e in np.unique(idx[:, s_slots:]).tolist():
        if mask[e]:
            continue
        best_s, best_e = scan(e)
        if threshold > 0.0 and best_s < threshold:
            preserved.add(e)
        else:
            reroute_map[e] = best_e
    return RerouteResult(
        new_indices=new,
        primary_set=primary,
        preserved_critical=frozenset(preserved),
        final_active=primary | frozenset(preserved),
        reroute_map=reroute_map,
    )


def final_active_set(result: RerouteResult) -> frozenset[int]:
    """Experts the rewritten batch still has to load."""
    return result.primary_set | result.preserved_critical


# ---------------------------------------------------------------------------
# JSON forms
# ---------------------------------------------------------------------------

def result_to_dict(result: RerouteResult) -> dict:
    return {
        "new_indices": result.new_indices.tolist(),
        "primary_set": sorted(result.primary_set),
        "preserved_critical": sorted(result.preserved_critical),
        "final_active": sorted(result.final_active),
        "reroute_map": {str(u): int(v) for u, v in sorted(result.reroute_map.items())},
    }


def result_from_dict(d: dict) -> RerouteResult:
    return RerouteResult(
        new_indices=np.asarray(d["new_indices"], dtype=np.int64),
        primary_set=frozenset(int(e) for e in d["primary_set"]),
        preserved_critical=frozenset(int(e) for e in d["preserved_critical"]),
        final_active=frozenset(int(e) for e in d["final_active"]),
        reroute_map={int(u): int(v) for u, v in d["reroute_map"].items()},
    )


def save_trace(layers: list[dict], path: str | Path) -> None:
    """Write a per-layer trace: original indices plus the rewrite result."""
    payload = {"layers": layers}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_trace(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
