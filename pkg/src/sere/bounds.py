"""Empirical checks of the expert-substitution error bound.

Swapping one routed expert for a stand-in perturbs the network output by
at most the downstream Lipschitz constant times the routing-weighted
expert discrepancy, in expectation over inputs. This module measures
both sides on stacks whose downstream is a chain of linear maps, where
the Lipschitz constant is an exact product of spectral norms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import moe, rerouting
from .errors import ConfigError, DimensionError, DomainError, InputError

POWER_ITERS = 1000
POWER_TOL = 1e-12


def expert_delta(
    e1: "moe.ExpertWeights",
    e2: "moe.ExpertWeights",
    inputs: np.ndarray,
    activation: str = "silu",
) -> float:
    """Mean euclidean gap between two experts' outputs on shared inputs."""
    y1 = moe.expert_forward(e1, inputs, activation)
    y2 = moe.expert_forward(e2, inputs, activation)
    gaps = np.sqrt(((y1 - y2) ** 2).sum(axis=1))
    return float(gaps.sum() / gaps.size)


def spectral_norm(a: np.ndarray) -> float:
    """Largest singular value by power iteration on a.T @ a.

    Starts from the normalized all-ones vector and stops after 1000
    rounds or when the estimate moves by less than 1e-12.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"spectral_norm expects a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("matrix contains non-finite values")
    n = a.shape[1]
    v = np.ones(n) / np.sqrt(n)
    sigma = 0.0
    for _ in range(POWER_ITERS):
        u = a @ v
        norm_u = float(np.sqrt((u * u).sum()))
        if norm_u == 0.0:
            return 0.0
        u /= norm_u
        w = a.T @ u
        norm_w = float(np.sqrt((w * w).sum()))
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        if abs(norm_w - sigma) <= POWER_TOL:
            return norm_w
        sigma = norm_w
    return sigma


def lipschitz_of_linear_chain(mats: Sequence[np.ndarray]) -> float:
    """Product of spectral norms of a chain of linear maps (x -> x @ W).

    An empty chain is the identity, so 1.
    """
    lam = 1.0
    prev_width: int | None = None
    for w in mats:
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2:
            raise DimensionError(f"chain entries must be matrices, got shape {w.shape}")
        if prev_width is not None and w.shape[0] != prev_width:
            raise DimensionError(
                f"chain does not compose: previous output width {prev_width}, next input {w.shape[0]}"
            )
        prev_width = w.shape[1]
        lam *= spectral_norm(w)
    return lam


@dataclass(frozen=True)
class BoundExperiment:
    """One substitution trial: which expert to swap, with what, on how many draws."""

    model: "moe.MoEModel"
    downstream: tuple[np.ndarray, ...]
    layer_index: int
    expert_index: int
    replacement: "moe.ExpertWeights"
    n_samples: int
    seed: int
    downstream_kind: str = "linear"

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "downstream",
            tuple(np.asarray(w, dtype=np.float64) for w in self.downstream),
        )
        if self.downstream_kind != "linear":
            raise ConfigError("only a linear downstream chain can be verified exactly")
        if self.layer_index != self.model.n_layers - 1:
            raise ConfigError(
                "the substitution layer must be the last MoE layer; everything after it must be linear"
            )
        layer = self.model.layers[self.layer_index]
        if not 0 <= self.expert_index < layer.n_experts:
            raise ConfigError(
                f"expert_index {self.expert_index} outside [0, {layer.n_experts})"
            )
        if self.replacement.d_h != layer.d_h or self.replacement.d_m != layer.experts[0].d_m:
            raise DimensionError("replacement expert shapes must match the layer")
        if self.n_samples < 100:
            raise ConfigError(f"n_samples must be >= 100, got {self.n_samples}")
        if self.downstream and self.downstream[0].shape[0] != self.model.d_h:
            raise DimensionError("first downstream map must accept the model output width")


@dataclass
class BoundReport:
    measured_error: float
    lam: float
    delta: float
    weighted_delta: float
    tolerance: float
    holds_tight: bool
    holds_loose: bool
    holds_samplewise: bool


def measure_substitution_error(exp: BoundExperiment) -> BoundReport:
    """Measure E[output gap] against the Lipschitz-weighted discrepancy.

    Inputs are standard Gaussian draws pushed through the MoE stack up
    to the substitution layer; both forwards share the original routing
    assignment so only the substituted expert's contribution moves.
    """
    model = exp.model
    rng = np.random.default_rng(exp.seed)
    x = rng.standard_normal((exp.n_samples, model.d_h))
    z = x
    for l in range(exp.layer_index):
        layer = model.layers[l]
        z = moe.layer_forward(layer, z, moe.route_topk(layer.router, z), model.activation)

    layer = model.layers[exp.layer_index]
    assignment = moe.route_topk(layer.router, z)
    y = moe.layer_forward(layer, z, assignment, model.activation)
    swapped = moe.replace_expert(layer, exp.expert_index, exp.replacement)
    y_swapped = moe.layer_forward(swapped, z, assignment, model.activation)

    def chain(v: np.ndarray) -> np.ndarray:
        for w in exp.downstream:
            v = v @ w
        return v

    gap = chain(y) - chain(y_swapped)
    per_sample_error = np.sqrt((gap * gap).sum(axis=1))
    measured = float(per_sample_error.sum() / exp.n_samples)

    d_out = moe.expert_forward(layer.experts[exp.expert_index], z, model.activation)
    d_repl = moe.expert_forward(exp.replacement, z, model.activation)
    disc = np.sqrt(((d_out - d_repl) ** 2).sum(axis=1))
    delta = float(disc.sum() / exp.n_samples)

    hit = assignment.indices == exp.expert_index
    w_a = (assignment.weights * hit).sum(axis=1)
    weighted_delta = float((w_a * disc).sum() / exp.n_samples)

    lam = lipschitz_of_linear_chain(exp.downstream)
    tol = 1e-9 + 1e-6 * lam * delta
    per_sample_bound = lam * w_a * disc
    samplewise = bool(
        np.all(per_sample_error <= per_sample_bound + (1e-9 + 1e-6 * per_sample_bound))
    )
    return BoundReport(
        measured_error=measured,
        lam=lam,
        delta=delta,
        weighted_delta=weighted_delta,
        tolerance=tol,
        holds_tight=measured <= lam * weighted_delta + tol,
        holds_loose=measured <= lam * delta + tol,
        holds_samplewise=samplewise,
    )


def make_bound_experiment(
    seed: int,
    n_layers: int = 3,
    n_experts: int = 4,
    top_k: int = 2,
    d_h: int = 4,
    d_m: int = 8,
    n_downstream: int = 2,
    n_samples: int = 200,
    replacement: str = "random",
    downstream_kind: str = "linear",
) -> BoundExperiment:
    """Standard randomized experiment layout keyed entirely by one seed."""
    model = moe.gen_model(
        seed=seed,
        n_layers=n_layers,
        n_experts=n_experts,
        top_k=top_k,
        d_h=d_h,
        d_m=d_m,
    )
    rng = np.random.default_rng([seed, 1])
    scale = 1.0 / np.sqrt(d_h)
    downstream = tuple(
        rng.standard_normal((d_h, d_h)) * scale for _ in range(n_downstream)
    )
    expert_index = int(rng.integers(n_experts))
    if replacement == "identity":
        repl = model.layers[-1].experts[expert_index]
    elif replacement == "random":
        repl = moe.ExpertWeights(
            w_gate=rng.standard_normal((d_h, d_m)) * scale,
            w_up=rng.standard_normal((d_h, d_m)) * scale,
            w_down=rng.standard_normal((d_m, d_h)) * scale,
        )
    else:
        raise ConfigError(f"replacement must be 'random' or 'identity', got {replacement!r}")
    return BoundExperiment(
        model=model,
        downstream=downstream,
        layer_index=n_layers - 1,
        expert_index=expert_index,
        replacement=repl,
        n_samples=n_samples,
        seed=seed,
        downstream_kind=downstream_kind,
    )


# ---------------------------------------------------------------------------
# audit of an actual rewrite run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditRow:
    layer: int
    source: int
    target: int
    similarity: float
    delta: float


def sere_bound_audit(
    model: "moe.MoEModel",
    sims: Sequence,
    config: "rerouting.RerouteConfig",
    inputs: np.ndarray,
) -> list[AuditRow]:
    """One row per substitution a rewrite run actually performed.

    Each row pairs the similarity that justified the substitution with
    the measured output discrepancy of the two experts on that layer's
    own inputs, advancing through the rewritten forward exactly as the
    run did.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.d_h:
        raise DimensionError(f"inputs must be T x d_h with d_h={model.d_h}")
    if len(sims) != model.n_layers:
        raise DimensionError("need one similarity matrix per layer")
    rows: list[AuditRow] = []
    z = inputs
    for l, layer in enumerate(model.layers):
        assignment = moe.route_topk(layer.router, z)
        result = rerouting.apply_sere(assignment, sims[l], config)
        for u in sorted(result.reroute_map):
            v = result.reroute_map[u]
            rows.append(
                AuditRow(
                    layer=l,
                    source=u,
                    target=v,
                    similarity=float(sims[l].values[u, v]),
                    delta=expert_delta(layer.experts[u], layer.experts[v], z, model.activation),
                )
            )
        rewritten = moe.RoutingAssignment(indices=result.new_indices, weights=assignment.weights)
        z = moe.layer_forward(layer, z, rewritten, model.activation)
    return rows


def audit_correlation(rows: Sequence[AuditRow]) -> float:
    """Pearson correlation between similarity and measured discrepancy.

    NaN when fewer than two rows or either column is constant.
    """
    if len(rows) < 2:
        return float("nan")
    s = np.array([r.similarity for r in rows])
    d = np.array([r.delta for r in rows])
    if np.ptp(s) == 0.0 or np.ptp(d) == 0.0:
        return float("nan")
    return float(np.corrcoef(s, d)[0, 1])


# ---------------------------------------------------------------------------
# CSV form
# ---------------------------------------------------------------------------

BOUND_CSV_HEADER = [
    "seed",
    "layer",
    "lambda",
    "delta",
    "weighted_delta",
    "measured_error",
    "margin",
    "holds_tight",
    "holds_loose",
    "holds_samplewise",
]


def write_bound_csv(
    entries: Sequence[tuple[int, int, BoundReport]], path: str | Path
) -> None:
    """Rows of (seed, layer, report); margin is the loose-bound slack."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BOUND_CSV_HEADER)
        for seed, layer, rep in entries:
            margin = rep.lam * rep.delta + rep.tolerance - rep.measured_error
            writer.writerow(
                [
                    seed,
                    layer,
                    repr(rep.lam),
                    repr(rep.delta),
                    repr(rep.weighted_delta),
                    repr(rep.measured_error),
                    repr(margin),
                    int(rep.holds_tight),
                    int(rep.holds_loose),
                    int(rep.holds_samplewise),
                ]
            )


def read_bound_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != BOUND_CSV_HEADER:
        raise InputError(f"{path} is not a bound report")
    out = []
    for r in rows[1:]:
        out.append(
            {
                "seed": int(r[0]),
                "layer": int(r[1]),
                "lambda": float(r[2]),
                "delta": float(r[3]),
                "weighted_delta": float(r[4]),
                "measured_error": float(r[5]),
                "margin": float(r[6]),
                "holds_tight": bool(int(r[7])),
                "holds_loose": bool(int(r[8])),
                "holds_samplewise": bool(int(r[9])),
            }
        )
    return out
