"""Batched decoding economics.

Counts how many distinct experts a batch activates (with and without
re-routing) and converts counts into per-layer latency through a small
affine cost model: fixed attention and dispatch terms plus a per-expert
weight-loading term, which is the memory-bound regime where shrinking
the active set pays off.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from itertools import combinations, product
from pathlib import Path
from typing import Sequence

import numpy as np

from . import moe, rerouting
from .errors import ConfigError, DimensionError, DomainError, InputError

DEFAULT_COST_NAME = "cost_breakdown.json"


@dataclass(frozen=True)
class CostModelParams:
    """Per-layer latency terms in microseconds.

    layer latency = t_attn + (t_reroute if rewriting) + t_fixed
                  + t_expert_unit * activated_count
    """

    t_attn_us: float
    t_reroute_us: float
    t_expert_unit_us: float
    t_fixed_us: float = 0.0

    def __post_init__(self) -> None:
        for name in ("t_attn_us", "t_reroute_us", "t_expert_unit_us", "t_fixed_us"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0.0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class DecodeScenario:
    """One simulated serving episode: T sequences, a prefill, then steps."""

    batch_size: int
    steps: int
    prefill_len: int = 1
    router_source: str = "model"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.steps < 1 or self.prefill_len < 1:
            raise ConfigError("batch_size, steps and prefill_len must all be >= 1")
        if self.router_source not in ("model", "uniform"):
            raise ConfigError(
                f"router_source must be 'model' or 'uniform', got {self.router_source!r}"
            )


@dataclass(frozen=True)
class SweepPoint:
    batch_size: int
    top_k: int
    layer: int
    mean_count: float
    post_count: float | None = None


@dataclass(frozen=True)
class StepCount:
    phase: str
    step: int
    layer: int
    baseline_count: int
    post_count: int


@dataclass
class ActivationStats:
    """Activated-expert counts: aggregated sweep points and per-step records."""

    sweep: list[SweepPoint]
    steps: list[StepCount]

    def layer_means(self, phase: str = "decode") -> dict[int, tuple[float, float]]:
        """Per-layer (baseline, post) mean counts over steps of one phase."""
        by_layer: dict[int, tuple[list[int], list[int]]] = {}
        for rec in self.steps:
            if rec.phase != phase:
                continue
            base, post = by_layer.setdefault(rec.layer, ([], []))
            base.append(rec.baseline_count)
            post.append(rec.post_count)
        if not by_layer:
            raise InputError(f"no step records for phase {phase!r}")
        return {
            l: (math.fsum(b) / len(b), math.fsum(p) / len(p))
            for l, (b, p) in sorted(by_layer.items())
        }


def count_activated(source) -> int:
    """Distinct experts referenced by an index table, assignment, or result."""
    if isinstance(source, rerouting.RerouteResult):
        idx = source.new_indices
    elif isinstance(source, moe.RoutingAssignment):
        idx = source.indices
    else:
        idx = np.asarray(source)
    if idx.size == 0:
        raise InputError("cannot count activation of an empty index table")
    return int(np.unique(idx).size)


def expected_activated(n_experts: int, top_k: int, batch_size: int) -> float:
    """E[distinct experts] when each token picks a uniform K-subset of M."""
    if not 1 <= top_k <= n_experts:
        raise ConfigError(f"top_k must satisfy 1 <= K <= M (got K={top_k}, M={n_experts})")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    return n_experts * (1.0 - (1.0 - top_k / n_experts) ** batch_size)


def exhaustive_expected_activated(n_experts: int, top_k: int, batch_size: int) -> float:
    """Same expectation by enumerating every joint K-subset choice (tiny M only)."""
    subsets = list(combinations(range(n_experts), top_k))
    total = 0
    cases = 0
    for choice in product(subsets, repeat=batch_size):
        total += len(set().union(*choice))
        cases += 1
    return total / cases


def uniform_assignment(
    rng: np.random.Generator, batch_size: int, n_experts: int, top_k: int
) -> moe.RoutingAssignment:
    """Uniformly random K-subsets per token, with softmax weights over random logits."""
    logits = rng.standard_normal((batch_size, n_experts))
    return moe.topk_softmax(logits, top_k)


def sweep_activation(
    source: "moe.MoEModel | int",
    batch_sizes: Sequence[int],
    k_values: Sequence[int],
    trials: int = 1000,
    seed: int = 0,
    config: "rerouting.RerouteConfig | None" = None,
    sims: "Sequence | None" = None,
) -> ActivationStats:
    """Mean activated-expert counts over random trials.

    `source` is either an integer M (tokens route to uniformly random
    K-subsets) or a model (tokens are Gaussian embeddings routed by each
    layer's own router; k_values override the router's top_k). Each
    trial draws its own generator from (seed, T, K, trial), so the sweep
    is order- and partition-independent; means use compensated summation.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    if config is not None and sims is None:
        raise InputError("rewriting during a sweep needs similarity matrices")
    points: list[SweepPoint] = []
    uniform = isinstance(source, (int, np.integer))
    for t_size in batch_sizes:
        if t_size < 1:
            raise ConfigError(f"batch sizes must be >= 1, got {t_size}")
        for k in k_values:
            if uniform:
                m = int(source)
                base_counts: list[int] = []
                post_counts: list[int] = []
                for trial in range(trials):
                    rng = np.random.default_rng([seed, t_size, k, trial])
                    assignment = uniform_assignment(rng, t_size, m, k)
                    base_counts.append(count_activated(assignment))
                    if config is not None:
                        result = rerouting.apply_sere(assignment, sims[0], config)
                        post_counts.append(len(result.final_active))
                mean_base = math.fsum(base_counts) / trials
                mean_post = math.fsum(post_counts) / trials if config is not None else None
                points.append(SweepPoint(t_size, k, 0, mean_base, mean_post))
            else:
                model = source
                layer_base: list[list[int]] = [[] for _ in model.layers]
                layer_post: list[list[int]] = [[] for _ in model.layers]
                for trial in range(trials):
                    rng = np.random.default_rng([seed, t_size, k, trial])
                    x = rng.standard_normal((t_size, model.d_h))
                    adjusted = _with_top_k(model, k)
                    res = moe.model_forward(
                        adjusted, moe.TokenBatch(x, "decode"), config=config, sims=sims
                    )
                    for l, trace in enumerate(res.layers):
                        layer_base[l].append(count_activated(trace.original))
                        layer_post[l].append(len(trace.active))
                for l in range(model.n_layers):
                    mean_base = math.fsum(layer_base[l]) / trials
                    mean_post = math.fsum(layer_post[l]) / trials if config is not None else None
                    points.append(SweepPoint(t_size, k, l, mean_base, mean_post))
    return ActivationStats(sweep=points, steps=[])


def _with_top_k(model: "moe.MoEModel", top_k: int) -> "moe.MoEModel":
    if top_k == model.layers[0].router.top_k:
        return model
    layers = tuple(
        replace(layer, router=replace(layer.router, top_k=top_k)) for layer in model.layers
    )
    return replace(model, layers=layers)


# ---------------------------------------------------------------------------
# latency model
# ---------------------------------------------------------------------------

@dataclass
class TpotReport:
    """Per-output-token latency under the affine cost model."""

    baseline_layer_us: list[float]
    layer_us: list[float]
    baseline_total_us: float
    total_us: float
    speedup: float


def layer_latency_us(count: float, params: CostModelParams, sere_enabled: bool) -> float:
    reroute = params.t_reroute_us if sere_enabled else 0.0
    return params.t_attn_us + reroute + params.t_fixed_us + params.t_expert_unit_us * count


def tpot_from_counts(
    baseline_counts: Sequence[float],
    post_counts: Sequence[float],
    params: CostModelParams,
    sere_enabled: bool = True,
) -> TpotReport:
    """Latency totals from per-layer mean activated counts."""
    if len(baseline_counts) != len(post_counts) or not baseline_counts:
        raise DimensionError("need equal, nonempty per-layer count lists")
    baseline = [layer_latency_us(c, params, sere_enabled=False) for c in baseline_counts]
    if sere_enabled:
        current = [layer_latency_us(c, params, sere_enabled=True) for c in post_counts]
    else:
        current = list(baseline)
    b_total = math.fsum(baseline)
    total = math.fsum(current)
    return TpotReport(
        baseline_layer_us=baseline,
        layer_us=current,
        baseline_total_us=b_total,
        total_us=total,
        speedup=b_total / total,
    )


def estimate_tpot(
    stats: ActivationStats,
    params: CostModelParams,
    sere_enabled: bool,
    phase: str = "decode",
) -> TpotReport:
    """Latency from a run's decode-phase mean counts."""
    means = stats.layer_means(phase=phase)
    base = [means[l][0] for l in sorted(means)]
    post = [means[l][1] for l in sorted(means)]
    return tpot_from_counts(base, post, params, sere_enabled=sere_enabled)


def load_cost_breakdown(path: str | Path | None = None) -> dict:
    """Measured per-layer cost rows (attention, rewrite, full expert MLP)."""
    if path is None:
        text = resources.files("sere").joinpath(f"data/{DEFAULT_COST_NAME}").read_text()
    else:
        text = Path(path).read_text()
    breakdown = json.loads(text)
    if "rows" not in breakdown or not breakdown["rows"]:
        raise InputError("cost breakdown has no rows")
    return breakdown


def breakdown_row(breakdown: dict, batch_size: int) -> dict:
    """Row with the closest batch size (ties toward the smaller batch)."""
    rows = sorted(breakdown["rows"], key=lambda r: (abs(r["batch_size"] - batch_size), r["batch_size"]))
    return rows[0]


def params_from_breakdown(
    breakdown: dict, batch_size: int, baseline_count: float
) -> CostModelParams:
    """Calibrate the per-expert unit cost from a measured MLP time.

    The measured MLP figure corresponds to `baseline_count` activated
    experts, so t_expert_unit = mlp_us / baseline_count.
    """
    if not baseline_count > 0:
        raise DomainError(f"baseline_count must be > 0, got {baseline_count}")
    row = breakdown_row(breakdown, batch_size)
    return CostModelParams(
        t_attn_us=float(row["attn_us"]),
        t_reroute_us=float(row["reroute_us"]),
        t_expert_unit_us=float(row["mlp_us"]) / float(baseline_count),
        t_fixed_us=0.0,
    )


def tpot_rows_from_breakdown(
    row: dict, baseline_count: float, post_count: float
) -> tuple[float, float, float]:
    """(baseline latency, rewritten latency, speedup) for one measured row.

    The baseline reuses the measured MLP time directly; the rewritten
    path scales it by the activation ratio, keeping the baseline figure
    exact by construction.
    """
    if not baseline_count > 0:
        raise DomainError(f"baseline_count must be > 0, got {baseline_count}")
    base = float(row["attn_us"]) + float(row["mlp_us"])
    ratio = float(post_count) / float(baseline_count)
    sere = float(row["attn_us"]) + float(row["reroute_us"]) + float(row["mlp_us"]) * ratio
    return base, sere, base / sere


# ---------------------------------------------------------------------------
# decode-loop simulation
# ---------------------------------------------------------------------------

@dataclass
class DecodeResult:
    prefill_output: np.ndarray
    step_outputs: np.ndarray  # steps x T x d_h
    stats: ActivationStats
    tpot: TpotReport


def run_decode(
    model: "moe.MoEModel",
    scenario: DecodeScenario,
    config: "rerouting.RerouteConfig | None" = None,
    sims: "Sequence | None" = None,
    cost: CostModelParams | dict | None = None,
) -> DecodeResult:
    """Prefill once, then decode step by step with direct feedback.

    The prefill is one batched forward over batch_size * prefill_len
    Gaussian embeddings; each sequence's last output embedding seeds the
    decode loop, and every decode step feeds its output straight back in.
    Given (model, scenario, config) the whole run is deterministic.
    """
    t_size = scenario.batch_size
    rng_embed = np.random.default_rng([scenario.seed, 0])
    x0 = rng_embed.standard_normal((t_size * scenario.prefill_len, model.d_h))

    def override_for(phase_tag: int, step: int):
        if scenario.router_source == "model":
            return None
        if scenario.router_source != "uniform":
            raise ConfigError(
                f"router_source must be 'model' or 'uniform', got {scenario.router_source!r}"
            )

        def override(layer_index: int, x: np.ndarray) -> moe.RoutingAssignment:
            rng = np.random.default_rng([scenario.seed, 1 + phase_tag, step, layer_index])
            layer = model.layers[layer_index]
            return uniform_assignment(rng, x.shape[0], layer.n_experts, layer.router.top_k)

        return override

    steps: list[StepCount] = []

    def record(phase: str, step: int, res: moe.ForwardResult) -> None:
        for l, trace in enumerate(res.layers):
            steps.append(
                StepCount(
                    phase=phase,
                    step=step,
                    layer=l,
                    baseline_count=count_activated(trace.original),
                    post_count=len(trace.active),
                )
            )

    prefill_res = moe.model_forward(
        model,
        moe.TokenBatch(x0, "prefill"),
        config=config,
        sims=sims,
        router_override=override_for(0, 0),
    )
    record("prefill", 0, prefill_res)

    x = prefill_res.output.reshape(t_size, scenario.prefill_len, model.d_h)[:, -1, :]
    outputs = []
    for step in range(scenario.steps):
        res = moe.model_forward(
            model,
            moe.TokenBatch(x, "decode"),
            config=config,
            sims=sims,
            router_override=override_for(1, step),
        )
        record("decode", step, res)
        outputs.append(res.output)
        x = res.output

    stats = ActivationStats(sweep=[], steps=steps)
    if isinstance(cost, CostModelParams):
        params = cost
    else:
        breakdown = cost if isinstance(cost, dict) else load_cost_breakdown()
        means = stats.layer_means(phase="decode")
        overall_base = math.fsum(m[0] for m in means.values()) / len(means)
        params = params_from_breakdown(breakdown, t_size, overall_base)
    tpot = estimate_tpot(stats, params, sere_enabled=config is not None)
    return DecodeResult(
        prefill_output=prefill_res.output,
        step_outputs=np.stack(outputs),
        stats=stats,
        tpot=tpot,
    )


# ---------------------------------------------------------------------------
# CSV forms
# ---------------------------------------------------------------------------

def write_activation_csv(points: Sequence[SweepPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_size", "K", "layer", "mean_count", "post_sere_count"])
        for p in points:
            post = "" if p.post_count is None else repr(p.post_count)
            writer.writerow([p.batch_size, p.top_k, p.layer, repr(p.mean_count), post])


def read_activation_csv(path: str | Path) -> list[SweepPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["batch_size", "K", "layer", "mean_count", "post_sere_count"]:
        raise InputError(f"{path} is not an activation sweep table")
    return [
        SweepPoint(
            batch_size=int(r[0]),
            top_k=int(r[1]),
            layer=int(r[2]),
            mean_count=float(r[3]),
            post_count=None if r[4] == "" else float(r[4]),
        )
        for r in rows[1:]
    ]


def write_tpot_csv(rows: Sequence[tuple[str, int, float, float]], path: str | Path) -> None:
    """Rows of (config label, layer, latency_us, speedup)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "layer", "latency_us", "speedup"])
        for label, layer, latency, speedup in rows:
            writer.writerow([label, layer, repr(float(latency)), repr(float(speedup))])


def read_tpot_csv(path: str | Path) -> list[tuple[str, int, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["config", "layer", "latency_us", "speedup"]:
        raise InputError(f"{path} is not a latency table")
    return [(r[0], int(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]
