"""Deterministic toy Mixture-of-Experts stack.

Experts are gated feed-forward blocks, the router is a linear projection
followed by a top-k softmax, and a model is a plain stack of MoE layers
(no attention, no normalization). All arithmetic runs in float64 and all
reductions have a fixed order, so identical inputs give bit-identical
outputs run to run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rerouting
from .errors import ConfigError, DimensionError, DomainError, InputError, RoutingError

ACTIVATIONS = ("silu", "relu", "gelu-tanh")
PHASES = ("prefill", "decode")

MODEL_META_NAME = "model.json"


def _silu(x: np.ndarray) -> np.ndarray:
    # x * sigmoid(x), with the sigmoid split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    # tanh approximation of GELU
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


_ACT_FNS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "silu": _silu,
    "relu": _relu,
    "gelu-tanh": _gelu_tanh,
}


def activation_fn(kind: str) -> Callable[[np.ndarray], np.ndarray]:
    """Look up an elementwise activation by name."""
    try:
        return _ACT_FNS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}") from None


def _as_f64(a: np.ndarray, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ExpertWeights:
    """One gated FFN expert: y = act(x @ w_gate) * (x @ w_up) @ w_down."""

    w_gate: np.ndarray  # d_h x d_m
    w_up: np.ndarray    # d_h x d_m
    w_down: np.ndarray  # d_m x d_h

    def __post_init__(self) -> None:
        object.__setattr__(self, "w_gate", _as_f64(self.w_gate, "w_gate", 2))
        object.__setattr__(self, "w_up", _as_f64(self.w_up, "w_up", 2))
        object.__setattr__(self, "w_down", _as_f64(self.w_down, "w_down", 2))
        d_h, d_m = self.w_gate.shape
        if self.w_up.shape != (d_h, d_m):
            raise DimensionError(
                f"w_up shape {self.w_up.shape} does not match w_gate shape {(d_h, d_m)}"
            )
        if self.w_down.shape != (d_m, d_h):
            raise DimensionError(
                f"w_down shape {self.w_down.shape}, expected {(d_m, d_h)}"
            )
        for name in ("w_gate", "w_up", "w_down"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"{name} contains non-finite values")

    @property
    def d_h(self) -> int:
        return self.w_gate.shape[0]

    @property
    def d_m(self) -> int:
        return self.w_gate.shape[1]


@dataclass(frozen=True)
class RouterWeights:
    """Linear router: logits = x @ w_router, routed to the top_k largest."""

    w_router: np.ndarray  # d_h x n_experts
    top_k: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "w_router", _as_f64(self.w_router, "w_router", 2))
        if not np.all(np.isfinite(self.w_router)):
            raise DomainError("w_router contains non-finite values")
        m = self.w_router.shape[1]
        if not 1 <= int(self.top_k) <= m:
            raise ConfigError(
                f"top_k must satisfy 1 <= K <= M (got K={self.top_k}, M={m})"
            )
        object.__setattr__(self, "top_k", int(self.top_k))

    @property
    def n_experts(self) -> int:
        return self.w_router.shape[1]


@dataclass(frozen=True)
class MoELayer:
    experts: tuple[ExpertWeights, ...]
    router: RouterWeights
    shared_experts: tuple[ExpertWeights, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "shared_experts", tuple(self.shared_experts))
        if len(self.experts) != self.router.n_experts:
            raise DimensionError(
                f"router is sized for {self.router.n_experts} experts, layer has {len(self.experts)}"
            )
        d_h = self.router.w_router.shape[0]
        for e in self.experts + self.shared_experts:
            if e.d_h != d_h:
                raise DimensionError("all experts in a layer must share d_h with the router")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d_h(self) -> int:
        return self.router.w_router.shape[0]


@dataclass(frozen=True)
class MoEModel:
    layers: tuple[MoELayer, ...]
    d_h: int
    activation: str = "silu"
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigError("a model needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for layer in self.layers:
            if layer.d_h != self.d_h:
                raise DimensionError("all layers must share the model d_h")

    @property
    def n_layers(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class TokenBatch:
    """A T x d_h block of token embeddings tagged with its decoding phase."""

    x: np.ndarray
    phase: str = "decode"

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", _as_f64(self.x, "x", 2))
        if self.x.shape[0] < 1:
            raise DimensionError("a batch needs at least one token")
        if not np.all(np.isfinite(self.x)):
            raise DomainError("batch contains non-finite values")
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}, expected one of {PHASES}")


@dataclass
class RoutingAssignment:
    """Per-token expert choices (T x K) with their softmax weights.

    Column order is significant: weights are non-increasing along each
    row, ties resolved toward the lower expert index.
    """

    indices: np.ndarray  # T x K int64
    weights: np.ndarray  # T x K float64

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = _as_f64(self.weights, "weights", 2)
        if self.indices.ndim != 2 or self.indices.shape != self.weights.shape:
            raise DimensionError(
                f"indices {self.indices.shape} and weights {self.weights.shape} must be equal 2-D shapes"
            )

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def top_k(self) -> int:
        return self.indices.shape[1]

    def validate(self, n_experts: int) -> None:
        """Check the full routing contract against a layer of `n_experts`."""
        if self.indices.min(initial=0) < 0 or self.indices.max(initial=-1) >= n_experts:
            raise RoutingError(f"indices must lie in [0, {n_experts})")
        for t in range(self.n_tokens):
            row = self.indices[t]
            if len(set(row.tolist())) != len(row):
                raise RoutingError(f"token {t} routes to a duplicated expert")
        sums = self.weights.sum(axis=1)
        if not np.all(np.abs(sums - 1.0) <= 1e-6):
            raise DomainError("per-token routing weights must sum to 1 within 1e-6")
        if np.any(np.diff(self.weights, axis=1) > 0):
            raise DomainError("per-token routing weights must be non-increasing")


def expert_forward(expert: ExpertWeights, x: np.ndarray, activation: str = "silu") -> np.ndarray:
    """Run one expert on a T x d_h block. Pure function, never mutates x."""
    x = _as_f64(x, "x", 2)
    if x.shape[1] != expert.d_h:
        raise DimensionError(f"input width {x.shape[1]} does not match expert d_h {expert.d_h}")
    if not np.all(np.isfinite(x)):
        raise DomainError("expert input contains non-finite values")
    act = activation_fn(activation)
    gate = act(x @ expert.w_gate)
    up = x @ expert.w_up
    return (gate * up) @ expert.w_down


def topk_softmax(logits: np.ndarray, k: int) -> RoutingAssignment:
    """Select the k largest logits per row and softmax over exactly those.

    Ties go to the lower column index. Output columns are sorted by
    descending weight (equivalently descending logit, index ascending on
    ties), so slot 0 always holds the strongest expert.
    """
    logits = _as_f64(logits, "logits", 2)
    m = logits.shape[1]
    if not 1 <= k <= m:
        raise ConfigError(f"top_k must satisfy 1 <= K <= M (got K={k}, M={m})")
    # stable argsort on negated logits: descending logit, ascending index on ties
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    sel = np.take_along_axis(logits, order, axis=1)
    shifted = sel - sel.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=1, keepdims=True)
    return RoutingAssignment(indices=order.astype(np.int64), weights=w)


def route_topk(router: RouterWeights, x: np.ndarray) -> RoutingAssignment:
    """Route a batch through a linear router with top-k softmax gating."""
    x = _as_f64(x, "x", 2)
    if x.shape[1] != router.w_router.shape[0]:
        raise DimensionError(
            f"input width {x.shape[1]} does not match router d_h {router.w_router.shape[0]}"
        )
    if not np.all(np.isfinite(x)):
        raise DomainError("router input contains non-finite values")
    return topk_softmax(x @ router.w_router, router.top_k)


def layer_forward(
    layer: MoELayer,
    x: np.ndarray,
    assignment: RoutingAssignment,
    activation: str = "silu",
) -> np.ndarray:
    """Weighted sum of routed experts plus every shared expert.

    The reduction order is fixed: slot 0 first, then slot 1, ..., then the
    shared experts, so the result is reproducible bit for bit. Duplicate
    indices within a row are allowed and simply contribute once per slot.
    """
    x = _as_f64(x, "x", 2)
    if assignment.n_tokens != x.shape[0]:
        raise DimensionError(
            f"assignment covers {assignment.n_tokens} tokens, batch has {x.shape[0]}"
        )
    m = layer.n_experts
    idx = assignment.indices
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= m:
        raise RoutingError(f"assignment refers to experts outside [0, {m})")
    w = assignment.weights
    y = np.zeros_like(x)
    for k in range(assignment.top_k):
        col = idx[:, k]
        for e in np.unique(col):
            rows = np.flatnonzero(col == e)
            y[rows] += w[rows, k : k + 1] * expert_forward(layer.experts[e], x[rows], activation)
    for shared in layer.shared_experts:
        y += expert_forward(shared, x, activation)
    return y


@dataclass
class LayerTrace:
    """What one layer did to one batch: routing before and after rewriting."""

    original: RoutingAssignment
    final: RoutingAssignment
    reroute: "rerouting.RerouteResult | None"
    active: frozenset[int]


@dataclass
class ForwardResult:
    output: np.ndarray
    layers: list[LayerTrace]


def model_forward(
    model: MoEModel,
    batch: TokenBatch,
    config: "rerouting.RerouteConfig | None" = None,
    sims: "Sequence | None" = None,
    router_override: Callable[[int, np.ndarray], RoutingAssignment] | None = None,
) -> ForwardResult:
    """Run the full layer stack, optionally rewriting routing per layer.

    When `config` is given, `sims` must hold one similarity matrix per
    layer; rewriting is applied in every phase for phase_mode
    "all_phases" and only to decode batches for "decode_only". Weights
    are never modified, only expert indices.
    """
    if batch.x.shape[1] != model.d_h:
        raise DimensionError(f"batch width {batch.x.shape[1]} does not match model d_h {model.d_h}")
    if config is not None:
        if sims is None or len(sims) != model.n_layers:
            raise DimensionError(
                f"rewriting needs one similarity matrix per layer ({model.n_layers})"
            )
        for l, sim in enumerate(sims):
            m = model.layers[l].n_experts
            if sim.values.shape != (m, m):
                raise DimensionError(
                    f"similarity matrix for layer {l} has shape {sim.values.shape}, expected {(m, m)}"
                )
    apply_rewrite = config is not None and (
        config.phase_mode == "all_phases" or batch.phase == "decode"
    )

    x = batch.x
    traces: list[LayerTrace] = []
    for l, layer in enumerate(model.layers):
        if router_override is not None:
            assignment = router_override(l, x)
        else:
            assignment = route_topk(layer.router, x)
        if apply_rewrite:
            result = rerouting.apply_sere(assignment, sims[l], config)
            final = RoutingAssignment(indices=result.new_indices, weights=assignment.weights)
            active = result.final_active
        else:
            result = None
            final = assignment
            active = frozenset(np.unique(assignment.indices).tolist())
        x = layer_forward(layer, x, final, model.activation)
        traces.append(LayerTrace(original=assignment, final=final, reroute=result, active=active))
    return ForwardResult(output=x, layers=traces)


def gen_model(
    seed: int,
    n_layers: int,
    n_experts: int,
    top_k: int,
    d_h: int,
    d_m: int,
    n_shared: int = 0,
    activation: str = "silu",
) -> MoEModel:
    """Draw a random model with i.i.d. Normal(0, 1/d_h) weights.

    The draw order is fixed (per layer: routed experts in index order,
    each gate/up/down, then shared experts, then the router), so a seed
    pins every tensor.
    """
    for name, v in (("n_layers", n_layers), ("n_experts", n_experts), ("d_h", d_h), ("d_m", d_m)):
        if v < 1:
            raise ConfigError(f"{name} must be >= 1, got {v}")
    if n_shared < 0:
        raise ConfigError(f"n_shared must be >= 0, got {n_shared}")
    if not 1 <= top_k <= n_experts:
        raise ConfigError(f"top_k must satisfy 1 <= K <= M (got K={top_k}, M={n_experts})")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d_h)

    def draw_expert() -> ExpertWeights:
        return ExpertWeights(
            w_gate=rng.standard_normal((d_h, d_m)) * scale,
            w_up=rng.standard_normal((d_h, d_m)) * scale,
            w_down=rng.standard_normal((d_m, d_h)) * scale,
        )

    layers = []
    for _ in range(n_layers):
        experts = tuple(draw_expert() for _ in range(n_experts))
        shared = tuple(draw_expert() for _ in range(n_shared))
        router = RouterWeights(w_router=rng.standard_normal((d_h, n_experts)) * scale, top_k=top_k)
        layers.append(MoELayer(experts=experts, router=router, shared_experts=shared))
    return MoEModel(layers=tuple(layers), d_h=d_h, activation=activation, seed=seed)


# ---------------------------------------------------------------------------
# serialization: model.json plus one little-endian float32 file per tensor
# ---------------------------------------------------------------------------

def _write_f32(path: Path, a: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise DimensionError(f"{path.name} holds {raw.size} values, expected {expected}")
    return raw.reshape(shape).astype(np.float64)


def save_model(model: MoEModel, directory: str | Path) -> None:
    """Write model.json and per-tensor .f32 files (row-major, little-endian)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = model.layers[0]
    meta = {
        "seed": model.seed,
        "n_layers": model.n_layers,
        "n_experts": first.n_experts,
        "top_k": first.router.top_k,
        "d_h": model.d_h,
        "d_m": first.experts[0].d_m,
        "n_shared": len(first.shared_experts),
        "activation": model.activation,
    }
    for layer in model.layers:
        if (
            layer.n_experts != meta["n_experts"]
            or layer.router.top_k != meta["top_k"]
            or len(layer.shared_experts) != meta["n_shared"]
            or layer.experts[0].d_m != meta["d_m"]
        ):
            raise ConfigError("only homogeneous layer stacks can be serialized")
    (directory / MODEL_META_NAME).write_text(json.dumps(meta, indent=2) + "\n")
    for l, layer in enumerate(model.layers):
        for j, e in enumerate(layer.experts):
            _write_f32(directory / f"layer{l}.expert{j}.gate.f32", e.w_gate)
            _write_f32(directory / f"layer{l}.expert{j}.up.f32", e.w_up)
            _write_f32(directory / f"layer{l}.expert{j}.down.f32", e.w_down)
        for j, e in enumerate(layer.shared_experts):
            _write_f32(directory / f"layer{l}.shared{j}.gate.f32", e.w_gate)
            _write_f32(directory / f"layer{l}.shared{j}.up.f32", e.w_up)
            _write_f32(directory / f"layer{l}.shared{j}.down.f32", e.w_down)
        _write_f32(directory / f"layer{l}.router.f32", layer.router.w_router)


def load_model(directory: str | Path) -> MoEModel:
    """Inverse of save_model. Tensors come back as float64."""
    directory = Path(directory)
    meta_path = directory / MODEL_META_NAME
    if not meta_path.is_file():
        raise InputError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    d_h, d_m = int(meta["d_h"]), int(meta["d_m"])
    layers = []
    for l in range(int(meta["n_layers"])):
        experts = tuple(
            ExpertWeights(
                w_gate=_read_f32(directory / f"layer{l}.expert{j}.gate.f32", (d_h, d_m)),
                w_up=_read_f32(directory / f"layer{l}.expert{j}.up.f32", (d_h, d_m)),
                w_down=_read_f32(directory / f"layer{l}.expert{j}.down.f32", (d_m, d_h)),
            )
            for j in range(int(meta["n_experts"]))
        )
        shared = tuple(
            ExpertWeights(
                w_gate=_read_f32(directory / f"layer{l}.shared{j}.gate.f32", (d_h, d_m)),
                w_up=_read_f32(directory / f"layer{l}.shared{j}.up.f32", (d_h, d_m)),
                w_down=_read_f32(directory / f"layer{l}.shared{j}.down.f32", (d_m, d_h)),
            )
            for j in range(int(meta["n_shared"]))
        )
        router = RouterWeights(
            w_router=_read_f32(directory / f"layer{l}.router.f32", (d_h, int(meta["n_experts"]))),
            top_k=int(meta["top_k"]),
        )
        layers.append(MoELayer(experts=experts, router=router, shared_experts=shared))
    return MoEModel(
        layers=tuple(layers),
        d_h=d_h,
        activation=str(meta["activation"]),
        seed=meta["seed"],
    )


def replace_expert(layer: MoELayer, index: int, expert: ExpertWeights) -> MoELayer:
    """Copy of `layer` with one routed expert swapped out."""
    if not 0 <= index < layer.n_experts:
        raise RoutingError(f"expert index {index} outside [0, {layer.n_experts})")
    experts = list(layer.experts)
    experts[index] = expert
    return replace(layer, experts=tuple(experts))
