"""Expert similarity estimation.

Two routes produce an experts x experts matrix per layer, normalized
into [0, 1] with 1 meaning interchangeable:

* activation-based: run every expert densely on calibration batches,
  score each pair of output matrices (mean row cosine, Frobenius
  distance, or centered-kernel alignment), accumulate across batches,
  average, then normalize;
* parameter-based: score expert weight tensors directly, either
  concatenated into one wide matrix or combined into the composite map
  the expert applies to its input.

All accumulation is float64 and order-fixed, so results are reproducible.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import moe
from .errors import (
    ConfigError,
    DegenerateInputWarning,
    DimensionError,
    DomainError,
    InputError,
)

METRICS = ("cosine", "frobenius", "cka-linear", "cka-rbf", "cka-poly")
KERNELS = ("linear", "rbf", "poly")
COMBINES = ("concat", "logic")
LOGIC_ORDERS = ("right", "left")

MEDIAN_HEURISTIC = "median-heuristic"


@dataclass(frozen=True)
class KernelParams:
    """Kernel knobs for the CKA metrics.

    rbf_sigma is either a positive bandwidth or the string
    "median-heuristic", which takes the median pairwise distance of the
    rows being compared (positive distances only).
    """

    rbf_sigma: float | str = MEDIAN_HEURISTIC
    poly_c: float = 1.0
    poly_degree: int = 2

    def __post_init__(self) -> None:
        if isinstance(self.rbf_sigma, str):
            if self.rbf_sigma != MEDIAN_HEURISTIC:
                raise ConfigError(f"rbf_sigma must be a number or {MEDIAN_HEURISTIC!r}")
        elif not float(self.rbf_sigma) > 0.0:
            raise ConfigError(f"rbf_sigma must be > 0, got {self.rbf_sigma}")
        if int(self.poly_degree) < 1:
            raise ConfigError(f"poly_degree must be >= 1, got {self.poly_degree}")
        object.__setattr__(self, "poly_c", float(self.poly_c))
        object.__setattr__(self, "poly_degree", int(self.poly_degree))


@dataclass
class SimilarityMatrix:
    """Symmetric M x M matrix of values in [0, 1] with a unit diagonal."""

    values: np.ndarray
    metric: str
    layer_index: int = 0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)

    def validate(self) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DimensionError(f"similarity matrix must be square, got {v.shape}")
        if not np.array_equal(v, v.T):
            raise DomainError("similarity matrix must be exactly symmetric")
        if v.min() < 0.0 or v.max() > 1.0:
            raise DomainError("similarity values must lie in [0, 1]")
        if not np.all(np.diag(v) == 1.0):
            raise DomainError("similarity diagonal must be exactly 1")


@dataclass
class ActivationSlab:
    """Dense per-expert activations for one layer input: one n x d block each."""

    slabs: list[np.ndarray]

    def __post_init__(self) -> None:
        if not self.slabs:
            raise InputError("activation slab needs at least one expert block")
        shape = self.slabs[0].shape
        for i, a in enumerate(self.slabs):
            if a.ndim != 2 or a.shape != shape:
                raise DimensionError(f"expert block {i} has shape {a.shape}, expected {shape}")

    @property
    def n_experts(self) -> int:
        return len(self.slabs)


# ---------------------------------------------------------------------------
# pairwise metrics on two n x d matrices
# ---------------------------------------------------------------------------

def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"matrices must share a 2-D shape, got {a.shape} and {b.shape}")
    return a, b


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over rows of the cosine between paired rows, in [-1, 1].

    Rows where either side has zero norm contribute 0 to the mean.
    """
    a, b = _check_pair(a, b)
    num = (a * b).sum(axis=1)
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    denom = na * nb
    safe = np.where(denom > 0.0, denom, 1.0)
    per_row = np.where(denom > 0.0, num / safe, 0.0)
    return float(per_row.sum() / a.shape[0])


def frobenius_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise Frobenius norm of the difference."""
    a, b = _check_pair(a, b)
    d = a - b
    return float(np.sqrt((d * d).sum()))


def frobenius_normalize(
    distances: np.ndarray, metric: str = "frobenius", layer_index: int = 0
) -> SimilarityMatrix:
    """Map accumulated distances to similarities via 1 - x / max(x).

    The maximum is taken over off-diagonal entries. An all-zero matrix
    (every expert pair indistinguishable) maps to all-ones.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DimensionError(f"distance matrix must be square, got {d.shape}")
    if not np.array_equal(d, d.T):
        raise DomainError("distance matrix must be symmetric")
    if d.min() < 0.0:
        raise DomainError("distances must be nonnegative")
    if np.any(np.diag(d) != 0.0):
        raise DomainError("distance diagonal must be zero")
    off = d[~np.eye(d.shape[0], dtype=bool)]
    mx = float(off.max()) if off.size else 0.0
    if mx == 0.0:
        values = np.ones_like(d)
    else:
        values = 1.0 - d / mx
    np.fill_diagonal(values, 1.0)
    out = SimilarityMatrix(values=values, metric=metric, layer_index=layer_index)
    out.validate()
    return out


def gram_matrix(x: np.ndarray, kernel: str, params: KernelParams | None = None) -> np.ndarray:
    """n x n kernel matrix over the rows of x."""
    params = params or KernelParams()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"x must be 2-D, got shape {x.shape}")
    if kernel == "linear":
        return x @ x.T
    if kernel == "poly":
        return (x @ x.T + params.poly_c) ** params.poly_degree
    if kernel == "rbf":
        diff = x[:, None, :] - x[None, :, :]
        sq = (diff * diff).sum(axis=2)
        if params.rbf_sigma == MEDIAN_HEURISTIC:
            iu = np.triu_indices(x.shape[0], k=1)
            pos = sq[iu][sq[iu] > 0.0]
            if pos.size == 0:
                warnings.warn(
                    "all pairwise distances are zero; falling back to sigma = 1",
                    DegenerateInputWarning,
                    stacklevel=2,
                )
                sigma = 1.0
            else:
                sigma = float(np.median(np.sqrt(pos)))
        else:
            sigma = float(params.rbf_sigma)
        return np.exp(-sq / (2.0 * sigma * sigma))
    raise ConfigError(f"unknown kernel {kernel!r}, expected one of {KERNELS}")


def hsic_unbiased(k: np.ndarray, l: np.ndarray) -> float:
    """Unbiased HSIC estimator over two symmetric kernel matrices.

    Uses the closed O(n^2) form on the diagonal-zeroed matrices; needs
    n >= 4 samples. Can be negative for weakly dependent inputs.
    """
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape != l.shape:
        raise DimensionError(f"kernel matrices must be square and equal, got {k.shape}, {l.shape}")
    n = k.shape[0]
    if n < 4:
        raise DomainError(f"unbiased HSIC needs n >= 4 samples, got {n}")
    kt = k.copy()
    lt = l.copy()
    np.fill_diagonal(kt, 0.0)
    np.fill_diagonal(lt, 0.0)
    row_k = kt.sum(axis=1)
    row_l = lt.sum(axis=1)
    trace_term = float((kt * lt).sum())
    sum_term = float(row_k.sum()) * float(row_l.sum()) / ((n - 1) * (n - 2))
    cross_term = 2.0 / (n - 2) * float(row_k @ row_l)
    return (trace_term + sum_term - cross_term) / (n * (n - 3))


def cka(
    a: np.ndarray, b: np.ndarray, kernel: str = "linear", params: KernelParams | None = None
) -> float:
    """Centered kernel alignment between two n x d matrices, clamped to [0, 1].

    A non-positive self-HSIC on either side makes the ratio meaningless;
    that degenerate case returns 0 and emits a warning.
    """
    a, b = _check_pair(a, b)
    gk = gram_matrix(a, kernel, params)
    gl = gram_matrix(b, kernel, params)
    cross = hsic_unbiased(gk, gl)
    self_a = hsic_unbiased(gk, gk)
    self_b = hsic_unbiased(gl, gl)
    if self_a <= 0.0 or self_b <= 0.0:
        warnings.warn(
            "non-positive self-HSIC; returning similarity 0",
            DegenerateInputWarning,
            stacklevel=2,
        )
        return 0.0
    value = max(cross, 0.0) / np.sqrt(self_a * self_b)
    return float(min(max(value, 0.0), 1.0))


def _pair_raw(a: np.ndarray, b: np.ndarray, metric: str, params: KernelParams | None) -> float:
    """Unnormalized pair score: cosine in [-1,1], a distance, or a CKA value."""
    if metric == "cosine":
        return cosine_similarity(a, b)
    if metric == "frobenius":
        return frobenius_distance(a, b)
    if metric.startswith("cka-"):
        return cka(a, b, kernel=metric.removeprefix("cka-"), params=params)
    raise ConfigError(f"unknown metric {metric!r}, expected one of {METRICS}")


def _base_metric(metric: str) -> str:
    for base in ("frobenius", "cosine", "cka"):
        if base in metric:
            return base
    raise ConfigError(f"cannot infer normalization for metric {metric!r}")


def normalize_to_unit(raw: np.ndarray, metric: str, layer_index: int = 0) -> SimilarityMatrix:
    """Metric-specific map of an averaged raw matrix into [0, 1].

    Frobenius distances flip and rescale by the off-diagonal maximum,
    cosines shift from [-1, 1] affinely, CKA values just clamp. The
    diagonal is forced to exactly 1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    base = _base_metric(metric)
    if base == "frobenius":
        return frobenius_normalize(raw, metric=metric, layer_index=layer_index)
    if base == "cosine":
        values = (raw + 1.0) / 2.0
    else:
        values = raw.copy()
    values = np.clip(values, 0.0, 1.0)
    np.fill_diagonal(values, 1.0)
    out = SimilarityMatrix(values=values, metric=metric, layer_index=layer_index)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# activation-based estimation
# ---------------------------------------------------------------------------

def gaussian_batches(
    seed: int, n_batches: int, tokens_per_batch: int, d_h: int
) -> list[np.ndarray]:
    """Deterministic standard-normal calibration batches."""
    if n_batches < 1 or tokens_per_batch < 1:
        raise InputError("need at least one batch of at least one token")
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((tokens_per_batch, d_h)) for _ in range(n_batches)]


def batches_from_tokens(
    tokens: np.ndarray, n_batches: int, tokens_per_batch: int
) -> list[np.ndarray]:
    """Slice a flat token matrix into consecutive fixed-size batches."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise DimensionError(f"token matrix must be 2-D, got {tokens.shape}")
    need = n_batches * tokens_per_batch
    if tokens.shape[0] < need:
        raise InputError(
            f"need {need} tokens ({n_batches} batches x {tokens_per_batch}), file holds {tokens.shape[0]}"
        )
    return [tokens[i * tokens_per_batch : (i + 1) * tokens_per_batch] for i in range(n_batches)]


def estimate_similarity_raw(
    model: "moe.MoEModel",
    batches: Iterable[np.ndarray],
    metric: str,
    params: KernelParams | None = None,
) -> list[np.ndarray]:
    """Accumulated raw pair scores averaged over batches, one matrix per layer.

    For each batch, every routed expert runs densely on the layer input,
    each unordered pair (diagonal included once) is scored, and the
    batch then advances through the standard routed forward to produce
    the next layer's input. Shared experts take part in the forward but
    never in the scoring.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}, expected one of {METRICS}")
    batch_list = [np.asarray(b, dtype=np.float64) for b in batches]
    if not batch_list:
        raise InputError("no calibration batches supplied")
    for b in batch_list:
        if b.ndim != 2 or b.shape[1] != model.d_h:
            raise DimensionError(
                f"calibration batches must be T x d_h with d_h={model.d_h}, got {b.shape}"
            )
        if not np.all(np.isfinite(b)):
            raise DomainError("calibration batch contains non-finite values")
    raw = [np.zeros((layer.n_experts, layer.n_experts)) for layer in model.layers]
    for batch in batch_list:
        x = batch
        for l, layer in enumerate(model.layers):
            slab = ActivationSlab(
                slabs=[moe.expert_forward(e, x, model.activation) for e in layer.experts]
            )
            m = slab.n_experts
            for p in range(m):
                for q in range(p, m):
                    s = _pair_raw(slab.slabs[p], slab.slabs[q], metric, params)
                    if p == q:
                        raw[l][p, p] += s
                    else:
                        raw[l][p, q] += s
                        raw[l][q, p] += s
            x = moe.layer_forward(layer, x, moe.route_topk(layer.router, x), model.activation)
    n = len(batch_list)
    return [r / n for r in raw]


def estimate_similarity(
    model: "moe.MoEModel",
    batches: Iterable[np.ndarray],
    metric: str,
    params: KernelParams | None = None,
) -> list[SimilarityMatrix]:
    """Per-layer similarity matrices from calibration batches."""
    raw = estimate_similarity_raw(model, batches, metric, params)
    return [normalize_to_unit(r, metric, layer_index=l) for l, r in enumerate(raw)]


# ---------------------------------------------------------------------------
# parameter-based estimation
# ---------------------------------------------------------------------------

def _combine_features(
    expert: "moe.ExpertWeights", combine: str, logic_order: str
) -> np.ndarray:
    if combine == "concat":
        # rows are treated as samples: d_h x 3*d_m
        return np.hstack([expert.w_up, expert.w_gate, expert.w_down.T])
    if combine == "logic":
        prod = expert.w_up * expert.w_gate
        if logic_order == "right":
            return prod @ expert.w_down  # d_h x d_h
        return expert.w_down @ prod  # d_m x d_m
    raise ConfigError(f"unknown combine {combine!r}, expected one of {COMBINES}")


def param_similarity(
    layer: "moe.MoELayer",
    combine: str,
    metric: str,
    params: KernelParams | None = None,
    layer_index: int = 0,
    logic_order: str = "right",
) -> SimilarityMatrix:
    """Similarity straight from expert weights, no calibration data.

    combine "concat" lines the three weight matrices up side by side;
    "logic" multiplies the elementwise gate/up product with the down
    projection. The down projection can sit on either side of that
    product (logic_order "right" or "left"); both are exposed because
    the composite is only defined up to that choice.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}, expected one of {METRICS}")
    if logic_order not in LOGIC_ORDERS:
        raise ConfigError(f"logic_order must be one of {LOGIC_ORDERS}, got {logic_order!r}")
    m = layer.n_experts
    if m < 2:
        raise InputError("parameter similarity needs at least two experts")
    feats = [_combine_features(e, combine, logic_order) for e in layer.experts]
    raw = np.zeros((m, m))
    for p in range(m):
        for q in range(p, m):
            s = _pair_raw(feats[p], feats[q], metric, params)
            raw[p, q] = s
            raw[q, p] = s
    return normalize_to_unit(raw, f"param-{combine}-{metric}", layer_index=layer_index)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def sim_json_name(layer_index: int) -> str:
    return f"sim.layer{layer_index}.json"


def sim_f32_name(layer_index: int) -> str:
    return f"sim.layer{layer_index}.f32"


def save_similarity(
    sim: SimilarityMatrix, directory: str | Path, write_f32: bool = True
) -> Path:
    """Write sim.layer{l}.json (and optionally a raw float32 twin)."""
    sim.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "metric": sim.metric,
        "layer": sim.layer_index,
        "n_experts": sim.values.shape[0],
        "values": [[float(v) for v in row] for row in sim.values],
    }
    path = directory / sim_json_name(sim.layer_index)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    if write_f32:
        (directory / sim_f32_name(sim.layer_index)).write_bytes(
            np.ascontiguousarray(sim.values, dtype="<f4").tobytes()
        )
    return path


def load_similarity(path: str | Path) -> SimilarityMatrix:
    payload = json.loads(Path(path).read_text())
    sim = SimilarityMatrix(
        values=np.asarray(payload["values"], dtype=np.float64),
        metric=str(payload["metric"]),
        layer_index=int(payload["layer"]),
    )
    sim.validate()
    return sim


def load_similarity_set(directory: str | Path, n_layers: int) -> list[SimilarityMatrix]:
    directory = Path(directory)
    sims = []
    for l in range(n_layers):
        path = directory / sim_json_name(l)
        if not path.is_file():
            raise InputError(f"missing similarity file {path}")
        sims.append(load_similarity(path))
    return sims


def mean_offdiagonal(sim: SimilarityMatrix) -> float:
    v = sim.values
    n = v.shape[0]
    if n < 2:
        return 1.0
    off = v[~np.eye(n, dtype=bool)]
    return float(off.sum() / off.size)


def write_mean_similarity_csv(sims: Sequence[SimilarityMatrix], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "mean_similarity"])
        for sim in sims:
            writer.writerow([sim.layer_index, repr(mean_offdiagonal(sim))])


def read_mean_similarity_csv(path: str | Path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["layer", "mean_similarity"]:
        raise InputError(f"{path} is not a mean-similarity table")
    return [(int(r[0]), float(r[1])) for r in rows[1:]]
