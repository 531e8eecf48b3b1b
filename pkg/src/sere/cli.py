"""Command-line front end.

Subcommands: gen-model, calibrate, reroute, simulate, verify-bound.
Exit codes: 0 on success, 1 when a verified property fails to hold,
2 on usage or validation errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bounds, moe, rerouting, similarity, simulator
from .errors import InputError, SereError

PHASE_FLAGS = {"all": "all_phases", "decode-only": "decode_only"}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="sere",
        description="Similarity-based expert re-routing toolkit for batched MoE decoding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    def register(name: str, **kwargs) -> argparse.ArgumentParser:
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="JSON file of defaults, overridden by explicit flags")
        registry[name] = p
        return p

    p = register("gen-model", help="generate and serialize a random toy MoE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--topk", type=int, default=2)
    p.add_argument("--dh", type=int, default=16)
    p.add_argument("--dm", type=int, default=32)
    p.add_argument("--shared", type=int, default=0)
    p.add_argument("--activation", choices=moe.ACTIVATIONS, default="silu")
    p.add_argument("-o", "--out", required=True, help="output model directory")
    p.set_defaults(func=cmd_gen_model)

    p = register("calibrate", help="estimate per-layer expert similarity matrices")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--metric", choices=similarity.METRICS, default="frobenius")
    p.add_argument("--n-seqs", type=int, default=4, help="number of calibration batches")
    p.add_argument("--seq-len", type=int, default=8, help="tokens per calibration batch")
    p.add_argument("--calib", default="gaussian:0", help="gaussian:<seed> or file:<path>")
    p.add_argument("--from-params", action="store_true", help="score raw weights, no data")
    p.add_argument("--combine", choices=similarity.COMBINES, default="concat")
    p.add_argument("--logic-order", choices=similarity.LOGIC_ORDERS, default="right")
    p.add_argument("--rbf-sigma", default=similarity.MEDIAN_HEURISTIC)
    p.add_argument("--poly-c", type=float, default=1.0)
    p.add_argument("--poly-degree", type=int, default=2)
    p.add_argument("-o", "--out", required=True, help="output directory for sim files")
    p.set_defaults(func=cmd_calibrate)

    p = register("reroute", help="rewrite routing for one batch and dump the trace")
    p.add_argument("--model", help="model directory (model mode)")
    p.add_argument("--sims", help="directory of sim.layer{l}.json files (model mode)")
    p.add_argument("--assignment", help="JSON routing assignment (single-layer mode)")
    p.add_argument("--sim", help="one sim.layer JSON file (single-layer mode)")
    p.add_argument("--retain", type=int, default=1, help="slots kept as primary (S)")
    p.add_argument("--threshold", type=float, default=0.5, help="similarity floor (rho)")
    p.add_argument("--phase", choices=sorted(PHASE_FLAGS), default="all")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0, help="seed for the input embeddings")
    p.add_argument("-o", "--out", help="trace JSON path")
    p.set_defaults(func=cmd_reroute)

    p = register("simulate", help="activation statistics and latency projections")
    p.add_argument("--mode", choices=("uniform", "model"), default="uniform")
    p.add_argument("--experts", type=int, default=8, help="M for the uniform source")
    p.add_argument("--topk", type=_int_list, default=[2], help="comma-separated K values")
    p.add_argument("--batch-sizes", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", help="model directory (model mode)")
    p.add_argument("--sims", help="similarity directory enabling rewriting (model mode)")
    p.add_argument("--retain", type=int, default=1)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--cost-params", help="cost breakdown JSON (default: packaged reference)")
    p.add_argument("-o", "--out", required=True, help="output directory for CSV files")
    p.set_defaults(func=cmd_simulate)

    p = register("verify-bound", help="run substitution-error bound experiments")
    p.add_argument("--seeds", type=int, default=100, help="experiments run on seeds 0..N-1")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--topk", type=int, default=2)
    p.add_argument("--dh", type=int, default=4)
    p.add_argument("--dm", type=int, default=8)
    p.add_argument("--replacement", choices=("random", "identity"), default="random")
    p.add_argument("--downstream", choices=("linear", "nonlinear"), default="linear")
    p.add_argument("-o", "--out", default="bound_report.csv")
    p.set_defaults(func=cmd_verify_bound)

    return parser, registry


def _extract_config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def cmd_gen_model(args: argparse.Namespace) -> int:
    model = moe.gen_model(
        seed=args.seed,
        n_layers=args.layers,
        n_experts=args.experts,
        top_k=args.topk,
        d_h=args.dh,
        d_m=args.dm,
        n_shared=args.shared,
        activation=args.activation,
    )
    moe.save_model(model, args.out)
    per_expert = 3 * args.dh * args.dm
    n_params = args.layers * ((args.experts + args.shared) * per_expert + args.dh * args.experts)
    print(f"model written to {args.out}")
    print(
        f"layers={args.layers} experts={args.experts} top_k={args.topk} "
        f"d_h={args.dh} d_m={args.dm} shared={args.shared} activation={args.activation}"
    )
    print(f"parameters: {n_params}")
    return 0


def _calibration_batches(source: str, n_seqs: int, seq_len: int, d_h: int) -> list[np.ndarray]:
    if source.startswith("gaussian:"):
        seed = int(source.removeprefix("gaussian:"))
        return similarity.gaussian_batches(seed, n_seqs, seq_len, d_h)
    if source.startswith("file:"):
        path = Path(source.removeprefix("file:"))
        if not path.is_file():
            raise InputError(f"calibration file {path} not found")
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        if raw.size == 0 or raw.size % d_h != 0:
            raise InputError(
                f"calibration file holds {raw.size} float32 values, "
                f"which is not a positive multiple of the model width d_h={d_h}"
            )
        tokens = raw.reshape(-1, d_h).astype(np.float64)
        return similarity.batches_from_tokens(tokens, n_seqs, seq_len)
    raise InputError(f"calib must be gaussian:<seed> or file:<path>, got {source!r}")


def cmd_calibrate(args: argparse.Namespace) -> int:
    model = moe.load_model(args.model)
    sigma = args.rbf_sigma
    if isinstance(sigma, str) and sigma != similarity.MEDIAN_HEURISTIC:
        sigma = float(sigma)
    params = similarity.KernelParams(
        rbf_sigma=sigma, poly_c=args.poly_c, poly_degree=args.poly_degree
    )
    if args.from_params:
        sims = [
            similarity.param_similarity(
                layer,
                args.combine,
                args.metric,
                params,
                layer_index=l,
                logic_order=args.logic_order,
            )
            for l, layer in enumerate(model.layers)
        ]
    else:
        batches = _calibration_batches(args.calib, args.n_seqs, args.seq_len, model.d_h)
        sims = similarity.estimate_similarity(model, batches, args.metric, params)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for sim in sims:
        similarity.save_similarity(sim, outdir)
    similarity.write_mean_similarity_csv(sims, outdir / "sim_means.csv")
    for sim in sims:
        print(f"layer {sim.layer_index}: mean similarity {similarity.mean_offdiagonal(sim):.6f}")
    print(f"similarity files written to {outdir}")
    return 0


def _print_reroute_summary(layer: int, base: int, result: rerouting.RerouteResult) -> None:
    post = len(result.final_active)
    print(f"layer {layer}: active experts {base} -> {post} (reduction {base - post})")
    for u in sorted(result.reroute_map):
        print(f"layer {layer}: reroute expert {u} -> expert {result.reroute_map[u]}")
    for e in sorted(result.preserved_critical):
        print(f"layer {layer}: preserved critical expert {e}")


def cmd_reroute(args: argparse.Namespace) -> int:
    config = rerouting.RerouteConfig(
        retain_count=args.retain,
        threshold=args.threshold,
        phase_mode=PHASE_FLAGS[args.phase],
    )
    if args.assignment:
        if not args.sim:
            raise InputError("single-layer mode needs --sim alongside --assignment")
        payload = json.loads(Path(args.assignment).read_text())
        assignment = moe.RoutingAssignment(
            indices=np.asarray(payload["indices"], dtype=np.int64),
            weights=np.asarray(payload["weights"], dtype=np.float64),
        )
        sim = similarity.load_similarity(args.sim)
        result = rerouting.apply_sere(assignment, sim, config)
        base = int(np.unique(assignment.indices).size)
        _print_reroute_summary(0, base, result)
        if args.out:
            layers = [
                {
                    "layer": 0,
                    "original_indices": assignment.indices.tolist(),
                    **rerouting.result_to_dict(result),
                }
            ]
            rerouting.save_trace(layers, args.out)
            print(f"trace written to {args.out}")
        return 0

    if not args.model or not args.sims:
        raise InputError("model mode needs --model and --sims (or use --assignment/--sim)")
    model = moe.load_model(args.model)
    sims = similarity.load_similarity_set(args.sims, model.n_layers)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch_size, model.d_h))
    res = moe.model_forward(model, moe.TokenBatch(x, "decode"), config=config, sims=sims)
    layers = []
    for l, trace in enumerate(res.layers):
        base = int(np.unique(trace.original.indices).size)
        _print_reroute_summary(l, base, trace.reroute)
        layers.append(
            {
                "layer": l,
                "original_indices": trace.original.indices.tolist(),
                **rerouting.result_to_dict(trace.reroute),
            }
        )
    if args.out:
        rerouting.save_trace(layers, args.out)
        print(f"trace written to {args.out}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    breakdown = simulator.load_cost_breakdown(args.cost_params)
    if args.mode == "uniform":
        stats = simulator.sweep_activation(
            args.experts, args.batch_sizes, args.topk, trials=args.trials, seed=args.seed
        )
    else:
        if not args.model:
            raise InputError("model mode needs --model")
        model = moe.load_model(args.model)
        config = None
        sims = None
        if args.sims:
            sims = similarity.load_similarity_set(args.sims, model.n_layers)
            config = rerouting.RerouteConfig(
                retain_count=args.retain, threshold=args.threshold, phase_mode="all_phases"
            )
        stats = simulator.sweep_activation(
            model,
            args.batch_sizes,
            args.topk,
            trials=args.trials,
            seed=args.seed,
            config=config,
            sims=sims,
        )
    simulator.write_activation_csv(stats.sweep, outdir / "activation_sweep.csv")
    tpot_rows: list[tuple[str, int, float, float]] = []
    for p in stats.sweep:
        row = simulator.breakdown_row(breakdown, p.batch_size)
        post = p.mean_count if p.post_count is None else p.post_count
        base_lat, sere_lat, speed = simulator.tpot_rows_from_breakdown(row, p.mean_count, post)
        label = f"batch={p.batch_size} k={p.top_k}"
        tpot_rows.append((f"baseline {label}", p.layer, base_lat, 1.0))
        if p.post_count is not None:
            tpot_rows.append((f"sere {label}", p.layer, sere_lat, speed))
    simulator.write_tpot_csv(tpot_rows, outdir / "tpot.csv")
    for p in stats.sweep:
        extra = "" if p.post_count is None else f" -> {p.post_count:.4f} after rewrite"
        print(
            f"batch={p.batch_size} K={p.top_k} layer={p.layer}: "
            f"mean activated {p.mean_count:.4f}{extra}"
        )
    print(f"wrote {outdir / 'activation_sweep.csv'} and {outdir / 'tpot.csv'}")
    return 0


def cmd_verify_bound(args: argparse.Namespace) -> int:
    if args.downstream == "nonlinear":
        raise InputError("only a linear downstream chain can be verified exactly")
    if args.seeds < 1:
        raise InputError(f"--seeds must be >= 1, got {args.seeds}")
    entries: list[tuple[int, int, bounds.BoundReport]] = []
    all_hold = True
    for seed in range(args.seeds):
        exp = bounds.make_bound_experiment(
            seed,
            n_layers=args.layers,
            n_experts=args.experts,
            top_k=args.topk,
            d_h=args.dh,
            d_m=args.dm,
            n_samples=args.samples,
            replacement=args.replacement,
        )
        rep = bounds.measure_substitution_error(exp)
        entries.append((seed, exp.layer_index, rep))
        all_hold = all_hold and rep.holds_tight and rep.holds_loose and rep.holds_samplewise
    bounds.write_bound_csv(entries, args.out)
    print(f"ran {len(entries)} experiments, report written to {args.out}")
    if all_hold:
        print("bound verified: every experiment satisfies both inequalities")
        return 0
    print("BOUND VIOLATED: see report for failing rows")
    return 1


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    try:
        cfg_path = _extract_config_path(argv)
        if cfg_path is not None and argv and argv[0] in registry:
            cfg = json.loads(Path(cfg_path).read_text())
            if not isinstance(cfg, dict):
                raise InputError("--config must hold a JSON object")
            sp = registry[argv[0]]
            valid = {a.dest for a in sp._actions}
            unknown = sorted(set(cfg) - valid)
            if unknown:
                raise InputError(f"unknown config keys: {unknown}")
            sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
        return int(args.func(args))
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    except SereError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
