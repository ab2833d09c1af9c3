"""Command-line entry point for reproducible fusion/analysis experiment runs.

Exit codes: 0 success, 1 verification failure, 2 usage error.  Reports go to
stdout by default (``--out`` writes a file); errors are single-line JSON on
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, workload
from .attention import AttentionQuery, paged_attention, verify_drift_bound
from .core import LayerView, refold, unfold_bff
from .errors import DivergenceError, KvFuseError
from .fusion import FusionConfig, FusionReport, fuse_batch, fuse_chunks, reports_to_csv
from .kvff import load_cache, save_cache

EXIT_OK = 0
EXIT_VERIFICATION_FAILED = 1
EXIT_USAGE = 2


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _fail(exc: Exception) -> int:
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)
    return EXIT_USAGE


def _require_input(path: str) -> None:
    if not Path(path).is_file():
        raise KvFuseError(f"input file not found: {path}")


def _parse_grid(text: str) -> list[float]:
    values = [float(x) for x in text.split(",") if x.strip()]
    if not values:
        raise KvFuseError("threshold grid is empty")
    return values


def cmd_generate(args) -> int:
    if args.fixture:
        cache = workload.generate_fixture(args.fixture)
    else:
        _require_input(args.spec)
        cache = workload.generate(workload.SyntheticSpec.load_json(args.spec))
    save_cache(cache, args.out)
    return EXIT_OK


def cmd_fixtures(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, spec in workload.FIXTURE_SPECS.items():
        spec.save_json(out_dir / f"{name}.json")
        save_cache(workload.generate_fixture(name), out_dir / f"{name}.kvff")
    return EXIT_OK


def cmd_fuse(args) -> int:
    _require_input(args.input)
    cache = load_cache(args.input)
    cfg = FusionConfig(
        threshold=args.threshold, variant=args.variant, group_size=args.group_size
    )
    if args.variant == "cff":
        if args.chunk_tokens is None:
            raise KvFuseError("--chunk-tokens is required for variant cff")
        outcomes = fuse_chunks(cache, cfg, args.chunk_tokens)
    else:
        outcomes = fuse_batch(cache, cfg)
    reports = [o.report for o in outcomes]
    if args.format == "csv":
        _emit(reports_to_csv(reports), args.out)
    else:
        _emit(json.dumps([r.to_dict() for r in reports], sort_keys=True), args.out)
    return EXIT_OK


def _top_split_samples(cache, layer: int) -> tuple[analysis.SimilaritySampleSet, int, int]:
    """Cross similarities between the two request halves of one layer."""
    keys, _ = unfold_bff(cache, layer)
    mid = keys.rows // 2
    r = keys.r
    left = keys.vectors[:mid].reshape(-1, r)
    right = keys.vectors[mid:].reshape(-1, r)
    left_ok = keys.fusable[:mid].reshape(-1)
    right_ok = keys.fusable[mid:].reshape(-1)
    sims = np.clip(left[left_ok] @ right[right_ok].T, -1.0, 1.0).ravel()
    samples = analysis.SimilaritySampleSet(samples=sims, layer=layer, source="bff")
    return samples, int(left_ok.sum()), int(right_ok.sum())


def cmd_analyze(args) -> int:
    _require_input(args.input)
    cache = load_cache(args.input)
    grid = _parse_grid(args.thresholds)
    L = cache.dims.L
    per_layer = [_top_split_samples(cache, layer) for layer in range(L)]
    rows = []
    for u in grid:
        gauss_rates = []
        for layer, (samples, m1, m2) in enumerate(per_layer):
            mu, sigma = analysis.layer_moments(samples)
            h = args.bandwidth or analysis.silverman_bandwidth(samples)
            with np.errstate(over="ignore"):
                lam_evt = analysis.poisson_rate_evt(samples, h, u)
            lam_gauss = analysis.poisson_rate_gaussian(samples.n, mu, sigma, u)
            gauss_rates.append(analysis.LayerRate(layer=layer, u=u, lam=lam_gauss, method="gaussian"))
            rows.append(
                {
                    "layer": layer,
                    "u": u,
                    "lambda_evt": lam_evt,
                    "lambda_gauss": lam_gauss,
                    "p_no_fusion": analysis.prob_no_fusion(gauss_rates[-1]),
                }
            )
        m1, m2 = per_layer[0][1], per_layer[0][2]
        try:
            cr = analysis.predicted_compression_ratio(L, m1, m2, gauss_rates)
        except DivergenceError:
            cr = float("inf")
        for row in rows[-L:]:
            row["cr_predicted"] = cr
    if args.format == "csv":
        lines = ["layer,u,lambda_evt,lambda_gauss,cr_predicted,p_no_fusion"]
        for row in rows:
            lines.append(
                f"{row['layer']},{row['u']:.6g},{row['lambda_evt']:.6g},"
                f"{row['lambda_gauss']:.6g},{row['cr_predicted']:.6g},{row['p_no_fusion']:.6g}"
            )
        _emit("\n".join(lines), args.out)
    else:
        _emit(json.dumps(rows, sort_keys=True), args.out)
    return EXIT_OK


def _mean_drift(cache, outcomes, queries: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    dims = cache.dims
    drifts = []
    for outcome in outcomes:
        layer = outcome.report.layer
        baseline = LayerView(keys=cache.keys[layer], values=cache.values[layer])
        fused_view = refold(outcome.fused)
        for _ in range(queries):
            query = AttentionQuery(
                q=rng.standard_normal(dims.d),
                head=int(rng.integers(dims.h)),
                layer=layer,
            )
            row = int(rng.integers(dims.B))
            _, s = paged_attention(query, baseline, row)
            _, s_prime = paged_attention(query, fused_view, row)
            drifts.append(float(np.abs(s_prime.probs - s.probs).sum()))
    return float(np.mean(drifts)) if drifts else 0.0


def cmd_sweep(args) -> int:
    _require_input(args.input)
    cache = load_cache(args.input)
    grid = _parse_grid(args.thresholds)
    L = cache.dims.L
    lines = [
        "threshold,cr_empirical,cr_predicted,mean_drift,"
        + ",".join(f"lambda_{layer}" for layer in range(L))
    ]
    for thr in grid:
        cfg = FusionConfig(threshold=thr, variant="bff", group_size=args.group_size)
        outcomes = fuse_batch(cache, cfg)
        combined = FusionReport.aggregate([o.report for o in outcomes])
        cr_emp = combined.compression_ratio
        lams = [
            analysis.predicted_layer_fusions(o.report.merge_records, thr, method="kde-tail")
            for o in outcomes
        ]
        fused_pred = sum(lams)
        if fused_pred < combined.blocks_before:
            cr_pred = combined.blocks_before / (combined.blocks_before - fused_pred)
        else:
            cr_pred = float("inf")
        drift = _mean_drift(cache, outcomes, args.queries, args.seed)
        lines.append(
            f"{thr:.6g},{cr_emp:.6g},{cr_pred:.6g},{drift:.6g},"
            + ",".join(f"{lam:.6g}" for lam in lams)
        )
    _emit("\n".join(lines), args.out)
    return EXIT_OK


def cmd_verify_bound(args) -> int:
    report = verify_drift_bound(
        trials=args.trials, d=args.dim, u=args.u, n_keys=args.keys, seed=args.seed
    )
    _emit(json.dumps(report, sort_keys=True), args.out)
    return EXIT_OK if report["violations"] == 0 else EXIT_VERIFICATION_FAILED


def cmd_bench(args) -> int:
    _require_input(args.input)
    cache = load_cache(args.input)
    cfg = FusionConfig(threshold=args.threshold, variant="bff")
    timings = []
    cr = 1.0
    for _ in range(args.repeat):
        start = time.perf_counter()
        outcomes = fuse_batch(cache, cfg)
        timings.append(time.perf_counter() - start)
        combined = FusionReport.aggregate([o.report for o in outcomes])
        cr = combined.compression_ratio
    _emit(
        json.dumps(
            {
                "repeat": args.repeat,
                "threshold": args.threshold,
                "mean_seconds": float(np.mean(timings)),
                "min_seconds": float(np.min(timings)),
                "compression_ratio": cr,
            },
            sort_keys=True,
        ),
        args.out,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic cache (KVFF)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--spec", help="synthetic spec JSON file")
    group.add_argument("--fixture", choices=sorted(workload.FIXTURE_SPECS), help="named fixture")
    p.add_argument("--out", required=True, help="output KVFF path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fixtures", help="regenerate all named test fixtures")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("fuse", help="fuse a cache and report per-layer statistics")
    p.add_argument("--input", required=True, help="input KVFF file")
    p.add_argument("--variant", choices=["bff", "cff"], default="bff")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--chunk-tokens", type=int, default=None)
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("analyze", help="KDE/Poisson exceedance-rate analysis")
    p.add_argument("--input", required=True)
    p.add_argument("--thresholds", required=True, help="comma-separated u grid")
    p.add_argument("--bandwidth", type=float, default=None, help="override KDE bandwidth")
    p.add_argument("--format", choices=["json", "csv"], default="csv")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="threshold sweep: empirical vs predicted CR and drift")
    p.add_argument("--input", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--queries", type=int, default=5, help="drift-measurement queries per layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-bound", help="randomized check of the softmax drift bound")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--u", type=float, required=True)
    p.add_argument("--keys", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_bound)

    p = sub.add_parser("bench", help="time fusion runs on a cache")
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KvFuseError as exc:
        return _fail(exc)
    except OSError as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
