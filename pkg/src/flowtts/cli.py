"""Command-line front end.

Verbs: sample, tts, sweep, btfit, umf-demo.  Every command is
deterministic given its full flag set and seed: floats are written with
repr (shortest round-trip form), JSON keys are sorted, and no timestamps
appear in any output, so reruns produce byte-identical files.  Exit code
0 means all requested checks passed; a machine-readable summary is
written even when a check fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import fusion, preference
from . import rng as rngmod
from .flows import FlowSpec, StepSchedule, ode_solve_batch, sde_solve_batch
from .harness import SweepConfig, run_sweep
from .ledger import BudgetLedger
from .search import TRACE_COLUMNS, load_tts_config, trace_rows, tts_run
from .tasks import load_suite, suite_to_csv
from .verifiers import raw_scores


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return "" if value is None else str(value)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) if isinstance(row, dict) else _fmt(row[i])
                             for i, h in enumerate(header)])


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _default_workers() -> int:
    return int(os.environ.get("FLOWTTS_WORKERS", "1"))


# ---------------------------------------------------------------------------
# sample


def cmd_sample(args) -> int:
    spec = FlowSpec.load(args.spec)
    schedule = StepSchedule.uniform(args.steps)
    n = args.seeds
    x1 = np.stack([rngmod.stream(args.seed, rngmod.INIT, i).standard_normal(spec.dim)
                   for i in range(n)])
    ledger = BudgetLedger()
    if args.mode == "ode":
        finals = ode_solve_batch(spec, x1, schedule, ledger=ledger)
    else:
        noise = np.stack([rngmod.stream(args.seed, rngmod.SDE, i)
                          .standard_normal((schedule.count, spec.dim))
                          for i in range(n)])
        finals = sde_solve_batch(spec, x1, schedule, args.sigma, noise=noise,
                                 ledger=ledger)
    nfe_per_row = ledger.velocity_total // n
    header = ["seed"] + [f"coord_{i}" for i in range(spec.dim)] + ["nfe"]
    rows = [[i] + [float(v) for v in finals[i]] + [nfe_per_row]
            for i in range(n)]
    _write_csv(args.out, header, rows)
    return 0


# ---------------------------------------------------------------------------
# tts


def cmd_tts(args) -> int:
    suite = load_suite(args.suite)
    config, vcfg = load_tts_config(args.config)
    if args.blind:
        vcfg = type(vcfg)(verifiers=vcfg.verifiers, blind=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    all_rows = []
    summary = {"config": config.to_json(), "verifiers": vcfg.to_json(),
               "seed": args.seed, "instances": []}
    for inst in suite.instances:
        res = tts_run(inst, inst.posterior, config, vcfg,
                      (args.seed, 0, inst.index))
        for row in trace_rows(res):
            row["instance"] = inst.index
            all_rows.append(row)
        best_last = (max(c.report.ensemble for c in res.trace[-1].candidates)
                     if res.trace else None)
        summary["instances"].append({
            "index": inst.index,
            "final_value": [float(v) for v in res.x0],
            "final_scores": {k: float(v) for k, v in
                             raw_scores(res.x0, inst, vcfg).items()},
            "best_ensemble_last_round": best_last,
            "final_uid": res.final_uid,
            "nfe": res.ledger.as_dict(),
            "nfe_predicted": res.nfe_predicted,
        })
    _write_csv(out / "trace.csv", ["instance"] + list(TRACE_COLUMNS), all_rows)
    _write_json(out / "summary.json", summary)
    return 0


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> int:
    with open(args.config) as fh:
        obj = json.load(fh)
    if args.blind:
        obj["blind"] = True
    if args.seed is not None:
        obj["suite_seed"] = args.seed
    cfg = SweepConfig.from_json(obj)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = run_sweep(cfg, workers=args.workers)

    pareto_header = ["label", "pool", "K", "N", "M", "S", "T",
                     "nfe_velocity", "nfe_predicted", "mean_reward",
                     "std_reward", "p_vs_no_tts", "tts_mean_in_pool",
                     "p_tts_beats_baseline"]
    rows = []
    for row in result["points"] + result["baselines"]:
        rows.append({h: row.get(h) for h in pareto_header})
    _write_csv(out / "pareto.csv", pareto_header, rows)

    if result["ablation"]:
        _write_csv(out / "ablation.csv",
                   ["verifiers", "mean_ensemble", "mean_oracle_fid",
                    "nfe_velocity"], result["ablation"])

    from .tasks import make_suite
    suite_to_csv(make_suite(cfg.suite_seed, cfg.suite_count, cfg.suite),
                 out / "suite.csv")
    _write_json(out / "summary.json", result)

    flag = "pass" if result["monotone_ladder"] else "fail"
    print(f"monotone ladder trend: {flag}")
    print(f"nfe ratio (match point vs no search): "
          f"{result['nfe_ratio_match_vs_first']:.2f}")
    return 0 if result["checks_pass"] else 1


# ---------------------------------------------------------------------------
# btfit


def cmd_btfit(args) -> int:
    try:
        matrix = preference.read_comparisons_csv(args.comparisons)
        fit = preference.bt_fit(matrix, smoothing=args.smoothing)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    preference.write_scores_csv(fit, args.out)
    if args.topk:
        try:
            table = preference.read_selection_csv(args.topk)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        preference.write_topk_csv(table, args.topk_out)
    return 0


# ---------------------------------------------------------------------------
# umf-demo


def cmd_umf_demo(args) -> int:
    lengths = tuple(int(v) for v in args.lengths.split(","))
    if len(lengths) != 3:
        print("error: --lengths needs three comma-separated values",
              file=sys.stderr)
        return 2
    d = args.d_model
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed)))
    seq = fusion.build_sequence(gen.standard_normal((lengths[0], d)),
                                gen.standard_normal((lengths[1], d)),
                                gen.standard_normal((lengths[2], d)))
    embed = gen.standard_normal((3, d))
    encoded = fusion.encode_positions(seq, embed)
    weights = fusion.BlockWeights.create(d, seed=args.seed,
                                         zero_output=args.zero_weights)
    out, probs = fusion.block_forward(encoded, weights, return_attention=True)

    lines = [f"sequence: {seq.tokens.shape[0]}x{d} "
             f"(latent {lengths[0]}, image {lengths[1]}, text {lengths[2]})",
             f"block output: {out.tokens.shape[0]}x{out.tokens.shape[1]}"]
    if args.zero_weights:
        identical = np.array_equal(out.tokens, encoded.tokens)
        lines.append(f"residual identity (zero output weights): "
                     f"{'pass' if identical else 'fail'}")
    row_sums = probs.sum(axis=-1)
    lines.append(f"attention rows sum to 1: "
                 f"{'pass' if np.allclose(row_sums, 1.0, atol=1e-12) else 'fail'}")

    perm = gen.permutation(seq.tokens.shape[0])
    permuted = fusion.SequenceBatch(tokens=encoded.tokens[perm],
                                    lengths=encoded.lengths,
                                    positions=encoded.positions[perm],
                                    modality=encoded.modality[perm])
    out_perm = fusion.block_forward(permuted, weights)
    err = np.max(np.abs(out_perm.tokens - out.tokens[perm]))
    lines.append(f"permutation equivariance: max err {err:.3e} "
                 f"({'pass' if err <= 1e-9 else 'fail'})")
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report)
    return 0 if "fail" not in report else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowtts",
        description="test-time scaling laboratory for flow-matching restoration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw terminal samples from a flow spec")
    p.add_argument("--spec", required=True, help="flow spec JSON file")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--seeds", type=int, default=8, help="number of trajectories")
    p.add_argument("--mode", choices=("ode", "sde"), default="ode")
    p.add_argument("--sigma", type=float, default=0.5, help="SDE noise scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("tts", help="run the search over an instance suite")
    p.add_argument("--suite", required=True, help="suite JSON file")
    p.add_argument("--config", required=True, help="search config JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blind", action="store_true",
                   help="force observation-consistency fidelity")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_tts)

    p = sub.add_parser("sweep", help="budget ladder, baselines, ablation")
    p.add_argument("--config", required=True, help="sweep config JSON file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the suite seed")
    p.add_argument("--workers", type=int, default=_default_workers())
    p.add_argument("--blind", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("btfit", help="fit pairwise-preference scores")
    p.add_argument("--comparisons", required=True, help="comparisons CSV")
    p.add_argument("--smoothing", type=float, default=0.0,
                   help="pseudo-wins added both ways per pair")
    p.add_argument("--topk", default=None, help="optional ranking table CSV")
    p.add_argument("--topk-out", default="topk.csv")
    p.add_argument("--out", required=True, help="scores CSV path")
    p.set_defaults(func=cmd_btfit)

    p = sub.add_parser("umf-demo", help="token-fusion block shape report")
    p.add_argument("--lengths", default="2,3,4",
                   help="latent,image,text token counts")
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-weights", action="store_true")
    p.add_argument("--out", default=None, help="optional report file")
    p.set_defaults(func=cmd_umf_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
