"""Command-line entry points."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from vfboost import attacks
from vfboost.boost import Dataset, TreeModel, predict, train_centralized
from vfboost.data import gen_synthetic, vertical_split, write_csv
from vfboost.errors import CalibrationError, ProtocolError, SchemaError
from vfboost.experiment import (ExperimentConfig, load_dataset, run_experiment,
                                summary_csv)
from vfboost.metrics import auc
from vfboost.privacy import (PrivacyConfig, calibrate, calibrate_sigma2,
                             utility_bound)
from vfboost.protocol import (ProtocolTranscript, replay, train_ldp_baseline,
                              train_masked)


def _emit(args, doc: dict) -> None:
    if args.json:
        print(json.dumps(doc, sort_keys=True))
        return
    for key, value in doc.items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True)
        print(f"{key}: {value}")


def _config(args) -> ExperimentConfig:
    config = (ExperimentConfig.from_file(args.config) if args.config
              else ExperimentConfig())
    overrides = {}
    if getattr(args, "data", None):
        overrides["data"] = args.data
    if getattr(args, "full", False):
        overrides.update(rounds=60, depth=6)
    return dataclasses.replace(config, **overrides) if overrides else config


def cmd_gen_data(args) -> int:
    data = gen_synthetic(args.n, args.d_ap, args.d_pp, args.balance,
                         args.label_noise, args.seed, args.separation)
    path = args.out or "synthetic.csv"
    write_csv(path, data)
    _emit(args, {"path": path, "n": data.n, "d": data.d,
                 "positive_rate": float(data.labels.mean())})
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    data, ap_cols, pp_cols = load_dataset(config)
    ap_data, pp_features = vertical_split(data, ap_cols, pp_cols)
    params = config.boost_params
    out_dir = args.out or "train_out"
    os.makedirs(out_dir, exist_ok=True)
    eps = args.eps_ap if args.eps_ap is not None else config.eps_ap[-1]
    doc = {"method": args.method, "n": data.n}
    if args.method == "centralized":
        merged = Dataset(np.hstack([ap_data.features, pp_features]), data.labels)
        model = train_centralized(merged, params)
        probs = predict(model, merged.features)
        table = None
    elif args.method == "masked":
        privacy = calibrate(config.privacy_config(eps, data.n), data.n,
                            config.sigma1, config.releases_per_node,
                            config.mc_samples, args.seed)
        result = train_masked(ap_data, pp_features, params, privacy, args.seed,
                              retain_payloads=args.retain_payloads)
        model, table = result.model, result.pp_table
        result.transcript.write(os.path.join(out_dir, "transcript.ndjson"))
        probs = predict(model, ap_data.features, pp_features, table)
        doc.update(eps_ap=eps, messages=len(result.transcript),
                   transcript_digest=result.transcript.digest(),
                   calibration=privacy.to_dict())
    else:
        result = train_ldp_baseline(ap_data, pp_features, params, eps,
                                    config.delta_ap, args.seed,
                                    config.composition,
                                    config.releases_per_node)
        model, table = result.model, result.pp_table
        probs = predict(model, ap_data.features, pp_features, table)
        doc.update(eps_ap=eps)
    with open(os.path.join(out_dir, "model.json"), "w", encoding="utf-8") as fh:
        fh.write(model.to_json())
    if table is not None:
        with open(os.path.join(out_dir, "pp_table.json"), "w",
                  encoding="utf-8") as fh:
            json.dump({"columns": [data.feature_names[j] for j in pp_cols],
                       "table": table}, fh)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config.to_text())
    doc.update(trees=len(model.trees), status=model.status,
               train_auc=auc(data.labels, probs), out=out_dir)
    _emit(args, doc)
    return 0


def cmd_calibrate(args) -> int:
    config = PrivacyConfig(eps_ap=args.eps_ap, delta_ap=args.delta_ap,
                           eps_pp=args.eps_pp,
                           delta_pp=args.delta_pp or 1.0 / args.n, W=args.W,
                           rounds=args.rounds, max_depth=args.depth,
                           composition=args.composition,
                           pp_accounting=args.pp_accounting)
    params = calibrate(config, args.n, args.sigma1, args.releases_per_node,
                       args.samples, args.seed)
    doc = params.to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
    _emit(args, doc)
    return 0


def cmd_bound(args) -> int:
    value = utility_bound(args.alpha, args.kappa, args.g_left, args.h_left,
                          args.g_right, args.h_right, args.lam)
    _emit(args, {"U": value, "U_clipped": min(1.0, value)})
    return 0


def cmd_attack_ap(args) -> int:
    report = attacks.label_attack_trials(
        args.n, args.eps_ap, args.delta_ap, args.W, args.trials, args.seed,
        eps_pp=args.eps_pp, C=args.C, attacker=args.attacker)
    _write_report(args, report)
    return 0


def cmd_attack_pp(args) -> int:
    sigma2 = args.sigma2
    if sigma2 is None:
        sigma2 = calibrate_sigma2(args.eps_pp, args.delta_pp or 1.0 / args.n,
                                  args.W, max(args.n, 3), args.sigma1)
    report = attacks.attribute_attack_trials(args.n, args.n_active,
                                             args.sigma1, sigma2, args.W,
                                             args.trials, args.seed)
    _write_report(args, report)
    return 0


def _write_report(args, report) -> None:
    doc = report.to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
    if not args.json:
        doc = {k: v for k, v in doc.items() if k != "metrics"}
    _emit(args, doc)


def cmd_run(args) -> int:
    config = _config(args)
    if args.out:
        config = dataclasses.replace(config, out=args.out)
    if not config.out:
        config = dataclasses.replace(config, out="results")
    records = run_experiment(config)
    if args.json:
        for record in records:
            print(json.dumps(record, sort_keys=True))
    else:
        sys.stdout.write(summary_csv(records))
    return 0


def cmd_replay(args) -> int:
    run_dir = args.dir
    config = ExperimentConfig.from_file(os.path.join(run_dir, "config.txt"))
    if args.data:
        config = dataclasses.replace(config, data=args.data)
    data, ap_cols, pp_cols = load_dataset(config)
    _, pp_features = vertical_split(data, ap_cols, pp_cols)
    with open(os.path.join(run_dir, "pp_table.json"), encoding="utf-8") as fh:
        table = [tuple(x) for x in json.load(fh)["table"]]
    with open(os.path.join(run_dir, "model.json"), encoding="utf-8") as fh:
        model = TreeModel.from_json(fh.read())
    transcript = ProtocolTranscript.read(os.path.join(run_dir,
                                                      "transcript.ndjson"))
    report = replay(transcript, pp_features, table, model.lam, model.gamma)
    _emit(args, {"nodes": report.nodes, "ok": report.ok,
                 "mismatches": report.mismatches})
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help="output path")
    common.add_argument("--json", action="store_true",
                        help="print machine-readable JSON")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="vfboost", parents=[common],
        description="Two-party vertically partitioned boosting with "
        "structured noise.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="write a synthetic CSV dataset")
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--d-ap", type=int, default=3)
    p.add_argument("--d-pp", type=int, default=3)
    p.add_argument("--balance", type=float, default=0.5)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--separation", type=float, default=4.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--method", choices=["centralized", "masked", "ldp-baseline"],
                   default="masked")
    p.add_argument("--data", help="CSV path or 'synthetic' (overrides config)")
    p.add_argument("--eps-ap", type=float,
                   help="total AP epsilon (default: last grid value)")
    p.add_argument("--retain-payloads", action="store_true",
                   help="store full message payloads for replay")
    p.add_argument("--full", action="store_true",
                   help="60 rounds of depth-6 trees")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[common],
                       help="derive noise parameters from budgets")
    p.add_argument("--eps-ap", type=float, default=1.0)
    p.add_argument("--delta-ap", type=float, default=1e-3)
    p.add_argument("--eps-pp", type=float, default=1.0)
    p.add_argument("--delta-pp", type=float, help="default 1/n")
    p.add_argument("--W", type=int, default=1)
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--n", type=int, default=3200, help="root instance count")
    p.add_argument("--sigma1", type=float, default=1.0)
    p.add_argument("--composition", choices=["basic", "advanced"],
                   default="advanced")
    p.add_argument("--pp-accounting", choices=["per-release", "composed"],
                   default="per-release")
    p.add_argument("--releases-per-node", type=int, default=1)
    p.add_argument("--samples", type=int, default=10**6)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bound", parents=[common],
                       help="evaluate the split-score deviation bound")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--g-left", type=float, required=True)
    p.add_argument("--h-left", type=float, required=True)
    p.add_argument("--g-right", type=float, required=True)
    p.add_argument("--h-right", type=float, required=True)
    p.add_argument("--lam", type=float, default=1.0)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("attack-ap", parents=[common],
                       help="label inference against AP's masked gradients")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--eps-ap", type=float, default=0.5)
    p.add_argument("--delta-ap", type=float, default=1e-3)
    p.add_argument("--eps-pp", type=float, default=1.0)
    p.add_argument("--W", type=int, default=1)
    p.add_argument("--C", type=float, help="override the calibrated radius")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--attacker", choices=["projection", "naive"],
                   default="projection")
    p.set_defaults(func=cmd_attack_ap)

    p = sub.add_parser("attack-pp", parents=[common],
                       help="attribute inference against PP's noise")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--n-active", type=int, default=4)
    p.add_argument("--eps-pp", type=float, default=1.0)
    p.add_argument("--delta-pp", type=float, help="default 1/n")
    p.add_argument("--W", type=int, default=1)
    p.add_argument("--sigma1", type=float, default=1.0)
    p.add_argument("--sigma2", type=float, help="override the calibrated scale")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_attack_pp)

    p = sub.add_parser("run", parents=[common], help="run a full experiment")
    p.add_argument("--full", action="store_true",
                   help="60 rounds of depth-6 trees")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", parents=[common],
                       help="re-score a recorded transcript")
    p.add_argument("--dir", required=True,
                   help="output directory of `train --retain-payloads`")
    p.add_argument("--data", help="dataset path if it moved")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SchemaError, CalibrationError, ProtocolError, ValueError,
            OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
