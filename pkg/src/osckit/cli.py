"""Command-line interface.

Subcommands mirror the pipeline stages: `generate` a synthetic protocol,
`train` a backbone, `extract` features/logits, `fit` one post-processor,
`grid` a hyperparameter sweep, `eval` a fitted model on the test split,
`report` to assemble the summary table, and `run-all` for the whole
experiment. Exit code is 0 on success; failures print a machine-readable
JSON object ({"error": ..., "type": ...}) to stderr and exit 1.

Relative output paths are resolved under $OSCKIT_OUTPUT_ROOT when set.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics as osm
from .harness import (ExperimentConfig, OUTPUT_ROOT_ENV, evaluate_cell,
                      export_report, fit_postprocessor, grid_search,
                      resolve_output_path, run_experiment)
from .postproc import load_postproc_model, save_postproc_model
from .protocol import ProtocolSpec, generate_protocol, load_features_csv, save_features_csv
from .serialization import load_container, save_container
from .training import TrainingRegime, extract, load_backbone, save_backbone, train

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
_CATEGORY_CODES = {"known": 0, "negative": 1, "unknown": 2}


def _hidden_sizes(text):
    return tuple(int(part) for part in text.split(","))


def _add_generate(sub):
    p = sub.add_parser("generate", help="write a synthetic open-set protocol as a feature CSV")
    p.add_argument("--out", required=True, help="output feature CSV path")
    p.add_argument("--config", help="JSON config whose 'protocol' block supplies the spec")
    p.add_argument("--known", type=int, default=None)
    p.add_argument("--negative-classes", type=int, default=None)
    p.add_argument("--unknown-classes", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--train-samples", type=int, default=None)
    p.add_argument("--val-samples", type=int, default=None)
    p.add_argument("--test-samples", type=int, default=None)
    p.add_argument("--neg-offset", type=float, default=None)
    p.add_argument("--unk-offset", type=float, default=None)
    p.add_argument("--spread", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)


def _cmd_generate(args):
    if args.config:
        spec_dict = ExperimentConfig.from_json(args.config).protocol
        spec_kwargs = asdict(spec_dict) if spec_dict else {}
    else:
        spec_kwargs = {}
    overrides = {
        "n_known": args.known, "n_negative_classes": args.negative_classes,
        "n_unknown_classes": args.unknown_classes, "dim": args.dim,
        "train_samples": args.train_samples, "val_samples": args.val_samples,
        "test_samples": args.test_samples, "neg_offset": args.neg_offset,
        "unk_offset": args.unk_offset, "cluster_spread": args.spread,
        "seed": args.seed,
    }
    spec_kwargs.update({k: v for k, v in overrides.items() if v is not None})
    spec = ProtocolSpec(**spec_kwargs)
    data = generate_protocol(spec)
    out = resolve_output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_features_csv(data, out)
    print(json.dumps({"written": str(out), "samples": len(data),
                      "n_known": data.n_known}, sort_keys=True))


def _add_train(sub):
    p = sub.add_parser("train", help="train a backbone under one regime")
    p.add_argument("--features", required=True)
    p.add_argument("--regime", required=True, choices=("softmax", "garbage", "eos"))
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--hidden", type=_hidden_sizes, default=(64, 64))
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)


def _cmd_train(args):
    data = load_features_csv(args.features)
    regime = TrainingRegime(kind=args.regime, hidden_sizes=args.hidden,
                            epochs=args.epochs, learning_rate=args.lr,
                            batch_size=args.batch_size, seed=args.seed)
    subset = data.subset(split="train")
    model = train(regime, subset.x, subset.labels, data.n_known,
                  seed=args.seed, categories=subset.categories)
    out = resolve_output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_backbone(model, out)
    print(json.dumps({"written": str(out), "regime": args.regime,
                      "n_outputs": int(model.n_outputs)}, sort_keys=True))


def _add_extract(sub):
    p = sub.add_parser("extract", help="extract deep features and logits for every sample")
    p.add_argument("--features", required=True, help="raw feature CSV")
    p.add_argument("--model", required=True, help="backbone checkpoint")
    p.add_argument("--out", required=True, help="extracted-feature container path")


def _cmd_extract(args):
    data = load_features_csv(args.features)
    model = load_backbone(args.model)
    phi, logits = extract(model, data.x)
    out = resolve_output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_container(out, "extracted",
                   {"n_known": data.n_known, "regime": model.regime},
                   {"x": data.x, "phi": phi, "logits": logits,
                    "labels": data.labels,
                    "split_codes": np.array([_SPLIT_CODES[s] for s in data.splits], dtype=np.uint8),
                    "category_codes": np.array([_CATEGORY_CODES[c] for c in data.categories], dtype=np.uint8)})
    print(json.dumps({"written": str(out), "samples": len(data)}, sort_keys=True))


def _load_extracted(path):
    kind, meta, arrays = load_container(path)
    if kind != "extracted":
        raise ValueError(f"{path}: expected an extracted-feature container, found {kind!r}")
    split_names = np.array(list(_SPLIT_CODES))[arrays["split_codes"]]
    category_names = np.array(list(_CATEGORY_CODES))[arrays["category_codes"]]
    return {
        "n_known": int(meta["n_known"]), "regime": meta["regime"],
        "x": arrays["x"], "phi": arrays["phi"], "logits": arrays["logits"],
        "labels": arrays["labels"], "splits": split_names, "categories": category_names,
    }


class _ExtractedBundle:
    """RegimeBundle-compatible view over an extracted-feature container."""

    def __init__(self, extracted, backbone=None):
        self.regime = extracted["regime"]
        self.n_known = extracted["n_known"]
        self.backbone = backbone
        splits, cats = extracted["splits"], extracted["categories"]
        train_mask = (splits == "train") & (cats == "known")
        val_mask = splits == "val"
        test_mask = splits == "test"
        for name, mask in (("train", train_mask), ("val", val_mask), ("test", test_mask)):
            setattr(self, f"{name}_x", extracted["x"][mask])
            setattr(self, f"{name}_phi", extracted["phi"][mask])
            setattr(self, f"{name}_logits", extracted["logits"][mask])
            setattr(self, f"{name}_labels", extracted["labels"][mask])
            setattr(self, f"{name}_categories", cats[mask])


def _add_fit(sub):
    p = sub.add_parser("fit", help="fit one post-processor on train-split knowns")
    p.add_argument("--extracted", required=True)
    p.add_argument("--method", required=True, choices=("mss", "mls", "openmax", "evm", "proser"))
    p.add_argument("--out", required=True)
    p.add_argument("--tail-size", type=int, default=100)
    p.add_argument("--multiplier", type=float, default=2.0)
    p.add_argument("--alpha", type=int, default=3)
    p.add_argument("--n-dummies", type=int, default=5)
    p.add_argument("--backbone", help="backbone checkpoint (required for proser)")
    p.add_argument("--proser-epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)


def _cmd_fit(args):
    extracted = _load_extracted(args.extracted)
    backbone = None
    if args.method == "proser":
        if not args.backbone:
            raise ValueError("--backbone is required to fit proser")
        backbone = load_backbone(args.backbone)
    bundle = _ExtractedBundle(extracted, backbone)
    params = {"tail_size": args.tail_size, "multiplier": args.multiplier,
              "alpha": args.alpha, "n_dummies": args.n_dummies}
    config = ExperimentConfig(proser_epochs=args.proser_epochs, seed=args.seed)
    model = fit_postprocessor(args.method, bundle, params, seed=args.seed, config=config)
    out = resolve_output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_postproc_model(model, out)
    print(json.dumps({"written": str(out), "method": args.method}, sort_keys=True))


def _add_grid(sub):
    p = sub.add_parser("grid", help="hyperparameter grid search on validation knowns+negatives")
    p.add_argument("--extracted", required=True)
    p.add_argument("--method", required=True, choices=("openmax", "evm", "proser"))
    p.add_argument("--out-table", required=True)
    p.add_argument("--out-model", help="where to store the best fitted model")
    p.add_argument("--config", help="JSON config supplying the grids")
    p.add_argument("--backbone", help="backbone checkpoint (required for proser)")
    p.add_argument("--seed", type=int, default=0)


def _cmd_grid(args):
    from .harness import _write_grid_csv  # shared writer keeps formats identical

    extracted = _load_extracted(args.extracted)
    backbone = None
    if args.method == "proser":
        if not args.backbone:
            raise ValueError("--backbone is required for proser grids")
        backbone = load_backbone(args.backbone)
    bundle = _ExtractedBundle(extracted, backbone)
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    config.seed = args.seed
    results, best_index, best_model = grid_search(args.method, bundle, config)
    table = resolve_output_path(args.out_table)
    table.parent.mkdir(parents=True, exist_ok=True)
    _write_grid_csv(table, args.method, results)
    payload = {"written": str(table), "cells": len(results),
               "best_params": results[best_index].params,
               "best_sigma": results[best_index].sigma}
    if args.out_model:
        model_path = resolve_output_path(args.out_model)
        model_path.parent.mkdir(parents=True, exist_ok=True)
        save_postproc_model(best_model, model_path)
        payload["model"] = str(model_path)
    print(json.dumps(payload, sort_keys=True))


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a fitted model on the test split")
    p.add_argument("--extracted", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bins", type=int, default=20)


def _cmd_eval(args):
    extracted = _load_extracted(args.extracted)
    model = load_postproc_model(args.model)
    backbone = model.backbone if hasattr(model, "backbone") else None
    bundle = _ExtractedBundle(extracted, backbone)
    config = ExperimentConfig(histogram_bins=args.bins)
    evaluation = evaluate_cell(model, bundle, config)
    out_dir = resolve_output_path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for category, curve in evaluation["curves"].items():
        osm.write_curve_csv(curve, out_dir / f"oscr_{category}.csv")
    from .harness import _write_histograms_csv, _write_json
    _write_histograms_csv(out_dir / "histograms.csv", evaluation["histograms"])
    _write_json(out_dir / "metrics.json", {
        "regime": bundle.regime, "method": type(model).__name__,
        "accuracy": evaluation["accuracy"], "categories": evaluation["categories"],
    })
    print(json.dumps({"written": str(out_dir),
                      "accuracy": evaluation["accuracy"]}, sort_keys=True))


def _add_report(sub):
    p = sub.add_parser("report", help="assemble report.csv/json from cell metrics")
    p.add_argument("--run-dir", required=True)


def _cmd_report(args):
    run_dir = resolve_output_path(args.run_dir)
    summaries = []
    for metrics_path in sorted(run_dir.glob("*/metrics.json")):
        with open(metrics_path, "r", encoding="utf-8") as fh:
            summaries.append(json.load(fh))
    if not summaries:
        raise ValueError(f"no cell metrics found under {run_dir}")
    csv_path, json_path = export_report(summaries, run_dir)
    print(json.dumps({"csv": str(csv_path), "json": str(json_path),
                      "rows": 2 * len(summaries)}, sort_keys=True))


def _add_run_all(sub):
    p = sub.add_parser("run-all", help="full experiment: train, grid-search, evaluate, report")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out-dir", help="overrides the config's output_dir")
    p.add_argument("--seed", type=int, default=None, help="overrides the config's seed")


def _cmd_run_all(args):
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.out_dir:
        config.output_dir = args.out_dir
    if args.seed is not None:
        config.seed = args.seed
    summary = run_experiment(config)
    print(json.dumps({"output_dir": summary["output_dir"],
                      "cells": len(summary["cells"])}, sort_keys=True))


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "extract": _cmd_extract,
    "fit": _cmd_fit,
    "grid": _cmd_grid,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "run-all": _cmd_run_all,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="osckit",
        description="Open-set classification toolkit: training regimes, "
                    "post-processors, and OSCR evaluation at desk scale.",
        epilog=f"Relative output paths are placed under ${OUTPUT_ROOT_ENV} when set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for adder in (_add_generate, _add_train, _add_extract, _add_fit,
                  _add_grid, _add_eval, _add_report, _add_run_all):
        adder(sub)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except Exception as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
