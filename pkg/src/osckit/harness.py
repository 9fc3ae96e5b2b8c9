"""Experiment harness: regimes x post-processors with grid search.

Runs the full cross product of training regimes and post-processing
methods on one protocol: train each backbone, extract features, grid-search
post-processor hyperparameters on the validation split (known + negative
samples only -- unknown samples never influence model selection), evaluate
the winning configuration on the test split against negatives and unknowns
separately, and export OSCR curves, histograms, grid tables, and a
Table-3-shaped report.

Default grids are the published sweep lists: OpenMax tail sizes
[10, 100, 250, 500, 750, 1000] x multipliers [1.5, 1.7, 2.0, 2.3] x alphas
[2, 3, 5, 10] (96 cells); EVM tail sizes [10, 25, 50, 75, 100, 150, 200,
300, 500, 1000] x multipliers [0.1 .. 1.0] (80 cells); PROSER dummy counts
[1, 2, 5, 10, 25, 100].

Seeding: work units (one per backbone training, one per grid cell) are
enumerated in config order and unit i runs with seed = config.seed XOR i,
so results do not depend on execution order or the worker count.
"""

from __future__ import annotations

import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as osm
from .postproc import (EvmModel, MlsModel, MssModel, OpenMaxModel, ProserModel,
                       ScoreMatrix, evm_fit, evm_scores, mls_scores, mss_scores,
                       openmax_fit, openmax_scores, proser_finetune, proser_scores,
                       save_postproc_model)
from .protocol import ProtocolSpec, generate_protocol, load_features_csv
from .training import TrainingRegime, extract, save_backbone, train

__all__ = [
    "PAPER_OPENMAX_GRID",
    "PAPER_EVM_GRID",
    "PAPER_PROSER_GRID",
    "REGIMES",
    "METHODS",
    "OUTPUT_ROOT_ENV",
    "ExperimentConfig",
    "GridResult",
    "RegimeBundle",
    "build_bundle",
    "fit_postprocessor",
    "score_with_model",
    "grid_cells",
    "grid_search",
    "evaluate_cell",
    "export_report",
    "run_experiment",
    "resolve_output_path",
]

REGIMES = ("softmax", "garbage", "eos")
METHODS = ("mss", "mls", "openmax", "evm", "proser")
OUTPUT_ROOT_ENV = "OSCKIT_OUTPUT_ROOT"

PAPER_OPENMAX_GRID = {
    "tail_sizes": [10, 100, 250, 500, 750, 1000],
    "multipliers": [1.5, 1.7, 2.0, 2.3],
    "alphas": [2, 3, 5, 10],
}
PAPER_EVM_GRID = {
    "tail_sizes": [10, 25, 50, 75, 100, 150, 200, 300, 500, 1000],
    "multipliers": [0.10, 0.20, 0.30, 0.40, 0.50, 0.70, 0.90, 1.00],
}
PAPER_PROSER_GRID = {"n_dummies": [1, 2, 5, 10, 25, 100]}

DEFAULT_PROTOCOL = ProtocolSpec(
    n_known=10, n_negative_classes=3, n_unknown_classes=3, dim=16,
    train_samples=30, val_samples=35, test_samples=50,
    neg_offset=0.5, unk_offset=1.2, cluster_spread=1.0, seed=0,
)


def resolve_output_path(path):
    """Relative output paths land under $OSCKIT_OUTPUT_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


@dataclass
class ExperimentConfig:
    """Everything a full run needs; mirrors the JSON config schema."""

    protocol: ProtocolSpec | None = None
    features_path: str | None = None
    regimes: tuple = REGIMES
    methods: tuple = METHODS
    openmax_grid: dict = field(default_factory=lambda: dict(PAPER_OPENMAX_GRID))
    evm_grid: dict = field(default_factory=lambda: dict(PAPER_EVM_GRID))
    proser_grid: dict = field(default_factory=lambda: dict(PAPER_PROSER_GRID))
    hidden_sizes: tuple = (64, 64)
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 32
    proser_epochs: int = 20
    proser_learning_rate: float = 1e-3
    proser_batch_size: int = 32
    proser_beta: tuple = (1.0, 1.0)
    proser_mask_weight: float = 1.0
    zetas: tuple = osm.DEFAULT_ZETAS
    histogram_bins: int = 20
    workers: int = 1
    seed: int = 0
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        if self.protocol is None and self.features_path is None:
            self.protocol = DEFAULT_PROTOCOL
        for r in self.regimes:
            if r not in REGIMES:
                raise ValueError(f"unknown regime {r!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown post-processor {m!r}")
        for name in ("openmax_grid", "evm_grid", "proser_grid"):
            grid = getattr(self, name)
            if any(len(v) == 0 for v in grid.values()):
                raise ValueError(f"{name} has an empty dimension")

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        kwargs = {}
        if "protocol" in raw:
            kwargs["protocol"] = ProtocolSpec(**raw.pop("protocol"))
        if "features_path" in raw:
            kwargs["features_path"] = raw.pop("features_path")
        training = raw.pop("training", {})
        for key in ("hidden_sizes", "epochs", "learning_rate", "batch_size"):
            if key in training:
                kwargs[key] = tuple(training[key]) if key == "hidden_sizes" else training[key]
        proser = raw.pop("proser", {})
        mapping = {"epochs": "proser_epochs", "learning_rate": "proser_learning_rate",
                   "batch_size": "proser_batch_size", "beta": "proser_beta",
                   "mask_term_weight": "proser_mask_weight"}
        for key, dest in mapping.items():
            if key in proser:
                kwargs[dest] = tuple(proser[key]) if key == "beta" else proser[key]
        grids = raw.pop("grids", {})
        for key, dest in (("openmax", "openmax_grid"), ("evm", "evm_grid"),
                          ("proser", "proser_grid")):
            if key in grids:
                kwargs[dest] = dict(grids[key])
        for key in ("regimes", "methods", "zetas"):
            if key in raw:
                kwargs[key] = tuple(raw.pop(key))
        for key in ("histogram_bins", "workers", "seed", "output_dir"):
            if key in raw:
                kwargs[key] = raw.pop(key)
        unknown = set(raw) - {"protocol", "features_path"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        out = {
            "features_path": self.features_path,
            "regimes": list(self.regimes),
            "methods": list(self.methods),
            "grids": {"openmax": self.openmax_grid, "evm": self.evm_grid,
                      "proser": self.proser_grid},
            "training": {"hidden_sizes": list(self.hidden_sizes), "epochs": self.epochs,
                         "learning_rate": self.learning_rate, "batch_size": self.batch_size},
            "proser": {"epochs": self.proser_epochs, "learning_rate": self.proser_learning_rate,
                       "batch_size": self.proser_batch_size, "beta": list(self.proser_beta),
                       "mask_term_weight": self.proser_mask_weight},
            "zetas": list(self.zetas),
            "histogram_bins": self.histogram_bins,
            "workers": self.workers,
            "seed": self.seed,
            "output_dir": self.output_dir,
        }
        if self.protocol is not None:
            from dataclasses import asdict
            out["protocol"] = asdict(self.protocol)
        return out


@dataclass
class GridResult:
    """One hyperparameter combination with its validation score."""

    params: dict
    sigma: float | None = None
    error: str | None = None
    best: bool = False


@dataclass
class RegimeBundle:
    """Features, logits, and labels per split for one trained backbone.

    Training rows are known-category samples only (post-processor models
    are built per known class); validation rows are knowns + negatives,
    never unknowns; test rows carry all three categories.
    """

    regime: str
    n_known: int
    backbone: object
    train_x: np.ndarray
    train_phi: np.ndarray
    train_logits: np.ndarray
    train_labels: np.ndarray
    val_x: np.ndarray
    val_phi: np.ndarray
    val_logits: np.ndarray
    val_labels: np.ndarray
    val_categories: np.ndarray
    test_x: np.ndarray
    test_phi: np.ndarray
    test_logits: np.ndarray
    test_labels: np.ndarray
    test_categories: np.ndarray


def build_bundle(backbone, data, regime):
    """Extract per-split features/logits for post-processing."""
    n_known = backbone.n_known
    train = data.subset(split="train", categories="known")
    val = data.subset(split="val")
    test = data.subset(split="test")
    if np.any(val.categories == "unknown"):
        raise ValueError("validation split must not contain unknown samples")
    train_phi, train_logits = extract(backbone, train.x)
    val_phi, val_logits = extract(backbone, val.x)
    test_phi, test_logits = extract(backbone, test.x)
    return RegimeBundle(
        regime=regime, n_known=n_known, backbone=backbone,
        train_x=train.x, train_phi=train_phi, train_logits=train_logits,
        train_labels=train.labels,
        val_x=val.x, val_phi=val_phi, val_logits=val_logits,
        val_labels=val.labels, val_categories=val.categories,
        test_x=test.x, test_phi=test_phi, test_logits=test_logits,
        test_labels=test.labels, test_categories=test.categories,
    )


def fit_postprocessor(method, bundle, params, seed=0, config=None):
    """Fit one post-processor on the bundle's training rows."""
    n_known = bundle.n_known
    if method == "mss":
        return MssModel(n_known=n_known)
    if method == "mls":
        return MlsModel(n_known=n_known)
    if method == "openmax":
        return openmax_fit(bundle.train_phi, bundle.train_logits[:, :n_known],
                           bundle.train_labels, params["tail_size"],
                           params["multiplier"], params["alpha"])
    if method == "evm":
        return evm_fit(bundle.train_phi, bundle.train_labels,
                       params["tail_size"], params["multiplier"])
    if method == "proser":
        cfg = config or ExperimentConfig()
        return proser_finetune(
            bundle.backbone, bundle.train_x, bundle.train_labels, n_known,
            params["n_dummies"], epochs=cfg.proser_epochs, seed=seed,
            beta_params=cfg.proser_beta, learning_rate=cfg.proser_learning_rate,
            batch_size=cfg.proser_batch_size, mask_term_weight=cfg.proser_mask_weight,
        )
    raise ValueError(f"unknown post-processor {method!r}")


def score_with_model(model, x, phi, logits, n_known):
    """Known-class score rows for any fitted post-processor."""
    if isinstance(model, MssModel):
        return mss_scores(logits, n_known)
    if isinstance(model, MlsModel):
        return mls_scores(logits, n_known)
    if isinstance(model, OpenMaxModel):
        return openmax_scores(model, phi, logits[:, :n_known])
    if isinstance(model, EvmModel):
        return evm_scores(model, phi)
    if isinstance(model, ProserModel):
        return proser_scores(model, x)
    raise TypeError(f"unknown model type {type(model).__name__}")


def grid_cells(method, config):
    """Hyperparameter combinations in canonical (first-in-grid) order."""
    if method == "openmax":
        g = config.openmax_grid
        return [{"tail_size": t, "multiplier": m, "alpha": a}
                for t, m, a in itertools.product(g["tail_sizes"], g["multipliers"], g["alphas"])]
    if method == "evm":
        g = config.evm_grid
        return [{"tail_size": t, "multiplier": m}
                for t, m in itertools.product(g["tail_sizes"], g["multipliers"])]
    if method == "proser":
        return [{"n_dummies": b} for b in config.proser_grid["n_dummies"]]
    return [{}]


def _validation_sigma(model, bundle, zetas):
    scores = score_with_model(model, bundle.val_x, bundle.val_phi,
                              bundle.val_logits, bundle.n_known)
    curve = osm.oscr_curve(scores, bundle.val_labels)
    _, sigma = osm.ccr_at_fpr(curve, zetas)
    return sigma


def grid_search(method, bundle, config, cell_seeds=None):
    """Fit every grid cell, score it on validation knowns + negatives, and
    pick the best CCR@FPR sum (ties break to the first cell in grid order).

    Failed cells are recorded, not fatal; raises only when every cell
    fails. Returns (results, best_index, best_model).
    """
    if np.any(bundle.val_categories == "unknown"):
        raise ValueError("grid search must never see unknown samples")
    cells = grid_cells(method, config)
    if cell_seeds is None:
        cell_seeds = [config.seed] * len(cells)

    def run_cell(args):
        params, seed = args
        try:
            model = fit_postprocessor(method, bundle, params, seed=seed, config=config)
            return model, _validation_sigma(model, bundle, config.zetas), None
        except Exception as exc:  # per-cell failure isolation
            return None, None, f"{type(exc).__name__}: {exc}"

    jobs = list(zip(cells, cell_seeds))
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(run_cell, jobs))
    else:
        outcomes = [run_cell(job) for job in jobs]

    results = [GridResult(params=params, sigma=sigma, error=error)
               for params, (_, sigma, error) in zip(cells, outcomes)]
    best_index = None
    for i, res in enumerate(results):
        if res.sigma is not None and (best_index is None or res.sigma > results[best_index].sigma):
            best_index = i
    if best_index is None:
        raise RuntimeError(f"all {len(cells)} grid cells failed for {method}")
    results[best_index].best = True
    return results, best_index, outcomes[best_index][0]


def evaluate_cell(model, bundle, config):
    """Test-split evaluation: negatives and unknowns scored separately."""
    scores = score_with_model(model, bundle.test_x, bundle.test_phi,
                              bundle.test_logits, bundle.n_known)
    matrix = ScoreMatrix(scores=scores, labels=bundle.test_labels,
                         categories=bundle.test_categories)
    result = {"accuracy": None, "categories": {}, "curves": {}}
    for category in ("negative", "unknown"):
        sub_scores, sub_labels = matrix.eval_view(category)
        curve = osm.oscr_curve(sub_scores, sub_labels,
                               metadata={"regime": bundle.regime, "category": category})
        values, sigma = osm.ccr_at_fpr(curve, config.zetas)
        result["categories"][category] = {
            "auroc": osm.auroc(sub_scores, sub_labels),
            "ccr_at_fpr": {f"{z:g}": (None if v is None else v)
                           for z, v in zip(config.zetas, values)},
            "sigma": sigma,
        }
        result["curves"][category] = curve
    result["accuracy"] = osm.closed_set_accuracy(matrix.scores, matrix.labels)
    value_range = None if isinstance(model, MlsModel) else (0.0, 1.0)
    result["histograms"] = osm.score_histogram(
        matrix.scores, matrix.labels, matrix.categories,
        bins=config.histogram_bins, value_range=value_range)
    return result


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_grid_csv(path, method, results):
    keys = list(results[0].params.keys()) if results else []
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(keys + ["sigma", "best", "error"]) + "\n")
        for res in results:
            row = [repr(res.params[k]) for k in keys]
            row.append("" if res.sigma is None else repr(float(res.sigma)))
            row.append("1" if res.best else "0")
            row.append(res.error or "")
            fh.write(",".join(row) + "\n")


def _write_histograms_csv(path, histograms):
    cats = [c for c in ("known", "negative", "unknown") if c in histograms]
    edges = histograms[cats[0]]["edges"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["bin_lo", "bin_hi"] + cats) + "\n")
        for i in range(edges.size - 1):
            row = [repr(float(edges[i])), repr(float(edges[i + 1]))]
            row += [str(int(histograms[c]["counts"][i])) for c in cats]
            fh.write(",".join(row) + "\n")


def export_report(cell_summaries, out_dir, zetas=osm.DEFAULT_ZETAS):
    """Table-shaped report: one row per regime x method x category with
    AUROC, CCR at each FPR target below 1, and closed-set accuracy.
    Unreachable targets stay empty in CSV and null in JSON."""
    out_dir = Path(out_dir)
    report_zetas = [z for z in zetas if z < 1.0]
    headers = (["regime", "method", "category", "auroc"]
               + [f"ccr_at_{z:g}" for z in report_zetas] + ["accuracy"])
    rows = []
    for cell in cell_summaries:
        for category in ("negative", "unknown"):
            stats = cell["categories"][category]
            rows.append({
                "regime": cell["regime"], "method": cell["method"],
                "category": category, "auroc": stats["auroc"],
                **{f"ccr_at_{z:g}": stats["ccr_at_fpr"][f"{z:g}"] for z in report_zetas},
                "accuracy": cell["accuracy"],
            })
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(headers) + "\n")
        for row in rows:
            cells = []
            for key in headers:
                value = row[key]
                if value is None:
                    cells.append("")
                elif isinstance(value, float):
                    cells.append(repr(value))
                else:
                    cells.append(str(value))
            fh.write(",".join(cells) + "\n")
    json_path = out_dir / "report.json"
    _write_json(json_path, {"columns": headers, "rows": rows,
                            "note": "AUROC is informational only; it measures "
                                    "out-of-distribution separation, not open-set "
                                    "classification"})
    return csv_path, json_path


def run_experiment(config):
    """Run the full experiment; returns a summary dict of what was written.

    Deterministic: re-running with the same config and seed reproduces
    every output file byte for byte.
    """
    out_dir = resolve_output_path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "models").mkdir(exist_ok=True)
    (out_dir / "grids").mkdir(exist_ok=True)

    if config.features_path is not None:
        data = load_features_csv(config.features_path)
    else:
        data = generate_protocol(config.protocol)
    n_known = data.n_known

    _write_json(out_dir / "manifest.json",
                {"config": config.to_dict(), "data_manifest": data.manifest,
                 "n_known": n_known})

    unit = itertools.count(1)  # unit 0 would collide with config.seed itself
    summaries = []
    for regime_kind in config.regimes:
        train_seed = config.seed ^ next(unit)
        regime = TrainingRegime(kind=regime_kind, hidden_sizes=config.hidden_sizes,
                                epochs=config.epochs, learning_rate=config.learning_rate,
                                batch_size=config.batch_size)
        train_split = data.subset(split="train")
        backbone = train(regime, train_split.x, train_split.labels, n_known,
                         seed=train_seed, categories=train_split.categories)
        save_backbone(backbone, out_dir / "models" / f"backbone_{regime_kind}.ckpt")
        bundle = build_bundle(backbone, data, regime_kind)

        for method in config.methods:
            cell_dir = out_dir / f"{regime_kind}_{method}"
            cell_dir.mkdir(exist_ok=True)
            cells = grid_cells(method, config)
            cell_seeds = [config.seed ^ next(unit) for _ in cells]
            if method in ("openmax", "evm", "proser"):
                results, best_index, model = grid_search(method, bundle, config, cell_seeds)
                _write_grid_csv(out_dir / "grids" / f"{regime_kind}_{method}.csv",
                                method, results)
                best_params = results[best_index].params
                validation_sigma = results[best_index].sigma
            else:
                model = fit_postprocessor(method, bundle, {})
                best_params = {}
                validation_sigma = _validation_sigma(model, bundle, config.zetas)

            save_postproc_model(model, cell_dir / "model.ock")
            evaluation = evaluate_cell(model, bundle, config)
            for category, curve in evaluation["curves"].items():
                osm.write_curve_csv(curve, cell_dir / f"oscr_{category}.csv")
            _write_histograms_csv(cell_dir / "histograms.csv", evaluation["histograms"])

            summary = {
                "regime": regime_kind,
                "method": method,
                "best_params": best_params,
                "validation_sigma": validation_sigma,
                "accuracy": evaluation["accuracy"],
                "categories": evaluation["categories"],
            }
            _write_json(cell_dir / "metrics.json", summary)
            summaries.append(summary)

    export_report(summaries, out_dir, config.zetas)
    return {"output_dir": str(out_dir), "cells": summaries, "n_known": n_known}
