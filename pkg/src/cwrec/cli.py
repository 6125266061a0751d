"""Experiment runner: ``cwrec run|grid|ablate|eval``.

Every dotted config key is also a command-line flag (``--loss.kind CW``);
flags override values read from ``--config``. ``CWREC_OUTPUT_DIR``, when
set, replaces ``output.dir``. Failures exit with status 1 and print a
single line ``error <TAG>: <message>`` to stderr, where TAG is one of
CONFIG_INVALID, DATA_EMPTY or NONFINITE.

``data.path`` accepts two reserved names besides a file path: ``toy`` (the
bundled 200-interaction log, also used when the path is empty) and
``ml-100k`` (MovieLens-100k, fetched once into the cache).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from . import datasets
from .backbones import FrozenScorer, load_checkpoint, save_checkpoint
from .config import KEYS, ExperimentConfig
from .data import SplitDataset, preprocess, split_dataset
from .errors import CWRecError, ConfigError
from .evaluation import RankingReport, evaluate
from .optim import TrainResult, train, write_epoch_log
from .sampling import PriorEstimate, estimate_prior

__all__ = ["run_experiment", "run_grid", "run_ablation", "evaluate_checkpoint", "load_split", "make_prior",
           "ABLATION_AXES", "ablation_settings", "main"]

CONFIG_FILE = "config.txt"
EPOCH_LOG = "epochs.csv"
REPORT_FILE = "report.csv"
CHECKPOINT_FILE = "checkpoint.txt"
LEADERBOARD_FILE = "leaderboard.csv"
ABLATION_FILE = "ablation.csv"

ABLATION_AXES = ("loss_factor", "tau_plus", "pos_count", "beta", "sigma_form")


@dataclass
class RunOutcome:
    config: ExperimentConfig
    result: TrainResult
    validation: RankingReport
    test: RankingReport
    out_dir: Path


def _data_path(cfg: ExperimentConfig) -> Path:
    path = cfg["data.path"].strip()
    if path in ("", "toy"):
        return datasets.toy_path()
    if path == "ml-100k":
        try:
            return datasets.movielens_100k()
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from None
    if not Path(path).is_file():
        raise ConfigError(f"data.path {path!r} is not a readable file")
    return Path(path)


def load_split(cfg: ExperimentConfig) -> SplitDataset:
    ds = preprocess(_data_path(cfg), cfg["data.format"], cfg["data.min_rating"], cfg["data.k_core"])
    return split_dataset(ds, cfg["split.test_frac"], cfg["split.val_frac"], cfg["split.seed"])


def make_prior(cfg: ExperimentConfig, split: SplitDataset) -> PriorEstimate:
    return estimate_prior(split.train, cfg["prior.mode"], cfg["prior.constant"])


def _output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get("CWREC_OUTPUT_DIR") or cfg["output.dir"])


def run_experiment(cfg: ExperimentConfig, out_dir=None, split: Optional[SplitDataset] = None) -> RunOutcome:
    """Train, evaluate on test and write the four run artifacts into ``out_dir``.

    Artifacts: the resolved config, the per-epoch log, the test
    :class:`RankingReport` CSV and a checkpoint of the final embeddings.
    """
    cfg.validate()
    if split is None:
        split = load_split(cfg)
    out = Path(out_dir) if out_dir is not None else _output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / CONFIG_FILE)
    K = cfg["eval.K"]
    result = train(split, cfg.backbone(), cfg.loss(), make_prior(cfg, split), cfg.schedule(), cfg["seed"],
                   cfg.sampler(), cfg.optim(), K)
    write_epoch_log(result.log, out / EPOCH_LOG, K)
    model = result.model
    val = evaluate(model, split.validation, split.train, K)
    test = evaluate(model, split.test, split.known_positives(), K)
    test.to_csv(out / REPORT_FILE)
    mode = cfg["output.checkpoint_mode"]
    save_checkpoint(out / CHECKPOINT_FILE, model.embeddings(), model.config.kind, model.score_kind, mode)
    return RunOutcome(cfg, result, val, test, out)


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint, split: Optional[SplitDataset] = None) -> RankingReport:
    """Test-split report for stored embeddings; no training."""
    table, meta = load_checkpoint(checkpoint)
    if split is None:
        split = load_split(cfg)
    if (table.num_users, table.num_items) != (split.num_users, split.num_items):
        raise ConfigError(f"checkpoint is {table.num_users}x{table.num_items}, "
                          f"data is {split.num_users}x{split.num_items}")
    scorer = FrozenScorer(table, meta.get("score", "cosine"), meta.get("kind", "MF"))
    return evaluate(scorer, split.test, split.known_positives(), cfg["eval.K"])


# grid ------------------------------------------------------------------------

def _cells(grid: Mapping[str, Sequence]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid needs at least one key with at least one value")
    for key in grid:
        if key not in KEYS:
            raise ConfigError(f"unknown grid key {key!r}")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _fmt(x) -> str:
    return "" if x is None else (repr(x) if isinstance(x, float) else str(x))


def run_grid(cfg: ExperimentConfig, grid: Mapping[str, Sequence], out_dir=None) -> list[dict]:
    """Run the Cartesian product of ``grid`` overrides, one subdirectory per cell.

    Writes ``leaderboard.csv`` sorted by validation NDCG@K (failed cells
    last, with their error tag in ``status``). The best cell's checkpoint
    is reloaded and evaluated on test; only that row carries test metrics.
    Returns the leaderboard rows.
    """
    out = Path(out_dir) if out_dir is not None else _output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cells = _cells(grid)
    keys = list(grid)
    K = cfg["eval.K"]
    split = None
    rows = []
    for n, overrides in enumerate(cells):
        cell_dir = out / f"cell_{n:03d}"
        row = {"cell": cell_dir.name, **{k: overrides[k] for k in keys}}
        try:
            cell_cfg = cfg.with_overrides(overrides)
            if split is None or any(k.startswith(("data.", "split.")) for k in overrides):
                split = load_split(cell_cfg)
            outcome = run_experiment(cell_cfg, cell_dir, split)
            row.update(status="ok", best_epoch=outcome.result.best_epoch,
                       val_recall=outcome.validation.mean_recall, val_ndcg=outcome.validation.mean_ndcg)
        except CWRecError as exc:
            row.update(status=f"error:{exc.tag}", best_epoch=None, val_recall=None, val_ndcg=None)
        rows.append(row)

    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: -r["val_ndcg"])
    rows = ok + [r for r in rows if r["status"] != "ok"]
    for r in rows:
        r["test_recall"] = r["test_ndcg"] = None
    if ok:
        best = ok[0]
        best_cfg = cfg.with_overrides({k: best[k] for k in keys})
        rep = evaluate_checkpoint(best_cfg, out / best["cell"] / CHECKPOINT_FILE, load_split(best_cfg))
        best["test_recall"], best["test_ndcg"] = rep.mean_recall, rep.mean_ndcg

    header = ["rank", "cell", *keys, "status", "best_epoch", f"val_recall@{K}", f"val_ndcg@{K}",
              f"test_recall@{K}", f"test_ndcg@{K}"]
    with open(out / LEADERBOARD_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for rank, r in enumerate(rows, start=1):
            w.writerow([rank, r["cell"], *(_fmt(r[k]) for k in keys), r["status"], _fmt(r["best_epoch"]),
                        _fmt(r["val_recall"]), _fmt(r["val_ndcg"]), _fmt(r["test_recall"]), _fmt(r["test_ndcg"])])
    return rows


# ablation --------------------------------------------------------------------

def ablation_settings(axis: str) -> list[tuple[str, dict]]:
    """``(label, overrides)`` per row of an ablation axis."""
    if axis == "loss_factor":
        return [(k, {"loss.kind": k}) for k in ("SL", "PSL", "L_C", "L_W", "CW")]
    if axis == "tau_plus":
        rows = [(f"{c:.2f}", {"loss.kind": "CW", "prior.mode": "constant", "prior.constant": round(c, 2)})
                for c in (0.05, 0.06, 0.07, 0.08, 0.09, 0.10, 0.11, 0.12)]
        return rows + [("pop.", {"loss.kind": "CW", "prior.mode": "popularity"})]
    if axis == "pos_count":
        return [(str(m), {"sampler.M": m}) for m in range(1, 9)]
    if axis == "beta":
        return [(f"{b:.1f}", {"loss.kind": "CW", "loss.beta": b}) for b in (0.2, 0.4, 0.6, 0.8, 1.0, 1.2)]
    if axis == "sigma_form":
        return [(s, {"loss.sigma_form": s}) for s in ("exp_of_activation", "raw_power")]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def run_ablation(cfg: ExperimentConfig, axis: str, out_dir=None) -> list[tuple[str, Optional[float], Optional[float]]]:
    """One run per setting of ``axis``; writes ``ablation.csv`` with columns
    ``setting,recall@K,ndcg@K`` (test metrics, empty for failed settings)."""
    settings = ablation_settings(axis)
    out = Path(out_dir) if out_dir is not None else _output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    K = cfg["eval.K"]
    split = load_split(cfg)
    rows = []
    for label, overrides in settings:
        try:
            outcome = run_experiment(cfg.with_overrides(overrides), out / f"{axis}_{label}", split)
            rows.append((label, outcome.test.mean_recall, outcome.test.mean_ndcg))
        except CWRecError:
            rows.append((label, None, None))
    with open(out / ABLATION_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", f"recall@{K}", f"ndcg@{K}"])
        for label, r, n in rows:
            w.writerow([label, _fmt(r), _fmt(n)])
    return rows


# command line ------------------------------------------------------------------

def _parse_grid(specs: Sequence[str]) -> dict[str, list[str]]:
    grid: dict[str, list[str]] = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"grid spec {spec!r} must look like key=v1,v2")
        key, vals = spec.split("=", 1)
        grid[key.strip()] = [v.strip() for v in vals.split(",") if v.strip()]
    return grid


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cwrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    verbs = {
        "run": "train one configuration",
        "grid": "grid search over config keys",
        "ablate": "run one ablation axis",
        "eval": "evaluate a stored checkpoint on the test split",
    }
    for verb, help_text in verbs.items():
        p = sub.add_parser(verb, help=help_text)
        p.add_argument("--config", help="key = value config file")
        for key in KEYS:
            p.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None)
        if verb == "grid":
            p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                           help="values to sweep for one key; repeat for more keys")
        if verb == "ablate":
            p.add_argument("--axis", required=True, choices=ABLATION_AXES)
        if verb == "eval":
            p.add_argument("--checkpoint", required=True)
    return parser


def _resolve(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {k: getattr(args, k) for k in KEYS if getattr(args, k) is not None}
    return cfg.with_overrides(overrides) if overrides else cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        if args.verb == "run":
            outcome = run_experiment(cfg)
            print(outcome.test.summary())
        elif args.verb == "grid":
            rows = run_grid(cfg, _parse_grid(args.grid))
            print(f"{len(rows)} cells -> {_output_dir(cfg) / LEADERBOARD_FILE}")
        elif args.verb == "ablate":
            run_ablation(cfg, args.axis)
            print(f"{args.axis} -> {_output_dir(cfg) / ABLATION_FILE}")
        else:
            report = evaluate_checkpoint(cfg, args.checkpoint)
            out = _output_dir(cfg)
            out.mkdir(parents=True, exist_ok=True)
            report.to_csv(out / REPORT_FILE)
            print(report.summary())
    except CWRecError as exc:
        print(f"error {exc.tag}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
